use std::io::Write;

use serde::Serialize;

use super::{DiagnosticsError, LatencyReport, OverheadReport, RelaxationReport, SensitivityReport};

pub fn write_json<W: Write, T: Serialize>(mut out: W, report: &T) -> Result<(), DiagnosticsError> {
    serde_json::to_writer_pretty(&mut out, report)?;
    writeln!(out)?;
    Ok(())
}

fn write_rows<W: Write>(out: W, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), DiagnosticsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_relaxation_summary_csv<W: Write>(out: W, report: &RelaxationReport) -> Result<(), DiagnosticsError> {
    write_rows(
        out,
        &["strategy", "grad_norm_mean", "grad_norm_std", "alpha_variance", "final_val_macro", "loss_gap"],
        report.summaries.iter().map(|s| {
            vec![
                s.strategy.name().to_string(),
                s.grad_norm_mean.to_string(),
                s.grad_norm_std.to_string(),
                s.alpha_variance.to_string(),
                s.final_val_macro.to_string(),
                s.loss_gap.to_string(),
            ]
        }),
    )
}

pub fn write_relaxation_runs_csv<W: Write>(out: W, report: &RelaxationReport) -> Result<(), DiagnosticsError> {
    write_rows(
        out,
        &[
            "strategy",
            "seed",
            "grad_norm_mean",
            "grad_norm_std",
            "grad_norm_var",
            "alpha_variance",
            "final_val_macro",
            "relaxed_loss",
            "discrete_loss",
            "loss_gap",
            "l2_distance",
        ],
        report.runs.iter().map(|r| {
            vec![
                r.strategy.name().to_string(),
                r.seed.to_string(),
                r.grad_norm_mean.to_string(),
                r.grad_norm_std.to_string(),
                r.grad_norm_var.to_string(),
                r.alpha_variance.to_string(),
                r.final_val_macro.to_string(),
                r.gap.relaxed_loss.to_string(),
                r.gap.discrete_loss.to_string(),
                r.gap.loss_gap.to_string(),
                r.gap.l2.to_string(),
            ]
        }),
    )
}

/// Long format: one row per (strategy, seed, step).
pub fn write_relaxation_series_csv<W: Write>(out: W, report: &RelaxationReport) -> Result<(), DiagnosticsError> {
    write_rows(
        out,
        &["strategy", "seed", "step", "grad_norm_alpha"],
        report.runs.iter().flat_map(|r| {
            r.grad_norm_series
                .iter()
                .enumerate()
                .map(move |(t, g)| vec![r.strategy.name().to_string(), r.seed.to_string(), t.to_string(), g.to_string()])
        }),
    )
}

pub fn write_overhead_csv<W: Write>(out: W, r: &OverheadReport) -> Result<(), DiagnosticsError> {
    write_rows(
        out,
        &["base_params", "lora_params", "prefix_params", "ratio"],
        [vec![
            r.base_params.to_string(),
            r.lora_params.to_string(),
            r.prefix_params.to_string(),
            r.ratio.to_string(),
        ]],
    )
}

pub fn write_latency_csv<W: Write>(out: W, r: &LatencyReport) -> Result<(), DiagnosticsError> {
    write_rows(
        out,
        &["t_forward_ms", "t_switch_ms", "n_tasks", "multi_adapter_ms", "unified_ms", "reduction_pct"],
        [vec![
            r.t_forward_ms.to_string(),
            r.t_switch_ms.to_string(),
            r.n_tasks.to_string(),
            r.multi_adapter_ms.to_string(),
            r.unified_ms.to_string(),
            r.reduction_pct.to_string(),
        ]],
    )
}

pub fn write_sensitivity_csv<W: Write>(out: W, r: &SensitivityReport) -> Result<(), DiagnosticsError> {
    write_rows(
        out,
        &["n_layers", "block_repetition", "prefix_length", "seed", "score"],
        r.rows.iter().map(|row| {
            vec![
                row.point.n_layers.to_string(),
                row.point.block_repetition.to_string(),
                row.point.prefix_length.to_string(),
                row.seed.to_string(),
                row.score.to_string(),
            ]
        }),
    )
}
