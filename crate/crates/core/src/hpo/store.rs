use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use super::{HpoError, TrialRecord};

/// Append-only JSON-lines trial log.
#[derive(Debug)]
pub struct TrialStore {
    path: PathBuf,
    records: Vec<TrialRecord>,
}

pub fn load_trials(path: &Path) -> Result<Vec<TrialRecord>, HpoError> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrialRecord = serde_json::from_str(&line).map_err(|e| HpoError::Store {
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.id != out.len() {
            return Err(HpoError::Store {
                line: i + 1,
                message: format!("trial id {} out of sequence; expected {}", rec.id, out.len()),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

impl TrialStore {
    /// Loads existing records, or starts an empty log if `path` is absent.
    pub fn open(path: &Path) -> Result<Self, HpoError> {
        let records = if path.exists() { load_trials(path)? } else { Vec::new() };
        Ok(TrialStore {
            path: path.to_path_buf(),
            records,
        })
    }

    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    pub fn append(&mut self, rec: &TrialRecord) -> Result<(), HpoError> {
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(f, "{}", serde_json::to_string(rec)?)?;
        f.flush()?;
        self.records.push(rec.clone());
        Ok(())
    }
}

/// Rank, id, score and every hyperparameter column, best first.
pub fn write_leaderboard_csv<W: Write>(out: W, leaderboard: &[TrialRecord]) -> Result<(), HpoError> {
    let names: Vec<String> = leaderboard.first().map(|t| t.params.keys().cloned().collect()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["rank".to_string(), "trial".into(), "score".into()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (rank, t) in leaderboard.iter().enumerate() {
        let mut row = vec![
            (rank + 1).to_string(),
            t.id.to_string(),
            t.score.map_or_else(String::new, |s| s.to_string()),
        ];
        row.extend(names.iter().map(|n| t.params.get(n).map_or_else(String::new, f64::to_string)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
