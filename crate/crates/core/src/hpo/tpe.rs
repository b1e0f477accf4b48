use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, Normal as NormalPdf};

use super::space::{Dimension, HpoSpace, Point};
use super::{HpoError, TrialRecord};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TpeConfig {
    pub n_startup: usize,
    /// Fraction of completed trials forming the good set.
    pub gamma: f64,
    pub n_candidates: usize,
}

impl Default for TpeConfig {
    fn default() -> Self {
        TpeConfig {
            n_startup: 10,
            gamma: 0.25,
            n_candidates: 24,
        }
    }
}

pub fn random_suggest<R: Rng + ?Sized>(space: &HpoSpace, rng: &mut R) -> Result<Point, HpoError> {
    space.validate()?;
    Ok(space.dims.iter().map(|d| (d.name.clone(), d.sample_prior(rng))).collect())
}

/// One-dimensional Gaussian mixture with equal weights.
struct Parzen {
    centers: Vec<f64>,
    sigma: f64,
    bounds: (f64, f64),
}

impl Parzen {
    /// Scott-rule bandwidth, floored so single points still spread.
    fn fit(values: Vec<f64>, bounds: (f64, f64)) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let range = bounds.1 - bounds.0;
        let scott = 1.06 * std * n.powf(-0.2);
        Parzen {
            centers: values,
            sigma: scott.clamp(range / 25.0, range),
            bounds,
        }
    }

    fn ln_density(&self, x: f64) -> f64 {
        let comps: Vec<f64> = self
            .centers
            .iter()
            .map(|&c| NormalPdf::new(c, self.sigma).expect("positive bandwidth").ln_pdf(x))
            .collect();
        let m = comps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + (comps.iter().map(|v| (v - m).exp()).sum::<f64>() / comps.len() as f64).ln()
    }

    /// Draws from the mixture, resampling the kernel noise until it lands
    /// inside the bounds.
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let c = self.centers[rng.random_range(0..self.centers.len())];
        let noise = Normal::new(0.0, self.sigma).expect("positive bandwidth");
        for _ in 0..64 {
            let x = c + noise.sample(rng);
            if x >= self.bounds.0 && x <= self.bounds.1 {
                return x;
            }
        }
        c.clamp(self.bounds.0, self.bounds.1)
    }
}

fn internal_values(dim: &Dimension, trials: &[&TrialRecord]) -> Vec<f64> {
    trials.iter().map(|t| dim.to_internal(t.params[&dim.name])).collect()
}

/// Splits completed trials at the top `gamma` quantile, fits independent
/// per-dimension Parzen densities `l` (good) and `g` (rest), draws
/// candidates from `l` and returns the one maximizing `l/g`. With fewer
/// than `n_startup` completed trials it samples the prior.
pub fn tpe_suggest<R: Rng + ?Sized>(
    history: &[TrialRecord],
    space: &HpoSpace,
    cfg: &TpeConfig,
    rng: &mut R,
) -> Result<Point, HpoError> {
    space.validate()?;
    if !(cfg.gamma > 0.0 && cfg.gamma < 1.0) || cfg.n_candidates == 0 {
        return Err(HpoError::Config(format!(
            "tpe gamma {} must lie in (0, 1) with at least one candidate",
            cfg.gamma
        )));
    }
    let mut done: Vec<&TrialRecord> = history
        .iter()
        .filter(|t| t.completed_score().is_some() && space.contains(&t.params).is_ok())
        .collect();
    if done.len() < cfg.n_startup.max(2) {
        return random_suggest(space, rng);
    }
    done.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.id.cmp(&b.id))
    });
    let n_good = ((cfg.gamma * done.len() as f64).ceil() as usize).clamp(1, done.len() - 1);
    let (good, bad) = done.split_at(n_good);

    let models: Vec<(Parzen, Parzen)> = space
        .dims
        .iter()
        .map(|d| {
            let b = d.internal_bounds();
            (Parzen::fit(internal_values(d, good), b), Parzen::fit(internal_values(d, bad), b))
        })
        .collect();

    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..cfg.n_candidates {
        let x: Vec<f64> = models.iter().map(|(l, _)| l.sample(rng)).collect();
        let score: f64 = x
            .iter()
            .zip(&models)
            .map(|(&xi, (l, g))| l.ln_density(xi) - g.ln_density(xi))
            .sum();
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, x));
        }
    }
    let (_, x) = best.expect("at least one candidate");
    Ok(space
        .dims
        .iter()
        .zip(x)
        .map(|(d, xi)| (d.name.clone(), d.from_internal(xi)))
        .collect())
}
