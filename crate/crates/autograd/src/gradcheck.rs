//! Central-difference gradient checking against the tape.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step, accepted in `[1e-7, 1e-5]`.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Entries sampled per parameter; `None` checks every entry.
    pub max_entries_per_param: Option<usize>,
    /// Denominator floor so that near-zero gradients compare absolutely.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-6,
            tolerance: 1e-4,
            max_entries_per_param: Some(8),
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradCheckEntry>,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `loss_fn` with central differences for every
/// trainable parameter. `loss_fn` must be deterministic: it is called on a
/// fresh evaluation-mode graph each time.
pub fn grad_check<F>(loss_fn: F, params: &ParamStore, config: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    if !(1e-7..=1e-5).contains(&config.step) {
        return Err(TensorError::Invalid(format!(
            "finite-difference step {} outside [1e-7, 1e-5]",
            config.step
        )));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = loss_fn(store, &mut g)?;
        let value = g.value(loss);
        if value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: value.shape().to_vec(),
            });
        }
        Ok(value.item())
    };

    let mut graph = Graph::new();
    let loss = loss_fn(params, &mut graph)?;
    let grads = graph.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        entries_checked: 0,
        max_rel_error: 0.0,
        worst: None,
        passed: true,
    };
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let len = params.get(&name)?.len();
        let indices: Vec<usize> = match config.max_entries_per_param {
            Some(k) if k < len => {
                let mut v = sample(&mut rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        for idx in indices {
            let analytic = grads.get(&name).map_or(0.0, |t| t.data()[idx]);
            let original = params.get(&name)?.data()[idx];
            work.data_mut(&name)?[idx] = original + config.step;
            let plus = eval(&work)?;
            work.data_mut(&name)?[idx] = original - config.step;
            let minus = eval(&work)?;
            work.data_mut(&name)?[idx] = original;
            let numeric = (plus - minus) / (2.0 * config.step);
            let rel = relative_error(analytic, numeric, config.abs_floor);
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(GradCheckEntry {
                    param: name.clone(),
                    index: idx,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    report.passed = report.max_rel_error <= config.tolerance;
    Ok(report)
}
