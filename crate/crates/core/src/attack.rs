//! Projected-gradient baseline. Instead of steering the sampler, the
//! forecast state itself is perturbed directly: repeated normalized-gradient
//! descent on target-region precipitation at the lead step, with each
//! iterate projected back to a per-channel spatial-standard-deviation
//! budget.

use crate::field::{AtmosphericState, TargetRegion};
use crate::forecaster::{ForecasterBundle, PassCounter};
use crate::guidance::{
    chain_from_x1, grad_to_x1, precip_mean_flat, GuidanceError, Perturbation, RolloutPlan,
};
use ndarray::Array3;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error("bad attack config: {0}")]
    BadConfig(String),
    #[error("non-finite attack gradient at iteration {iter}")]
    NonFiniteGradient { iter: usize },
}

/// Budget and schedule of one attack. `epsilon` caps the spatial standard
/// deviation of every perturbed channel in normalized units; `eta` is the
/// step length along the unit gradient.
#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub eta: f64,
    pub iterations: usize,
    pub region: TargetRegion,
    pub lead: usize,
    pub rollout_levels: usize,
}

impl AttackConfig {
    pub fn new(region: TargetRegion) -> Self {
        let epsilon = 0.07;
        Self {
            epsilon,
            eta: epsilon / 10.0,
            iterations: 50,
            region,
            lead: 2,
            rollout_levels: 2,
        }
    }

    pub fn validate(&self, n_steps: usize) -> Result<(), AttackError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(AttackError::BadConfig(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(AttackError::BadConfig(format!(
                "eta must be positive and finite, got {}",
                self.eta
            )));
        }
        if self.lead < 2 {
            return Err(AttackError::BadConfig(format!(
                "lead must be at least 2, got {}",
                self.lead
            )));
        }
        if self.rollout_levels == 0 || self.rollout_levels > n_steps {
            return Err(AttackError::BadConfig(format!(
                "rollout_levels must lie in 1..={n_steps}, got {}",
                self.rollout_levels
            )));
        }
        if self.region.is_empty() {
            return Err(AttackError::BadConfig("empty target region".into()));
        }
        Ok(())
    }
}

/// Pulls every channel slice whose spatial standard deviation exceeds the
/// budget back onto it, rescaling the deviations about the slice mean so the
/// mean is untouched and the std lands exactly on the budget.
pub fn project_std(delta: &mut Array3<f64>, eps: f64) {
    let (h, w, ch) = delta.dim();
    let cells = (h * w) as f64;
    for c in 0..ch {
        let mut slice = delta.slice_mut(ndarray::s![.., .., c]);
        let mean = slice.iter().sum::<f64>() / cells;
        let var = slice.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / cells;
        let std = var.sqrt();
        if std > eps {
            let k = eps / std;
            for v in slice.iter_mut() {
                *v = mean + (*v - mean) * k;
            }
        }
    }
}

/// What one attack produces. The perturbation is in raw state units like the
/// guided one; the perturbed forecast is the attacked X̂ it was built from.
#[derive(Debug, Clone)]
pub struct AttackRun {
    pub perturbation: Perturbation,
    pub perturbed: AtmosphericState,
    pub counter: PassCounter,
    pub loss_trace: Vec<f64>,
}

/// Projected gradient descent on the forecast state. The perturbation lives
/// in normalized units; each iteration evaluates the lead objective through
/// the same reduced rollout the guidance uses, steps along the
/// unit-normalized masked gradient, and projects back to the std budget.
pub fn pgd_attack(
    bundle: &ForecasterBundle,
    x_cur: &AtmosphericState,
    x_next_fc: &AtmosphericState,
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AttackRun, AttackError> {
    cfg.validate(bundle.schedule.n_steps())?;
    let spec = x_cur.spec.clone();
    let ch = spec.num_channels();
    let chan_mask = spec.perturbable_mask();
    let state_scale = &bundle.state_stats.scale;
    let plan = RolloutPlan::draw(bundle, cfg.rollout_levels, cfg.lead, rng)?;

    let x0: Vec<f64> = x_cur.data.iter().copied().collect();
    let x1_base: Vec<f64> = x_next_fc.data.iter().copied().collect();
    let mut delta = Array3::<f64>::zeros(x_cur.data.dim());
    let mut counter = PassCounter::new();
    let mut loss_trace = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        let x1: Vec<f64> = x1_base
            .iter()
            .zip(delta.iter())
            .enumerate()
            .map(|(i, (&x, &d))| x + state_scale[i % ch] * d)
            .collect();
        let (chain, tapes) =
            chain_from_x1(bundle, x0.clone(), x1, &plan, &mut counter, true)?;
        loss_trace.push(precip_mean_flat(chain.last().unwrap(), &spec, &cfg.region));
        let cot_x1 = grad_to_x1(bundle, &chain, &tapes, &cfg.region, &spec, &mut counter)?;
        let g: Vec<f64> = cot_x1
            .iter()
            .enumerate()
            .map(|(i, &v)| chan_mask[i % ch] * state_scale[i % ch] * v)
            .collect();
        if g.iter().any(|v| !v.is_finite()) {
            return Err(AttackError::NonFiniteGradient { iter });
        }
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (d, &gi) in delta.iter_mut().zip(&g) {
                *d -= cfg.eta * gi / norm;
            }
        }
        project_std(&mut delta, cfg.epsilon);
    }

    // Back to raw units for reporting and application.
    let mut raw = delta;
    for (i, v) in raw.iter_mut().enumerate() {
        *v *= state_scale[i % ch];
    }
    let perturbation = Perturbation::new(raw, &spec)?;
    let perturbed = perturbation.apply(x_next_fc)?;
    Ok(AttackRun {
        perturbation,
        perturbed,
        counter,
        loss_trace,
    })
}
