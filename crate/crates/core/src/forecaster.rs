//! One-step probabilistic forecasts. A denoiser trained on normalized state
//! residuals is driven by the deterministic sampler to produce the next
//! state from the two preceding ones.

use crate::denoiser::{forward, Arch, DenoiserError, DenoiserParams};
use crate::field::{AtmosphericState, FieldError, NormStats};
use crate::fld::{read_fld, write_fld, FldError};
use crate::rng::{stream, Purpose};
use crate::schedule::{precond, sampler_update, NoiseSchedule, ScheduleError};
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Io(#[from] FldError),
    #[error("need at least {need} states to train, got {found}")]
    TooFewStates { need: usize, found: usize },
    #[error("training diverged at iteration {iter} with loss {loss}")]
    Diverged { iter: usize, loss: f64 },
    #[error("bad level subset: {0}")]
    BadLevels(String),
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("weight file missing field `{0}`")]
    BadWeights(String),
    #[error("bad residual state: {0}")]
    BadResidual(String),
}

/// Running totals of denoiser evaluations, forward and reverse.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounter {
    pub forward: u64,
    pub backward: u64,
}

impl PassCounter {
    pub fn new() -> Self {
        Self::default()
    }
}

/// What a residual tensor currently holds at one noise level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualKind {
    Noisy,
    Denoised,
    Guided,
}

/// A normalized residual tagged with its noise level and processing stage.
/// Stages only move noisy → denoised → (guided) → noisy at the next level,
/// so a denoised estimate can never be fed back in place of a noisy one.
#[derive(Debug, Clone)]
pub struct ResidualState {
    pub data: Vec<f64>,
    pub sigma_level: usize,
    pub kind: ResidualKind,
}

impl ResidualState {
    fn checked(
        data: Vec<f64>,
        sigma_level: usize,
        kind: ResidualKind,
    ) -> Result<Self, ForecastError> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(ForecastError::BadResidual(format!(
                "non-finite values at level {sigma_level}"
            )));
        }
        Ok(Self {
            data,
            sigma_level,
            kind,
        })
    }

    pub fn noisy(data: Vec<f64>, sigma_level: usize) -> Result<Self, ForecastError> {
        Self::checked(data, sigma_level, ResidualKind::Noisy)
    }

    /// Noisy → denoised at the same level.
    pub fn denoise(&self, data: Vec<f64>) -> Result<Self, ForecastError> {
        if self.kind != ResidualKind::Noisy {
            return Err(ForecastError::BadResidual(format!(
                "cannot denoise a {:?} residual",
                self.kind
            )));
        }
        Self::checked(data, self.sigma_level, ResidualKind::Denoised)
    }

    /// Denoised → guided at the same level.
    pub fn guide(&self, data: Vec<f64>) -> Result<Self, ForecastError> {
        if self.kind != ResidualKind::Denoised {
            return Err(ForecastError::BadResidual(format!(
                "cannot guide a {:?} residual",
                self.kind
            )));
        }
        Self::checked(data, self.sigma_level, ResidualKind::Guided)
    }

    /// Denoised or guided → noisy at the next level.
    pub fn advance(&self, data: Vec<f64>) -> Result<Self, ForecastError> {
        if self.kind == ResidualKind::Noisy {
            return Err(ForecastError::BadResidual(
                "cannot advance a noisy residual before denoising".into(),
            ));
        }
        Self::checked(data, self.sigma_level + 1, ResidualKind::Noisy)
    }
}

/// Everything needed to forecast: weights plus the normalization and noise
/// levels they were trained with.
#[derive(Debug, Clone)]
pub struct ForecasterBundle {
    pub params: DenoiserParams,
    pub state_stats: NormStats,
    pub residual_stats: NormStats,
    pub schedule: NoiseSchedule,
}

impl ForecasterBundle {
    pub fn save(&self, path: &Path) -> Result<(), ForecastError> {
        let meta = json!({
            "kind": "forecaster",
            "arch": self.params.arch,
            "state_stats": self.state_stats,
            "residual_stats": self.residual_stats,
            "schedule": self.schedule,
        });
        write_fld(path, &[self.params.data.len()], &self.params.data, meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ForecastError> {
        let file = read_fld(path)?;
        let field = |name: &str| -> Result<serde_json::Value, ForecastError> {
            file.meta
                .get(name)
                .cloned()
                .ok_or_else(|| ForecastError::BadWeights(name.to_string()))
        };
        let arch: Arch = serde_json::from_value(field("arch")?)
            .map_err(|e| ForecastError::BadWeights(e.to_string()))?;
        let state_stats: NormStats = serde_json::from_value(field("state_stats")?)
            .map_err(|e| ForecastError::BadWeights(e.to_string()))?;
        let residual_stats: NormStats = serde_json::from_value(field("residual_stats")?)
            .map_err(|e| ForecastError::BadWeights(e.to_string()))?;
        let schedule: NoiseSchedule = serde_json::from_value(field("schedule")?)
            .map_err(|e| ForecastError::BadWeights(e.to_string()))?;
        schedule.validate()?;
        let params = DenoiserParams {
            arch,
            data: file.data,
        };
        params.validate()?;
        Ok(Self {
            params,
            state_stats,
            residual_stats,
            schedule,
        })
    }

    /// Normalized flat copy of a state, row-major `(row, col, channel)`.
    pub fn normalized_flat(&self, state: &AtmosphericState) -> Result<Vec<f64>, ForecastError> {
        let n = self.state_stats.normalize(&state.data)?;
        Ok(n.into_raw_vec_and_offset().0)
    }
}

/// A sampled forecast with the latent activations of each denoiser call and
/// the final residual in normalized units.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub state: AtmosphericState,
    pub latents: Vec<Vec<f64>>,
    pub z_final: Vec<f64>,
}

/// Core update loop shared by the network sampler and by oracle denoisers in
/// tests. `level_sigmas` lists the noise level of each denoiser call; the
/// final update always lands on the terminal zero.
fn run_sampler<F>(eps: &[f64], level_sigmas: &[f64], mut denoise: F) -> Vec<f64>
where
    F: FnMut(&[f64], f64) -> Vec<f64>,
{
    assert!(!level_sigmas.is_empty());
    let mut z: Vec<f64> = eps.iter().map(|&e| level_sigmas[0] * e).collect();
    for (k, &sigma) in level_sigmas.iter().enumerate() {
        let d = denoise(&z, sigma);
        let sigma_next = level_sigmas.get(k + 1).copied().unwrap_or(0.0);
        z = sampler_update(&z, &d, sigma, sigma_next);
    }
    z
}

fn check_levels(levels: &[usize], n_steps: usize) -> Result<(), ForecastError> {
    if levels.is_empty() {
        return Err(ForecastError::BadLevels("empty level subset".into()));
    }
    if !levels.windows(2).all(|w| w[0] < w[1]) {
        return Err(ForecastError::BadLevels(format!(
            "levels must be strictly increasing, got {levels:?}"
        )));
    }
    if *levels.last().unwrap() >= n_steps {
        return Err(ForecastError::BadLevels(format!(
            "level {} out of range, schedule has {} steps",
            levels.last().unwrap(),
            n_steps
        )));
    }
    Ok(())
}

/// Turn a final residual into the forecast state. Precipitation and humidity
/// are floored at zero; nothing else is touched.
pub fn finalize_forecast(
    bundle: &ForecasterBundle,
    x_cur: &AtmosphericState,
    z_final: &[f64],
) -> AtmosphericState {
    let spec = x_cur.spec.clone();
    let ch = spec.num_channels();
    let stats = &bundle.residual_stats;
    let mut data = x_cur.data.clone();
    for (i, v) in data.iter_mut().enumerate() {
        let c = i % ch;
        *v += stats.mean[c] + stats.scale[c] * z_final[i];
    }
    for c in [spec.precipitation(), spec.humidity()] {
        for (_, v) in data
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| i % ch == c)
        {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    AtmosphericState::new(spec, data, x_cur.time_index + 1)
}

/// Run the sampler over an explicit subset of schedule levels with caller
/// supplied noise. The full forecast passes every level; reduced rollouts
/// inside the guidance loop pass a few representative ones.
pub fn sample_with_noise(
    bundle: &ForecasterBundle,
    x_prev: &AtmosphericState,
    x_cur: &AtmosphericState,
    eps: &[f64],
    levels: &[usize],
    counter: &mut PassCounter,
    collect_latents: bool,
) -> Result<SampleOutput, ForecastError> {
    check_levels(levels, bundle.schedule.n_steps())?;
    let xp_n = bundle.normalized_flat(x_prev)?;
    let xc_n = bundle.normalized_flat(x_cur)?;
    let level_sigmas: Vec<f64> = levels.iter().map(|&l| bundle.schedule.sigmas[l]).collect();
    let mut latents = Vec::new();
    let mut err = None;
    let z_final = run_sampler(eps, &level_sigmas, |z, sigma| {
        match forward(&bundle.params, z, &xp_n, &xc_n, sigma) {
            Ok((d, cache)) => {
                counter.forward += 1;
                if collect_latents {
                    latents.push(cache.h2);
                }
                d
            }
            Err(e) => {
                err = Some(e);
                z.to_vec()
            }
        }
    });
    if let Some(e) = err {
        return Err(e.into());
    }
    let state = finalize_forecast(bundle, x_cur, &z_final);
    Ok(SampleOutput {
        state,
        latents,
        z_final,
    })
}

/// Standard forecast: fresh noise from `rng`, every schedule level.
pub fn sample_forecast(
    bundle: &ForecasterBundle,
    x_prev: &AtmosphericState,
    x_cur: &AtmosphericState,
    rng: &mut ChaCha8Rng,
    counter: &mut PassCounter,
    collect_latents: bool,
) -> Result<SampleOutput, ForecastError> {
    let fl = x_cur.data.len();
    let eps: Vec<f64> = (0..fl).map(|_| StandardNormal.sample(rng)).collect();
    let levels: Vec<usize> = (0..bundle.schedule.n_steps()).collect();
    sample_with_noise(bundle, x_prev, x_cur, &eps, &levels, counter, collect_latents)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: usize,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Bounds of the training noise range, which must cover the sampling
    /// schedule.
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    /// Noise levels mix a clamped lognormal concentrated where denoising is
    /// informative with a log-uniform floor that keeps the extremes covered.
    pub sigma_log_mean: f64,
    pub sigma_log_std: f64,
    pub sigma_uniform_frac: f64,
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            iters: 3000,
            batch: 8,
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            sigma_lo: 0.02,
            sigma_hi: 100.0,
            sigma_log_mean: 0.8,
            sigma_log_std: 1.1,
            sigma_uniform_frac: 0.1,
            holdout_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ForecastError> {
        let bad = |m: &str| Err(ForecastError::BadConfig(m.into()));
        if self.hidden == 0 || self.iters == 0 || self.batch == 0 {
            return bad("hidden, iters and batch must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.sigma_lo > 0.0 && self.sigma_hi > self.sigma_lo) {
            return bad("sigma range must satisfy 0 < lo < hi");
        }
        if !(self.sigma_log_std > 0.0) {
            return bad("sigma_log_std must be positive");
        }
        if !(0.0..=1.0).contains(&self.sigma_uniform_frac) {
            return bad("sigma_uniform_frac must lie in [0, 1]");
        }
        if !(0.0..=0.5).contains(&self.holdout_fraction) {
            return bad("holdout fraction must lie in [0, 0.5]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_triples: usize,
    pub holdout_triples: usize,
    /// First state index reserved for holdout; targets are strictly later.
    pub train_end: usize,
    pub holdout_precip_rmse: Option<f64>,
}

/// Fit the denoiser on consecutive state triples with Adam. Every random
/// draw comes from streams derived from `seed`, so repeated runs produce
/// byte-identical weights.
pub fn train(
    states: &[AtmosphericState],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ForecasterBundle, TrainReport), ForecastError> {
    cfg.validate()?;
    schedule.validate()?;
    if states.len() < 6 {
        return Err(ForecastError::TooFewStates {
            need: 6,
            found: states.len(),
        });
    }
    let spec = states[0].spec.clone();
    let ch = spec.num_channels();
    let fl = spec.cells() * ch;

    let holdout_steps = (cfg.holdout_fraction * states.len() as f64).ceil() as usize;
    let train_end = states.len() - holdout_steps;
    // Triples are (t-1, t, t+1); training keeps all three before train_end.
    if train_end < 3 {
        return Err(ForecastError::TooFewStates {
            need: 3 + holdout_steps,
            found: states.len(),
        });
    }
    let train_ts: Vec<usize> = (1..train_end - 1).collect();

    let state_stats =
        NormStats::from_tensors(states[..train_end].iter().map(|s| &s.data), ch)?;
    let residuals: Vec<Array3<f64>> = (0..train_end - 1)
        .map(|t| &states[t + 1].data - &states[t].data)
        .collect();
    let residual_stats = NormStats::from_tensors(residuals.iter(), ch)?;

    let xn: Vec<Vec<f64>> = states[..train_end]
        .iter()
        .map(|s| {
            state_stats
                .normalize(&s.data)
                .map(|a| a.into_raw_vec_and_offset().0)
        })
        .collect::<Result<_, _>>()?;
    let zn: Vec<Vec<f64>> = train_ts
        .iter()
        .map(|&t| {
            residual_stats
                .normalize(&residuals[t])
                .map(|a| a.into_raw_vec_and_offset().0)
        })
        .collect::<Result<_, _>>()?;

    let arch = Arch {
        hidden: cfg.hidden,
        ..Arch::from_spec(&spec, cfg.hidden)
    };
    let mut params = DenoiserParams::init(arch, &mut stream(seed, Purpose::Training, 0));
    let mut rng = stream(seed, Purpose::Training, 1);

    let np = params.data.len();
    let mut m = vec![0.0; np];
    let mut v = vec![0.0; np];
    let mut grad = vec![0.0; np];
    let (ln_lo, ln_hi) = (cfg.sigma_lo.ln(), cfg.sigma_hi.ln());
    let mut initial_loss = 0.0;
    let mut tail: Vec<f64> = Vec::new();
    let tail_len = cfg.iters.min(50);

    for it in 0..cfg.iters {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let pick = rng.random_range(0..train_ts.len());
            let t = train_ts[pick];
            let choice: f64 = rng.random();
            let sigma = if choice < cfg.sigma_uniform_frac {
                let u: f64 = rng.random();
                (ln_lo + u * (ln_hi - ln_lo)).exp()
            } else {
                let e: f64 = StandardNormal.sample(&mut rng);
                (cfg.sigma_log_mean + cfg.sigma_log_std * e)
                    .exp()
                    .clamp(cfg.sigma_lo, cfg.sigma_hi)
            };
            let z_clean = &zn[pick];
            let mut z_noisy = vec![0.0; fl];
            for i in 0..fl {
                let e: f64 = StandardNormal.sample(&mut rng);
                z_noisy[i] = z_clean[i] + sigma * e;
            }
            let (d, cache) = forward(&params, &z_noisy, &xn[t - 1], &xn[t], sigma)?;
            // Loss is the noise-weighted denoising error: with
            // td = c_skip*z_noisy + c_out*target_y the target in output
            // space collapses to the clean residual itself.
            let c_out = precond(sigma, arch.sigma_data).c_out;
            let w = 1.0 / (c_out * c_out);
            let scale = 1.0 / (cfg.batch * fl) as f64;
            let mut cot = vec![0.0; fl];
            for i in 0..fl {
                let r = d[i] - z_clean[i];
                loss += w * r * r * scale;
                cot[i] = 2.0 * w * r * scale;
            }
            let g = crate::denoiser::vjp(&params, &cache, &cot)?;
            for (acc, gi) in grad.iter_mut().zip(&g.d_params) {
                *acc += gi;
            }
        }
        if !loss.is_finite() {
            return Err(ForecastError::Diverged { iter: it, loss });
        }
        if it == 0 {
            initial_loss = loss;
        }
        if it + tail_len >= cfg.iters {
            tail.push(loss);
        }
        let t_adam = (it + 1) as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t_adam);
        let bc2 = 1.0 - cfg.beta2.powf(t_adam);
        for i in 0..np {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            params.data[i] -= cfg.lr * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
    let final_loss = tail.iter().sum::<f64>() / tail.len() as f64;

    let bundle = ForecasterBundle {
        params,
        state_stats,
        residual_stats,
        schedule: schedule.clone(),
    };

    let holdout_ts: Vec<usize> = (train_end..states.len().saturating_sub(1)).collect();
    let holdout_precip_rmse = if holdout_ts.is_empty() {
        None
    } else {
        let pc = spec.precipitation();
        let mut sq = 0.0;
        let mut n = 0usize;
        for &t in &holdout_ts {
            let mut counter = PassCounter::new();
            let mut eval_rng = stream(seed, Purpose::Diagnostics, t as u64);
            let out = sample_forecast(
                &bundle,
                &states[t - 1],
                &states[t],
                &mut eval_rng,
                &mut counter,
                false,
            )?;
            for r in 0..spec.height {
                for c in 0..spec.width {
                    let diff = out.state.data[(r, c, pc)] - states[t + 1].data[(r, c, pc)];
                    sq += diff * diff;
                    n += 1;
                }
            }
        }
        Some((sq / n as f64).sqrt())
    };

    let report = TrainReport {
        initial_loss,
        final_loss,
        train_triples: train_ts.len(),
        holdout_triples: holdout_ts.len(),
        train_end,
        holdout_precip_rmse,
    };
    Ok((bundle, report))
}
