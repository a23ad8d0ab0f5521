//! A second forecaster with a deliberately different shape: a per-cell
//! perceptron over a 3x3 stencil of two consecutive states, trained at half
//! the step length of the main run. No noise conditioning, no sampler; it
//! regresses the next half-step directly, so interventions crafted against
//! the diffusion forecaster can be replayed against an unrelated model.

use crate::dynamics::DynamicsConfig;
use crate::field::{AtmosphericState, FieldError, GridSpec, NormStats};
use crate::fld::{read_fld, write_fld, FldError};
use crate::rng::{stream, Purpose};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::ops::Range;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Io(#[from] FldError),
    #[error("state has {state} channels, stencil net expects {arch}")]
    ChannelMismatch { state: usize, arch: usize },
    #[error("need at least {need} states to train, got {found}")]
    TooFewStates { need: usize, found: usize },
    #[error("training diverged at iteration {iter} with loss {loss}")]
    Diverged { iter: usize, loss: f64 },
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("weight file missing field `{0}`")]
    BadWeights(String),
}

/// Companion dynamics run at half the step length. Twice the steps per year
/// and twice the spin-up keep the simulated span identical to `cfg`.
pub fn half_step_config(cfg: &DynamicsConfig) -> DynamicsConfig {
    DynamicsConfig {
        dt: cfg.dt * 0.5,
        steps_per_year: cfg.steps_per_year * 2,
        spinup_steps: cfg.spinup_steps * 2,
        ..cfg.clone()
    }
}

/// Shape of the stencil net. The net itself is resolution independent; only
/// the channel count is baked into the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StencilArch {
    pub channels: usize,
    pub hidden: usize,
}

struct StencilSections {
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
}

impl StencilArch {
    /// Two states, nine stencil cells, all channels.
    pub fn input_dim(&self) -> usize {
        18 * self.channels
    }

    pub fn num_params(&self) -> usize {
        let s = self.sections();
        s.b2.end
    }

    fn sections(&self) -> StencilSections {
        let (fin, h, c) = (self.input_dim(), self.hidden, self.channels);
        let w1 = 0..fin * h;
        let b1 = w1.end..w1.end + h;
        let w2 = b1.end..b1.end + h * c;
        let b2 = w2.end..w2.end + c;
        StencilSections { w1, b1, w2, b2 }
    }
}

/// Stencil-net weights together with the normalization they were fit under.
/// The increment is predicted in this model's own normalized units, so a
/// perturbation is always applied in physical units first.
#[derive(Debug, Clone)]
pub struct TransferParams {
    pub arch: StencilArch,
    pub stats: NormStats,
    pub data: Vec<f64>,
}

impl TransferParams {
    /// Random starting weights. Hidden biases start small but nonzero so an
    /// all-zero input still yields a nonzero increment.
    pub fn init(arch: StencilArch, stats: NormStats, rng: &mut ChaCha8Rng) -> Self {
        let s = arch.sections();
        let mut data = vec![0.0; arch.num_params()];
        let w1_std = 1.0 / (arch.input_dim() as f64).sqrt();
        let w2_std = 1.0 / (arch.hidden as f64).sqrt();
        for i in s.w1 {
            let e: f64 = StandardNormal.sample(rng);
            data[i] = w1_std * e;
        }
        for i in s.b1 {
            let e: f64 = StandardNormal.sample(rng);
            data[i] = 0.2 * e;
        }
        for i in s.w2 {
            let e: f64 = StandardNormal.sample(rng);
            data[i] = w2_std * e;
        }
        Self { arch, stats, data }
    }

    pub fn validate(&self) -> Result<(), TransferError> {
        if self.arch.channels == 0 || self.arch.hidden == 0 {
            return Err(TransferError::BadWeights("zero-sized arch".into()));
        }
        if self.data.len() != self.arch.num_params() {
            return Err(TransferError::BadWeights(format!(
                "expected {} weights, found {}",
                self.arch.num_params(),
                self.data.len()
            )));
        }
        if self.stats.mean.len() != self.arch.channels {
            return Err(TransferError::BadWeights(
                "normalization width disagrees with arch".into(),
            ));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(TransferError::BadWeights("non-finite weight".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), TransferError> {
        let meta = json!({
            "kind": "transfer",
            "arch": self.arch,
            "stats": self.stats,
        });
        write_fld(path, &[self.data.len()], &self.data, meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TransferError> {
        let file = read_fld(path)?;
        let field = |name: &str| -> Result<serde_json::Value, TransferError> {
            file.meta
                .get(name)
                .cloned()
                .ok_or_else(|| TransferError::BadWeights(name.to_string()))
        };
        let arch: StencilArch = serde_json::from_value(field("arch")?)
            .map_err(|e| TransferError::BadWeights(e.to_string()))?;
        let stats: NormStats = serde_json::from_value(field("stats")?)
            .map_err(|e| TransferError::BadWeights(e.to_string()))?;
        let params = Self {
            arch,
            stats,
            data: file.data,
        };
        params.validate()?;
        Ok(params)
    }
}

/// Gather the 3x3 stencil of both normalized states at one cell into `out`.
/// Neighbors beyond a clamped edge contribute zeros; periodic axes wrap.
fn stencil_features(
    a: &[f64],
    b: &[f64],
    spec: &GridSpec,
    row: usize,
    col: usize,
    out: &mut [f64],
) {
    let ch = spec.num_channels();
    out.iter_mut().for_each(|v| *v = 0.0);
    for kr in 0..3usize {
        let Some(sr) = spec.resolve_row(row as i64 + kr as i64 - 1) else {
            continue;
        };
        for kc in 0..3usize {
            let Some(sc) = spec.resolve_col(col as i64 + kc as i64 - 1) else {
                continue;
            };
            let src = (sr * spec.width + sc) * ch;
            let k = kr * 3 + kc;
            out[k * ch..(k + 1) * ch].copy_from_slice(&a[src..src + ch]);
            let off = 9 * ch;
            out[off + k * ch..off + (k + 1) * ch].copy_from_slice(&b[src..src + ch]);
        }
    }
}

/// One cell of the net: increment written to `inc`, activations to `h`.
fn cell_forward(params: &TransferParams, feat: &[f64], h: &mut [f64], inc: &mut [f64]) {
    let arch = &params.arch;
    let s = arch.sections();
    let (w1, b1) = (&params.data[s.w1], &params.data[s.b1]);
    let (w2, b2) = (&params.data[s.w2], &params.data[s.b2]);
    let nh = arch.hidden;
    for (j, hj) in h.iter_mut().enumerate() {
        let mut acc = b1[j];
        for (i, &f) in feat.iter().enumerate() {
            acc += w1[i * nh + j] * f;
        }
        *hj = acc.tanh();
    }
    let nc = arch.channels;
    for (c, out) in inc.iter_mut().enumerate() {
        let mut acc = b2[c];
        for (j, &hj) in h.iter().enumerate() {
            acc += w2[j * nc + c] * hj;
        }
        *out = acc;
    }
}

/// Accumulate parameter gradients for one cell given the increment cotangent.
fn cell_backward(
    params: &TransferParams,
    feat: &[f64],
    h: &[f64],
    cot_inc: &[f64],
    grad: &mut [f64],
) {
    let arch = &params.arch;
    let s = arch.sections();
    let w2 = &params.data[s.w2.clone()];
    let (nh, nc) = (arch.hidden, arch.channels);
    let mut cot_h = vec![0.0; nh];
    for j in 0..nh {
        let mut acc = 0.0;
        for (c, &ci) in cot_inc.iter().enumerate() {
            grad[s.w2.start + j * nc + c] += h[j] * ci;
            acc += w2[j * nc + c] * ci;
        }
        cot_h[j] = acc * (1.0 - h[j] * h[j]);
    }
    for (c, &ci) in cot_inc.iter().enumerate() {
        grad[s.b2.start + c] += ci;
    }
    for (j, &cj) in cot_h.iter().enumerate() {
        grad[s.b1.start + j] += cj;
        for (i, &f) in feat.iter().enumerate() {
            grad[s.w1.start + i * nh + j] += f * cj;
        }
    }
}

fn check_pair(
    params: &TransferParams,
    x_prev: &AtmosphericState,
    x_cur: &AtmosphericState,
) -> Result<(), TransferError> {
    let ch = x_cur.spec.num_channels();
    if ch != params.arch.channels {
        return Err(TransferError::ChannelMismatch {
            state: ch,
            arch: params.arch.channels,
        });
    }
    if x_prev.data.dim() != x_cur.data.dim() {
        return Err(TransferError::BadWeights(
            "conditioning states disagree on shape".into(),
        ));
    }
    Ok(())
}

/// Advance one half step from the ordered pair (x_prev, x_cur). The output
/// carries `x_cur.time_index + 1` in half-step ticks; humidity and
/// precipitation are floored at zero like every other forecast product.
pub fn transfer_step(
    params: &TransferParams,
    x_prev: &AtmosphericState,
    x_cur: &AtmosphericState,
) -> Result<AtmosphericState, TransferError> {
    check_pair(params, x_prev, x_cur)?;
    let spec = x_cur.spec.clone();
    let ch = spec.num_channels();
    let an = params
        .stats
        .normalize(&x_prev.data)?
        .into_raw_vec_and_offset()
        .0;
    let bn = params
        .stats
        .normalize(&x_cur.data)?
        .into_raw_vec_and_offset()
        .0;
    let mut feat = vec![0.0; params.arch.input_dim()];
    let mut h = vec![0.0; params.arch.hidden];
    let mut inc = vec![0.0; ch];
    let mut next = bn.clone();
    for r in 0..spec.height {
        for c in 0..spec.width {
            stencil_features(&an, &bn, &spec, r, c, &mut feat);
            cell_forward(params, &feat, &mut h, &mut inc);
            let base = (r * spec.width + c) * ch;
            for k in 0..ch {
                next[base + k] += inc[k];
            }
        }
    }
    let shaped = ndarray::Array3::from_shape_vec((spec.height, spec.width, ch), next)
        .expect("normalized buffer matches the grid");
    let mut data = params.stats.denormalize(&shaped)?;
    for ci in [spec.humidity(), spec.precipitation()] {
        for v in data.index_axis_mut(ndarray::Axis(2), ci) {
            *v = v.max(0.0);
        }
    }
    Ok(AtmosphericState::new(spec, data, x_cur.time_index + 1))
}

/// Two half-step forecasts from a full-step state pair, with the summed
/// precipitation of both halves.
#[derive(Debug, Clone)]
pub struct TransferRollout {
    pub halves: [AtmosphericState; 2],
    pub precip_total: Array2<f64>,
}

/// Feed a full-step pair into the half-step net and roll two steps. Incoming
/// indices count full model steps; outputs count half-step ticks, so the
/// second half lands at `2 * (x_tilde_next.time_index + 1)`: two half steps
/// cover exactly one model step.
pub fn transfer_rollout(
    x_cur: &AtmosphericState,
    x_tilde_next: &AtmosphericState,
    params: &TransferParams,
) -> Result<TransferRollout, TransferError> {
    check_pair(params, x_cur, x_tilde_next)?;
    let a = AtmosphericState::new(
        x_cur.spec.clone(),
        x_cur.data.clone(),
        2 * x_cur.time_index,
    );
    let b = AtmosphericState::new(
        x_tilde_next.spec.clone(),
        x_tilde_next.data.clone(),
        2 * x_tilde_next.time_index,
    );
    let h1 = transfer_step(params, &a, &b)?;
    let h2 = transfer_step(params, &b, &h1)?;
    let precip_total = &h1.precip() + &h2.precip();
    Ok(TransferRollout {
        halves: [h1, h2],
        precip_total,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferTrainConfig {
    pub hidden: usize,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub holdout_fraction: f64,
}

impl Default for TransferTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            iters: 1500,
            batch: 8,
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            holdout_fraction: 0.1,
        }
    }
}

impl TransferTrainConfig {
    pub fn validate(&self) -> Result<(), TransferError> {
        let bad = |m: &str| Err(TransferError::BadConfig(m.into()));
        if self.hidden == 0 || self.iters == 0 || self.batch == 0 {
            return bad("hidden, iters and batch must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..=0.5).contains(&self.holdout_fraction) {
            return bad("holdout fraction must lie in [0, 0.5]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_triples: usize,
    pub holdout_triples: usize,
    /// First state index reserved for holdout; targets are strictly later.
    pub train_end: usize,
    pub holdout_precip_rmse: Option<f64>,
}

/// Fit the stencil net on consecutive half-step triples with Adam. All
/// randomness derives from `seed`, so repeated runs give identical weights.
pub fn train_transfer(
    states: &[AtmosphericState],
    cfg: &TransferTrainConfig,
    seed: u64,
) -> Result<(TransferParams, TransferReport), TransferError> {
    cfg.validate()?;
    if states.len() < 6 {
        return Err(TransferError::TooFewStates {
            need: 6,
            found: states.len(),
        });
    }
    let spec = states[0].spec.clone();
    let ch = spec.num_channels();
    let cells = spec.cells();

    let holdout_steps = (cfg.holdout_fraction * states.len() as f64).ceil() as usize;
    let train_end = states.len() - holdout_steps;
    if train_end < 3 {
        return Err(TransferError::TooFewStates {
            need: 3 + holdout_steps,
            found: states.len(),
        });
    }
    let train_ts: Vec<usize> = (1..train_end - 1).collect();

    let stats = NormStats::from_tensors(states[..train_end].iter().map(|s| &s.data), ch)?;
    let xn: Vec<Vec<f64>> = states[..train_end]
        .iter()
        .map(|s| {
            stats
                .normalize(&s.data)
                .map(|a| a.into_raw_vec_and_offset().0)
        })
        .collect::<Result<_, _>>()?;

    let arch = StencilArch {
        channels: ch,
        hidden: cfg.hidden,
    };
    let fin = arch.input_dim();
    let targets: Vec<Vec<f64>> = train_ts
        .iter()
        .map(|&t| xn[t + 1].iter().zip(&xn[t]).map(|(a, b)| a - b).collect())
        .collect();

    let mut params = TransferParams::init(arch, stats, &mut stream(seed, Purpose::TransferTraining, 0));
    let mut rng = stream(seed, Purpose::TransferTraining, 1);

    let np = params.data.len();
    let mut m = vec![0.0; np];
    let mut v = vec![0.0; np];
    let mut grad = vec![0.0; np];
    let mut feat = vec![0.0; fin];
    let mut h = vec![0.0; cfg.hidden];
    let mut inc = vec![0.0; ch];
    let mut cot = vec![0.0; ch];
    let mut initial_loss = 0.0;
    let mut tail: Vec<f64> = Vec::new();
    let tail_len = cfg.iters.min(50);
    for it in 0..cfg.iters {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        let scale = 1.0 / (cfg.batch * cells * ch) as f64;
        for _ in 0..cfg.batch {
            let pick = rng.random_range(0..train_ts.len());
            let t = train_ts[pick];
            let tgt = &targets[pick];
            for r in 0..spec.height {
                for c in 0..spec.width {
                    let cell = r * spec.width + c;
                    stencil_features(&xn[t - 1], &xn[t], &spec, r, c, &mut feat);
                    cell_forward(&params, &feat, &mut h, &mut inc);
                    for k in 0..ch {
                        let d = inc[k] - tgt[cell * ch + k];
                        loss += d * d * scale;
                        cot[k] = 2.0 * d * scale;
                    }
                    cell_backward(&params, &feat, &h, &cot, &mut grad);
                }
            }
        }
        if !loss.is_finite() {
            return Err(TransferError::Diverged { iter: it, loss });
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

    let holdout_ts: Vec<usize> = (train_end..states.len().saturating_sub(1)).collect();
    let holdout_precip_rmse = if holdout_ts.is_empty() {
        None
    } else {
        let pc = spec.precipitation();
        let mut sq = 0.0;
        let mut n = 0usize;
        for &t in &holdout_ts {
            let out = transfer_step(&params, &states[t - 1], &states[t])?;
            for r in 0..spec.height {
                for c in 0..spec.width {
                    let diff = out.data[(r, c, pc)] - states[t + 1].data[(r, c, pc)];
                    sq += diff * diff;
                    n += 1;
                }
            }
        }
        Some((sq / n as f64).sqrt())
    };

    let report = TransferReport {
        initial_loss,
        final_loss,
        train_triples: train_ts.len(),
        holdout_triples: holdout_ts.len(),
        train_end,
        holdout_precip_rmse,
    };
    Ok((params, report))
}
