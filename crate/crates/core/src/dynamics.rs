//! Ground-truth synthetic atmosphere: advected moisture, condensation-driven
//! precipitation, a relaxed zonal jet with stochastic forcing, and Poisson
//! storm injection that guarantees a heavy precipitation tail.

use crate::field::{AtmosphericState, FieldError, GridSpec};
use crate::rng::{stream, Purpose};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("bad dynamics config: {0}")]
    BadConfig(String),
    #[error("non-finite input state at time {0}")]
    NonFinite(i64),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Parameters of the truth dynamics. All rates are per unit time and are
/// multiplied by `dt`, so halving `dt` and doubling the step count walks the
/// same climate at finer resolution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub spec: GridSpec,
    /// Step length; 1.0 is the full-step run, 0.5 the half-step run.
    pub dt: f64,
    /// Saturation curve q_sat(T) = q0 * exp(a * (T - t0)).
    pub t0: f64,
    pub q0: f64,
    pub a: f64,
    /// Hard ceiling on the humidity channel.
    pub q_max: f64,
    /// Fraction of supersaturation condensed per unit time; cond_rate * dt
    /// must stay in (0, 1] so humidity cannot go negative.
    pub cond_rate: f64,
    /// Base temperature drop per pressure level above the surface.
    pub lapse: f64,
    /// Zonal jet: amplitude at the surface level, Gaussian in latitude with
    /// the given row-width, growing with level by the shear factor.
    pub jet_amp: f64,
    pub jet_width: f64,
    pub jet_shear: f64,
    /// Newtonian relaxation of winds toward the jet, per unit time.
    pub wind_relax: f64,
    /// Std of the stochastic wind forcing per sqrt(unit time).
    pub wind_noise: f64,
    /// Thermal-wind coupling: the relaxation target is the background jet
    /// shifted by this factor times the local temperature gradient, so most
    /// wind tendency is a function of the current state rather than noise.
    pub thermal_wind: f64,
    /// Newtonian relaxation of temperature toward the base profile; keeps the
    /// climate stationary against injected warm anomalies.
    pub thermal_relax: f64,
    /// Relaxation of humidity toward `rh_ref * q0`, per unit time. Acts as
    /// the drying term that keeps the background below saturation, so rain
    /// stays localized to recent storms instead of covering the grid.
    pub q_relax: f64,
    pub rh_ref: f64,
    /// Poisson rate of storm injections per unit time.
    pub storm_rate: f64,
    /// Warm-moist bump amplitudes and Gaussian radius (in cells). The default
    /// warm amplitude is large enough that q_sat exceeds the bumped humidity
    /// at injection, so rain is released only 2-3 steps later as the warm
    /// core relaxes; events are therefore visible in the states a forecast
    /// starts from.
    pub storm_amp_t: f64,
    pub storm_amp_q: f64,
    pub storm_sigma: f64,
    /// Initial humidity as a fraction of surface saturation.
    pub rh_init: f64,
    pub seed: u64,
    pub steps_per_year: usize,
    pub spinup_steps: usize,
}

impl DynamicsConfig {
    pub fn defaults(spec: GridSpec) -> Self {
        Self {
            spec,
            dt: 1.0,
            t0: 288.0,
            q0: 0.45,
            a: 0.07,
            q_max: 1.0,
            cond_rate: 0.4,
            lapse: 10.0,
            jet_amp: 0.9,
            jet_width: 5.0,
            jet_shear: 0.3,
            wind_relax: 0.35,
            wind_noise: 0.02,
            thermal_wind: 1.0,
            thermal_relax: 0.35,
            q_relax: 0.05,
            rh_ref: 0.7,
            storm_rate: 0.22,
            storm_amp_t: 4.0,
            storm_amp_q: 0.24,
            storm_sigma: 1.8,
            rh_init: 0.7,
            seed: 0,
            steps_per_year: 64,
            spinup_steps: 50,
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        self.spec.validate()?;
        if !(self.dt > 0.0) {
            return Err(DynamicsError::BadConfig("dt must be positive".into()));
        }
        if self.storm_rate < 0.0 {
            return Err(DynamicsError::BadConfig("storm_rate must be >= 0".into()));
        }
        if !(self.q0 > 0.0) {
            return Err(DynamicsError::BadConfig("q0 must be positive".into()));
        }
        let cd = self.cond_rate * self.dt;
        if !(cd > 0.0 && cd <= 1.0) {
            return Err(DynamicsError::BadConfig(
                "cond_rate * dt must lie in (0, 1]".into(),
            ));
        }
        if self.q_max < self.q0 {
            return Err(DynamicsError::BadConfig("q_max below q0".into()));
        }
        Ok(())
    }

    pub fn q_sat(&self, t: f64) -> f64 {
        self.q0 * (self.a * (t - self.t0)).exp()
    }

    pub fn t_base(&self, level: usize) -> f64 {
        self.t0 - self.lapse * level as f64
    }

    pub fn jet_u(&self, row: usize, level: usize) -> f64 {
        let mid = (self.spec.height as f64 - 1.0) / 2.0;
        let z = (row as f64 - mid) / self.jet_width;
        self.jet_amp * (1.0 + self.jet_shear * level as f64) * (-z * z).exp()
    }
}

/// A contiguous run of truth states, `time_index` increasing by one.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<AtmosphericState>,
    pub steps_per_year: usize,
    pub years: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn spec(&self) -> &Arc<GridSpec> {
        &self.states[0].spec
    }

    pub fn step_of_year(&self, time_index: i64) -> usize {
        (time_index.rem_euclid(self.steps_per_year as i64)) as usize
    }

    pub fn validate(&self, q_max: f64) -> Result<(), DynamicsError> {
        for (i, s) in self.states.iter().enumerate() {
            s.validate(q_max)?;
            if i > 0 && s.time_index != self.states[i - 1].time_index + 1 {
                return Err(DynamicsError::BadConfig(format!(
                    "time index jump at position {i}"
                )));
            }
        }
        Ok(())
    }
}

fn bilinear(field: &Array2<f64>, r: f64, c: f64, spec: &GridSpec) -> f64 {
    let (h, w) = (spec.height as i64, spec.width as i64);
    // Clamp departure points at non-periodic edges so inflow takes the
    // boundary value.
    let r = if spec.periodic_y {
        r
    } else {
        r.clamp(0.0, (h - 1) as f64)
    };
    let c = if spec.periodic_x {
        c
    } else {
        c.clamp(0.0, (w - 1) as f64)
    };
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = r - r0;
    let fc = c - c0;
    let idx_r = |i: i64| -> usize {
        if spec.periodic_y {
            i.rem_euclid(h) as usize
        } else {
            i.clamp(0, h - 1) as usize
        }
    };
    let idx_c = |j: i64| -> usize {
        if spec.periodic_x {
            j.rem_euclid(w) as usize
        } else {
            j.clamp(0, w - 1) as usize
        }
    };
    let (r0i, r1i) = (idx_r(r0 as i64), idx_r(r0 as i64 + 1));
    let (c0i, c1i) = (idx_c(c0 as i64), idx_c(c0 as i64 + 1));
    field[(r0i, c0i)] * (1.0 - fr) * (1.0 - fc)
        + field[(r0i, c1i)] * (1.0 - fr) * fc
        + field[(r1i, c0i)] * fr * (1.0 - fc)
        + field[(r1i, c1i)] * fr * fc
}

/// Condense supersaturation against the lowest-level temperature: returns the
/// precipitation field and subtracts exactly that amount from humidity.
pub fn condense(data: &mut Array3<f64>, cfg: &DynamicsConfig) -> Array2<f64> {
    let spec = &cfg.spec;
    let qc = spec.humidity();
    let tc = spec.temperature(0);
    let mut precip = Array2::zeros((spec.height, spec.width));
    for r in 0..spec.height {
        for c in 0..spec.width {
            let q = data[(r, c, qc)];
            let excess = q - cfg.q_sat(data[(r, c, tc)]);
            if excess > 0.0 {
                let p = cfg.cond_rate * cfg.dt * excess;
                precip[(r, c)] = p;
                data[(r, c, qc)] = q - p;
            }
        }
    }
    precip
}

/// One step of the truth dynamics: semi-Lagrangian advection of temperature
/// and humidity by the level-mean wind, wind relaxation toward the jet with
/// stochastic forcing, thermal relaxation, condensation into the
/// precipitation channel, then Poisson storm injection.
pub fn step_truth(
    state: &AtmosphericState,
    cfg: &DynamicsConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AtmosphericState, DynamicsError> {
    let spec = &cfg.spec;
    debug_assert_eq!(*state.spec, *spec, "state grid must match config grid");
    if !state.data.iter().all(|v| v.is_finite()) {
        return Err(DynamicsError::NonFinite(state.time_index));
    }
    let (h, w, levels) = (spec.height, spec.width, spec.levels);
    let dt = cfg.dt;
    let mut data = state.data.clone();

    // Level-mean wind drives all advected fields.
    let mut um = Array2::<f64>::zeros((h, w));
    let mut vm = Array2::<f64>::zeros((h, w));
    for l in 0..levels {
        let (uc, vc) = (spec.wind_u(l), spec.wind_v(l));
        for r in 0..h {
            for c in 0..w {
                um[(r, c)] += state.data[(r, c, uc)] / levels as f64;
                vm[(r, c)] += state.data[(r, c, vc)] / levels as f64;
            }
        }
    }
    let mut advected_channels: Vec<usize> = (0..levels).map(|l| spec.temperature(l)).collect();
    advected_channels.push(spec.humidity());
    let sources: Vec<Array2<f64>> = advected_channels
        .iter()
        .map(|&ch| state.channel(ch))
        .collect();
    for r in 0..h {
        for c in 0..w {
            let dep_r = r as f64 - vm[(r, c)] * dt;
            let dep_c = c as f64 - um[(r, c)] * dt;
            for (k, &ch) in advected_channels.iter().enumerate() {
                data[(r, c, ch)] = bilinear(&sources[k], dep_r, dep_c, spec);
            }
        }
    }

    // Winds relax toward the thermal-wind-adjusted jet under white-noise
    // forcing; the draw order (level, row, col, u then v) is part of the
    // format. Gradients use the post-advection temperature of the same level
    // with clamped sampling at non-periodic edges.
    let noise = cfg.wind_noise * dt.sqrt();
    for l in 0..levels {
        let (uc, vc, tc) = (spec.wind_u(l), spec.wind_v(l), spec.temperature(l));
        for r in 0..h {
            let rp = spec.resolve_row(r as i64 + 1).unwrap_or(r);
            let rm = spec.resolve_row(r as i64 - 1).unwrap_or(r);
            for c in 0..w {
                let cp = spec.resolve_col(c as i64 + 1).unwrap_or(c);
                let cm = spec.resolve_col(c as i64 - 1).unwrap_or(c);
                let tw = cfg.thermal_wind * (1.0 + l as f64);
                let grad_y = (data[(rp, c, tc)] - data[(rm, c, tc)]) / 2.0;
                let grad_x = (data[(r, cp, tc)] - data[(r, cm, tc)]) / 2.0;
                let ju = cfg.jet_u(r, l) - tw * grad_y;
                let jv = tw * grad_x;
                let eu: f64 = StandardNormal.sample(rng);
                let ev: f64 = StandardNormal.sample(rng);
                let u = data[(r, c, uc)];
                let v = data[(r, c, vc)];
                data[(r, c, uc)] = u + cfg.wind_relax * dt * (ju - u) + noise * eu;
                data[(r, c, vc)] = v + cfg.wind_relax * dt * (jv - v) + noise * ev;
            }
        }
    }

    // Surface temperature relaxes toward the base profile; upper levels
    // relax toward the level below minus the lapse rate, so their anomalies
    // are a lagged response to the surface rather than fresh noise.
    for l in 0..levels {
        let tc = spec.temperature(l);
        for r in 0..h {
            for c in 0..w {
                let target = if l == 0 {
                    cfg.t_base(0)
                } else {
                    data[(r, c, spec.temperature(l - 1))] - cfg.lapse
                };
                let t = data[(r, c, tc)];
                data[(r, c, tc)] = t + cfg.thermal_relax * dt * (target - t);
            }
        }
    }

    {
        let qc = spec.humidity();
        let q_ref = cfg.rh_ref * cfg.q0;
        for r in 0..h {
            for c in 0..w {
                let q = data[(r, c, qc)];
                data[(r, c, qc)] = q + cfg.q_relax * dt * (q_ref - q);
            }
        }
    }

    let precip = condense(&mut data, cfg);
    let pc = spec.precipitation();
    for r in 0..h {
        for c in 0..w {
            data[(r, c, pc)] = precip[(r, c)];
        }
    }

    if cfg.storm_rate * dt > 0.0 {
        let poisson =
            Poisson::new(cfg.storm_rate * dt).expect("validated storm rate is positive");
        let count = poisson.sample(rng) as usize;
        let qc = spec.humidity();
        let tc = spec.temperature(0);
        let reach = (3.0 * cfg.storm_sigma).ceil() as i64;
        for _ in 0..count {
            let cr: f64 = rng.random_range(0.0..h as f64);
            let cc: f64 = rng.random_range(0.0..w as f64);
            for dr in -reach..=reach {
                let Some(r) = spec.resolve_row(cr.floor() as i64 + dr) else {
                    continue;
                };
                for dc in -reach..=reach {
                    let Some(c) = spec.resolve_col(cc.floor() as i64 + dc) else {
                        continue;
                    };
                    let dy = wrapped_delta(r as f64 - cr, h as f64, spec.periodic_y);
                    let dx = wrapped_delta(c as f64 - cc, w as f64, spec.periodic_x);
                    let g = (-(dy * dy + dx * dx) / (2.0 * cfg.storm_sigma * cfg.storm_sigma))
                        .exp();
                    data[(r, c, tc)] += cfg.storm_amp_t * g;
                    data[(r, c, qc)] += cfg.storm_amp_q * g;
                }
            }
        }
    }

    let qc = spec.humidity();
    for r in 0..h {
        for c in 0..w {
            data[(r, c, qc)] = data[(r, c, qc)].clamp(0.0, cfg.q_max);
        }
    }

    Ok(AtmosphericState::new(
        state.spec.clone(),
        data,
        state.time_index + 1,
    ))
}

fn wrapped_delta(d: f64, len: f64, periodic: bool) -> f64 {
    if !periodic {
        return d;
    }
    let mut d = d % len;
    if d > len / 2.0 {
        d -= len;
    } else if d < -len / 2.0 {
        d += len;
    }
    d
}

/// Base-profile initial condition: jet winds, uniform humidity at `rh_init`
/// saturation, no precipitation.
pub fn initial_state(cfg: &DynamicsConfig) -> AtmosphericState {
    let spec = Arc::new(cfg.spec.clone());
    let mut st = AtmosphericState::zeros(spec.clone(), 0);
    for l in 0..spec.levels {
        let (tc, uc) = (spec.temperature(l), spec.wind_u(l));
        for r in 0..spec.height {
            for c in 0..spec.width {
                st.data[(r, c, tc)] = cfg.t_base(l);
                st.data[(r, c, uc)] = cfg.jet_u(r, l);
            }
        }
    }
    let qc = spec.humidity();
    let q_init = (cfg.rh_init * cfg.q0).min(cfg.q_max);
    for r in 0..spec.height {
        for c in 0..spec.width {
            st.data[(r, c, qc)] = q_init;
        }
    }
    st
}

/// Generate `years * steps_per_year` states after discarding spin-up.
/// `stream_instance` selects an independent randomness stream so the
/// half-step companion run does not share draws with the main run.
pub fn generate_dataset(
    cfg: &DynamicsConfig,
    years: usize,
    stream_instance: u64,
) -> Result<Trajectory, DynamicsError> {
    cfg.validate()?;
    if years < 2 {
        return Err(DynamicsError::BadConfig(
            "climatology needs at least 2 years".into(),
        ));
    }
    let mut rng = stream(cfg.seed, Purpose::Dynamics, stream_instance);
    let mut cur = initial_state(cfg);
    for _ in 0..cfg.spinup_steps {
        cur = step_truth(&cur, cfg, &mut rng)?;
    }
    cur.time_index = 0;
    let total = years * cfg.steps_per_year;
    let mut states = Vec::with_capacity(total);
    states.push(cur);
    while states.len() < total {
        let next = step_truth(states.last().unwrap(), cfg, &mut rng)?;
        states.push(next);
    }
    let traj = Trajectory {
        states,
        steps_per_year: cfg.steps_per_year,
        years,
    };
    traj.validate(cfg.q_max)?;
    Ok(traj)
}
