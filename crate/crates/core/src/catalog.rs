//! Extreme-precipitation event catalog: per-slot climatology, the anomaly
//! threshold τ, exceedance extraction with land restriction and
//! deduplication, and the predictability filter.

use crate::dynamics::Trajectory;
use crate::field::{AtmosphericState, BinaryField, FieldError, GridSpec, TargetRegion};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("climatology needs at least 2 years, got {0}")]
    TooFewYears(usize),
    #[error("trajectory length {len} does not equal years*steps_per_year {expected}")]
    RaggedTrajectory { len: usize, expected: usize },
    #[error("degenerate threshold: {0}")]
    Degenerate(String),
    #[error("land mask shape {found:?} does not match grid {expected:?}")]
    LandMaskShape {
        found: (usize, usize),
        expected: (usize, usize),
    },
    #[error("forecast failed for event at t={time}: {reason}")]
    Forecast { time: i64, reason: String },
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Mean precipitation per (step-of-year, cell) across years.
#[derive(Debug, Clone)]
pub struct Climatology {
    pub steps_per_year: usize,
    pub mean_precip: Array3<f64>,
}

impl Climatology {
    pub fn slot(&self, time_index: i64) -> usize {
        time_index.rem_euclid(self.steps_per_year as i64) as usize
    }

    /// Precipitation anomaly field of one state against this climatology.
    pub fn anomaly(&self, state: &AtmosphericState) -> Array2<f64> {
        let soy = self.slot(state.time_index);
        let mut a = state.precip();
        for r in 0..a.dim().0 {
            for c in 0..a.dim().1 {
                a[(r, c)] -= self.mean_precip[(soy, r, c)];
            }
        }
        a
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EventThreshold {
    pub tau: f64,
}

/// One extreme-precipitation event.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventRecord {
    pub time_index: i64,
    pub cell: (usize, usize),
    pub anomaly: f64,
    pub region: TargetRegion,
    pub predictable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogConfig {
    /// Exceedances closer than this in time and space are duplicates.
    pub dedup_steps: i64,
    pub dedup_radius: f64,
    /// Half-extent of the target region built around each event cell.
    pub half_extent: usize,
    /// Percentile of per-cell yearly-maximum anomalies defining τ.
    pub percentile: f64,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        Self {
            dedup_steps: 4,
            dedup_radius: 6.0,
            half_extent: 2,
            percentile: 0.99,
        }
    }
}

/// Rectangular "continent" covering roughly 40% of the grid.
pub fn default_land_mask(spec: &GridSpec) -> BinaryField {
    let mut mask = Array2::zeros((spec.height, spec.width));
    let r0 = spec.height / 6;
    let r1 = r0 + (5 * spec.height) / 8;
    let c0 = spec.width / 8;
    let c1 = c0 + (5 * spec.width) / 8;
    for r in r0..r1.min(spec.height) {
        for c in c0..c1.min(spec.width) {
            mask[(r, c)] = 1.0;
        }
    }
    mask
}

fn check_traj(traj: &Trajectory) -> Result<(), CatalogError> {
    if traj.years < 2 {
        return Err(CatalogError::TooFewYears(traj.years));
    }
    let expected = traj.years * traj.steps_per_year;
    if traj.len() != expected {
        return Err(CatalogError::RaggedTrajectory {
            len: traj.len(),
            expected,
        });
    }
    Ok(())
}

/// Mean precipitation for each (step-of-year, cell) across years.
pub fn build_climatology(traj: &Trajectory) -> Result<Climatology, CatalogError> {
    check_traj(traj)?;
    let spec = traj.spec();
    let spy = traj.steps_per_year;
    let mut mean = Array3::zeros((spy, spec.height, spec.width));
    for state in &traj.states {
        let soy = state.time_index.rem_euclid(spy as i64) as usize;
        let p = state.precip();
        for r in 0..spec.height {
            for c in 0..spec.width {
                mean[(soy, r, c)] += p[(r, c)] / traj.years as f64;
            }
        }
    }
    Ok(Climatology {
        steps_per_year: spy,
        mean_precip: mean,
    })
}

/// Nearest-rank percentile: the smallest element at rank ceil(p*n).
fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len() as f64;
    let rank = (p * n).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Per cell: the configured percentile of its per-year maximum anomalies.
pub fn per_cell_percentiles(
    traj: &Trajectory,
    clim: &Climatology,
    p: f64,
) -> Result<Array2<f64>, CatalogError> {
    check_traj(traj)?;
    let spec = traj.spec();
    let spy = traj.steps_per_year;
    let (h, w) = (spec.height, spec.width);
    let mut yearly_max = vec![Array2::from_elem((h, w), f64::NEG_INFINITY); traj.years];
    for (i, state) in traj.states.iter().enumerate() {
        let year = i / spy;
        let anom = clim.anomaly(state);
        let ym = &mut yearly_max[year];
        for r in 0..h {
            for c in 0..w {
                if anom[(r, c)] > ym[(r, c)] {
                    ym[(r, c)] = anom[(r, c)];
                }
            }
        }
    }
    let mut out = Array2::zeros((h, w));
    let mut series = vec![0.0; traj.years];
    for r in 0..h {
        for c in 0..w {
            for (y, ym) in yearly_max.iter().enumerate() {
                series[y] = ym[(r, c)];
            }
            series.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out[(r, c)] = nearest_rank(&series, p);
        }
    }
    Ok(out)
}

/// τ = spatial mean over all cells of the per-cell yearly-max-anomaly
/// percentile. Errors out when the result is not strictly positive, which
/// happens only on signal-free data.
pub fn compute_tau(traj: &Trajectory, clim: &Climatology) -> Result<EventThreshold, CatalogError> {
    compute_tau_at(traj, clim, CatalogConfig::default().percentile)
}

pub fn compute_tau_at(
    traj: &Trajectory,
    clim: &Climatology,
    percentile: f64,
) -> Result<EventThreshold, CatalogError> {
    let pct = per_cell_percentiles(traj, clim, percentile)?;
    let tau = pct.sum() / pct.len() as f64;
    if !(tau > 0.0) {
        return Err(CatalogError::Degenerate(format!(
            "threshold {tau} is not positive; no precipitation signal"
        )));
    }
    Ok(EventThreshold { tau })
}

fn is_duplicate(a: &EventRecord, b: &EventRecord, cfg: &CatalogConfig, spec: &GridSpec) -> bool {
    (a.time_index - b.time_index).abs() <= cfg.dedup_steps
        && spec.distance(a.cell, b.cell) <= cfg.dedup_radius
}

/// Greedy dedup keeping the higher-anomaly member of any duplicate pair.
/// Output is ordered by (time, row, col). Idempotent: no two survivors are
/// duplicates of each other.
pub fn dedup(mut candidates: Vec<EventRecord>, cfg: &CatalogConfig, spec: &GridSpec) -> Vec<EventRecord> {
    candidates.sort_by(|a, b| {
        b.anomaly
            .partial_cmp(&a.anomaly)
            .unwrap()
            .then(a.time_index.cmp(&b.time_index))
            .then(a.cell.cmp(&b.cell))
    });
    let mut kept: Vec<EventRecord> = Vec::new();
    for cand in candidates {
        if kept.iter().all(|k| !is_duplicate(&cand, k, cfg, spec)) {
            kept.push(cand);
        }
    }
    kept.sort_by(|a, b| a.time_index.cmp(&b.time_index).then(a.cell.cmp(&b.cell)));
    kept
}

/// All land exceedances of τ, deduplicated.
pub fn extract_events(
    traj: &Trajectory,
    clim: &Climatology,
    thr: EventThreshold,
    land: &BinaryField,
    cfg: &CatalogConfig,
) -> Result<Vec<EventRecord>, CatalogError> {
    let spec = traj.spec();
    if land.dim() != (spec.height, spec.width) {
        return Err(CatalogError::LandMaskShape {
            found: land.dim(),
            expected: (spec.height, spec.width),
        });
    }
    let mut candidates = Vec::new();
    for state in &traj.states {
        let anom = clim.anomaly(state);
        for r in 0..spec.height {
            for c in 0..spec.width {
                if land[(r, c)] != 0.0 && anom[(r, c)] > thr.tau {
                    candidates.push(EventRecord {
                        time_index: state.time_index,
                        cell: (r, c),
                        anomaly: anom[(r, c)],
                        region: TargetRegion::new((r, c), cfg.half_extent, spec)?,
                        predictable: false,
                    });
                }
            }
        }
    }
    Ok(dedup(candidates, cfg, spec))
}

/// Keep events whose one-step forecast from the two preceding truth states
/// still exceeds τ somewhere in the target region. `forecast` maps
/// (x_prev, x_cur) to the next-step state estimate.
pub fn filter_predictable<F>(
    events: &[EventRecord],
    mut forecast: F,
    traj: &Trajectory,
    clim: &Climatology,
    thr: EventThreshold,
) -> Result<Vec<EventRecord>, CatalogError>
where
    F: FnMut(&AtmosphericState, &AtmosphericState) -> Result<AtmosphericState, String>,
{
    let base = traj.states[0].time_index;
    let mut kept = Vec::new();
    for ev in events {
        let idx = (ev.time_index - base) as usize;
        if ev.time_index - base < 2 {
            continue;
        }
        let x_prev = &traj.states[idx - 2];
        let x_cur = &traj.states[idx - 1];
        let fc = forecast(x_prev, x_cur).map_err(|reason| CatalogError::Forecast {
            time: ev.time_index,
            reason,
        })?;
        let anom = clim.anomaly(&fc);
        let max_in_region = ev
            .region
            .cells
            .iter()
            .map(|&(r, c)| anom[(r, c)])
            .fold(f64::NEG_INFINITY, f64::max);
        if max_in_region > thr.tau {
            let mut e = ev.clone();
            e.predictable = true;
            kept.push(e);
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{generate_dataset, DynamicsConfig};
    use crate::field::GridSpec;
    use crate::rng::{stream, Purpose};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use std::sync::Arc;

    fn spec() -> GridSpec {
        GridSpec::new(8, 8, 2, true, false).unwrap()
    }

    /// Trajectory with precipitation set by a closure; everything else zero.
    fn traj_with_precip<F>(spec: &GridSpec, years: usize, spy: usize, f: F) -> Trajectory
    where
        F: Fn(i64, usize, usize) -> f64,
    {
        let spec = Arc::new(spec.clone());
        let pc = spec.precipitation();
        let states = (0..(years * spy) as i64)
            .map(|t| {
                let mut s = AtmosphericState::zeros(spec.clone(), t);
                for r in 0..spec.height {
                    for c in 0..spec.width {
                        s.data[(r, c, pc)] = f(t, r, c);
                    }
                }
                s
            })
            .collect();
        Trajectory {
            states,
            steps_per_year: spy,
            years,
        }
    }

    fn zero_clim(spec: &GridSpec, spy: usize) -> Climatology {
        Climatology {
            steps_per_year: spy,
            mean_precip: Array3::zeros((spy, spec.height, spec.width)),
        }
    }

    #[test]
    fn constant_precip_climatology_and_zero_anomaly() {
        let sp = spec();
        let traj = traj_with_precip(&sp, 3, 5, |_, _, _| 0.7);
        let clim = build_climatology(&traj).unwrap();
        assert!(clim.mean_precip.iter().all(|&v| (v - 0.7).abs() < 1e-12));
        let anom = clim.anomaly(&traj.states[7]);
        assert!(anom.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn two_year_mean() {
        let sp = spec();
        let traj = traj_with_precip(&sp, 2, 4, |t, _, _| if t < 4 { 1.0 } else { 3.0 });
        let clim = build_climatology(&traj).unwrap();
        assert_abs_diff_eq!(clim.mean_precip[(2, 3, 3)], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn climatology_matches_double_loop_oracle() {
        let sp = spec();
        let mut rng = stream(11, Purpose::Diagnostics, 0);
        let (years, spy) = (3, 6);
        let vals: Vec<f64> = (0..years * spy * 64).map(|_| rng.random::<f64>()).collect();
        let traj = traj_with_precip(&sp, years, spy, |t, r, c| {
            vals[(t as usize) * 64 + r * 8 + c]
        });
        let clim = build_climatology(&traj).unwrap();
        for soy in 0..spy {
            for r in 0..8 {
                for c in 0..8 {
                    let mut acc = 0.0;
                    for y in 0..years {
                        acc += vals[(y * spy + soy) * 64 + r * 8 + c];
                    }
                    assert_abs_diff_eq!(
                        clim.mean_precip[(soy, r, c)],
                        acc / years as f64,
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn nearest_rank_hundred_years() {
        // Yearly maxima 1..=100 at one cell against a zero climatology: the
        // 99th nearest-rank percentile picks 99.
        let sp = spec();
        let traj = traj_with_precip(&sp, 100, 1, |t, r, c| {
            if (r, c) == (4, 4) {
                (t + 1) as f64
            } else {
                0.0
            }
        });
        let clim = zero_clim(&sp, 1);
        let pct = per_cell_percentiles(&traj, &clim, 0.99).unwrap();
        assert_abs_diff_eq!(pct[(4, 4)], 99.0, epsilon = 1e-12);
    }

    #[test]
    fn tau_is_spatial_mean_of_cell_percentiles() {
        // Two active cells with per-cell percentiles 2 and 4; the rest stay
        // at zero, so τ = (2 + 4) / 64.
        let sp = spec();
        let traj = traj_with_precip(&sp, 2, 3, |_, r, c| match (r, c) {
            (1, 1) => 2.0,
            (5, 6) => 4.0,
            _ => 0.0,
        });
        let clim = zero_clim(&sp, 3);
        let thr = compute_tau(&traj, &clim).unwrap();
        assert_abs_diff_eq!(thr.tau, 6.0 / 64.0, epsilon = 1e-12);
        let pct = per_cell_percentiles(&traj, &clim, 0.99).unwrap();
        assert_abs_diff_eq!((pct[(1, 1)] + pct[(5, 6)]) / 2.0, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_signal_threshold_is_degenerate() {
        let sp = spec();
        let traj = traj_with_precip(&sp, 2, 3, |_, _, _| 0.4);
        let clim = build_climatology(&traj).unwrap();
        assert!(matches!(
            compute_tau(&traj, &clim),
            Err(CatalogError::Degenerate(_))
        ));
    }

    #[test]
    fn no_exceedance_gives_empty_catalog() {
        let sp = spec();
        let traj = traj_with_precip(&sp, 2, 3, |_, _, _| 0.0);
        let clim = zero_clim(&sp, 3);
        let land = Array2::ones((8, 8));
        let events = extract_events(
            &traj,
            &clim,
            EventThreshold { tau: 0.5 },
            &land,
            &CatalogConfig::default(),
        )
        .unwrap();
        assert!(events.is_empty());
    }

    #[test]
    fn close_pair_dedups_to_larger() {
        let sp = spec();
        let traj = traj_with_precip(&sp, 2, 4, |t, r, c| {
            if (r, c) == (4, 4) && t == 2 {
                1.0
            } else if (r, c) == (4, 4) && t == 3 {
                2.0
            } else {
                0.0
            }
        });
        let clim = zero_clim(&sp, 4);
        let land = Array2::ones((8, 8));
        let events = extract_events(
            &traj,
            &clim,
            EventThreshold { tau: 0.5 },
            &land,
            &CatalogConfig::default(),
        )
        .unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].time_index, 3);
        assert_abs_diff_eq!(events[0].anomaly, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn sea_exceedances_are_ignored() {
        let sp = spec();
        let traj = traj_with_precip(&sp, 2, 4, |t, r, c| {
            if (r, c) == (0, 0) && t == 2 {
                3.0
            } else {
                0.0
            }
        });
        let clim = zero_clim(&sp, 4);
        let mut land = Array2::ones((8, 8));
        land[(0, 0)] = 0.0;
        let events = extract_events(
            &traj,
            &clim,
            EventThreshold { tau: 0.5 },
            &land,
            &CatalogConfig::default(),
        )
        .unwrap();
        assert!(events.is_empty());
    }

    fn random_candidates(seed: u64, n: usize, sp: &GridSpec) -> Vec<EventRecord> {
        let mut rng = stream(seed, Purpose::Diagnostics, 1);
        (0..n)
            .map(|_| {
                let cell = (rng.random_range(0..sp.height), rng.random_range(0..sp.width));
                EventRecord {
                    time_index: rng.random_range(0..40),
                    cell,
                    anomaly: rng.random::<f64>() + 0.01,
                    region: TargetRegion::new(cell, 1, sp).unwrap(),
                    predictable: false,
                }
            })
            .collect()
    }

    /// Greedy dedup written independently: explicit pairwise scan.
    fn dedup_oracle(
        candidates: &[EventRecord],
        cfg: &CatalogConfig,
        sp: &GridSpec,
    ) -> Vec<(i64, (usize, usize))> {
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&i, &j| {
            let (a, b) = (&candidates[i], &candidates[j]);
            b.anomaly
                .partial_cmp(&a.anomaly)
                .unwrap()
                .then(a.time_index.cmp(&b.time_index))
                .then(a.cell.cmp(&b.cell))
        });
        let mut kept: Vec<usize> = Vec::new();
        'outer: for &i in &order {
            for &j in &kept {
                let dt = (candidates[i].time_index - candidates[j].time_index).abs();
                let dr = {
                    let d = (candidates[i].cell.0 as i64 - candidates[j].cell.0 as i64).abs();
                    if sp.periodic_y {
                        d.min(sp.height as i64 - d)
                    } else {
                        d
                    }
                };
                let dc = {
                    let d = (candidates[i].cell.1 as i64 - candidates[j].cell.1 as i64).abs();
                    if sp.periodic_x {
                        d.min(sp.width as i64 - d)
                    } else {
                        d
                    }
                };
                let dist = ((dr * dr + dc * dc) as f64).sqrt();
                if dt <= cfg.dedup_steps && dist <= cfg.dedup_radius {
                    continue 'outer;
                }
            }
            kept.push(i);
        }
        let mut out: Vec<(i64, (usize, usize))> = kept
            .into_iter()
            .map(|i| (candidates[i].time_index, candidates[i].cell))
            .collect();
        out.sort();
        out
    }

    #[test]
    fn dedup_matches_pairwise_oracle() {
        let sp = spec();
        let cfg = CatalogConfig {
            dedup_steps: 3,
            dedup_radius: 2.5,
            half_extent: 1,
            percentile: 0.99,
        };
        for seed in 0..50 {
            let cands = random_candidates(seed, 30, &sp);
            let got: Vec<(i64, (usize, usize))> = dedup(cands.clone(), &cfg, &sp)
                .into_iter()
                .map(|e| (e.time_index, e.cell))
                .collect();
            let want = dedup_oracle(&cands, &cfg, &sp);
            assert_eq!(got, want, "seed {seed}");
        }
    }

    #[test]
    fn dedup_is_idempotent_on_random_catalogs() {
        let sp = spec();
        let cfg = CatalogConfig {
            dedup_steps: 3,
            dedup_radius: 2.5,
            half_extent: 1,
            percentile: 0.99,
        };
        for seed in 0..100 {
            let cands = random_candidates(seed, 25, &sp);
            let once = dedup(cands, &cfg, &sp);
            let twice = dedup(once.clone(), &cfg, &sp);
            assert_eq!(
                once.iter().map(|e| (e.time_index, e.cell)).collect::<Vec<_>>(),
                twice.iter().map(|e| (e.time_index, e.cell)).collect::<Vec<_>>(),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn default_land_mask_covers_about_forty_percent() {
        let sp = GridSpec::new(24, 24, 3, true, false).unwrap();
        let land = default_land_mask(&sp);
        let frac = land.sum() / (24.0 * 24.0);
        assert!((0.3..=0.5).contains(&frac), "land fraction {frac}");
    }

    #[test]
    fn perfect_forecaster_retains_every_late_event() {
        let sp = spec();
        let traj = traj_with_precip(&sp, 2, 6, |t, r, c| {
            if (r, c) == (4, 4) && t == 5 {
                2.0
            } else if (r, c) == (2, 6) && t == 10 {
                1.5
            } else {
                0.0
            }
        });
        let clim = zero_clim(&sp, 6);
        let land = Array2::ones((8, 8));
        let events = extract_events(
            &traj,
            &clim,
            EventThreshold { tau: 0.5 },
            &land,
            &CatalogConfig::default(),
        )
        .unwrap();
        assert_eq!(events.len(), 2);
        let states = traj.states.clone();
        let truth =
            |_: &AtmosphericState, x_cur: &AtmosphericState| -> Result<AtmosphericState, String> {
                Ok(states[(x_cur.time_index + 1) as usize].clone())
            };
        let kept =
            filter_predictable(&events, truth, &traj, &clim, EventThreshold { tau: 0.5 }).unwrap();
        assert_eq!(kept.len(), 2);
        assert!(kept.iter().all(|e| e.predictable));
    }

    #[test]
    fn zero_forecaster_retains_nothing() {
        let sp = spec();
        let traj = traj_with_precip(&sp, 2, 6, |t, r, c| {
            if (r, c) == (4, 4) && t == 5 {
                2.0
            } else {
                0.0
            }
        });
        let clim = zero_clim(&sp, 6);
        let land = Array2::ones((8, 8));
        let events = extract_events(
            &traj,
            &clim,
            EventThreshold { tau: 0.5 },
            &land,
            &CatalogConfig::default(),
        )
        .unwrap();
        let zero = |_: &AtmosphericState,
                    x_cur: &AtmosphericState|
         -> Result<AtmosphericState, String> {
            Ok(AtmosphericState::zeros(
                x_cur.spec.clone(),
                x_cur.time_index + 1,
            ))
        };
        let kept =
            filter_predictable(&events, zero, &traj, &clim, EventThreshold { tau: 0.5 }).unwrap();
        assert!(kept.is_empty());
    }

    #[test]
    fn default_pipeline_yields_positive_tau_and_events() {
        let sp = GridSpec::new(24, 24, 3, true, false).unwrap();
        let cfg = DynamicsConfig::defaults(sp.clone());
        let traj = generate_dataset(&cfg, 3, 0).unwrap();
        let clim = build_climatology(&traj).unwrap();
        let thr = compute_tau(&traj, &clim).unwrap();
        assert!(thr.tau > 0.0);
        let land = default_land_mask(&sp);
        let events = extract_events(&traj, &clim, thr, &land, &CatalogConfig::default()).unwrap();
        assert!(!events.is_empty(), "no events at default settings");
        for e in &events {
            assert!(e.anomaly > thr.tau);
            assert_eq!(land[e.cell], 1.0);
        }
    }
}
