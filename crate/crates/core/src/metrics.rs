//! Scoring of interventions: target-region precipitation change, collateral
//! damage outside the region, perturbation size profiles, latent-trace
//! comparisons, and neighborhood skill between the standard and intervened
//! forecasts.

use crate::catalog::{Climatology, EventThreshold};
use crate::field::{AtmosphericState, FieldError, GridSpec, NormStats, TargetRegion, VarKind};
use crate::guidance::Perturbation;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("forecast grids disagree: {0}")]
    GridMismatch(String),
    #[error("latent traces have {a} and {b} steps")]
    TraceMismatch { a: usize, b: usize },
    #[error("latent step {step} length {len} does not divide into {cells} cells")]
    RaggedLatent { step: usize, len: usize, cells: usize },
    #[error("bad neighborhood width {k}: {reason}")]
    BadWindow { k: usize, reason: String },
    #[error("forecasts must share a time index, got {a} and {b}")]
    TimeMismatch { a: i64, b: i64 },
}

fn check_pair(a: &AtmosphericState, b: &AtmosphericState) -> Result<(), MetricsError> {
    if a.data.dim() != b.data.dim() {
        return Err(MetricsError::GridMismatch(format!(
            "{:?} vs {:?}",
            a.data.dim(),
            b.data.dim()
        )));
    }
    Ok(())
}

fn region_mean_precip(state: &AtmosphericState, region: &TargetRegion) -> f64 {
    let pc = state.spec.precipitation();
    let mut sum = 0.0;
    for &(r, c) in &region.cells {
        sum += state.data[(r, c, pc)];
    }
    sum / region.cells.len() as f64
}

/// Relative drop of region-mean precipitation against the standard forecast.
/// `None` when the standard forecast has no precipitation in the region, in
/// which case the ratio is undefined and the event is skipped.
pub fn reduction_ratio(
    std_fc: &AtmosphericState,
    int_fc: &AtmosphericState,
    region: &TargetRegion,
) -> Result<Option<f64>, MetricsError> {
    check_pair(std_fc, int_fc)?;
    let base = region_mean_precip(std_fc, region);
    if !(base > 0.0) {
        return Ok(None);
    }
    Ok(Some(1.0 - region_mean_precip(int_fc, region) / base))
}

/// Among region cells whose standard-forecast anomaly exceeds tau, the
/// fraction pushed strictly below tau by the intervention. `None` when no
/// cell exceeds tau to begin with.
pub fn success_rate(
    std_fc: &AtmosphericState,
    int_fc: &AtmosphericState,
    clim: &Climatology,
    thr: EventThreshold,
    region: &TargetRegion,
) -> Result<Option<f64>, MetricsError> {
    check_pair(std_fc, int_fc)?;
    if std_fc.time_index != int_fc.time_index {
        return Err(MetricsError::TimeMismatch {
            a: std_fc.time_index,
            b: int_fc.time_index,
        });
    }
    let std_anom = clim.anomaly(std_fc);
    let int_anom = clim.anomaly(int_fc);
    let mut exceed = 0usize;
    let mut flipped = 0usize;
    for &(r, c) in &region.cells {
        if std_anom[(r, c)] > thr.tau {
            exceed += 1;
            if int_anom[(r, c)] < thr.tau {
                flipped += 1;
            }
        }
    }
    if exceed == 0 {
        return Ok(None);
    }
    Ok(Some(flipped as f64 / exceed as f64))
}

/// Precipitation RMSE and MAE between the two forecasts over every cell
/// outside the target region.
pub fn nontarget_scores(
    std_fc: &AtmosphericState,
    int_fc: &AtmosphericState,
    region: &TargetRegion,
) -> Result<(f64, f64), MetricsError> {
    check_pair(std_fc, int_fc)?;
    let spec = &std_fc.spec;
    let pc = spec.precipitation();
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut n = 0usize;
    for r in 0..spec.height {
        for c in 0..spec.width {
            if region.contains((r, c)) {
                continue;
            }
            let d = int_fc.data[(r, c, pc)] - std_fc.data[(r, c, pc)];
            sq += d * d;
            abs += d.abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::GridMismatch(
            "target region covers the whole grid".into(),
        ));
    }
    Ok(((sq / n as f64).sqrt(), abs / n as f64))
}

/// Size summary of one perturbed variable slice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileRow {
    pub variable: String,
    pub level: usize,
    pub l2: f64,
    /// Fraction of cells with |delta| < 0.01 in normalized units.
    pub sparsity: f64,
}

/// Per-level spatial l2 norm and sparsity of a perturbation for each wind
/// and temperature slice. The perturbation is stored in physical units; a
/// difference carries no mean offset, so normalization divides by the
/// channel scale only. The 0.01 sparsity cutoff applies to the normalized
/// values.
pub fn perturbation_profile(
    delta: &Perturbation,
    spec: &GridSpec,
    stats: &NormStats,
) -> Result<Vec<ProfileRow>, MetricsError> {
    let (h, w, ch) = delta.delta.dim();
    if stats.scale.len() != ch || spec.num_channels() != ch {
        return Err(MetricsError::GridMismatch(format!(
            "stats cover {} channels, delta has {ch}",
            stats.scale.len()
        )));
    }
    let mut rows = Vec::new();
    for (ci, chan) in spec.channels.iter().enumerate() {
        let name = match chan.kind {
            VarKind::Temperature => "T",
            VarKind::WindU => "u",
            VarKind::WindV => "v",
            _ => continue,
        };
        let level = chan.level.expect("leveled variables carry a level");
        let mut sq = 0.0;
        let mut small = 0usize;
        for r in 0..h {
            for c in 0..w {
                let v = delta.delta[(r, c, ci)] / stats.scale[ci];
                sq += v * v;
                if v.abs() < 0.01 {
                    small += 1;
                }
            }
        }
        rows.push(ProfileRow {
            variable: name.to_string(),
            level,
            l2: sq.sqrt(),
            sparsity: small as f64 / (h * w) as f64,
        });
    }
    Ok(rows)
}

/// Per-sampling-step comparison of two latent traces, split into cells
/// inside and outside the target region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepDeviation {
    pub step: usize,
    pub rmse_in: f64,
    pub rmse_out: f64,
    pub cosine_in: f64,
    pub cosine_out: f64,
}

/// Cosine of two per-cell latent vectors. Matching zero vectors count as
/// aligned; a single zero vector counts as orthogonal.
fn cell_cosine(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 && nv == 0.0 {
        return 1.0;
    }
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    dot / (nu.sqrt() * nv.sqrt())
}

/// RMSE and mean per-cell cosine between two latent traces at every step.
/// Each step holds one hidden vector per grid cell, cell-major; in-region
/// and out-region cells partition the grid.
pub fn latent_deviation(
    trace_ref: &[Vec<f64>],
    trace_other: &[Vec<f64>],
    spec: &GridSpec,
    region: &TargetRegion,
) -> Result<Vec<StepDeviation>, MetricsError> {
    if trace_ref.len() != trace_other.len() {
        return Err(MetricsError::TraceMismatch {
            a: trace_ref.len(),
            b: trace_other.len(),
        });
    }
    let cells = spec.cells();
    let mut out = Vec::with_capacity(trace_ref.len());
    for (step, (lr, lo)) in trace_ref.iter().zip(trace_other).enumerate() {
        if lr.len() != lo.len() || lr.is_empty() || lr.len() % cells != 0 {
            return Err(MetricsError::RaggedLatent {
                step,
                len: lr.len().max(lo.len()),
                cells,
            });
        }
        let hidden = lr.len() / cells;
        let mut sq = [0.0; 2];
        let mut cos = [0.0; 2];
        let mut n = [0usize; 2];
        for r in 0..spec.height {
            for c in 0..spec.width {
                let side = usize::from(!region.contains((r, c)));
                let cell = r * spec.width + c;
                let u = &lr[cell * hidden..(cell + 1) * hidden];
                let v = &lo[cell * hidden..(cell + 1) * hidden];
                sq[side] += u
                    .iter()
                    .zip(v)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                cos[side] += cell_cosine(u, v);
                n[side] += 1;
            }
        }
        let rmse = |s: usize| {
            if n[s] == 0 {
                0.0
            } else {
                (sq[s] / (n[s] * hidden) as f64).sqrt()
            }
        };
        let mean_cos = |s: usize| if n[s] == 0 { 1.0 } else { cos[s] / n[s] as f64 };
        out.push(StepDeviation {
            step,
            rmse_in: rmse(0),
            rmse_out: rmse(1),
            cosine_in: mean_cos(0),
            cosine_out: mean_cos(1),
        });
    }
    Ok(out)
}

/// Fractions skill between the standard and intervened precipitation fields
/// binarized at tau, over the non-target part of the grid. Neighborhood
/// sums use a k x k window that wraps along periodic axes; cells beyond a
/// clamped edge and target-region cells are left out of both the sum and
/// the window size. Returns 1 when neither field has an exceedance.
pub fn fss(
    std_fc: &AtmosphericState,
    int_fc: &AtmosphericState,
    thr: EventThreshold,
    region: &TargetRegion,
    k: usize,
) -> Result<f64, MetricsError> {
    check_pair(std_fc, int_fc)?;
    let spec = &std_fc.spec;
    if k % 2 == 0 || k == 0 {
        return Err(MetricsError::BadWindow {
            k,
            reason: "width must be odd".into(),
        });
    }
    if k > spec.height.min(spec.width) {
        return Err(MetricsError::BadWindow {
            k,
            reason: format!("grid is only {}x{}", spec.height, spec.width),
        });
    }
    let pc = spec.precipitation();
    let valid = |r: usize, c: usize| !region.contains((r, c));
    let half = (k / 2) as i64;
    let mut num = 0.0;
    let mut den = 0.0;
    for r in 0..spec.height {
        for c in 0..spec.width {
            if !valid(r, c) {
                continue;
            }
            let mut count = 0usize;
            let mut hits = [0usize; 2];
            for dr in -half..=half {
                let Some(sr) = spec.resolve_row(r as i64 + dr) else {
                    continue;
                };
                for dc in -half..=half {
                    let Some(sc) = spec.resolve_col(c as i64 + dc) else {
                        continue;
                    };
                    if !valid(sr, sc) {
                        continue;
                    }
                    count += 1;
                    for (i, fc) in [std_fc, int_fc].into_iter().enumerate() {
                        if fc.data[(sr, sc, pc)] > thr.tau {
                            hits[i] += 1;
                        }
                    }
                }
            }
            let o = hits[0] as f64 / count as f64;
            let f = hits[1] as f64 / count as f64;
            num += (f - o) * (f - o);
            den += f * f + o * o;
        }
    }
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - num / den)
}

/// Everything scored for one event under one intervention method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventEval {
    pub event_index: usize,
    pub method: String,
    pub reduction: Option<f64>,
    pub success: Option<f64>,
    pub nontarget_rmse: f64,
    pub nontarget_mae: f64,
    pub fss: Vec<(usize, f64)>,
    pub profile: Vec<ProfileRow>,
    pub latent: Vec<StepDeviation>,
    pub transfer_reduction: Option<f64>,
}

/// Dataset-level means over events, skipping undefined entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub method: String,
    pub events: usize,
    pub mean_reduction: Option<f64>,
    pub mean_success: Option<f64>,
    pub mean_nontarget_rmse: f64,
    pub mean_nontarget_mae: f64,
    pub mean_fss: Vec<(usize, f64)>,
    pub mean_transfer_reduction: Option<f64>,
}

fn mean_defined<I: Iterator<Item = Option<f64>>>(it: I) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in it.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Collapse per-event rows of one method into dataset means. Flagged
/// (undefined) reductions and success rates are skipped, not zero-filled.
pub fn aggregate(method: &str, rows: &[&EventEval]) -> EvalAggregate {
    let n = rows.len().max(1) as f64;
    let mut fss_keys: Vec<usize> = rows
        .first()
        .map(|r| r.fss.iter().map(|&(k, _)| k).collect())
        .unwrap_or_default();
    fss_keys.sort_unstable();
    let mean_fss = fss_keys
        .iter()
        .map(|&k| {
            let s: f64 = rows
                .iter()
                .map(|r| r.fss.iter().find(|&&(kk, _)| kk == k).map_or(0.0, |t| t.1))
                .sum();
            (k, s / n)
        })
        .collect();
    EvalAggregate {
        method: method.to_string(),
        events: rows.len(),
        mean_reduction: mean_defined(rows.iter().map(|r| r.reduction)),
        mean_success: mean_defined(rows.iter().map(|r| r.success)),
        mean_nontarget_rmse: rows.iter().map(|r| r.nontarget_rmse).sum::<f64>() / n,
        mean_nontarget_mae: rows.iter().map(|r| r.nontarget_mae).sum::<f64>() / n,
        mean_fss,
        mean_transfer_reduction: mean_defined(rows.iter().map(|r| r.transfer_reduction)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use approx::assert_abs_diff_eq;
    use ndarray::{Array2, Array3};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::sync::Arc;

    fn spec_8x8() -> Arc<GridSpec> {
        Arc::new(GridSpec::new(8, 8, 2, true, false).unwrap())
    }

    fn state_with_precip(spec: &Arc<GridSpec>, precip: &Array2<f64>, idx: i64) -> AtmosphericState {
        let mut data = Array3::zeros((spec.height, spec.width, spec.num_channels()));
        let pc = spec.precipitation();
        for r in 0..spec.height {
            for c in 0..spec.width {
                data[(r, c, pc)] = precip[(r, c)];
            }
        }
        AtmosphericState::new(spec.clone(), data, idx)
    }

    fn random_state(spec: &Arc<GridSpec>, inst: u64, idx: i64) -> AtmosphericState {
        let mut rng = stream(50, Purpose::Diagnostics, inst);
        let mut data = Array3::zeros((spec.height, spec.width, spec.num_channels()));
        for v in data.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v = 0.2 * e + 0.1;
        }
        AtmosphericState::new(spec.clone(), data, idx)
    }

    fn flat_climatology(spec: &GridSpec, value: f64) -> Climatology {
        Climatology {
            steps_per_year: 4,
            mean_precip: Array3::from_elem((4, spec.height, spec.width), value),
        }
    }

    fn region_at(spec: &GridSpec, center: (usize, usize), he: usize) -> TargetRegion {
        TargetRegion::new(center, he, spec).unwrap()
    }

    #[test]
    fn reduction_ratio_matches_hand_values() {
        let spec = spec_8x8();
        let region = region_at(&spec, (4, 4), 1);
        let base = state_with_precip(&spec, &Array2::from_elem((8, 8), 0.4), 3);
        assert_eq!(reduction_ratio(&base, &base, &region).unwrap(), Some(0.0));

        let mut wiped = base.clone();
        let pc = spec.precipitation();
        for &(r, c) in &region.cells {
            wiped.data[(r, c, pc)] = 0.0;
        }
        assert_eq!(reduction_ratio(&base, &wiped, &region).unwrap(), Some(1.0));

        let quarter = state_with_precip(&spec, &Array2::from_elem((8, 8), 0.1), 3);
        let got = reduction_ratio(&base, &quarter, &region).unwrap().unwrap();
        assert_abs_diff_eq!(got, 0.75, epsilon = 1e-12);

        let dry = state_with_precip(&spec, &Array2::zeros((8, 8)), 3);
        assert_eq!(reduction_ratio(&dry, &base, &region).unwrap(), None);
    }

    #[test]
    fn success_rate_counts_flipped_exceedances() {
        let spec = spec_8x8();
        let region = region_at(&spec, (4, 4), 1);
        let clim = flat_climatology(&spec, 0.1);
        let thr = EventThreshold { tau: 0.3 };

        // Three region cells exceed tau in the standard forecast.
        let mut std_p = Array2::from_elem((8, 8), 0.1);
        for &(r, c) in &region.cells[..3] {
            std_p[(r, c)] = 0.6;
        }
        let std_fc = state_with_precip(&spec, &std_p, 5);

        assert_eq!(success_rate(&std_fc, &std_fc, &clim, thr, &region).unwrap(), Some(0.0));

        // Two of the three drop below tau, one stays above.
        let mut int_p = std_p.clone();
        int_p[region.cells[0]] = 0.2;
        int_p[region.cells[1]] = 0.0;
        let int_fc = state_with_precip(&spec, &int_p, 5);
        let got = success_rate(&std_fc, &int_fc, &clim, thr, &region).unwrap();
        assert_abs_diff_eq!(got.unwrap(), 2.0 / 3.0, epsilon = 1e-12);

        // Zero anomaly everywhere flips every exceedance.
        let flat = state_with_precip(&spec, &Array2::from_elem((8, 8), 0.1), 5);
        assert_eq!(success_rate(&std_fc, &flat, &clim, thr, &region).unwrap(), Some(1.0));

        // No exceedance at all leaves the rate undefined.
        assert_eq!(success_rate(&flat, &std_fc, &clim, thr, &region).unwrap(), None);

        let off = state_with_precip(&spec, &std_p, 6);
        assert!(matches!(
            success_rate(&std_fc, &off, &clim, thr, &region),
            Err(MetricsError::TimeMismatch { .. })
        ));
    }

    #[test]
    fn nontarget_scores_match_a_double_loop() {
        let spec = spec_8x8();
        let region = region_at(&spec, (2, 3), 1);
        let a = random_state(&spec, 0, 1);
        let b = random_state(&spec, 1, 1);

        let (rmse, mae) = nontarget_scores(&a, &b, &region).unwrap();
        let pc = spec.precipitation();
        let mut sq = 0.0;
        let mut ab = 0.0;
        let mut n = 0.0;
        for r in 0..8 {
            for c in 0..8 {
                if region.contains((r, c)) {
                    continue;
                }
                let d = b.data[(r, c, pc)] - a.data[(r, c, pc)];
                sq += d * d;
                ab += d.abs();
                n += 1.0;
            }
        }
        assert_abs_diff_eq!(rmse, (sq / n).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(mae, ab / n, epsilon = 1e-12);

        let (r0, m0) = nontarget_scores(&a, &a, &region).unwrap();
        assert_eq!((r0, m0), (0.0, 0.0));

        // A constant offset outside the region scores (|c|, |c|).
        let mut shifted = a.clone();
        for r in 0..8 {
            for c in 0..8 {
                if !region.contains((r, c)) {
                    shifted.data[(r, c, pc)] -= 0.35;
                }
            }
        }
        let (rc, mc) = nontarget_scores(&a, &shifted, &region).unwrap();
        assert_abs_diff_eq!(rc, 0.35, epsilon = 1e-12);
        assert_abs_diff_eq!(mc, 0.35, epsilon = 1e-12);
    }

    #[test]
    fn profile_reports_levels_and_sparsity() {
        let spec = Arc::new(GridSpec::new(24, 24, 2, true, false).unwrap());
        let ch = spec.num_channels();
        let stats = NormStats::new(vec![0.0; ch], vec![1.0; ch]).unwrap();

        let zero = Perturbation::new(Array3::zeros((24, 24, ch)), &spec).unwrap();
        let rows = perturbation_profile(&zero, &spec, &stats).unwrap();
        // T, u, v at each of two levels.
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.l2 == 0.0 && r.sparsity == 1.0));

        let mut d = Array3::zeros((24, 24, ch));
        d[(5, 7, spec.wind_u(1))] = 3.0;
        let delta = Perturbation::new(d, &spec).unwrap();
        let rows = perturbation_profile(&delta, &spec, &stats).unwrap();
        let hit = rows
            .iter()
            .find(|r| r.variable == "u" && r.level == 1)
            .unwrap();
        assert_abs_diff_eq!(hit.l2, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(hit.sparsity, 575.0 / 576.0, epsilon = 1e-12);
        for r in rows.iter().filter(|r| !(r.variable == "u" && r.level == 1)) {
            assert_eq!(r.l2, 0.0);
            assert_eq!(r.sparsity, 1.0);
        }

        // Scale 2 halves the normalized value; sparsity uses the scaled one.
        let stats2 = NormStats::new(vec![0.0; ch], vec![2.0; ch]).unwrap();
        let rows = perturbation_profile(&delta, &spec, &stats2).unwrap();
        let hit = rows
            .iter()
            .find(|r| r.variable == "u" && r.level == 1)
            .unwrap();
        assert_abs_diff_eq!(hit.l2, 1.5, epsilon = 1e-12);
    }

    fn random_trace(spec: &GridSpec, hidden: usize, steps: usize, inst: u64) -> Vec<Vec<f64>> {
        let mut rng = stream(51, Purpose::Diagnostics, inst);
        (0..steps)
            .map(|_| {
                (0..spec.cells() * hidden)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        e
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn latent_deviation_hits_the_trivial_anchors() {
        let spec = spec_8x8();
        let region = region_at(&spec, (3, 3), 1);
        let trace = random_trace(&spec, 4, 5, 0);

        let same = latent_deviation(&trace, &trace, &spec, &region).unwrap();
        assert_eq!(same.len(), 5);
        for s in &same {
            assert_eq!(s.rmse_in, 0.0);
            assert_eq!(s.rmse_out, 0.0);
            assert_abs_diff_eq!(s.cosine_in, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(s.cosine_out, 1.0, epsilon = 1e-12);
        }

        let flipped: Vec<Vec<f64>> = trace
            .iter()
            .map(|s| s.iter().map(|v| -v).collect())
            .collect();
        let anti = latent_deviation(&trace, &flipped, &spec, &region).unwrap();
        for s in &anti {
            assert_abs_diff_eq!(s.cosine_in, -1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(s.cosine_out, -1.0, epsilon = 1e-12);
        }

        let short = trace[..4].to_vec();
        assert!(matches!(
            latent_deviation(&trace, &short, &spec, &region),
            Err(MetricsError::TraceMismatch { a: 5, b: 4 })
        ));
    }

    #[test]
    fn latent_deviation_matches_a_per_cell_oracle() {
        let spec = spec_8x8();
        let region = region_at(&spec, (5, 2), 2);
        let hidden = 3;
        let ta = random_trace(&spec, hidden, 4, 1);
        let tb = random_trace(&spec, hidden, 4, 2);
        let got = latent_deviation(&ta, &tb, &spec, &region).unwrap();

        for (step, s) in got.iter().enumerate() {
            let mut sq = [0.0f64; 2];
            let mut cos = [0.0f64; 2];
            let mut n = [0usize; 2];
            for r in 0..8 {
                for c in 0..8 {
                    let side = usize::from(!region.contains((r, c)));
                    let cell = r * 8 + c;
                    let u = &ta[step][cell * hidden..(cell + 1) * hidden];
                    let v = &tb[step][cell * hidden..(cell + 1) * hidden];
                    let mut dot = 0.0;
                    let mut nu = 0.0;
                    let mut nv = 0.0;
                    for i in 0..hidden {
                        sq[side] += (u[i] - v[i]) * (u[i] - v[i]);
                        dot += u[i] * v[i];
                        nu += u[i] * u[i];
                        nv += v[i] * v[i];
                    }
                    cos[side] += dot / (nu.sqrt() * nv.sqrt());
                    n[side] += 1;
                }
            }
            assert_eq!(n[0] + n[1], 64);
            assert_abs_diff_eq!(
                s.rmse_in,
                (sq[0] / (n[0] * hidden) as f64).sqrt(),
                epsilon = 1e-12
            );
            assert_abs_diff_eq!(
                s.rmse_out,
                (sq[1] / (n[1] * hidden) as f64).sqrt(),
                epsilon = 1e-12
            );
            assert_abs_diff_eq!(s.cosine_in, cos[0] / n[0] as f64, epsilon = 1e-12);
            assert_abs_diff_eq!(s.cosine_out, cos[1] / n[1] as f64, epsilon = 1e-12);
            assert!(s.cosine_in.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn cell_cosine_zero_vector_conventions_hold() {
        assert_eq!(cell_cosine(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_eq!(cell_cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        assert_abs_diff_eq!(cell_cosine(&[1.0, 0.0], &[0.5, 0.0]), 1.0, epsilon = 1e-12);
    }

    /// Loop re-derivation of fss with explicit window bookkeeping.
    fn fss_oracle(
        std_fc: &AtmosphericState,
        int_fc: &AtmosphericState,
        tau: f64,
        region: &TargetRegion,
        k: usize,
    ) -> f64 {
        let spec = &std_fc.spec;
        let pc = spec.precipitation();
        let half = (k / 2) as i64;
        let mut num = 0.0;
        let mut den = 0.0;
        for r in 0..spec.height as i64 {
            for c in 0..spec.width as i64 {
                if region.contains((r as usize, c as usize)) {
                    continue;
                }
                let mut cnt = 0.0;
                let mut so = 0.0;
                let mut sf = 0.0;
                for rr in r - half..=r + half {
                    for cc in c - half..=c + half {
                        let (Some(sr), Some(sc)) = (spec.resolve_row(rr), spec.resolve_col(cc))
                        else {
                            continue;
                        };
                        if region.contains((sr, sc)) {
                            continue;
                        }
                        cnt += 1.0;
                        if std_fc.data[(sr, sc, pc)] > tau {
                            so += 1.0;
                        }
                        if int_fc.data[(sr, sc, pc)] > tau {
                            sf += 1.0;
                        }
                    }
                }
                let (f, o) = (sf / cnt, so / cnt);
                num += (f - o) * (f - o);
                den += f * f + o * o;
            }
        }
        if den == 0.0 {
            1.0
        } else {
            1.0 - num / den
        }
    }

    #[test]
    fn fss_agrees_with_the_window_oracle_on_random_fields() {
        let spec = spec_8x8();
        let region = region_at(&spec, (4, 4), 1);
        let thr = EventThreshold { tau: 0.12 };
        let mut rng = stream(52, Purpose::Diagnostics, 0);
        for trial in 0..6 {
            let mut pa = Array2::zeros((8, 8));
            let mut pb = Array2::zeros((8, 8));
            for r in 0..8 {
                for c in 0..8 {
                    pa[(r, c)] = rng.random::<f64>() * 0.3;
                    pb[(r, c)] = rng.random::<f64>() * 0.3;
                }
            }
            let a = state_with_precip(&spec, &pa, trial);
            let b = state_with_precip(&spec, &pb, trial);
            for k in [1usize, 3, 5] {
                let got = fss(&a, &b, thr, &region, k).unwrap();
                let want = fss_oracle(&a, &b, thr.tau, &region, k);
                assert_abs_diff_eq!(got, want, epsilon = 1e-12);
                assert!((0.0..=1.0 + 1e-12).contains(&got));
            }
        }
    }

    #[test]
    fn fss_anchors_identical_disjoint_and_empty() {
        let spec = Arc::new(GridSpec::new(9, 9, 2, false, false).unwrap());
        let region = region_at(&spec, (0, 0), 0);
        let thr = EventThreshold { tau: 0.5 };

        let a = random_state(&spec, 3, 0);
        assert_eq!(fss(&a, &a, thr, &region, 3).unwrap(), 1.0);

        // Single exceedances nine cells apart never share a 3x3 window.
        let mut pa = Array2::zeros((9, 9));
        let mut pb = Array2::zeros((9, 9));
        pa[(2, 2)] = 1.0;
        pb[(2, 8)] = 1.0;
        let fa = state_with_precip(&spec, &pa, 0);
        let fb = state_with_precip(&spec, &pb, 0);
        assert_abs_diff_eq!(fss(&fa, &fb, thr, &region, 3).unwrap(), 0.0, epsilon = 1e-12);

        let dry = state_with_precip(&spec, &Array2::zeros((9, 9)), 0);
        assert_eq!(fss(&dry, &dry, thr, &region, 3).unwrap(), 1.0);

        assert!(matches!(
            fss(&fa, &fb, thr, &region, 2),
            Err(MetricsError::BadWindow { .. })
        ));
        assert!(matches!(
            fss(&fa, &fb, thr, &region, 11),
            Err(MetricsError::BadWindow { .. })
        ));
    }

    #[test]
    fn fss_grows_with_window_width_across_a_shift() {
        // One 2-cell blob displaced by 4 columns; skill appears once the
        // window spans the displacement.
        let spec = Arc::new(GridSpec::new(9, 9, 2, false, false).unwrap());
        let region = region_at(&spec, (0, 8), 0);
        let thr = EventThreshold { tau: 0.5 };
        let mut pa = Array2::zeros((9, 9));
        let mut pb = Array2::zeros((9, 9));
        for (r, c) in [(4, 2), (5, 2)] {
            pa[(r, c)] = 1.0;
            pb[(r, c + 4)] = 1.0;
        }
        let fa = state_with_precip(&spec, &pa, 0);
        let fb = state_with_precip(&spec, &pb, 0);
        let vals: Vec<f64> = [1usize, 3, 5, 7, 9]
            .iter()
            .map(|&k| fss(&fa, &fb, thr, &region, k).unwrap())
            .collect();
        for w in vals.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "fss fell from {} to {}", w[0], w[1]);
        }
        assert_eq!(vals[0], 0.0);
        assert!(vals[4] > 0.5);
    }

    #[test]
    fn fss_shifted_hand_field_matches_the_oracle() {
        // 5x5 active patch on a clamped grid, intervention shifted one cell
        // east, k = 3; the oracle enumerates every window.
        let spec = Arc::new(GridSpec::new(8, 8, 2, false, false).unwrap());
        let region = region_at(&spec, (7, 7), 0);
        let thr = EventThreshold { tau: 0.5 };
        let mut pa = Array2::zeros((8, 8));
        let mut pb = Array2::zeros((8, 8));
        for r in 0..5 {
            for c in 0..5 {
                if (r + c) % 2 == 0 {
                    pa[(r, c)] = 1.0;
                    pb[(r, c + 1)] = 1.0;
                }
            }
        }
        let fa = state_with_precip(&spec, &pa, 0);
        let fb = state_with_precip(&spec, &pb, 0);
        let got = fss(&fa, &fb, thr, &region, 3).unwrap();
        let want = fss_oracle(&fa, &fb, thr.tau, &region, 3);
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        assert!(got > 0.0 && got < 1.0);
    }

    #[test]
    fn scores_cover_a_real_guided_event() {
        let fx = crate::testkit::fixture();
        let ev = &fx.events[0];
        let (xp, xc) = fx.intervention_pair(ev);
        let cfg = crate::guidance::GuidanceConfig::new(
            crate::guidance::lambda_grid(1.0)[2],
            ev.region.clone(),
        );
        let mut rng = stream(900, Purpose::GuidanceNoise, 0);
        let run = crate::guidance::guided_sample(&fx.bundle, xp, xc, &cfg, &mut rng).unwrap();

        let red = reduction_ratio(&run.unguided, &run.guided, &ev.region).unwrap();
        if let Some(v) = red {
            assert!(v <= 1.0 + 1e-12);
        }
        // The guided forecast shares the unguided time index, so anomaly
        // slots line up.
        let sr = success_rate(&run.unguided, &run.guided, &fx.clim, fx.tau, &ev.region).unwrap();
        if let Some(v) = sr {
            assert!((0.0..=1.0).contains(&v));
        }
        let (rmse, mae) = nontarget_scores(&run.unguided, &run.guided, &ev.region).unwrap();
        assert!(rmse >= mae && mae >= 0.0);
        for k in [1usize, 3, 5] {
            let v = fss(&run.unguided, &run.guided, fx.tau, &ev.region, k).unwrap();
            assert!((0.0..=1.0 + 1e-12).contains(&v));
        }
        let rows = perturbation_profile(
            &run.perturbation,
            fx.traj.spec(),
            &fx.bundle.state_stats,
        )
        .unwrap();
        assert_eq!(rows.len(), 3 * fx.traj.spec().levels);
        assert!(rows.iter().all(|r| r.l2.is_finite() && (0.0..=1.0).contains(&r.sparsity)));
    }

    #[test]
    fn aggregate_skips_undefined_rows() {
        let row = |red: Option<f64>, fss1: f64| EventEval {
            event_index: 0,
            method: "m".into(),
            reduction: red,
            success: red.map(|_| 0.5),
            nontarget_rmse: 0.2,
            nontarget_mae: 0.1,
            fss: vec![(1, fss1), (3, 0.8)],
            profile: vec![],
            latent: vec![],
            transfer_reduction: None,
        };
        let rows = [row(Some(0.6), 0.4), row(None, 0.6), row(Some(0.2), 0.8)];
        let refs: Vec<&EventEval> = rows.iter().collect();
        let agg = aggregate("m", &refs);
        assert_eq!(agg.events, 3);
        assert_abs_diff_eq!(agg.mean_reduction.unwrap(), 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(agg.mean_success.unwrap(), 0.5, epsilon = 1e-12);
        let f1 = agg.mean_fss.iter().find(|&&(k, _)| k == 1).unwrap().1;
        assert_abs_diff_eq!(f1, 0.6, epsilon = 1e-12);
        assert_eq!(agg.mean_transfer_reduction, None);

        let empty = aggregate("m", &[]);
        assert_eq!(empty.events, 0);
        assert_eq!(empty.mean_reduction, None);
    }
}
