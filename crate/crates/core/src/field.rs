//! Gridded tensor fields, channel indexing, normalization statistics and
//! target-region geometry shared by every other module.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

/// A 0/1 spatial field over the grid.
pub type BinaryField = Array2<f64>;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("channel count mismatch: stats have {stats}, state has {state}")]
    ChannelMismatch { stats: usize, state: usize },
    #[error("region cell ({row}, {col}) outside {height}x{width} grid")]
    OutOfBounds {
        row: i64,
        col: i64,
        height: usize,
        width: usize,
    },
    #[error("empty target region")]
    EmptyRegion,
    #[error("non-finite value in channel `{0}`")]
    NonFinite(String),
    #[error("state invariant violated: {0}")]
    Invariant(String),
}

/// Physical role of one grid channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VarKind {
    Temperature,
    WindU,
    WindV,
    Humidity,
    Precipitation,
}

impl VarKind {
    pub fn label(self) -> &'static str {
        match self {
            VarKind::Temperature => "t",
            VarKind::WindU => "u",
            VarKind::WindV => "v",
            VarKind::Humidity => "q",
            VarKind::Precipitation => "pr",
        }
    }
}

/// One channel of the state tensor: a variable at a pressure level, or a
/// surface field (`level == None`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelDesc {
    pub kind: VarKind,
    pub level: Option<usize>,
    pub perturbable: bool,
}

impl ChannelDesc {
    pub fn name(&self) -> String {
        match self.level {
            Some(l) => format!("{}{}", self.kind.label(), l),
            None => self.kind.label().to_string(),
        }
    }
}

/// Grid geometry and channel layout.
///
/// Channels are ordered temperature per level, then u-wind per level, then
/// v-wind per level, then surface humidity, then surface precipitation.
/// Columns may wrap (zonal band); rows may wrap only in test configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub levels: usize,
    pub channels: Vec<ChannelDesc>,
    pub periodic_x: bool,
    pub periodic_y: bool,
}

impl GridSpec {
    /// Standard layout: `3*levels + 2` channels. Temperature and both wind
    /// components are perturbable at every level; humidity and precipitation
    /// never are.
    pub fn new(
        height: usize,
        width: usize,
        levels: usize,
        periodic_x: bool,
        periodic_y: bool,
    ) -> Result<Self, FieldError> {
        let mut channels = Vec::with_capacity(3 * levels + 2);
        for kind in [VarKind::Temperature, VarKind::WindU, VarKind::WindV] {
            for l in 0..levels {
                channels.push(ChannelDesc {
                    kind,
                    level: Some(l),
                    perturbable: true,
                });
            }
        }
        channels.push(ChannelDesc {
            kind: VarKind::Humidity,
            level: None,
            perturbable: false,
        });
        channels.push(ChannelDesc {
            kind: VarKind::Precipitation,
            level: None,
            perturbable: false,
        });
        let spec = Self {
            height,
            width,
            levels,
            channels,
            periodic_x,
            periodic_y,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if self.height < 8 || self.width < 8 {
            return Err(FieldError::InvalidGrid(format!(
                "grid must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.levels < 2 {
            return Err(FieldError::InvalidGrid(format!(
                "need at least 2 pressure levels, got {}",
                self.levels
            )));
        }
        let precip: Vec<_> = self
            .channels
            .iter()
            .filter(|c| c.kind == VarKind::Precipitation)
            .collect();
        if precip.len() != 1 || precip[0].level.is_some() {
            return Err(FieldError::InvalidGrid(
                "exactly one surface precipitation channel required".into(),
            ));
        }
        for c in &self.channels {
            let should_perturb =
                matches!(c.kind, VarKind::Temperature | VarKind::WindU | VarKind::WindV);
            if c.perturbable != should_perturb {
                return Err(FieldError::InvalidGrid(format!(
                    "channel `{}` has perturbable={}, expected {}",
                    c.name(),
                    c.perturbable,
                    should_perturb
                )));
            }
        }
        Ok(())
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    fn find(&self, kind: VarKind, level: Option<usize>) -> usize {
        self.channels
            .iter()
            .position(|c| c.kind == kind && c.level == level)
            .unwrap_or_else(|| panic!("channel {kind:?}@{level:?} missing"))
    }

    pub fn temperature(&self, level: usize) -> usize {
        self.find(VarKind::Temperature, Some(level))
    }

    pub fn wind_u(&self, level: usize) -> usize {
        self.find(VarKind::WindU, Some(level))
    }

    pub fn wind_v(&self, level: usize) -> usize {
        self.find(VarKind::WindV, Some(level))
    }

    pub fn humidity(&self) -> usize {
        self.find(VarKind::Humidity, None)
    }

    pub fn precipitation(&self) -> usize {
        self.find(VarKind::Precipitation, None)
    }

    /// 1.0 for channels a perturbation may touch, 0.0 elsewhere.
    pub fn perturbable_mask(&self) -> Array1<f64> {
        Array1::from_iter(
            self.channels
                .iter()
                .map(|c| if c.perturbable { 1.0 } else { 0.0 }),
        )
    }

    /// Wrap or clip a signed row index; `None` if it falls off a clamped edge.
    pub fn resolve_row(&self, row: i64) -> Option<usize> {
        resolve_axis(row, self.height, self.periodic_y)
    }

    /// Wrap or clip a signed column index; `None` if it falls off a clamped edge.
    pub fn resolve_col(&self, col: i64) -> Option<usize> {
        resolve_axis(col, self.width, self.periodic_x)
    }

    /// Grid distance between two cells, cyclic along periodic axes.
    pub fn distance(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        let dr = axis_delta(a.0, b.0, self.height, self.periodic_y);
        let dc = axis_delta(a.1, b.1, self.width, self.periodic_x);
        ((dr * dr + dc * dc) as f64).sqrt()
    }
}

fn resolve_axis(idx: i64, len: usize, periodic: bool) -> Option<usize> {
    let n = len as i64;
    if periodic {
        Some(idx.rem_euclid(n) as usize)
    } else if (0..n).contains(&idx) {
        Some(idx as usize)
    } else {
        None
    }
}

fn axis_delta(a: usize, b: usize, len: usize, periodic: bool) -> i64 {
    let d = (a as i64 - b as i64).abs();
    if periodic {
        d.min(len as i64 - d)
    } else {
        d
    }
}

/// One gridded snapshot: `height x width x channels` tensor at a time step.
///
/// `time_index` counts steps of the generating trajectory; half-step
/// trajectories count half steps.
#[derive(Debug, Clone)]
pub struct AtmosphericState {
    pub spec: Arc<GridSpec>,
    pub data: Array3<f64>,
    pub time_index: i64,
}

impl AtmosphericState {
    pub fn new(spec: Arc<GridSpec>, data: Array3<f64>, time_index: i64) -> Self {
        debug_assert_eq!(
            data.dim(),
            (spec.height, spec.width, spec.num_channels()),
            "state tensor shape must match grid spec"
        );
        Self {
            spec,
            data,
            time_index,
        }
    }

    pub fn zeros(spec: Arc<GridSpec>, time_index: i64) -> Self {
        let data = Array3::zeros((spec.height, spec.width, spec.num_channels()));
        Self::new(spec, data, time_index)
    }

    /// Check the truth-state invariants: finite everywhere, precipitation
    /// nonnegative, humidity within `[0, q_max]`.
    pub fn validate(&self, q_max: f64) -> Result<(), FieldError> {
        let pc = self.spec.precipitation();
        let qc = self.spec.humidity();
        for ((_, _, c), &v) in self.data.indexed_iter() {
            if !v.is_finite() {
                return Err(FieldError::NonFinite(self.spec.channels[c].name()));
            }
            if c == pc && v < 0.0 {
                return Err(FieldError::Invariant(format!(
                    "negative precipitation {v}"
                )));
            }
            if c == qc && !(0.0..=q_max).contains(&v) {
                return Err(FieldError::Invariant(format!(
                    "humidity {v} outside [0, {q_max}]"
                )));
            }
        }
        Ok(())
    }

    pub fn channel(&self, c: usize) -> Array2<f64> {
        self.data.index_axis(ndarray::Axis(2), c).to_owned()
    }

    pub fn precip(&self) -> Array2<f64> {
        self.channel(self.spec.precipitation())
    }
}

/// Per-channel mean and scale for mapping between physical and normalized
/// units. The scale vector is the diagonal of the inverse-normalization
/// matrix applied when reconstructing forecasts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl NormStats {
    pub fn new(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self, FieldError> {
        if mean.len() != scale.len() {
            return Err(FieldError::ChannelMismatch {
                stats: mean.len(),
                state: scale.len(),
            });
        }
        if scale.iter().any(|&s| !(s > 0.0)) {
            return Err(FieldError::InvalidGrid(
                "normalization scale must be strictly positive".into(),
            ));
        }
        Ok(Self { mean, scale })
    }

    /// Per-channel mean and standard deviation over a set of tensors.
    /// Channels with zero variance get scale 1 so the map stays invertible.
    pub fn from_tensors<'a, I>(tensors: I, num_channels: usize) -> Result<Self, FieldError>
    where
        I: IntoIterator<Item = &'a Array3<f64>>,
    {
        let mut sum = vec![0.0; num_channels];
        let mut sum_sq = vec![0.0; num_channels];
        let mut count = 0usize;
        for t in tensors {
            debug_assert_eq!(t.dim().2, num_channels);
            count += t.dim().0 * t.dim().1;
            for ((_, _, c), &v) in t.indexed_iter() {
                sum[c] += v;
                sum_sq[c] += v * v;
            }
        }
        if count == 0 {
            return Err(FieldError::InvalidGrid(
                "cannot compute statistics from empty data".into(),
            ));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let scale: Vec<f64> = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| {
                let var = (sq / n - m * m).max(0.0);
                let sd = var.sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self::new(mean, scale)
    }

    pub fn num_channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, channels: usize) -> Result<(), FieldError> {
        if self.num_channels() != channels {
            return Err(FieldError::ChannelMismatch {
                stats: self.num_channels(),
                state: channels,
            });
        }
        Ok(())
    }

    /// `(value - mean) / scale` per channel.
    pub fn normalize(&self, data: &Array3<f64>) -> Result<Array3<f64>, FieldError> {
        self.check(data.dim().2)?;
        let mut out = data.clone();
        for ((_, _, c), v) in out.indexed_iter_mut() {
            *v = (*v - self.mean[c]) / self.scale[c];
        }
        Ok(out)
    }

    /// `mean + scale * value` per channel.
    pub fn denormalize(&self, data: &Array3<f64>) -> Result<Array3<f64>, FieldError> {
        self.check(data.dim().2)?;
        let mut out = data.clone();
        for ((_, _, c), v) in out.indexed_iter_mut() {
            *v = self.mean[c] + self.scale[c] * *v;
        }
        Ok(out)
    }

    /// Scale-only map for differences: `delta / scale` per channel.
    pub fn normalize_delta(&self, data: &Array3<f64>) -> Result<Array3<f64>, FieldError> {
        self.check(data.dim().2)?;
        let mut out = data.clone();
        for ((_, _, c), v) in out.indexed_iter_mut() {
            *v /= self.scale[c];
        }
        Ok(out)
    }

    /// Inverse of [`normalize_delta`](Self::normalize_delta).
    pub fn denormalize_delta(&self, data: &Array3<f64>) -> Result<Array3<f64>, FieldError> {
        self.check(data.dim().2)?;
        let mut out = data.clone();
        for ((_, _, c), v) in out.indexed_iter_mut() {
            *v *= self.scale[c];
        }
        Ok(out)
    }
}

/// Normalize a state tensor with the given statistics.
pub fn normalize(state: &AtmosphericState, stats: &NormStats) -> Result<Array3<f64>, FieldError> {
    stats.normalize(&state.data)
}

/// Axis-aligned box of cells around an exceedance point, clipped at clamped
/// grid edges and wrapped along periodic axes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetRegion {
    pub center: (usize, usize),
    pub half_extent: usize,
    pub cells: Vec<(usize, usize)>,
}

impl TargetRegion {
    pub fn new(
        center: (usize, usize),
        half_extent: usize,
        spec: &GridSpec,
    ) -> Result<Self, FieldError> {
        if center.0 >= spec.height || center.1 >= spec.width {
            return Err(FieldError::OutOfBounds {
                row: center.0 as i64,
                col: center.1 as i64,
                height: spec.height,
                width: spec.width,
            });
        }
        let he = half_extent as i64;
        let mut cells = Vec::new();
        for dr in -he..=he {
            let Some(r) = spec.resolve_row(center.0 as i64 + dr) else {
                continue;
            };
            for dc in -he..=he {
                let Some(c) = spec.resolve_col(center.1 as i64 + dc) else {
                    continue;
                };
                cells.push((r, c));
            }
        }
        cells.sort_unstable();
        cells.dedup();
        if cells.is_empty() {
            return Err(FieldError::EmptyRegion);
        }
        Ok(Self {
            center,
            half_extent,
            cells,
        })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn contains(&self, cell: (usize, usize)) -> bool {
        self.cells.binary_search(&cell).is_ok()
    }
}

/// 1 on region cells, 0 elsewhere.
pub fn region_mask(region: &TargetRegion, spec: &GridSpec) -> Result<BinaryField, FieldError> {
    let mut mask = Array2::zeros((spec.height, spec.width));
    for &(r, c) in &region.cells {
        if r >= spec.height || c >= spec.width {
            return Err(FieldError::OutOfBounds {
                row: r as i64,
                col: c as i64,
                height: spec.height,
                width: spec.width,
            });
        }
        mask[(r, c)] = 1.0;
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(periodic_x: bool) -> GridSpec {
        GridSpec::new(16, 16, 3, periodic_x, false).unwrap()
    }

    #[test]
    fn standard_layout_has_expected_channels() {
        let s = spec(true);
        assert_eq!(s.num_channels(), 11);
        assert_eq!(s.temperature(0), 0);
        assert_eq!(s.wind_u(1), 4);
        assert_eq!(s.wind_v(2), 8);
        assert_eq!(s.humidity(), 9);
        assert_eq!(s.precipitation(), 10);
        let mask = s.perturbable_mask();
        assert_eq!(mask.iter().filter(|&&m| m == 1.0).count(), 9);
        assert_eq!(mask[9], 0.0);
        assert_eq!(mask[10], 0.0);
    }

    #[test]
    fn grid_invariants_rejected() {
        assert!(GridSpec::new(4, 16, 3, true, false).is_err());
        assert!(GridSpec::new(16, 16, 1, true, false).is_err());
    }

    #[test]
    fn normalize_centering_identity() {
        let s = Arc::new(spec(true));
        let stats = NormStats::new(vec![2.0; 11], vec![3.0; 11]).unwrap();
        let mut st = AtmosphericState::zeros(s, 0);
        st.data.fill(2.0);
        let z = normalize(&st, &stats).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_hand_value() {
        // single-channel mean=2, scale=4, value=10 -> 2.0
        let stats = NormStats::new(vec![2.0], vec![4.0]).unwrap();
        let data = Array3::from_elem((1, 1, 1), 10.0);
        let z = stats.normalize(&data).unwrap();
        assert_eq!(z[(0, 0, 0)], 2.0);
    }

    #[test]
    fn channel_mismatch_is_configuration_error() {
        let s = Arc::new(spec(true));
        let stats = NormStats::new(vec![0.0; 4], vec![1.0; 4]).unwrap();
        let st = AtmosphericState::zeros(s, 0);
        assert!(matches!(
            normalize(&st, &stats),
            Err(FieldError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn region_singleton() {
        let s = spec(false);
        let r = TargetRegion::new((5, 5), 0, &s).unwrap();
        assert_eq!(r.len(), 1);
        let mask = region_mask(&r, &s).unwrap();
        assert_eq!(mask.sum(), 1.0);
        assert_eq!(mask[(5, 5)], 1.0);
    }

    #[test]
    fn region_corner_clipped_to_nine() {
        // center (0,0), half_extent 2 on a fully clamped 16x16 grid: the box
        // clips to rows 0..=2 and cols 0..=2.
        let s = spec(false);
        let r = TargetRegion::new((0, 0), 2, &s).unwrap();
        assert_eq!(r.len(), 9);
        assert_eq!(region_mask(&r, &s).unwrap().sum(), 9.0);
    }

    #[test]
    fn region_corner_wraps_when_columns_periodic() {
        let s = spec(true);
        let r = TargetRegion::new((0, 0), 2, &s).unwrap();
        // 3 rows (clipped) x 5 cols (wrapped) = 15 cells
        assert_eq!(r.len(), 15);
        assert!(r.contains((0, 14)));
        assert!(r.contains((2, 15)));
    }

    #[test]
    fn region_interior_full_box() {
        let s = spec(false);
        let r = TargetRegion::new((8, 8), 2, &s).unwrap();
        assert_eq!(r.len(), 25);
    }

    #[test]
    fn cyclic_distance() {
        let s = spec(true);
        assert_eq!(s.distance((0, 0), (0, 15)), 1.0);
        assert_eq!(s.distance((0, 0), (0, 8)), 8.0);
        let clamped = spec(false);
        assert_eq!(clamped.distance((0, 0), (0, 15)), 15.0);
    }

    #[test]
    fn validate_catches_bad_states() {
        let s = Arc::new(spec(true));
        let mut st = AtmosphericState::zeros(s.clone(), 0);
        st.data[(0, 0, s.precipitation())] = -0.5;
        assert!(st.validate(1.0).is_err());
        let mut st = AtmosphericState::zeros(s.clone(), 0);
        st.data[(1, 1, s.humidity())] = 2.0;
        assert!(st.validate(1.0).is_err());
        let mut st = AtmosphericState::zeros(s, 0);
        st.data[(2, 2, 0)] = f64::NAN;
        assert!(st.validate(1.0).is_err());
    }
}
