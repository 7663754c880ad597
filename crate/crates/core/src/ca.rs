//! Coded apertures, their reduced parameterizations, manufacturing noise and
//! export-time quantization.
//!
//! A [`CodedApertureSet`] holds `S` shots of an `M x N x L` aperture in a
//! row-major `S x M x N x L` array. Training never touches it directly: the
//! trainable values live in a [`CaParameterization`], which [`expand`]s into
//! the full set and pulls gradients back through [`expand_backward`].

use ndarray::{Array2, Array4, ArrayView3, ArrayView4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};

/// `S x M x N x L` array of aperture values. Entries are always finite.
#[derive(Clone, Debug, PartialEq)]
pub struct CodedApertureSet {
    values: Array4<f64>,
}

impl CodedApertureSet {
    pub fn new(values: Array4<f64>) -> Result<Self> {
        let (s, m, n, l) = values.dim();
        if s == 0 || m == 0 || n == 0 || l == 0 {
            return shape_err(format!("aperture dimensions must be positive, got {s}x{m}x{n}x{l}"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return param_err("aperture values must be finite");
        }
        Ok(Self {
            values: values.as_standard_layout().into_owned(),
        })
    }

    pub fn zeros(shots: usize, rows: usize, cols: usize, planes: usize) -> Result<Self> {
        Self::new(Array4::zeros((shots, rows, cols, planes)))
    }

    pub fn from_vec(dims: (usize, usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        let len = data.len();
        let values = Array4::from_shape_vec(dims, data)
            .map_err(|_| Error::Shape(format!("{len} values do not fill a {dims:?} aperture")))?;
        Self::new(values)
    }

    pub fn shots(&self) -> usize {
        self.values.dim().0
    }

    pub fn rows(&self) -> usize {
        self.values.dim().1
    }

    pub fn cols(&self) -> usize {
        self.values.dim().2
    }

    pub fn planes(&self) -> usize {
        self.values.dim().3
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.values.dim()
    }

    /// Entries per shot, `M * N * L`.
    pub fn shot_len(&self) -> usize {
        self.rows() * self.cols() * self.planes()
    }

    pub fn values(&self) -> ArrayView4<'_, f64> {
        self.values.view()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice().expect("aperture is kept in standard layout")
    }

    /// Row-major values of one shot.
    pub fn shot_slice(&self, shot: usize) -> &[f64] {
        let len = self.shot_len();
        &self.as_slice()[shot * len..(shot + 1) * len]
    }

    pub fn shot(&self, shot: usize) -> ArrayView3<'_, f64> {
        self.values.index_axis(Axis(0), shot)
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    pub fn into_array(self) -> Array4<f64> {
        self.values
    }

    /// Copy with each listed shot replaced by zeros.
    pub(crate) fn with_zeroed_shots(&self, active: &[bool]) -> Self {
        let mut values = self.values.clone();
        for (s, &on) in active.iter().enumerate() {
            if !on {
                values.index_axis_mut(Axis(0), s).fill(0.0);
            }
        }
        Self { values }
    }
}

/// Initial value range for fresh trainables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CaInit {
    /// Uniform(0.4, 0.6), for designs targeting {0, 1}.
    #[default]
    ZeroOne,
    /// Uniform(-0.1, 0.1), for designs targeting {-1, 1}.
    PlusMinusOne,
}

impl CaInit {
    pub fn range(self) -> (f64, f64) {
        match self {
            CaInit::ZeroOne => (0.4, 0.6),
            CaInit::PlusMinusOne => (-0.1, 0.1),
        }
    }
}

/// How the aperture set is generated from trainable values.
#[derive(Clone, Debug, PartialEq)]
pub enum CaParameterization {
    /// One trainable per aperture entry.
    Dense { values: Array4<f64> },
    /// A `S x dn x dm x L` kernel tiled periodically over `rows x cols`.
    Kronecker {
        kernel: Array4<f64>,
        rows: usize,
        cols: usize,
    },
    /// Kernel entries are combinations of `V` fixed filters:
    /// `Q[s,i,j,l] = sum_v filters[v,l] * weights[s,i,j,v]`, then tiled.
    Colored {
        weights: Array4<f64>,
        filters: Array2<f64>,
        rows: usize,
        cols: usize,
    },
}

fn uniform_array<R: Rng + ?Sized>(dims: (usize, usize, usize, usize), lo: f64, hi: f64, rng: &mut R) -> Array4<f64> {
    if lo == hi {
        return Array4::from_elem(dims, lo);
    }
    let dist = Uniform::new(lo, hi).expect("lo < hi");
    Array4::from_shape_simple_fn(dims, || dist.sample(rng))
}

impl CaParameterization {
    pub fn dense(ca: CodedApertureSet) -> Self {
        CaParameterization::Dense {
            values: ca.into_array(),
        }
    }

    pub fn init_dense<R: Rng + ?Sized>(
        shots: usize,
        rows: usize,
        cols: usize,
        planes: usize,
        init: CaInit,
        rng: &mut R,
    ) -> Result<Self> {
        let (lo, hi) = init.range();
        let p = CaParameterization::Dense {
            values: uniform_array((shots, rows, cols, planes), lo, hi, rng),
        };
        p.validate()?;
        Ok(p)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn init_kronecker<R: Rng + ?Sized>(
        shots: usize,
        rows: usize,
        cols: usize,
        kernel_rows: usize,
        kernel_cols: usize,
        planes: usize,
        init: CaInit,
        rng: &mut R,
    ) -> Result<Self> {
        let (lo, hi) = init.range();
        let p = CaParameterization::Kronecker {
            kernel: uniform_array((shots, kernel_rows, kernel_cols, planes), lo, hi, rng),
            rows,
            cols,
        };
        p.validate()?;
        Ok(p)
    }

    /// Colored kernel whose weights start so that the combined kernel sits
    /// near the middle of the `init` range.
    #[allow(clippy::too_many_arguments)]
    pub fn init_colored<R: Rng + ?Sized>(
        shots: usize,
        rows: usize,
        cols: usize,
        kernel_rows: usize,
        kernel_cols: usize,
        filters: Array2<f64>,
        init: CaInit,
        rng: &mut R,
    ) -> Result<Self> {
        let (lo, hi) = init.range();
        let (v, l) = filters.dim();
        let mean_col_sum = if l == 0 { 1.0 } else { filters.sum() / l as f64 };
        let scale = if mean_col_sum > 0.0 { 1.0 / mean_col_sum } else { 1.0 };
        let p = CaParameterization::Colored {
            weights: uniform_array((shots, kernel_rows, kernel_cols, v), lo * scale, hi * scale, rng),
            filters,
            rows,
            cols,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CaParameterization::Dense { values } => {
                CodedApertureSet::new(values.clone())?;
            }
            CaParameterization::Kronecker { kernel, rows, cols } => {
                let (s, dn, dm, l) = kernel.dim();
                check_tiling(s, dn, dm, l, *rows, *cols)?;
                if kernel.iter().any(|v| !v.is_finite()) {
                    return param_err("kernel values must be finite");
                }
            }
            CaParameterization::Colored {
                weights,
                filters,
                rows,
                cols,
            } => {
                let (s, dn, dm, v) = weights.dim();
                let (fv, l) = filters.dim();
                if fv != v {
                    return shape_err(format!("{v} weight channels but {fv} filters"));
                }
                check_tiling(s, dn, dm, l, *rows, *cols)?;
                if v > l {
                    return param_err(format!("filter count {v} exceeds plane count {l}"));
                }
                if filters.iter().any(|w| !(0.0..=1.0).contains(w)) {
                    return param_err("filter responses must lie in [0, 1]");
                }
                if weights.iter().any(|v| !v.is_finite()) {
                    return param_err("weights must be finite");
                }
            }
        }
        Ok(())
    }

    /// Output shape `(S, M, N, L)` of [`expand`].
    pub fn aperture_dim(&self) -> (usize, usize, usize, usize) {
        match self {
            CaParameterization::Dense { values } => values.dim(),
            CaParameterization::Kronecker { kernel, rows, cols } => {
                let (s, _, _, l) = kernel.dim();
                (s, *rows, *cols, l)
            }
            CaParameterization::Colored {
                weights,
                filters,
                rows,
                cols,
            } => (weights.dim().0, *rows, *cols, filters.dim().1),
        }
    }

    pub fn trainable_dim(&self) -> (usize, usize, usize, usize) {
        match self {
            CaParameterization::Dense { values } => values.dim(),
            CaParameterization::Kronecker { kernel, .. } => kernel.dim(),
            CaParameterization::Colored { weights, .. } => weights.dim(),
        }
    }

    pub fn trainables(&self) -> &[f64] {
        let arr = match self {
            CaParameterization::Dense { values } => values,
            CaParameterization::Kronecker { kernel, .. } => kernel,
            CaParameterization::Colored { weights, .. } => weights,
        };
        arr.as_slice().expect("trainables are kept in standard layout")
    }

    pub fn trainables_mut(&mut self) -> &mut [f64] {
        let arr = match self {
            CaParameterization::Dense { values } => values,
            CaParameterization::Kronecker { kernel, .. } => kernel,
            CaParameterization::Colored { weights, .. } => weights,
        };
        if !arr.is_standard_layout() {
            *arr = arr.as_standard_layout().into_owned();
        }
        arr.as_slice_mut().expect("standard layout")
    }
}

fn check_tiling(s: usize, dn: usize, dm: usize, l: usize, rows: usize, cols: usize) -> Result<()> {
    if s == 0 || dn == 0 || dm == 0 || l == 0 || rows == 0 || cols == 0 {
        return shape_err("kernel and aperture dimensions must be positive");
    }
    if !rows.is_multiple_of(dn) {
        return Err(Error::Divisibility {
            axis: "rows",
            extent: rows,
            kernel: dn,
        });
    }
    if !cols.is_multiple_of(dm) {
        return Err(Error::Divisibility {
            axis: "cols",
            extent: cols,
            kernel: dm,
        });
    }
    Ok(())
}

/// Number of trainable values behind a parameterization.
pub fn trainable_parameter_count(param: &CaParameterization) -> usize {
    let (a, b, c, d) = param.trainable_dim();
    a * b * c * d
}

fn colored_kernel(weights: &Array4<f64>, filters: &Array2<f64>) -> Array4<f64> {
    let (s, dn, dm, v) = weights.dim();
    let l = filters.dim().1;
    Array4::from_shape_fn((s, dn, dm, l), |(s, i, j, p)| {
        (0..v).map(|c| filters[[c, p]] * weights[[s, i, j, c]]).sum()
    })
}

fn tile(kernel: &Array4<f64>, rows: usize, cols: usize) -> Array4<f64> {
    let (s, dn, dm, l) = kernel.dim();
    Array4::from_shape_fn((s, rows, cols, l), |(s, i, j, p)| kernel[[s, i % dn, j % dm, p]])
}

/// Sums a full-size gradient over every tile position of each kernel entry.
fn fold_tiles(upstream: ArrayView4<'_, f64>, dn: usize, dm: usize) -> Array4<f64> {
    let (s, m, n, l) = upstream.dim();
    let mut out = Array4::zeros((s, dn, dm, l));
    for ((si, i, j, p), g) in upstream.indexed_iter() {
        out[[si, i % dn, j % dm, p]] += *g;
    }
    debug_assert!(m % dn == 0 && n % dm == 0);
    out
}

/// Builds the aperture set described by `param`.
pub fn expand(param: &CaParameterization) -> Result<CodedApertureSet> {
    param.validate()?;
    let values = match param {
        CaParameterization::Dense { values } => values.clone(),
        CaParameterization::Kronecker { kernel, rows, cols } => tile(kernel, *rows, *cols),
        CaParameterization::Colored {
            weights,
            filters,
            rows,
            cols,
        } => tile(&colored_kernel(weights, filters), *rows, *cols),
    };
    CodedApertureSet::new(values)
}

/// Pulls a gradient on the expanded aperture back to the trainables.
pub fn expand_backward(param: &CaParameterization, upstream: ArrayView4<'_, f64>) -> Result<Array4<f64>> {
    let want = param.aperture_dim();
    if upstream.dim() != want {
        return shape_err(format!(
            "upstream gradient {:?} does not match aperture {:?}",
            upstream.dim(),
            want
        ));
    }
    Ok(match param {
        CaParameterization::Dense { .. } => upstream.to_owned(),
        CaParameterization::Kronecker { kernel, .. } => {
            let (_, dn, dm, _) = kernel.dim();
            fold_tiles(upstream, dn, dm)
        }
        CaParameterization::Colored { weights, filters, .. } => {
            let (s, dn, dm, v) = weights.dim();
            let l = filters.dim().1;
            let dq = fold_tiles(upstream, dn, dm);
            Array4::from_shape_fn((s, dn, dm, v), |(s, i, j, c)| {
                (0..l).map(|p| filters[[c, p]] * dq[[s, i, j, p]]).sum()
            })
        }
    })
}

/// Synthetic bank of `filters` Gaussian band-pass responses over `bands`
/// spectral planes, peak 1, centres evenly spread.
pub fn gaussian_filter_bank(filters: usize, bands: usize) -> Array2<f64> {
    let width = bands as f64 / (2.0 * filters.max(1) as f64);
    Array2::from_shape_fn((filters, bands), |(v, l)| {
        let centre = (v as f64 + 0.5) * bands as f64 / filters as f64 - 0.5;
        let d = (l as f64 - centre) / width;
        (-0.5 * d * d).exp()
    })
}

/// Per-entry distribution of manufacturing noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CaNoise {
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// Normal draws clamped to `[-bound, bound]`.
    Gaussian {
        mean: f64,
        sigma: f64,
        bound: f64,
    },
}

impl CaNoise {
    /// Bound on `|eta|` for any draw.
    pub fn amplitude(&self) -> f64 {
        match *self {
            CaNoise::Uniform { lo, hi } => lo.abs().max(hi.abs()),
            CaNoise::Gaussian { mean, sigma, bound } => {
                if sigma == 0.0 {
                    mean.abs().min(bound)
                } else {
                    bound
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            CaNoise::Uniform { lo, hi } if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() => {
                param_err(format!("uniform noise needs finite lo <= hi, got ({lo}, {hi})"))
            }
            CaNoise::Gaussian { sigma, bound, mean } if !(sigma >= 0.0 && bound >= 0.0 && mean.is_finite()) => {
                param_err("gaussian noise needs sigma >= 0 and bound >= 0")
            }
            _ => Ok(()),
        }
    }
}

/// Noise sources applied during each forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Manufacturing noise added to the aperture, or none.
    #[serde(default)]
    pub ca: Option<CaNoise>,
    /// Measurement SNR in dB, or none for noiseless measurements.
    #[serde(default)]
    pub snr_db: Option<f64>,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self::default()
    }
}

/// Returns `ca + eta` with `eta` drawn i.i.d. per entry. The input is untouched.
pub fn inject_ca_noise<R: Rng + ?Sized>(
    ca: &CodedApertureSet,
    spec: &NoiseSpec,
    rng: &mut R,
) -> Result<CodedApertureSet> {
    let active = vec![true; ca.shots()];
    inject_ca_noise_masked(ca, spec, &active, ca.max_abs(), rng)
}

/// Noise on the `active` shots only; inactive shots stay exactly as given.
/// The amplitude check is made against `reference_amplitude`.
pub(crate) fn inject_ca_noise_masked<R: Rng + ?Sized>(
    ca: &CodedApertureSet,
    spec: &NoiseSpec,
    active: &[bool],
    reference_amplitude: f64,
    rng: &mut R,
) -> Result<CodedApertureSet> {
    let Some(noise) = spec.ca else {
        return Ok(ca.clone());
    };
    noise.validate()?;
    let amp = noise.amplitude();
    if amp == 0.0 {
        return Ok(ca.clone());
    }
    if !(amp < reference_amplitude) {
        return Err(Error::NoiseAmplitude {
            noise: amp,
            aperture: reference_amplitude,
        });
    }
    let mut values = ca.values.clone();
    let per_shot = ca.shot_len();
    let data = values.as_slice_mut().expect("standard layout");
    match noise {
        CaNoise::Uniform { lo, hi } => {
            let dist = Uniform::new_inclusive(lo, hi).expect("validated");
            for (s, chunk) in data.chunks_mut(per_shot).enumerate() {
                if active[s] {
                    chunk.iter_mut().for_each(|v| *v += dist.sample(rng));
                }
            }
        }
        CaNoise::Gaussian { mean, sigma, bound } => {
            let dist = Normal::new(mean, sigma).expect("validated");
            for (s, chunk) in data.chunks_mut(per_shot).enumerate() {
                if active[s] {
                    chunk
                        .iter_mut()
                        .for_each(|v| *v += dist.sample(rng).clamp(-bound, bound));
                }
            }
        }
    }
    CodedApertureSet::new(values)
}

/// Mean entry of one shot: the fraction of light it passes.
pub fn transmittance_of(ca: &CodedApertureSet, shot: usize) -> Result<f64> {
    if shot >= ca.shots() {
        return param_err(format!("shot {shot} out of range for {} shots", ca.shots()));
    }
    let s = ca.shot_slice(shot);
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

pub(crate) fn validate_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return param_err("quantization levels must not be empty");
    }
    if levels.iter().any(|k| !k.is_finite()) {
        return param_err("quantization levels must be finite");
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return param_err("quantization levels must be strictly increasing");
    }
    Ok(())
}

/// Nearest entry of `levels` to `v`; ties go to the smaller level.
pub fn nearest_level(v: f64, levels: &[f64]) -> f64 {
    let mut best = levels[0];
    let mut best_d = (v - best).abs();
    for &k in &levels[1..] {
        let d = (v - k).abs();
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Snaps every entry to its nearest level.
pub fn quantize_for_export(ca: &CodedApertureSet, levels: &[f64]) -> Result<CodedApertureSet> {
    validate_levels(levels)?;
    CodedApertureSet::new(ca.values.mapv(|v| nearest_level(v, levels)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kron_identity() -> CaParameterization {
        let kernel = array![[1.0, 0.0], [0.0, 1.0]]
            .into_shape_with_order((1, 2, 2, 1))
            .unwrap();
        CaParameterization::Kronecker {
            kernel,
            rows: 4,
            cols: 4,
        }
    }

    #[test]
    fn kronecker_expands_to_tiled_identity() {
        let ca = expand(&kron_identity()).unwrap();
        let want = [
            [1.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 1.0],
            [1.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 1.0],
        ];
        for (i, row) in want.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                assert_eq!(ca.values()[[0, i, j, 0]], w);
            }
        }
    }

    #[test]
    fn dense_expand_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = CaParameterization::init_dense(2, 3, 5, 2, CaInit::ZeroOne, &mut rng).unwrap();
        let ca = expand(&p).unwrap();
        assert_eq!(ca.as_slice(), p.trainables());
        let up = Array4::from_shape_fn((2, 3, 5, 2), |(a, b, c, d)| (a + 2 * b + 3 * c + 5 * d) as f64);
        assert_eq!(expand_backward(&p, up.view()).unwrap(), up);
    }

    fn colored_cell() -> CaParameterization {
        CaParameterization::Colored {
            weights: array![1.0, 0.0].into_shape_with_order((1, 1, 1, 2)).unwrap(),
            filters: array![[0.2, 0.8], [0.5, 0.5]],
            rows: 1,
            cols: 1,
        }
    }

    #[test]
    fn colored_kernel_combines_filters() {
        let ca = expand(&colored_cell()).unwrap();
        assert_eq!(ca.as_slice(), &[0.2, 0.8]);
        let up = Array4::from_elem((1, 1, 1, 2), 1.0);
        let g = expand_backward(&colored_cell(), up.view()).unwrap();
        assert_eq!(g.as_slice().unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn kronecker_backward_counts_tile_copies() {
        let p = CaParameterization::Kronecker {
            kernel: Array4::zeros((1, 2, 2, 1)),
            rows: 4,
            cols: 4,
        };
        let g = expand_backward(&p, Array4::from_elem((1, 4, 4, 1), 1.0).view()).unwrap();
        assert!(g.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn divisibility_error_names_axis() {
        let p = CaParameterization::Kronecker {
            kernel: Array4::zeros((1, 2, 3, 1)),
            rows: 4,
            cols: 4,
        };
        match expand(&p) {
            Err(Error::Divisibility { axis, .. }) => assert_eq!(axis, "cols"),
            other => panic!("expected divisibility error, got {other:?}"),
        }
    }

    #[test]
    fn backward_rejects_wrong_shape() {
        let up = Array4::zeros((1, 4, 3, 1));
        assert!(matches!(
            expand_backward(&kron_identity(), up.view()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn parameter_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = CaParameterization::init_dense(4, 28, 28, 1, CaInit::ZeroOne, &mut rng).unwrap();
        assert_eq!(trainable_parameter_count(&d), 3136);
        let k = CaParameterization::init_kronecker(4, 28, 28, 14, 14, 1, CaInit::ZeroOne, &mut rng).unwrap();
        assert_eq!(trainable_parameter_count(&k), 784);
        let c =
            CaParameterization::init_colored(1, 16, 16, 8, 8, gaussian_filter_bank(5, 12), CaInit::ZeroOne, &mut rng)
                .unwrap();
        assert_eq!(trainable_parameter_count(&c), 320);
    }

    #[test]
    fn filter_bank_in_unit_range() {
        let w = gaussian_filter_bank(4, 31);
        assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(w.iter().cloned().fold(0.0, f64::max) > 0.9);
    }

    #[test]
    fn noise_zero_amplitude_is_identity() {
        let ca = CodedApertureSet::new(Array4::from_elem((2, 3, 3, 1), 0.5)).unwrap();
        let spec = NoiseSpec {
            ca: Some(CaNoise::Uniform { lo: 0.0, hi: 0.0 }),
            snr_db: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(inject_ca_noise(&ca, &spec, &mut rng).unwrap(), ca);
    }

    #[test]
    fn uniform_noise_stays_in_band_and_is_seeded() {
        let ca = CodedApertureSet::new(Array4::from_elem((2, 8, 8, 1), 0.5)).unwrap();
        let spec = NoiseSpec {
            ca: Some(CaNoise::Uniform { lo: 0.0, hi: 0.2 }),
            snr_db: None,
        };
        let a = inject_ca_noise(&ca, &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = inject_ca_noise(&ca, &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.as_slice().iter().all(|v| (0.5..=0.7).contains(v)));
        assert!(ca.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn noise_amplitude_invariant_enforced() {
        let ca = CodedApertureSet::new(Array4::from_elem((1, 2, 2, 1), 0.1)).unwrap();
        let spec = NoiseSpec {
            ca: Some(CaNoise::Uniform { lo: -0.2, hi: 0.2 }),
            snr_db: None,
        };
        let r = inject_ca_noise(&ca, &spec, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::NoiseAmplitude { .. })));
    }

    #[test]
    fn gaussian_noise_is_mean_preserving() {
        let ca = CodedApertureSet::new(Array4::from_elem((4, 50, 50, 1), 1.0)).unwrap();
        let sigma = 0.05;
        let spec = NoiseSpec {
            ca: Some(CaNoise::Gaussian {
                mean: 0.0,
                sigma,
                bound: 0.5,
            }),
            snr_db: None,
        };
        let out = inject_ca_noise(&ca, &spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let count = out.as_slice().len() as f64;
        let shift = out.as_slice().iter().map(|v| v - 1.0).sum::<f64>() / count;
        assert!(shift.abs() < 3.0 * sigma / count.sqrt());
    }

    #[test]
    fn transmittance_examples() {
        let ones = CodedApertureSet::new(Array4::from_elem((1, 2, 2, 1), 1.0)).unwrap();
        assert_eq!(transmittance_of(&ones, 0).unwrap(), 1.0);
        let eye = CodedApertureSet::from_vec((1, 2, 2, 1), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(transmittance_of(&eye, 0).unwrap(), 0.5);
        let zeros = CodedApertureSet::zeros(1, 2, 2, 1).unwrap();
        assert_eq!(transmittance_of(&zeros, 0).unwrap(), 0.0);
        assert!(transmittance_of(&zeros, 1).is_err());
    }

    #[test]
    fn quantization_examples() {
        assert_eq!(nearest_level(0.49, &[0.0, 1.0]), 0.0);
        assert_eq!(nearest_level(0.5, &[0.0, 1.0]), 0.0);
        assert_eq!(nearest_level(0.6, &[0.0, 0.25, 0.5, 0.75, 1.0]), 0.5);
        let ca = CodedApertureSet::zeros(1, 1, 1, 1).unwrap();
        assert!(quantize_for_export(&ca, &[]).is_err());
        assert!(quantize_for_export(&ca, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn rejects_non_finite_values() {
        let mut a = Array4::zeros((1, 1, 2, 1));
        a[[0, 0, 1, 0]] = f64::NAN;
        assert!(CodedApertureSet::new(a).is_err());
    }
}
