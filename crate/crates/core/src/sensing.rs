//! Linear coded sensing operators for the single-pixel camera (SPC) and the
//! single-disperser CASSI, with adjoints, gradients with respect to the
//! aperture, multishot stacking and additive measurement noise.
//!
//! Scenes are flat row-major vectors: `M * N` pixels for SPC and an
//! `M x N x L` cube with the band index fastest for CASSI. Measurements stack
//! shots in order, shot `s` occupying `[s * m, (s + 1) * m)`.

use ndarray::{Array1, Array2, Array4, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ca::CodedApertureSet;
use crate::error::{param_err, shape_err, Result};

/// Which optical system the aperture set drives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SensingKind {
    /// One inner product per shot.
    Spc,
    /// Planar aperture, then a one-column-per-band shift onto an
    /// `M x (N + bands - 1)` detector.
    Cassi { bands: usize },
}

/// Stacked multishot measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub data: Array1<f64>,
    pub shots: usize,
    pub per_shot: usize,
}

impl Measurement {
    pub fn new(data: Array1<f64>, shots: usize, per_shot: usize) -> Result<Self> {
        if data.len() != shots * per_shot {
            return shape_err(format!(
                "measurement length {} != {shots} shots x {per_shot}",
                data.len()
            ));
        }
        Ok(Self { data, shots, per_shot })
    }

    pub fn shot(&self, s: usize) -> &[f64] {
        &self.data.as_slice().expect("contiguous")[s * self.per_shot..(s + 1) * self.per_shot]
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice().expect("contiguous")
    }
}

/// A sensing operator bound to an aperture set.
#[derive(Clone, Copy, Debug)]
pub struct SensingModel<'a> {
    kind: SensingKind,
    ca: &'a CodedApertureSet,
}

impl<'a> SensingModel<'a> {
    pub fn new(kind: SensingKind, ca: &'a CodedApertureSet) -> Result<Self> {
        match kind {
            SensingKind::Spc => check_planar(ca)?,
            SensingKind::Cassi { bands } => check_cassi_planes(ca, bands)?,
        }
        Ok(Self { kind, ca })
    }

    pub fn kind(&self) -> SensingKind {
        self.kind
    }

    pub fn aperture(&self) -> &'a CodedApertureSet {
        self.ca
    }

    pub fn shots(&self) -> usize {
        self.ca.shots()
    }

    /// Scene length `n`.
    pub fn scene_len(&self) -> usize {
        let px = self.ca.rows() * self.ca.cols();
        match self.kind {
            SensingKind::Spc => px,
            SensingKind::Cassi { bands } => px * bands,
        }
    }

    /// Per-shot measurement length `m`.
    pub fn per_shot_len(&self) -> usize {
        match self.kind {
            SensingKind::Spc => 1,
            SensingKind::Cassi { bands } => self.ca.rows() * (self.ca.cols() + bands - 1),
        }
    }

    pub fn measurement_len(&self) -> usize {
        self.shots() * self.per_shot_len()
    }

    pub fn compression_ratio(&self) -> f64 {
        compression_ratio(self)
    }

    pub fn forward(&self, scene: &[f64]) -> Result<Measurement> {
        match self.kind {
            SensingKind::Spc => spc_forward(self.ca, scene),
            SensingKind::Cassi { bands } => cassi_forward(self.ca, bands, scene),
        }
    }

    pub fn adjoint(&self, g: &Measurement) -> Result<Array1<f64>> {
        match self.kind {
            SensingKind::Spc => spc_adjoint(self.ca, g),
            SensingKind::Cassi { bands } => cassi_adjoint(self.ca, bands, g),
        }
    }

    /// Gradient of `<upstream, H(ca) scene>` with respect to the aperture.
    pub fn forward_grad_wrt_ca(&self, scene: &[f64], upstream: &[f64]) -> Result<Array4<f64>> {
        forward_grad_wrt_ca(self, scene, upstream)
    }

    /// Forward of every row of `scenes` (`B x n`), giving `B x (S * m)`.
    pub fn forward_batch(&self, scenes: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_batch(scenes)?;
        match self.kind {
            SensingKind::Spc => Ok(scenes.dot(&self.spc_matrix().t())),
            SensingKind::Cassi { bands } => {
                let mut out = Array2::zeros((scenes.nrows(), self.measurement_len()));
                for (row, mut dst) in scenes.outer_iter().zip(out.outer_iter_mut()) {
                    let scene = row.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| row.to_vec());
                    let y = cassi_forward(self.ca, bands, &scene)?;
                    dst.assign(&y.data);
                }
                Ok(out)
            }
        }
    }

    /// Sum over the batch of [`Self::forward_grad_wrt_ca`] for each row pair.
    pub fn ca_grad_batch(&self, scenes: ArrayView2<'_, f64>, upstream: ArrayView2<'_, f64>) -> Result<Array4<f64>> {
        self.check_batch(scenes)?;
        if upstream.dim() != (scenes.nrows(), self.measurement_len()) {
            return shape_err(format!(
                "upstream batch {:?} does not match {} x {}",
                upstream.dim(),
                scenes.nrows(),
                self.measurement_len()
            ));
        }
        let (s, m, n, l) = self.ca.dim();
        match self.kind {
            SensingKind::Spc => {
                let g = upstream.t().dot(&scenes);
                Ok(g.into_shape_with_order((s, m, n, l)).expect("S x n matches aperture"))
            }
            SensingKind::Cassi { .. } => {
                let mut acc = Array4::zeros((s, m, n, l));
                for (f, u) in scenes.outer_iter().zip(upstream.outer_iter()) {
                    acc += &forward_grad_wrt_ca(self, &f.to_vec(), &u.to_vec())?;
                }
                Ok(acc)
            }
        }
    }

    /// Dense `S x n` SPC sensing matrix (row `s` is shot `s` flattened).
    pub fn spc_matrix(&self) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.ca.shots(), self.ca.shot_len()), self.ca.as_slice())
            .expect("aperture is contiguous")
    }

    /// Materializes `H` column by column through the forward operator. Only
    /// meant for tiny instances in tests.
    pub fn materialize(&self) -> Result<Array2<f64>> {
        let n = self.scene_len();
        let mut h = Array2::zeros((self.measurement_len(), n));
        let mut e = vec![0.0; n];
        for k in 0..n {
            e[k] = 1.0;
            h.column_mut(k).assign(&self.forward(&e)?.data);
            e[k] = 0.0;
        }
        Ok(h)
    }

    fn check_batch(&self, scenes: ArrayView2<'_, f64>) -> Result<()> {
        if scenes.ncols() != self.scene_len() {
            return shape_err(format!(
                "scene length {} does not match operator length {}",
                scenes.ncols(),
                self.scene_len()
            ));
        }
        Ok(())
    }
}

fn check_planar(ca: &CodedApertureSet) -> Result<()> {
    if ca.planes() != 1 {
        return param_err(format!(
            "the single-pixel camera needs a planar aperture, got {} planes",
            ca.planes()
        ));
    }
    Ok(())
}

/// CASSI takes either one code shared by all bands or one code per band.
fn check_cassi_planes(ca: &CodedApertureSet, bands: usize) -> Result<()> {
    if bands == 0 {
        return param_err("CASSI needs at least one band");
    }
    if ca.planes() != 1 && ca.planes() != bands {
        return param_err(format!(
            "CASSI aperture has {} planes; expected 1 or {bands}",
            ca.planes()
        ));
    }
    Ok(())
}

/// `g[s] = <ca[s], f>` for every shot.
pub fn spc_forward(ca: &CodedApertureSet, scene: &[f64]) -> Result<Measurement> {
    check_planar(ca)?;
    let n = ca.shot_len();
    if scene.len() != n {
        return shape_err(format!("SPC scene length {} != {n}", scene.len()));
    }
    let g = (0..ca.shots())
        .map(|s| ca.shot_slice(s).iter().zip(scene).map(|(a, b)| a * b).sum())
        .collect::<Array1<f64>>();
    Measurement::new(g, ca.shots(), 1)
}

/// `sum_s g[s] * ca[s]`, the transpose of [`spc_forward`].
pub fn spc_adjoint(ca: &CodedApertureSet, g: &Measurement) -> Result<Array1<f64>> {
    check_planar(ca)?;
    if g.shots != ca.shots() || g.per_shot != 1 {
        return shape_err(format!(
            "SPC adjoint expects {} shots of length 1, got {} x {}",
            ca.shots(),
            g.shots,
            g.per_shot
        ));
    }
    let mut out = Array1::zeros(ca.shot_len());
    for (s, &gs) in g.as_slice().iter().enumerate() {
        out.iter_mut().zip(ca.shot_slice(s)).for_each(|(o, a)| *o += gs * a);
    }
    Ok(out)
}

/// Shift-and-sum forward: `y[s](i, j + l) += ca[s](i, j, l) * f(i, j, l)`,
/// where a planar aperture uses the same code for every band.
pub fn cassi_forward(ca: &CodedApertureSet, bands: usize, cube: &[f64]) -> Result<Measurement> {
    check_cassi_planes(ca, bands)?;
    let colored = ca.planes() > 1;
    let (shots, m, n, _) = ca.dim();
    if bands == 0 || cube.len() != m * n * bands {
        return shape_err(format!("CASSI cube length {} != {m}x{n}x{bands}", cube.len()));
    }
    let width = n + bands - 1;
    let per_shot = m * width;
    let mut y = Array1::zeros(shots * per_shot);
    let ys = y.as_slice_mut().expect("contiguous");
    for s in 0..shots {
        let code = ca.shot_slice(s);
        let det = &mut ys[s * per_shot..(s + 1) * per_shot];
        for i in 0..m {
            for j in 0..n {
                let px = &cube[(i * n + j) * bands..(i * n + j + 1) * bands];
                let row = &mut det[i * width + j..i * width + j + bands];
                if colored {
                    let c = &code[(i * n + j) * bands..(i * n + j + 1) * bands];
                    for ((d, f), c) in row.iter_mut().zip(px).zip(c) {
                        *d += c * f;
                    }
                } else {
                    let c = code[i * n + j];
                    row.iter_mut().zip(px).for_each(|(d, f)| *d += c * f);
                }
            }
        }
    }
    Measurement::new(y, shots, per_shot)
}

/// `f(i, j, l) = sum_s ca[s](i, j) * y[s](i, j + l)`, the transpose of
/// [`cassi_forward`].
pub fn cassi_adjoint(ca: &CodedApertureSet, bands: usize, y: &Measurement) -> Result<Array1<f64>> {
    check_cassi_planes(ca, bands)?;
    let colored = ca.planes() > 1;
    let (shots, m, n, _) = ca.dim();
    let width = n + bands - 1;
    if bands == 0 || y.shots != shots || y.per_shot != m * width {
        return shape_err(format!(
            "CASSI adjoint expects {shots} shots of {m}x{width}, got {} x {}",
            y.shots, y.per_shot
        ));
    }
    let mut out = Array1::zeros(m * n * bands);
    let os = out.as_slice_mut().expect("contiguous");
    for s in 0..shots {
        let code = ca.shot_slice(s);
        let det = y.shot(s);
        for i in 0..m {
            for j in 0..n {
                let px = &mut os[(i * n + j) * bands..(i * n + j + 1) * bands];
                let row = &det[i * width + j..i * width + j + bands];
                if colored {
                    let c = &code[(i * n + j) * bands..(i * n + j + 1) * bands];
                    for ((o, d), c) in px.iter_mut().zip(row).zip(c) {
                        *o += c * d;
                    }
                } else {
                    let c = code[i * n + j];
                    px.iter_mut().zip(row).for_each(|(o, d)| *o += c * d);
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of `<upstream, H(ca) scene>` with respect to every aperture entry.
pub fn forward_grad_wrt_ca(model: &SensingModel<'_>, scene: &[f64], upstream: &[f64]) -> Result<Array4<f64>> {
    let ca = model.ca;
    let (shots, m, n, l) = ca.dim();
    if scene.len() != model.scene_len() {
        return shape_err(format!("scene length {} != {}", scene.len(), model.scene_len()));
    }
    if upstream.len() != model.measurement_len() {
        return shape_err(format!(
            "upstream length {} != {}",
            upstream.len(),
            model.measurement_len()
        ));
    }
    let mut grad = Array4::zeros((shots, m, n, l));
    let gs = grad.as_slice_mut().expect("contiguous");
    match model.kind {
        SensingKind::Spc => {
            for s in 0..shots {
                let u = upstream[s];
                gs[s * m * n..(s + 1) * m * n]
                    .iter_mut()
                    .zip(scene)
                    .for_each(|(g, f)| *g = u * f);
            }
        }
        SensingKind::Cassi { bands } => {
            let width = n + bands - 1;
            let per_shot = m * width;
            for s in 0..shots {
                let det = &upstream[s * per_shot..(s + 1) * per_shot];
                for i in 0..m {
                    for j in 0..n {
                        let px = &scene[(i * n + j) * bands..(i * n + j + 1) * bands];
                        let row = &det[i * width + j..i * width + j + bands];
                        let cell = ((s * m + i) * n + j) * l;
                        if l == 1 {
                            gs[cell] = px.iter().zip(row).map(|(f, u)| f * u).sum();
                        } else {
                            for (k, (f, u)) in px.iter().zip(row).enumerate() {
                                gs[cell + k] = f * u;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// `gamma = S * m / n`.
pub fn compression_ratio(model: &SensingModel<'_>) -> f64 {
    model.measurement_len() as f64 / model.scene_len() as f64
}

/// Adds white Gaussian noise at `snr_db` relative to the vector's mean power.
/// `None` returns the input unchanged.
pub fn add_measurement_noise<R: Rng + ?Sized>(g: &[f64], snr_db: Option<f64>, rng: &mut R) -> Result<Vec<f64>> {
    let Some(snr) = snr_db else {
        return Ok(g.to_vec());
    };
    if !snr.is_finite() {
        return param_err(format!("SNR must be finite, got {snr}"));
    }
    let power = g.iter().map(|v| v * v).sum::<f64>() / g.len().max(1) as f64;
    if power == 0.0 {
        return Ok(g.to_vec());
    }
    let sigma = (power / 10f64.powf(snr / 10.0)).sqrt();
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    Ok(g.iter().map(|v| v + normal.sample(rng)).collect())
}

/// Applies [`add_measurement_noise`] to every row of a batch in place.
pub(crate) fn add_measurement_noise_rows<R: Rng + ?Sized>(
    batch: &mut Array2<f64>,
    snr_db: Option<f64>,
    rng: &mut R,
) -> Result<()> {
    if snr_db.is_none() {
        return Ok(());
    }
    for mut row in batch.axis_iter_mut(Axis(0)) {
        let noisy = add_measurement_noise(&row.to_vec(), snr_db, rng)?;
        row.iter_mut().zip(noisy).for_each(|(d, v)| *d = v);
    }
    Ok(())
}
