//! In-memory datasets and the synthetic spectral scene generator.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{shape_err, Result};

/// Scenes stored one per row, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scenes: Array2<f64>,
    /// Class labels; `None` for reconstruction data, whose targets are the
    /// scenes themselves.
    pub labels: Option<Vec<usize>>,
    /// `(rows, cols, bands)` of one scene.
    pub shape: (usize, usize, usize),
}

impl Dataset {
    pub fn new(scenes: Array2<f64>, labels: Option<Vec<usize>>, shape: (usize, usize, usize)) -> Result<Self> {
        if scenes.ncols() != shape.0 * shape.1 * shape.2 {
            return shape_err(format!(
                "scene width {} does not match shape {:?}",
                scenes.ncols(),
                shape
            ));
        }
        if let Some(l) = &labels {
            if l.len() != scenes.nrows() {
                return shape_err(format!("{} labels for {} scenes", l.len(), scenes.nrows()));
            }
        }
        if scenes.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return shape_err("scene values must lie in [0, 1]");
        }
        Ok(Self { scenes, labels, shape })
    }

    pub fn len(&self) -> usize {
        self.scenes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scene_len(&self) -> usize {
        self.scenes.ncols()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    /// Rows `indices` as a new dataset.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            scenes: self.scenes.select(Axis(0), indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            shape: self.shape,
        }
    }

    /// First `n` rows (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

/// Train/test pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

/// Sum of separable spatial x spectral Gaussian blobs clamped to `[0, 1]`,
/// flattened with the band index fastest.
pub fn gen_synthetic_cube<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    bands: usize,
    blobs: usize,
    rng: &mut R,
) -> Array1<f64> {
    let mut cube = Array1::<f64>::zeros(rows * cols * bands);
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    let extent = rows.max(cols) as f64;
    for _ in 0..blobs {
        let ci = unit.sample(rng) * rows as f64;
        let cj = unit.sample(rng) * cols as f64;
        // widths keep neighbour differences small in both domains
        let sigma = (0.15 + 0.2 * unit.sample(rng)) * extent + 1.5;
        let centre = unit.sample(rng) * bands as f64;
        let width = (0.2 + 0.3 * unit.sample(rng)) * bands as f64 + 1.5;
        let amp = 0.3 + 0.5 * unit.sample(rng);
        let spectrum: Vec<f64> = (0..bands)
            .map(|l| {
                let d = (l as f64 - centre) / width;
                (-0.5 * d * d).exp()
            })
            .collect();
        for i in 0..rows {
            for j in 0..cols {
                let di = (i as f64 - ci) / sigma;
                let dj = (j as f64 - cj) / sigma;
                let spatial = amp * (-0.5 * (di * di + dj * dj)).exp();
                let base = (i * cols + j) * bands;
                for (l, s) in spectrum.iter().enumerate() {
                    cube[base + l] += spatial * s;
                }
            }
        }
    }
    cube.mapv_inplace(|v| v.clamp(0.0, 1.0));
    cube
}

/// `count` synthetic cubes as a reconstruction dataset.
pub fn synthetic_dataset<R: Rng + ?Sized>(
    count: usize,
    rows: usize,
    cols: usize,
    bands: usize,
    blobs: usize,
    rng: &mut R,
) -> Result<Dataset> {
    let n = rows * cols * bands;
    let mut scenes = Array2::zeros((count, n));
    for mut row in scenes.axis_iter_mut(Axis(0)) {
        row.assign(&gen_synthetic_cube(rows, cols, bands, blobs, rng));
    }
    Dataset::new(scenes, None, (rows, cols, bands))
}
