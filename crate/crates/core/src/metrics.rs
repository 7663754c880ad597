//! Reconstruction, classification and aperture-design metrics.

use crate::ca::{nearest_level, transmittance_of, validate_levels, CodedApertureSet};
use crate::error::{param_err, shape_err, Error, Result};
use crate::regularizers::r_correlation;

/// `10 log10(peak^2 / MSE)`; identical inputs give [`Error::InfinitePsnr`].
pub fn psnr(reference: &[f64], estimate: &[f64], peak: f64) -> Result<f64> {
    if reference.len() != estimate.len() || reference.is_empty() {
        return shape_err(format!(
            "PSNR inputs of length {} and {}",
            reference.len(),
            estimate.len()
        ));
    }
    if !(peak > 0.0) {
        return param_err(format!("PSNR peak must be positive, got {peak}"));
    }
    let mse = reference
        .iter()
        .zip(estimate)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Err(Error::InfinitePsnr);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Spectral angle in radians between two non-zero spectra.
pub fn sam(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return shape_err(format!("SAM inputs of length {} and {}", a.len(), b.len()));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return param_err("SAM is undefined for a zero spectrum");
    }
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    Ok(2.0 * diff.sqrt().atan2(sum.sqrt()))
}

/// Mean SAM over the pixels of two `pixels x bands` cubes (band fastest),
/// skipping pixels where either spectrum is zero.
pub fn mean_sam(reference: &[f64], estimate: &[f64], bands: usize) -> Result<f64> {
    if bands == 0 || reference.len() != estimate.len() || !reference.len().is_multiple_of(bands) {
        return shape_err("cube lengths must match and be a multiple of the band count");
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (a, b) in reference.chunks(bands).zip(estimate.chunks(bands)) {
        if let Ok(angle) = sam(a, b) {
            total += angle;
            count += 1;
        }
    }
    if count == 0 {
        return param_err("no pixel has two non-zero spectra");
    }
    Ok(total / count as f64)
}

/// Fraction of predictions equal to their label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return shape_err(format!(
            "accuracy over {} predictions and {} labels",
            predictions.len(),
            labels.len()
        ));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Mean squared distance from each entry to its nearest level; zero exactly
/// when every entry sits on a level.
pub fn binarization_residual(ca: &CodedApertureSet, levels: &[f64]) -> Result<f64> {
    validate_levels(levels)?;
    let v = ca.as_slice();
    Ok(v.iter()
        .map(|&x| {
            let d = x - nearest_level(x, levels);
            d * d
        })
        .sum::<f64>()
        / v.len() as f64)
}

/// Cross-shot correlation, the same quantity the correlation regularizer
/// penalizes.
pub fn correlation_value(ca: &CodedApertureSet) -> Result<f64> {
    Ok(r_correlation(ca)?.value)
}

/// One evaluation row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub psnr_db: Option<f64>,
    pub sam_radians: Option<f64>,
    pub accuracy: Option<f64>,
    pub binarization_residual: Option<f64>,
    pub correlation_value: Option<f64>,
    pub compression_ratio: Option<f64>,
    pub transmittance: Vec<f64>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str =
        "psnr_db,sam_radians,accuracy,binarization_residual,correlation_value,compression_ratio,mean_transmittance,transmittance";

    /// Fills the aperture-only fields.
    pub fn with_aperture(mut self, ca: &CodedApertureSet, levels: &[f64]) -> Result<Self> {
        self.binarization_residual = Some(binarization_residual(ca, levels)?);
        self.correlation_value = if ca.shots() >= 2 {
            Some(correlation_value(ca)?)
        } else {
            None
        };
        self.transmittance = (0..ca.shots())
            .map(|s| transmittance_of(ca, s))
            .collect::<Result<_>>()?;
        Ok(self)
    }

    /// CSV row matching [`Self::CSV_HEADER`]; absent values are empty
    /// fields and per-shot transmittances are `;`-separated.
    pub fn csv_row(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| format!("{x:.17e}")).unwrap_or_default()
        }
        let mean_t = if self.transmittance.is_empty() {
            None
        } else {
            Some(self.transmittance.iter().sum::<f64>() / self.transmittance.len() as f64)
        };
        let per_shot = self
            .transmittance
            .iter()
            .map(|t| format!("{t:.17e}"))
            .collect::<Vec<_>>()
            .join(";");
        [
            opt(self.psnr_db),
            opt(self.sam_radians),
            opt(self.accuracy),
            opt(self.binarization_residual),
            opt(self.correlation_value),
            opt(self.compression_ratio),
            opt(mean_t),
            per_shot,
        ]
        .join(",")
    }
}
