//! Aperture regularizers with exact values and analytic (sub)gradients, and
//! the geometric schedule for their weights.
//!
//! Every function returns a [`RegValue`]: the scalar penalty and its gradient
//! with respect to each aperture entry, shaped like the aperture. The
//! per-entry families keep the `1/S` factor in front of the shot sum, so the
//! effective weight on a single entry is `rho / S`.

use ndarray::{Array4, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::ca::CodedApertureSet;
use crate::error::{param_err, shape_err, Result};
use crate::sensing::SensingModel;

/// Penalty value and gradient with respect to the aperture.
#[derive(Clone, Debug, PartialEq)]
pub struct RegValue {
    pub value: f64,
    pub grad: Array4<f64>,
}

/// Which penalty a regularizer term applies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegularizerKind {
    /// Roots at 0 and 1.
    Binary01 { p1: f64, p2: f64 },
    /// Roots at -1 and 1.
    BinaryPm1 { p1: f64, p2: f64 },
    /// Roots at each of `levels`, with one exponent per level.
    MultiLevel { levels: Vec<f64>, exponents: Vec<f64> },
    /// Squared gap between each shot's mean and `target`.
    Transmittance { target: f64 },
    /// Sum over shots of each shot's l2 norm.
    SnapshotGroup,
    /// Mean over entries of the product across shots.
    Correlation,
    /// `||H^T H f - f||^2` averaged over a scene batch.
    Conditionality,
}

impl RegularizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            RegularizerKind::Binary01 { .. } => "binary01",
            RegularizerKind::BinaryPm1 { .. } => "binary_pm1",
            RegularizerKind::MultiLevel { .. } => "multi_level",
            RegularizerKind::Transmittance { .. } => "transmittance",
            RegularizerKind::SnapshotGroup => "snapshot_group",
            RegularizerKind::Correlation => "correlation",
            RegularizerKind::Conditionality => "conditionality",
        }
    }

    /// Quantization levels the term drives entries toward, if any.
    pub fn target_levels(&self) -> Option<Vec<f64>> {
        match self {
            RegularizerKind::Binary01 { .. } => Some(vec![0.0, 1.0]),
            RegularizerKind::BinaryPm1 { .. } => Some(vec![-1.0, 1.0]),
            RegularizerKind::MultiLevel { levels, .. } => {
                let mut l = levels.clone();
                l.sort_by(f64::total_cmp);
                Some(l)
            }
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoMode {
    Static,
    Dynamic,
}

/// Weight schedule `rho_k = rho0 * alpha^floor(k / period)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoSchedule {
    pub rho0: f64,
    pub rho_t: f64,
    pub epochs: usize,
    pub period: usize,
    pub alpha: f64,
    pub mode: RhoMode,
}

impl RhoSchedule {
    pub fn constant(rho: f64) -> Self {
        Self {
            rho0: rho,
            rho_t: rho,
            epochs: 1,
            period: 1,
            alpha: 1.0,
            mode: RhoMode::Static,
        }
    }

    /// Dynamic schedule reaching `rho_t` after `floor(epochs / period)`
    /// multiplications by the derived `alpha`.
    pub fn dynamic(rho0: f64, rho_t: f64, epochs: usize, period: usize) -> Result<Self> {
        let mut s = Self {
            rho0,
            rho_t,
            epochs,
            period,
            alpha: 1.0,
            mode: RhoMode::Dynamic,
        };
        alpha_from_endpoints(&mut s)?;
        Ok(s)
    }

    /// Number of multiplications over a full run.
    pub fn updates(&self) -> usize {
        self.epochs.checked_div(self.period).unwrap_or(0)
    }

    /// Weight once every update has been applied.
    pub fn final_rho(&self) -> f64 {
        rho_step(self, self.epochs)
    }
}

/// Derives and stores `alpha = (rho_t / rho0)^(1 / floor(T / beta))`.
///
/// The root is taken in base-10 log space so decade ratios come out exact.
pub fn alpha_from_endpoints(sched: &mut RhoSchedule) -> Result<f64> {
    if !(sched.rho0 > 0.0 && sched.rho_t > 0.0) || !sched.rho0.is_finite() || !sched.rho_t.is_finite() {
        return param_err("rho endpoints must be positive and finite");
    }
    if sched.period == 0 || sched.period > sched.epochs {
        return param_err(format!(
            "update period {} must lie in [1, {}]",
            sched.period, sched.epochs
        ));
    }
    if sched.mode == RhoMode::Dynamic && sched.rho0 >= sched.rho_t {
        return param_err(format!(
            "dynamic schedule needs rho0 < rhoT, got {} >= {}",
            sched.rho0, sched.rho_t
        ));
    }
    let updates = sched.updates() as f64;
    let alpha = 10f64.powf((sched.rho_t.log10() - sched.rho0.log10()) / updates);
    sched.alpha = alpha;
    Ok(alpha)
}

/// Weight in effect during `epoch` (zero-based). `epoch == epochs` gives the
/// weight after the last update.
pub fn rho_step(sched: &RhoSchedule, epoch: usize) -> f64 {
    match sched.mode {
        RhoMode::Static => sched.rho0,
        RhoMode::Dynamic => {
            let k = (epoch / sched.period.max(1)).min(sched.updates());
            sched.rho0 * sched.alpha.powi(k as i32)
        }
    }
}

/// One active term: a penalty and its weight schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    pub rho: RhoSchedule,
}

/// `((x^2)^p, d/dx (x^2)^p)` with the derivative taken as 0 at `x = 0`.
#[inline]
fn pow_term(x: f64, p: f64) -> (f64, f64) {
    if p == 1.0 {
        return (x * x, 2.0 * x);
    }
    let u = (x * x).powf(p);
    let du = if x == 0.0 { 0.0 } else { 2.0 * p * u / x };
    (u, du)
}

/// Value and derivative of `prod_d ((x - k_d)^2)^p_d` at one point.
#[inline]
pub(crate) fn level_poly(x: f64, levels: &[f64], exponents: &[f64]) -> (f64, f64) {
    let mut value = 1.0;
    let mut deriv = 0.0;
    // running product rule: (v * u)' = v' * u + v * u'
    for (&k, &p) in levels.iter().zip(exponents) {
        let (u, du) = pow_term(x - k, p);
        deriv = deriv * u + value * du;
        value *= u;
    }
    (value, deriv)
}

fn check_exponents(exponents: &[f64]) -> Result<()> {
    if exponents.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
        return param_err(format!("exponents must be positive, got {exponents:?}"));
    }
    Ok(())
}

/// `(1/S) sum prod_d ((phi - k_d)^2)^p_d` over every entry.
pub fn r_multilevel(ca: &CodedApertureSet, levels: &[f64], exponents: &[f64]) -> Result<RegValue> {
    if levels.len() < 2 {
        return param_err("multi-level regularizer needs at least two levels");
    }
    if levels.len() != exponents.len() {
        return param_err(format!("{} levels but {} exponents", levels.len(), exponents.len()));
    }
    for (i, a) in levels.iter().enumerate() {
        if !a.is_finite() || levels[i + 1..].contains(a) {
            return param_err(format!("levels must be finite and distinct, got {levels:?}"));
        }
    }
    check_exponents(exponents)?;
    let inv_s = 1.0 / ca.shots() as f64;
    let mut grad = Array4::zeros(ca.dim());
    let mut total = 0.0;
    for (g, &x) in grad.iter_mut().zip(ca.as_slice()) {
        let (v, d) = level_poly(x, levels, exponents);
        total += v;
        *g = inv_s * d;
    }
    Ok(RegValue {
        value: inv_s * total,
        grad,
    })
}

/// Binarization toward {0, 1}; `p1` weights the root at 0, `p2` the root at 1.
pub fn r_binary01(ca: &CodedApertureSet, p1: f64, p2: f64) -> Result<RegValue> {
    check_exponents(&[p1, p2])?;
    r_multilevel(ca, &[0.0, 1.0], &[p1, p2])
}

/// Binarization toward {-1, 1}; `p1` weights the root at -1, `p2` the root at 1.
pub fn r_binary_pm1(ca: &CodedApertureSet, p1: f64, p2: f64) -> Result<RegValue> {
    check_exponents(&[p1, p2])?;
    r_multilevel(ca, &[-1.0, 1.0], &[p1, p2])
}

/// `(1/S) sum_s (mean(ca[s]) - target)^2`.
pub fn r_transmittance(ca: &CodedApertureSet, target: f64) -> Result<RegValue> {
    if !(0.0..=1.0).contains(&target) {
        return param_err(format!("target transmittance {target} outside [0, 1]"));
    }
    let shots = ca.shots() as f64;
    let len = ca.shot_len();
    let mut grad = Array4::zeros(ca.dim());
    let gs = grad.as_slice_mut().expect("contiguous");
    let mut value = 0.0;
    for s in 0..ca.shots() {
        let gap = ca.shot_slice(s).iter().sum::<f64>() / len as f64 - target;
        value += gap * gap;
        let d = 2.0 * gap / (shots * len as f64);
        gs[s * len..(s + 1) * len].fill(d);
    }
    Ok(RegValue {
        value: value / shots,
        grad,
    })
}

/// `sum_s ||ca[s]||_2`, with subgradient 0 on shots that are entirely zero.
pub fn r_snapshot_group(ca: &CodedApertureSet) -> RegValue {
    let len = ca.shot_len();
    let mut grad = Array4::zeros(ca.dim());
    let gs = grad.as_slice_mut().expect("contiguous");
    let mut value = 0.0;
    for s in 0..ca.shots() {
        let shot = ca.shot_slice(s);
        let norm = shot.iter().map(|v| v * v).sum::<f64>().sqrt();
        value += norm;
        if norm != 0.0 {
            gs[s * len..(s + 1) * len]
                .iter_mut()
                .zip(shot)
                .for_each(|(g, v)| *g = v / norm);
        }
    }
    RegValue { value, grad }
}

/// `sum_{i,j,l} prod_s ca[s](i,j,l) / (M N L)`. Needs at least two shots.
pub fn r_correlation(ca: &CodedApertureSet) -> Result<RegValue> {
    let shots = ca.shots();
    if shots < 2 {
        return param_err("correlation needs at least two shots");
    }
    let len = ca.shot_len();
    let scale = 1.0 / len as f64;
    let data = ca.as_slice();
    let mut grad = Array4::zeros(ca.dim());
    let gs = grad.as_slice_mut().expect("contiguous");
    let mut value = 0.0;
    let mut prefix = vec![0.0; shots + 1];
    for e in 0..len {
        prefix[0] = 1.0;
        for s in 0..shots {
            prefix[s + 1] = prefix[s] * data[s * len + e];
        }
        value += prefix[shots];
        let mut suffix = 1.0;
        for s in (0..shots).rev() {
            gs[s * len + e] = scale * prefix[s] * suffix;
            suffix *= data[s * len + e];
        }
    }
    Ok(RegValue {
        value: value * scale,
        grad,
    })
}

/// `(1/B) sum_k ||H^T H f_k - f_k||^2` through the operator pair, with its
/// gradient obtained by differentiating both the forward and the adjoint.
pub fn r_conditionality(model: &SensingModel<'_>, scenes: ArrayView2<'_, f64>) -> Result<RegValue> {
    if scenes.nrows() == 0 {
        return param_err("conditionality needs a non-empty scene batch");
    }
    if scenes.ncols() != model.scene_len() {
        return shape_err(format!(
            "scene length {} does not match operator length {}",
            scenes.ncols(),
            model.scene_len()
        ));
    }
    let batch = scenes.nrows() as f64;
    let mut grad = Array4::zeros(model.aperture().dim());
    let mut value = 0.0;
    for f in scenes.outer_iter() {
        let f = f.to_vec();
        let u = model.forward(&f)?;
        let v = model.adjoint(&u)?;
        let r: Vec<f64> = v.iter().zip(&f).map(|(a, b)| a - b).collect();
        value += r.iter().map(|x| x * x).sum::<f64>();
        // d<2r, H^T u>/dca with u held fixed, then through u = H f
        let two_r: Vec<f64> = r.iter().map(|x| 2.0 * x).collect();
        grad += &model.forward_grad_wrt_ca(&two_r, u.as_slice())?;
        let h_two_r = model.forward(&two_r)?;
        grad += &model.forward_grad_wrt_ca(&f, h_two_r.as_slice())?;
    }
    grad.mapv_inplace(|g| g / batch);
    Ok(RegValue {
        value: value / batch,
        grad,
    })
}

/// Unweighted value and gradient of one term.
pub fn evaluate_term(
    kind: &RegularizerKind,
    ca: &CodedApertureSet,
    conditioning: Option<(&SensingModel<'_>, ArrayView2<'_, f64>)>,
) -> Result<RegValue> {
    match kind {
        RegularizerKind::Binary01 { p1, p2 } => r_binary01(ca, *p1, *p2),
        RegularizerKind::BinaryPm1 { p1, p2 } => r_binary_pm1(ca, *p1, *p2),
        RegularizerKind::MultiLevel { levels, exponents } => r_multilevel(ca, levels, exponents),
        RegularizerKind::Transmittance { target } => r_transmittance(ca, *target),
        RegularizerKind::SnapshotGroup => Ok(r_snapshot_group(ca)),
        RegularizerKind::Correlation => r_correlation(ca),
        RegularizerKind::Conditionality => {
            let Some((model, scenes)) = conditioning else {
                return param_err("conditionality needs a sensing model and a scene batch");
            };
            if !std::ptr::eq(model.aperture(), ca) && model.aperture() != ca {
                return param_err("conditionality sensing model must be built from the regularized aperture");
            }
            r_conditionality(model, scenes)
        }
    }
}

/// Per-term result inside an [`Aggregate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermValue {
    pub value: f64,
    pub rho: f64,
}

/// Weighted sum of all active terms.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub value: f64,
    pub grad: Array4<f64>,
    pub terms: Vec<TermValue>,
}

/// `sum_q rho_q(epoch) * R_q(ca)` and its gradient.
pub fn aggregate(
    specs: &[RegularizerSpec],
    ca: &CodedApertureSet,
    conditioning: Option<(&SensingModel<'_>, ArrayView2<'_, f64>)>,
    epoch: usize,
) -> Result<Aggregate> {
    let mut grad = Array4::zeros(ca.dim());
    let mut value = 0.0;
    let mut terms = Vec::with_capacity(specs.len());
    for spec in specs {
        let rho = rho_step(&spec.rho, epoch);
        let r = evaluate_term(&spec.kind, ca, conditioning)?;
        value += rho * r.value;
        grad.scaled_add(rho, &r.grad);
        terms.push(TermValue { value: r.value, rho });
    }
    Ok(Aggregate { value, grad, terms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensing::SensingKind;
    use ndarray::Array2;

    fn single(v: f64) -> CodedApertureSet {
        CodedApertureSet::from_vec((1, 1, 1, 1), vec![v]).unwrap()
    }

    #[test]
    fn binary01_examples() {
        assert_eq!(r_binary01(&single(0.0), 1.3, 2.0).unwrap().value, 0.0);
        let half = r_binary01(&single(0.5), 1.0, 1.0).unwrap();
        assert_eq!(half.value, 0.0625);
        assert_eq!(half.grad[[0, 0, 0, 0]], 0.0);
        let q = r_binary01(&single(0.25), 1.0, 1.0).unwrap();
        assert!((q.grad[[0, 0, 0, 0]] - 0.1875).abs() < 1e-15);
        assert!(r_binary01(&single(0.2), 0.0, 1.0).is_err());
        assert!(r_binary01(&single(0.2), 1.0, -1.0).is_err());
    }

    #[test]
    fn binary_pm1_examples() {
        assert_eq!(r_binary_pm1(&single(1.0), 1.0, 1.0).unwrap().value, 0.0);
        assert_eq!(r_binary_pm1(&single(-1.0), 1.0, 1.0).unwrap().value, 0.0);
        assert_eq!(r_binary_pm1(&single(0.0), 1.0, 1.0).unwrap().value, 1.0);
        assert_eq!(r_binary_pm1(&single(0.5), 1.0, 1.0).unwrap().value, 0.5625);
    }

    #[test]
    fn multilevel_examples() {
        let l = [0.0, 0.5, 1.0];
        let e = [1.0, 1.0, 1.0];
        assert_eq!(r_multilevel(&single(0.5), &l, &e).unwrap().value, 0.0);
        assert_eq!(r_multilevel(&single(0.25), &l, &e).unwrap().value, 0.002197265625);
        assert!(r_multilevel(&single(0.25), &[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(r_multilevel(&single(0.25), &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn transmittance_examples() {
        let eye = CodedApertureSet::from_vec((1, 2, 2, 1), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(r_transmittance(&eye, 0.5).unwrap().value, 0.0);
        assert_eq!(r_transmittance(&eye, 0.25).unwrap().value, 0.0625);
        let z = CodedApertureSet::zeros(1, 2, 2, 1).unwrap();
        assert_eq!(r_transmittance(&z, 0.0).unwrap().value, 0.0);
        assert!(r_transmittance(&z, 1.5).is_err());
    }

    #[test]
    fn snapshot_group_examples() {
        let half = CodedApertureSet::new(Array4::from_elem((1, 2, 2, 1), 0.5)).unwrap();
        assert_eq!(r_snapshot_group(&half).value, 1.0);
        let z = CodedApertureSet::zeros(2, 2, 2, 1).unwrap();
        let r = r_snapshot_group(&z);
        assert_eq!(r.value, 0.0);
        assert!(r.grad.iter().all(|&g| g == 0.0));
        let two = CodedApertureSet::from_vec((2, 1, 2, 1), vec![3.0, 0.0, 0.0, 4.0]).unwrap();
        assert_eq!(r_snapshot_group(&two).value, 7.0);
    }

    #[test]
    fn correlation_examples() {
        let mut v = vec![1.0; 4];
        v.extend([0.0; 4]);
        let disjoint = CodedApertureSet::from_vec((2, 2, 2, 1), v).unwrap();
        assert_eq!(r_correlation(&disjoint).unwrap().value, 0.0);
        let ones = CodedApertureSet::new(Array4::from_elem((2, 2, 2, 1), 1.0)).unwrap();
        assert_eq!(r_correlation(&ones).unwrap().value, 1.0);
        let three = CodedApertureSet::new(Array4::from_elem((3, 1, 1, 1), 0.5)).unwrap();
        assert_eq!(r_correlation(&three).unwrap().value, 0.125);
        assert!(r_correlation(&single(0.5)).is_err());
    }

    #[test]
    fn conditionality_examples() {
        let mut eye = vec![0.0; 9];
        for k in 0..3 {
            eye[4 * k] = 1.0;
        }
        let ortho = CodedApertureSet::from_vec((3, 1, 3, 1), eye).unwrap();
        let model = SensingModel::new(SensingKind::Spc, &ortho).unwrap();
        let batch = Array2::from_shape_vec((2, 3), vec![0.3, -1.0, 2.0, 0.7, 0.1, 0.0]).unwrap();
        assert!(r_conditionality(&model, batch.view()).unwrap().value.abs() < 1e-15);

        let row = CodedApertureSet::from_vec((1, 1, 2, 1), vec![1.0, 1.0]).unwrap();
        let model = SensingModel::new(SensingKind::Spc, &row).unwrap();
        let e1 = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        assert_eq!(r_conditionality(&model, e1.view()).unwrap().value, 1.0);

        let zero = CodedApertureSet::zeros(2, 1, 3, 1).unwrap();
        let model = SensingModel::new(SensingKind::Spc, &zero).unwrap();
        let want = (0.09 + 1.0 + 4.0 + 0.49 + 0.01) / 2.0;
        assert!((r_conditionality(&model, batch.view()).unwrap().value - want).abs() < 1e-12);
        assert!(r_conditionality(&model, batch.slice(ndarray::s![0..0, ..])).is_err());
    }

    #[test]
    fn alpha_examples() {
        let s = RhoSchedule::dynamic(1e-11, 1e-5, 60, 10).unwrap();
        assert_eq!(s.alpha, 10.0);
        assert!(RhoSchedule::dynamic(1e-5, 1e-5, 60, 10).is_err());
        let ten = RhoSchedule::dynamic(1e-15, 1e-5, 100, 10).unwrap();
        assert_eq!(ten.updates(), 10);
        assert!((ten.alpha - 10.0).abs() < 1e-12);
    }

    #[test]
    fn rho_step_examples() {
        let mut s = RhoSchedule::dynamic(1e-9, 1e-5, 100, 10).unwrap();
        s.alpha = 10.0;
        assert_eq!(rho_step(&s, 0), 1e-9);
        assert!((rho_step(&s, 25) / 1e-7 - 1.0).abs() < 1e-12);
        let c = RhoSchedule::constant(1e-5);
        assert!((0..50).all(|e| rho_step(&c, e) == 1e-5));
    }

    #[test]
    fn aggregate_examples() {
        let ca = CodedApertureSet::from_vec((2, 1, 2, 1), vec![0.2, 0.7, 0.9, 0.4]).unwrap();
        let empty = aggregate(&[], &ca, None, 0).unwrap();
        assert_eq!(empty.value, 0.0);
        assert!(empty.grad.iter().all(|&g| g == 0.0));

        let b = RegularizerKind::Binary01 { p1: 1.0, p2: 1.0 };
        let one = aggregate(
            &[RegularizerSpec {
                kind: b.clone(),
                rho: RhoSchedule::constant(1.0),
            }],
            &ca,
            None,
            3,
        )
        .unwrap();
        let direct = r_binary01(&ca, 1.0, 1.0).unwrap();
        assert_eq!(one.value, direct.value);
        assert_eq!(one.grad, direct.grad);

        let t = RegularizerKind::Transmittance { target: 0.3 };
        let both = aggregate(
            &[
                RegularizerSpec {
                    kind: b,
                    rho: RhoSchedule::constant(2.0),
                },
                RegularizerSpec {
                    kind: t,
                    rho: RhoSchedule::constant(3.0),
                },
            ],
            &ca,
            None,
            0,
        )
        .unwrap();
        let tr = r_transmittance(&ca, 0.3).unwrap();
        assert!((both.value - (2.0 * direct.value + 3.0 * tr.value)).abs() < 1e-15);
        for ((g, a), b) in both.grad.iter().zip(direct.grad.iter()).zip(tr.grad.iter()) {
            assert!((g - (2.0 * a + 3.0 * b)).abs() < 1e-15);
        }
        assert_eq!(both.terms[1].rho, 3.0);
    }

    #[test]
    fn biased_exponents_pull_toward_one() {
        for p2 in [1.5, 2.0, 3.0] {
            let crest = 1.0 / (1.0 + p2);
            for eps in [1e-3, 1e-2, 0.1] {
                let up = r_binary01(&single(0.5 + eps), 1.0, p2).unwrap().grad[[0, 0, 0, 0]];
                let down = r_binary01(&single(0.5 - eps), 1.0, p2).unwrap().grad[[0, 0, 0, 0]];
                assert!(up < 0.0 && down < 0.0, "p2={p2} eps={eps}: {up} {down}");
                let mirrored = r_binary01(&single(0.5 + eps), p2, 1.0).unwrap().grad[[0, 0, 0, 0]];
                assert!(mirrored > 0.0);
            }
            let near = r_binary01(&single(crest), 1.0, p2).unwrap().grad[[0, 0, 0, 0]];
            assert!(near.abs() < 1e-12, "interior maximum at {crest}");
        }
    }
}
