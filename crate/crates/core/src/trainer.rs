//! Coupled optimization of aperture trainables and decoder weights.
//!
//! Each mini-batch runs
//! `expand -> gate -> CA noise -> sense -> measurement noise -> decode -> loss`,
//! back-propagates the task loss through the whole chain, adds the weighted
//! regularizer gradient on the aperture and takes one optimizer step.
//!
//! Batches are split into fixed-size chunks that may be evaluated on the
//! rayon pool. Chunk results are reduced in chunk order and chunk boundaries
//! do not depend on the thread count, so a run is reproducible bit for bit
//! for a given config, seed and dataset.

use std::fmt::Write as _;

use ndarray::{s, Array2, Array4, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ca::{
    expand, expand_backward, inject_ca_noise_masked, transmittance_of, CaParameterization, CodedApertureSet, NoiseSpec,
};
use crate::data::Dataset;
use crate::decoder::{backward, forward, loss_from_cache, DecoderNetwork, LossKind, NetworkGrad, OutputGrad, Target};
use crate::error::{param_err, shape_err, Error, Result};
use crate::metrics::binarization_residual;
use crate::par;
use crate::regularizers::{aggregate, rho_step, Aggregate, RegularizerKind, RegularizerSpec};
use crate::sensing::{add_measurement_noise_rows, SensingKind, SensingModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Reconstruction,
}

impl Task {
    pub fn loss_kind(self) -> LossKind {
        match self {
            Task::Classification => LossKind::CrossEntropy,
            Task::Reconstruction => LossKind::Mse,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            lr: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl OptimizerKind {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr, .. } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }
}

/// First-order optimizer with one state slot per parameter group.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, group_sizes: &[usize]) -> Self {
        Self {
            kind,
            step: 0,
            first: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Advances the shared step counter used for Adam bias correction.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates one group in place with learning rate `lr * lr_scale`.
    pub fn update(&mut self, group: usize, params: &mut [f64], grad: &[f64], lr_scale: f64) {
        debug_assert_eq!(params.len(), grad.len());
        if lr_scale == 0.0 {
            return;
        }
        match self.kind {
            OptimizerKind::Sgd { lr, momentum } => {
                let lr = lr * lr_scale;
                let vel = &mut self.first[group];
                for ((p, g), v) in params.iter_mut().zip(grad).zip(vel.iter_mut()) {
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                let lr = lr * lr_scale;
                let t = self.step.max(1);
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let (m, v) = (&mut self.first[group], &mut self.second[group]);
                for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Zeroes shots whose mean transmittance falls below `threshold` in the
/// forward pass. `literal` flips the comparison and zeroes shots at or
/// above the threshold instead.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSpec {
    pub threshold: f64,
    #[serde(default)]
    pub literal: bool,
}

/// Gated copy of `ca` and the mask of shots that survive.
pub fn snapshot_gate(ca: &CodedApertureSet, gate: &GateSpec) -> Result<(CodedApertureSet, Vec<bool>)> {
    if !(0.0..=1.0).contains(&gate.threshold) {
        return param_err(format!("gate threshold {} outside [0, 1]", gate.threshold));
    }
    let active = (0..ca.shots())
        .map(|s| {
            let t = transmittance_of(ca, s)?;
            Ok(if gate.literal {
                t < gate.threshold
            } else {
                t >= gate.threshold
            })
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok((ca.with_zeroed_shots(&active), active))
}

fn apply_gate(ca: CodedApertureSet, gate: Option<&GateSpec>) -> Result<(CodedApertureSet, Vec<bool>)> {
    match gate {
        Some(g) => snapshot_gate(&ca, g),
        None => {
            let n = ca.shots();
            Ok((ca, vec![true; n]))
        }
    }
}

/// Everything that shapes a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Multiplies the learning rate for aperture trainables; 0 freezes them.
    pub ca_lr_multiplier: f64,
    pub seed: u64,
    pub noise: NoiseSpec,
    pub gate: Option<GateSpec>,
    pub regularizers: Vec<RegularizerSpec>,
    pub task: Task,
    /// Weight on the task term; 0 trains the aperture on regularizers alone.
    pub task_weight: f64,
    /// Fixed factor applied to measurements before the decoder.
    pub measurement_scale: f64,
    /// Samples per reduction chunk inside a batch.
    pub chunk_size: usize,
    /// Print one progress line per epoch.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            optimizer: OptimizerKind::default(),
            ca_lr_multiplier: 1.0,
            seed: 0,
            noise: NoiseSpec::none(),
            gate: None,
            regularizers: Vec::new(),
            task: Task::Classification,
            task_weight: 1.0,
            measurement_scale: 1.0,
            chunk_size: 64,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return param_err("epochs must be at least 1");
        }
        if self.batch_size == 0 || self.chunk_size == 0 {
            return param_err("batch and chunk sizes must be at least 1");
        }
        if !(self.optimizer.lr() >= 0.0) {
            return param_err("learning rate must be non-negative");
        }
        if !(self.ca_lr_multiplier >= 0.0 && self.task_weight >= 0.0 && self.measurement_scale > 0.0) {
            return param_err("multipliers must be non-negative and the measurement scale positive");
        }
        Ok(())
    }

    /// Levels used for the binarization residual in histories: those of the
    /// first quantizing regularizer, else `{0, 1}`.
    pub fn residual_levels(&self) -> Vec<f64> {
        self.regularizers
            .iter()
            .find_map(|r| r.kind.target_levels())
            .unwrap_or_else(|| vec![0.0, 1.0])
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task_loss: f64,
    pub reg_values: Vec<f64>,
    pub rhos: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub binarization_residual: f64,
    pub active_shots: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainHistory {
    pub term_names: Vec<String>,
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// CSV text with a fixed header; floats use 17 significant digits.
    pub fn to_csv(&self) -> String {
        let shots = self.records.first().map_or(0, |r| r.transmittance.len());
        let mut out = String::from("epoch,task_loss");
        for n in &self.term_names {
            let _ = write!(out, ",{n}_value");
        }
        for n in &self.term_names {
            let _ = write!(out, ",{n}_rho");
        }
        out.push_str(",binarization_residual,active_shots");
        for s in 0..shots {
            let _ = write!(out, ",transmittance_{s}");
        }
        out.push('\n');
        for r in &self.records {
            let _ = write!(out, "{},{:.16e}", r.epoch, r.task_loss);
            for v in r.reg_values.iter().chain(&r.rhos) {
                let _ = write!(out, ",{v:.16e}");
            }
            let _ = write!(out, ",{:.16e},{}", r.binarization_residual, r.active_shots);
            for t in &r.transmittance {
                let _ = write!(out, ",{t:.16e}");
            }
            out.push('\n');
        }
        out
    }
}

/// Trained state after [`train_e2e`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub param: CaParameterization,
    pub net: DecoderNetwork,
    pub history: TrainHistory,
    pub gate: Option<GateSpec>,
}

impl TrainOutcome {
    /// Expanded aperture with the snapshot gate applied, as it would be
    /// deployed.
    pub fn effective_aperture(&self) -> Result<CodedApertureSet> {
        Ok(apply_gate(expand(&self.param)?, self.gate.as_ref())?.0)
    }
}

/// Gradients of the full objective on one batch.
#[derive(Clone, Debug)]
pub struct BatchGrad {
    /// Unweighted mean task loss.
    pub task_loss: f64,
    pub reg: Aggregate,
    /// `task_weight * task_loss + sum_q rho_q R_q`.
    pub objective: f64,
    pub trainable_grad: Array4<f64>,
    pub net_grad: NetworkGrad,
    pub active: Vec<bool>,
}

/// Batch targets matching the task.
fn batch_target<'a>(task: Task, labels: Option<&'a [usize]>, scenes: ArrayView2<'a, f64>) -> Result<Target<'a>> {
    match task {
        Task::Classification => labels
            .map(Target::Classes)
            .ok_or_else(|| Error::InvalidParameter("classification needs labels".into())),
        Task::Reconstruction => Ok(Target::Values(scenes)),
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, epoch: usize, batch: usize, slot: u64) -> u64 {
    mix(mix(mix(seed ^ 0xA5A5_A5A5) ^ epoch as u64) ^ batch as u64) ^ mix(slot)
}

/// Identifies the noise draws of one batch.
#[derive(Clone, Copy, Debug)]
pub struct NoiseContext {
    pub seed: u64,
    pub epoch: usize,
    pub batch: usize,
}

struct ChunkOut {
    loss: f64,
    net: NetworkGrad,
    ca: Array4<f64>,
}

/// Objective and gradients on one batch. `noise` enables both noise
/// sources; `None` evaluates the noiseless objective.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradients(
    config: &TrainConfig,
    param: &CaParameterization,
    net: &DecoderNetwork,
    kind: SensingKind,
    scenes: ArrayView2<'_, f64>,
    labels: Option<&[usize]>,
    epoch: usize,
    noise: Option<NoiseContext>,
) -> Result<BatchGrad> {
    batch_gradients_inner(config, param, net, kind, scenes, labels, epoch, noise, true)
}

#[allow(clippy::too_many_arguments)]
fn batch_gradients_inner(
    config: &TrainConfig,
    param: &CaParameterization,
    net: &DecoderNetwork,
    kind: SensingKind,
    scenes: ArrayView2<'_, f64>,
    labels: Option<&[usize]>,
    epoch: usize,
    noise: Option<NoiseContext>,
    want_ca: bool,
) -> Result<BatchGrad> {
    let rows = scenes.nrows();
    if rows == 0 {
        return shape_err("empty batch");
    }
    let ca = expand(param)?;
    let (gated, active) = apply_gate(ca.clone(), config.gate.as_ref())?;
    let sensed = match noise {
        Some(ctx) if config.noise.ca.is_some() => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed, ctx.epoch, ctx.batch, u64::MAX));
            inject_ca_noise_masked(&gated, &config.noise, &active, ca.max_abs(), &mut rng)?
        }
        _ => gated,
    };
    let model = SensingModel::new(kind, &sensed)?;
    if model.scene_len() != scenes.ncols() {
        return shape_err(format!(
            "scene length {} does not match sensing length {}",
            scenes.ncols(),
            model.scene_len()
        ));
    }
    let loss_kind = config.task.loss_kind();
    let scale = config.measurement_scale;
    let weight = config.task_weight;
    let ranges: Vec<(usize, usize)> = (0..rows)
        .step_by(config.chunk_size)
        .map(|lo| (lo, (lo + config.chunk_size).min(rows)))
        .collect();
    let parts = par::map_ordered(&ranges, |ci, &(lo, hi)| -> Result<ChunkOut> {
        let f = scenes.slice(s![lo..hi, ..]);
        let mut g = model.forward_batch(f)?;
        if let (Some(snr), Some(ctx)) = (config.noise.snr_db, noise) {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed, ctx.epoch, ctx.batch, ci as u64));
            add_measurement_noise_rows(&mut g, Some(snr), &mut rng)?;
        }
        if scale != 1.0 {
            g.mapv_inplace(|v| v * scale);
        }
        let cache = forward(net, g.view())?;
        let target = batch_target(config.task, labels.map(|l| &l[lo..hi]), f)?;
        let out = loss_from_cache(loss_kind, &cache, target)?;
        let share = (hi - lo) as f64 / rows as f64;
        let k = share * weight;
        let upstream = match out.grad {
            OutputGrad::Activations(a) => OutputGrad::Activations(a * k),
            OutputGrad::Logits(a) => OutputGrad::Logits(a * k),
        };
        let (net_grad, dg) = backward(net, &cache, upstream)?;
        let ca_grad = if want_ca {
            let dg = if scale != 1.0 { dg * scale } else { dg };
            model.ca_grad_batch(f, dg.view())?
        } else {
            Array4::zeros((0, 0, 0, 0))
        };
        Ok(ChunkOut {
            loss: out.value * share,
            net: net_grad,
            ca: ca_grad,
        })
    });
    let mut task_loss = 0.0;
    let mut net_grad = NetworkGrad::zeros_like(net);
    let mut ca_grad = Array4::zeros(ca.dim());
    for part in parts {
        let part = part?;
        task_loss += part.loss;
        net_grad.add_assign(&part.net);
        if want_ca {
            ca_grad += &part.ca;
        }
    }
    for (s, &on) in active.iter().enumerate() {
        if !on {
            ca_grad.index_axis_mut(ndarray::Axis(0), s).fill(0.0);
        }
    }
    let needs_conditioning = config
        .regularizers
        .iter()
        .any(|r| r.kind == RegularizerKind::Conditionality);
    let reg_model;
    let conditioning = if needs_conditioning {
        reg_model = SensingModel::new(kind, &ca)?;
        Some((&reg_model, scenes))
    } else {
        None
    };
    let reg = aggregate(&config.regularizers, &ca, conditioning, epoch)?;
    ca_grad += &reg.grad;
    let trainable_grad = expand_backward(param, ca_grad.view())?;
    Ok(BatchGrad {
        task_loss,
        objective: weight * task_loss + reg.value,
        reg,
        trainable_grad,
        net_grad,
        active,
    })
}

fn check_dataset(config: &TrainConfig, data: &Dataset, net: &DecoderNetwork) -> Result<()> {
    if data.is_empty() {
        return param_err("training set is empty");
    }
    match config.task {
        Task::Classification => {
            if data.labels.is_none() {
                return param_err("classification needs labelled data");
            }
            if let Some(k) = data.num_classes() {
                if k > net.output_len() {
                    return param_err(format!("{k} classes but the decoder has {} outputs", net.output_len()));
                }
            }
        }
        Task::Reconstruction => {
            if net.output_len() != data.scene_len() {
                return param_err(format!(
                    "reconstruction decoder outputs {} values for scenes of {}",
                    net.output_len(),
                    data.scene_len()
                ));
            }
        }
    }
    Ok(())
}

fn group_sizes(param: &CaParameterization, net: &DecoderNetwork) -> Vec<usize> {
    let mut sizes = vec![param.trainables().len()];
    for l in net.layers() {
        sizes.push(l.weights.len());
        sizes.push(l.bias.len());
    }
    sizes
}

fn apply_step(
    opt: &mut Optimizer,
    config: &TrainConfig,
    param: &mut CaParameterization,
    net: &mut DecoderNetwork,
    grad: &BatchGrad,
) {
    opt.begin_step();
    let ca_grad = grad.trainable_grad.as_slice().expect("contiguous");
    opt.update(0, param.trainables_mut(), ca_grad, config.ca_lr_multiplier);
    for (k, (layer, (dw, db))) in net.layers_mut().iter_mut().zip(&grad.net_grad.layers).enumerate() {
        if !layer.weights.is_standard_layout() {
            layer.weights = layer.weights.as_standard_layout().into_owned();
        }
        let w = layer.weights.as_slice_mut().expect("standard layout");
        opt.update(1 + 2 * k, w, dw.as_slice().expect("contiguous"), 1.0);
        let b = layer.bias.as_slice_mut().expect("contiguous");
        opt.update(2 + 2 * k, b, db.as_slice().expect("contiguous"), 1.0);
    }
}

fn epoch_record(
    config: &TrainConfig,
    param: &CaParameterization,
    kind: SensingKind,
    probe: ArrayView2<'_, f64>,
    epoch: usize,
    task_loss: f64,
    levels: &[f64],
) -> Result<EpochRecord> {
    let ca = expand(param)?;
    let needs_conditioning = config
        .regularizers
        .iter()
        .any(|r| r.kind == RegularizerKind::Conditionality);
    let model;
    let conditioning = if needs_conditioning {
        model = SensingModel::new(kind, &ca)?;
        Some((&model, probe))
    } else {
        None
    };
    let reg = aggregate(&config.regularizers, &ca, conditioning, epoch)?;
    let (_, active) = apply_gate(ca.clone(), config.gate.as_ref())?;
    Ok(EpochRecord {
        epoch,
        task_loss,
        reg_values: reg.terms.iter().map(|t| t.value).collect(),
        rhos: config.regularizers.iter().map(|r| rho_step(&r.rho, epoch)).collect(),
        transmittance: (0..ca.shots())
            .map(|s| transmittance_of(&ca, s))
            .collect::<Result<_>>()?,
        binarization_residual: binarization_residual(&ca, levels)?,
        active_shots: active.iter().filter(|&&a| a).count(),
    })
}

/// Runs the coupled optimization and returns the trained state.
pub fn train_e2e(
    config: &TrainConfig,
    data: &Dataset,
    mut param: CaParameterization,
    kind: SensingKind,
    mut net: DecoderNetwork,
) -> Result<TrainOutcome> {
    config.validate()?;
    param.validate()?;
    check_dataset(config, data, &net)?;
    let mut opt = Optimizer::new(config.optimizer, &group_sizes(&param, &net));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let levels = config.residual_levels();
    let probe = data.scenes.slice(s![0..data.len().min(32), ..]);
    let mut history = TrainHistory {
        term_names: config
            .regularizers
            .iter()
            .enumerate()
            .map(|(i, r)| format!("r{i}_{}", r.kind.name()))
            .collect(),
        records: Vec::with_capacity(config.epochs),
    };
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let scenes = data.scenes.select(ndarray::Axis(0), idx);
            let labels: Option<Vec<usize>> = data.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
            let ctx = NoiseContext {
                seed: config.seed,
                epoch,
                batch: b,
            };
            let grad = batch_gradients_inner(
                config,
                &param,
                &net,
                kind,
                scenes.view(),
                labels.as_deref(),
                epoch,
                Some(ctx),
                config.ca_lr_multiplier != 0.0,
            )?;
            if !grad.objective.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += grad.task_loss * idx.len() as f64;
            apply_step(&mut opt, config, &mut param, &mut net, &grad);
        }
        let record = epoch_record(
            config,
            &param,
            kind,
            probe,
            epoch,
            loss_sum / data.len() as f64,
            &levels,
        )?;
        if config.verbose {
            let rhos = record
                .rhos
                .iter()
                .map(|r| format!("{r:.3e}"))
                .collect::<Vec<_>>()
                .join(" ");
            let mean_t = record.transmittance.iter().sum::<f64>() / record.transmittance.len() as f64;
            println!(
                "epoch {:>4}  loss {:.6}  rho [{}]  transmittance {:.4}  residual {:.3e}  active {}",
                epoch, record.task_loss, rhos, mean_t, record.binarization_residual, record.active_shots
            );
        }
        history.records.push(record);
    }
    Ok(TrainOutcome {
        param,
        net,
        history,
        gate: config.gate,
    })
}

/// Decoder outputs for every scene, without noise.
pub fn infer(
    ca: &CodedApertureSet,
    kind: SensingKind,
    net: &DecoderNetwork,
    scenes: ArrayView2<'_, f64>,
    measurement_scale: f64,
) -> Result<Array2<f64>> {
    let model = SensingModel::new(kind, ca)?;
    let rows = scenes.nrows();
    let ranges: Vec<(usize, usize)> = (0..rows).step_by(256).map(|lo| (lo, (lo + 256).min(rows))).collect();
    let parts = par::map_ordered(&ranges, |_, &(lo, hi)| -> Result<Array2<f64>> {
        let mut g = model.forward_batch(scenes.slice(s![lo..hi, ..]))?;
        g.mapv_inplace(|v| v * measurement_scale);
        Ok(forward(net, g.view())?.output)
    });
    let mut out = Array2::zeros((rows, net.output_len()));
    for (&(lo, hi), part) in ranges.iter().zip(parts) {
        out.slice_mut(s![lo..hi, ..]).assign(&part?);
    }
    Ok(out)
}

/// Mean noiseless task loss of a trained system on `data`.
pub fn evaluate_task_loss(
    ca: &CodedApertureSet,
    kind: SensingKind,
    net: &DecoderNetwork,
    data: &Dataset,
    task: Task,
    measurement_scale: f64,
) -> Result<f64> {
    let model = SensingModel::new(kind, ca)?;
    let mut g = model.forward_batch(data.scenes.view())?;
    g.mapv_inplace(|v| v * measurement_scale);
    let cache = forward(net, g.view())?;
    let target = batch_target(task, data.labels.as_deref(), data.scenes.view())?;
    Ok(loss_from_cache(task.loss_kind(), &cache, target)?.value)
}

/// Predicted classes for every scene.
pub fn predict_classes(
    ca: &CodedApertureSet,
    kind: SensingKind,
    net: &DecoderNetwork,
    scenes: ArrayView2<'_, f64>,
    measurement_scale: f64,
) -> Result<Vec<usize>> {
    let out = infer(ca, kind, net, scenes, measurement_scale)?;
    Ok(out
        .outer_iter()
        .map(|row| crate::decoder::predict_class(row.as_slice().expect("contiguous")))
        .collect())
}

/// Max relative error between analytic and central-difference gradients
/// for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub group: String,
    pub parameters: usize,
    pub max_rel_error: f64,
}

/// Small problem for [`gradient_check`].
#[derive(Clone, Debug)]
pub struct GradCheckInstance {
    pub param: CaParameterization,
    pub net: DecoderNetwork,
    pub kind: SensingKind,
    pub data: Dataset,
    pub epoch: usize,
}

/// Largest analytic-vs-numeric gap, normalized by the largest gradient
/// magnitude in the group (absolute when the whole group is ~0).
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / scale)
        .fold(0.0, f64::max)
}

/// Central differences with `step` against analytic gradients of the full
/// noiseless objective, per group: aperture trainables, then each decoder
/// layer (weights and bias together).
pub fn gradient_check(config: &TrainConfig, inst: &GradCheckInstance, step: f64) -> Result<Vec<GroupError>> {
    let total = trainable_count(inst);
    if total > 500 {
        return param_err(format!("{total} trainables is too many for a finite-difference check"));
    }
    let scenes = inst.data.scenes.view();
    let labels = inst.data.labels.as_deref();
    let objective = |param: &CaParameterization, net: &DecoderNetwork| -> Result<f64> {
        Ok(batch_gradients(config, param, net, inst.kind, scenes, labels, inst.epoch, None)?.objective)
    };
    let analytic = batch_gradients(
        config,
        &inst.param,
        &inst.net,
        inst.kind,
        scenes,
        labels,
        inst.epoch,
        None,
    )?;

    let n_ca = inst.param.trainables().len();
    let numeric_ca = par::map_range(n_ca, |i| -> Result<f64> {
        let mut plus = inst.param.clone();
        plus.trainables_mut()[i] += step;
        let mut minus = inst.param.clone();
        minus.trainables_mut()[i] -= step;
        Ok((objective(&plus, &inst.net)? - objective(&minus, &inst.net)?) / (2.0 * step))
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let mut report = vec![GroupError {
        group: "aperture".into(),
        parameters: n_ca,
        max_rel_error: max_relative_error(analytic.trainable_grad.as_slice().expect("contiguous"), &numeric_ca),
    }];

    for (k, layer) in inst.net.layers().iter().enumerate() {
        let nw = layer.weights.len();
        let nb = layer.bias.len();
        let numeric = par::map_range(nw + nb, |i| -> Result<f64> {
            let perturbed = |delta: f64| {
                let mut net = inst.net.clone();
                let l = &mut net.layers_mut()[k];
                if i < nw {
                    let (r, c) = (i / l.weights.ncols(), i % l.weights.ncols());
                    l.weights[[r, c]] += delta;
                } else {
                    l.bias[i - nw] += delta;
                }
                net
            };
            Ok((objective(&inst.param, &perturbed(step))? - objective(&inst.param, &perturbed(-step))?) / (2.0 * step))
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
        let (dw, db) = &analytic.net_grad.layers[k];
        let mut a: Vec<f64> = dw.iter().copied().collect();
        a.extend(db.iter());
        report.push(GroupError {
            group: format!("decoder_layer_{k}"),
            parameters: nw + nb,
            max_rel_error: max_relative_error(&a, &numeric),
        });
    }
    Ok(report)
}

fn trainable_count(inst: &GradCheckInstance) -> usize {
    inst.param.trainables().len() + inst.net.parameter_count()
}
