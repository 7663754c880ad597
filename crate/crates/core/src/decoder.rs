//! Small dense decoder network with manual forward and reverse passes.
//!
//! All passes are batch-first: inputs are `B x in` matrices and each layer
//! computes `act(X W^T + b)`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
    /// Row-wise softmax; only valid on the final layer.
    Softmax,
}

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
            Activation::Softmax => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Sigmoid,
            3 => Activation::Softmax,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `out x in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderNetwork {
    layers: Vec<Dense>,
}

/// Values saved by [`forward`] for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl ForwardCache {
    /// Pre-activation values of the last layer.
    pub fn logits(&self) -> ArrayView2<'_, f64> {
        self.pre.last().expect("at least one layer").view()
    }
}

/// Gradient with respect to the network output, or with respect to the
/// final layer's pre-activation when a loss fused it with softmax.
#[derive(Clone, Debug, PartialEq)]
pub enum OutputGrad {
    Activations(Array2<f64>),
    Logits(Array2<f64>),
}

/// Per-layer `(dW, db)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGrad {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl NetworkGrad {
    pub fn zeros_like(net: &DecoderNetwork) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weights.dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &NetworkGrad) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }
}

impl DecoderNetwork {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return param_err("a network needs at least one layer");
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return shape_err(format!(
                    "layer {k} outputs {} but layer {} takes {}",
                    pair[0].outputs(),
                    k + 1,
                    pair[1].inputs()
                ));
            }
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return shape_err(format!("layer {k} bias length {} != {}", l.bias.len(), l.outputs()));
            }
            if l.activation == Activation::Softmax && k + 1 != layers.len() {
                return param_err("softmax is only allowed on the final layer");
            }
            if l.weights.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return param_err(format!("layer {k} has non-finite parameters"));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    pub fn output_activation(&self) -> Activation {
        self.layers.last().expect("non-empty").activation
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }
}

/// Glorot-uniform weights and zero biases. `sizes` lists every layer width
/// including the input, so `activations.len() == sizes.len() - 1`.
pub fn init_network<R: Rng + ?Sized>(
    sizes: &[usize],
    activations: &[Activation],
    rng: &mut R,
) -> Result<DecoderNetwork> {
    if sizes.len() < 2 {
        return param_err("need at least an input and an output size");
    }
    if activations.len() != sizes.len() - 1 {
        return param_err(format!(
            "{} activations for {} layers",
            activations.len(),
            sizes.len() - 1
        ));
    }
    if sizes.contains(&0) {
        return param_err("layer sizes must be positive");
    }
    let layers = sizes
        .windows(2)
        .zip(activations)
        .map(|(w, &activation)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new(-bound, bound).expect("bound > 0");
            Dense {
                weights: Array2::from_shape_simple_fn((fan_out, fan_in), || dist.sample(rng)),
                bias: Array1::zeros(fan_out),
                activation,
            }
        })
        .collect();
    DecoderNetwork::from_layers(layers)
}

fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn activate(act: Activation, z: &Array2<f64>) -> Array2<f64> {
    match act {
        Activation::Relu => z.mapv(|v| v.max(0.0)),
        Activation::Sigmoid => z.mapv(sigmoid),
        Activation::Identity => z.clone(),
        Activation::Softmax => softmax_rows(z),
    }
}

/// Batch forward pass.
pub fn forward(net: &DecoderNetwork, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
    if x.ncols() != net.input_len() {
        return shape_err(format!("input width {} != {}", x.ncols(), net.input_len()));
    }
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut pre = Vec::with_capacity(net.layers.len());
    let mut a = x.to_owned();
    for layer in &net.layers {
        let z = a.dot(&layer.weights.t()) + &layer.bias;
        let next = activate(layer.activation, &z);
        inputs.push(a);
        pre.push(z);
        a = next;
    }
    Ok(ForwardCache { inputs, pre, output: a })
}

/// Single-sample convenience around [`forward`].
pub fn forward_one(net: &DecoderNetwork, x: &[f64]) -> Result<(Array1<f64>, ForwardCache)> {
    let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    let cache = forward(net, view)?;
    let out = cache.output.row(0).to_owned();
    Ok((out, cache))
}

/// Reverse pass: parameter gradients and the gradient on the network input.
pub fn backward(
    net: &DecoderNetwork,
    cache: &ForwardCache,
    upstream: OutputGrad,
) -> Result<(NetworkGrad, Array2<f64>)> {
    if cache.pre.len() != net.layers.len() {
        return shape_err("forward cache does not belong to this network");
    }
    let last = net.layers.len() - 1;
    let mut delta = match upstream {
        OutputGrad::Logits(g) => {
            if g.dim() != cache.pre[last].dim() {
                return shape_err(format!("logit gradient {:?} != {:?}", g.dim(), cache.pre[last].dim()));
            }
            g
        }
        OutputGrad::Activations(g) => {
            if g.dim() != cache.output.dim() {
                return shape_err(format!("output gradient {:?} != {:?}", g.dim(), cache.output.dim()));
            }
            activation_backward(net.layers[last].activation, &cache.pre[last], &cache.output, g)
        }
    };
    let mut grads = Vec::with_capacity(net.layers.len());
    for k in (0..net.layers.len()).rev() {
        let layer = &net.layers[k];
        let input = &cache.inputs[k];
        if input.ncols() != layer.inputs() || delta.ncols() != layer.outputs() {
            return shape_err(format!("stale cache at layer {k}"));
        }
        let dw = delta.t().dot(input);
        let db = delta.sum_axis(Axis(0));
        let dx = delta.dot(&layer.weights);
        grads.push((dw, db));
        if k > 0 {
            let prev = &net.layers[k - 1];
            delta = activation_backward(prev.activation, &cache.pre[k - 1], input, dx);
        } else {
            delta = dx;
        }
    }
    grads.reverse();
    Ok((NetworkGrad { layers: grads }, delta))
}

fn activation_backward(act: Activation, z: &Array2<f64>, a: &Array2<f64>, mut up: Array2<f64>) -> Array2<f64> {
    match act {
        Activation::Identity => up,
        Activation::Relu => {
            up.zip_mut_with(z, |u, &zv| {
                if zv <= 0.0 {
                    *u = 0.0
                }
            });
            up
        }
        Activation::Sigmoid => {
            up.zip_mut_with(a, |u, &s| *u *= s * (1.0 - s));
            up
        }
        Activation::Softmax => {
            for (mut u, p) in up.axis_iter_mut(Axis(0)).zip(a.axis_iter(Axis(0))) {
                let dot: f64 = u.iter().zip(p.iter()).map(|(x, y)| x * y).sum();
                u.zip_mut_with(&p, |x, &pv| *x = pv * (*x - dot));
            }
            up
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// Targets for one batch.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Classes(&'a [usize]),
    Values(ArrayView2<'a, f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    /// Mean over the batch.
    pub value: f64,
    pub grad: OutputGrad,
}

fn one_hot_or_values(target: Target<'_>, rows: usize, cols: usize) -> Result<Array2<f64>> {
    match target {
        Target::Values(v) => {
            if v.dim() != (rows, cols) {
                return shape_err(format!("target {:?} != prediction ({rows}, {cols})", v.dim()));
            }
            Ok(v.to_owned())
        }
        Target::Classes(c) => {
            if c.len() != rows {
                return shape_err(format!("{} labels for {rows} predictions", c.len()));
            }
            let mut t = Array2::zeros((rows, cols));
            for (r, &k) in c.iter().enumerate() {
                if k >= cols {
                    return param_err(format!("class index {k} out of range for {cols} outputs"));
                }
                t[[r, k]] = 1.0;
            }
            Ok(t)
        }
    }
}

/// Loss on network outputs. For cross-entropy, `prediction` holds softmax
/// probabilities and the returned gradient is the fused `p - onehot` on the
/// logits.
pub fn loss(kind: LossKind, prediction: ArrayView2<'_, f64>, target: Target<'_>) -> Result<LossOutput> {
    let (rows, cols) = prediction.dim();
    if rows == 0 {
        return shape_err("empty batch");
    }
    let t = one_hot_or_values(target, rows, cols)?;
    match kind {
        LossKind::Mse => {
            let scale = 1.0 / (rows * cols) as f64;
            let diff = &prediction - &t;
            let value = diff.iter().map(|d| d * d).sum::<f64>() * scale;
            Ok(LossOutput {
                value,
                grad: OutputGrad::Activations(diff * (2.0 * scale)),
            })
        }
        LossKind::CrossEntropy => {
            let value = prediction
                .iter()
                .zip(t.iter())
                .filter(|(_, &y)| y != 0.0)
                .map(|(&p, &y)| -y * p.max(f64::MIN_POSITIVE).ln())
                .sum::<f64>()
                / rows as f64;
            Ok(LossOutput {
                value,
                grad: OutputGrad::Logits((&prediction - &t) / rows as f64),
            })
        }
    }
}

/// Cross-entropy straight from logits through log-sum-exp; other kinds
/// fall back to [`loss`] on the cached output.
pub fn loss_from_cache(kind: LossKind, cache: &ForwardCache, target: Target<'_>) -> Result<LossOutput> {
    if kind != LossKind::CrossEntropy {
        return loss(kind, cache.output.view(), target);
    }
    let logits = cache.logits();
    let (rows, cols) = logits.dim();
    let t = one_hot_or_values(target, rows, cols)?;
    let mut value = 0.0;
    for (z, y) in logits.axis_iter(Axis(0)).zip(t.axis_iter(Axis(0))) {
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        value += z.iter().zip(y.iter()).map(|(zv, yv)| yv * (lse - zv)).sum::<f64>();
    }
    Ok(LossOutput {
        value: value / rows as f64,
        grad: OutputGrad::Logits((&cache.output - &t) / rows as f64),
    })
}

/// Index of the largest output; the lowest index wins ties.
pub fn predict_class(output: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in output.iter().enumerate().skip(1) {
        if v > output[best] {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_network(&[4, 1], &[Activation::Identity], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = init_network(&[4, 1], &[Activation::Identity], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let bound = (6.0f64 / 5.0).sqrt();
        assert!(a.layers()[0].weights.iter().all(|w| w.abs() <= bound));
        assert!(a.layers()[0].bias.iter().all(|&b| b == 0.0));
        assert!(init_network(&[], &[], &mut ChaCha8Rng::seed_from_u64(1)).is_err());
        let big = init_network(
            &[196, 128, 10],
            &[Activation::Relu, Activation::Softmax],
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(big.parameter_count(), 26_506);
    }

    #[test]
    fn softmax_only_last() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(init_network(&[3, 3, 2], &[Activation::Softmax, Activation::Identity], &mut rng).is_err());
    }

    #[test]
    fn forward_examples() {
        let eye = DecoderNetwork::from_layers(vec![Dense {
            weights: Array2::eye(3),
            bias: Array1::zeros(3),
            activation: Activation::Identity,
        }])
        .unwrap();
        assert_eq!(
            forward_one(&eye, &[1.0, -2.0, 3.5]).unwrap().0.to_vec(),
            vec![1.0, -2.0, 3.5]
        );

        let soft = DecoderNetwork::from_layers(vec![Dense {
            weights: Array2::zeros((2, 1)),
            bias: Array1::zeros(2),
            activation: Activation::Softmax,
        }])
        .unwrap();
        assert_eq!(forward_one(&soft, &[7.0]).unwrap().0.to_vec(), vec![0.5, 0.5]);

        let relu = DecoderNetwork::from_layers(vec![Dense {
            weights: Array2::eye(2),
            bias: Array1::zeros(2),
            activation: Activation::Relu,
        }])
        .unwrap();
        assert_eq!(forward_one(&relu, &[-1.0, 2.0]).unwrap().0.to_vec(), vec![0.0, 2.0]);
        assert!(forward_one(&relu, &[1.0]).is_err());
    }

    #[test]
    fn softmax_is_stable_and_normalized() {
        let z = array![[1000.0, 1001.0, -1000.0], [0.0, 0.0, 0.0]];
        let p = softmax_rows(&z);
        for row in p.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn backward_examples() {
        let net = DecoderNetwork::from_layers(vec![Dense {
            weights: array![[0.7]],
            bias: array![0.1],
            activation: Activation::Identity,
        }])
        .unwrap();
        let x = array![[2.5]];
        let cache = forward(&net, x.view()).unwrap();
        let (g, dx) = backward(&net, &cache, OutputGrad::Activations(array![[1.0]])).unwrap();
        assert_eq!(g.layers[0].0[[0, 0]], 2.5);
        assert_eq!(g.layers[0].1[0], 1.0);
        assert_eq!(dx[[0, 0]], 0.7);
        let (g0, dx0) = backward(&net, &cache, OutputGrad::Activations(array![[0.0]])).unwrap();
        assert!(g0.layers[0].0.iter().chain(dx0.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn loss_examples() {
        let x = array![[0.3, -1.0]];
        assert_eq!(
            loss(LossKind::Mse, x.view(), Target::Values(x.view())).unwrap().value,
            0.0
        );
        let p = array![[0.5, 0.5]];
        let ce = loss(LossKind::CrossEntropy, p.view(), Target::Classes(&[0])).unwrap();
        assert!((ce.value - std::f64::consts::LN_2).abs() < 1e-12);
        let a = array![[0.0, 2.0]];
        let b = array![[1.0, 0.0]];
        assert_eq!(
            loss(LossKind::Mse, a.view(), Target::Values(b.view())).unwrap().value,
            2.5
        );
        assert!(loss(LossKind::CrossEntropy, p.view(), Target::Classes(&[2])).is_err());
    }

    #[test]
    fn fused_cross_entropy_matches_probability_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = init_network(&[5, 4, 3], &[Activation::Sigmoid, Activation::Softmax], &mut rng).unwrap();
        let x = Array2::from_shape_simple_fn((6, 5), || rng.random::<f64>());
        let labels = [0, 1, 2, 2, 1, 0];
        let cache = forward(&net, x.view()).unwrap();
        let a = loss(LossKind::CrossEntropy, cache.output.view(), Target::Classes(&labels)).unwrap();
        let b = loss_from_cache(LossKind::CrossEntropy, &cache, Target::Classes(&labels)).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict_class(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(predict_class(&[0.5, 0.5]), 0);
        assert_eq!(predict_class(&[1.0]), 0);
    }
}
