//! Desk-scale classifier with projected-subspace adapters.
//!
//! Adapted linear layers hold a frozen `W0`, a frozen (or optionally
//! trainable) projection pair `(A, B)` and a trainable r x r core `R`; the
//! effective weight is `W0 + (alpha/r) * A R B`. Activations are explicit,
//! reverse-mode gradients are hand-rolled, and every forward caches what the
//! backward pass and the curvature fits need.

mod checkpoint;
mod train;

pub use checkpoint::{checkpoint_load, checkpoint_save};
pub use train::{
    subsample_indices, train_map, train_with_schedule, EpochMetrics, LrSchedule, Regime,
    TrainConfig, TrainReport,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};
use crate::projections::ProjectionPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Frozen base layer plus projected adapter.
#[derive(Debug, Clone)]
pub struct AdaptedLinear {
    /// Frozen pretrained weight, input dim x output dim.
    pub w0: Matrix,
    /// Frozen bias, length = output dim.
    pub bias: Vec<f64>,
    pub pair: ProjectionPair,
    /// Trainable core, rank x rank. Initialized to zero so training starts
    /// exactly at the pretrained model.
    pub core: Matrix,
    /// `alpha / rank`.
    pub scale: f64,
    /// Train `A` and `B` too during the MAP phase (the posterior still
    /// covers only the core).
    pub trainable_ab: bool,
}

impl AdaptedLinear {
    pub fn in_dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w0.cols()
    }

    pub fn rank(&self) -> usize {
        self.pair.rank
    }

    /// Materialized effective weight `W0 + scale * A R B`.
    pub fn effective_weight(&self) -> Matrix {
        self.w0
            .add(&self.pair.a.matmul(&self.core).matmul(&self.pair.b).scaled(self.scale))
    }
}

#[derive(Debug, Clone)]
pub struct PlainLinear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Adapted(AdaptedLinear),
    Plain(PlainLinear),
    Activation(Activation),
}

impl Layer {
    fn out_dim(&self, in_dim: usize) -> usize {
        match self {
            Layer::Adapted(l) => l.out_dim(),
            Layer::Plain(l) => l.weight.cols(),
            Layer::Activation(_) => in_dim,
        }
    }
}

/// Layered classifier; the final layer must produce `classes` logits.
#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub classes: usize,
}

/// Per-layer activations recorded by a cached forward pass.
#[derive(Debug)]
pub struct ForwardCache {
    /// Input to each layer, in layer order.
    inputs: Vec<Matrix>,
    /// `x * A` for adapted layers (the core-layer input).
    core_inputs: Vec<Option<Matrix>>,
    logits: Matrix,
}

impl ForwardCache {
    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    /// Core-layer input `a = x A` for adapted layer `index`.
    pub fn core_input(&self, index: usize) -> Option<&Matrix> {
        self.core_inputs[index].as_ref()
    }

    /// Input activations per layer, in layer order.
    pub fn layer_inputs(&self) -> &[Matrix] {
        &self.inputs
    }
}

/// Gradients for all trainable parameters, mirrored on the layer list.
#[derive(Debug, Clone)]
pub enum LayerGrads {
    Adapted {
        core: Matrix,
        a: Option<Matrix>,
        b: Option<Matrix>,
    },
    Plain {
        weight: Matrix,
        bias: Vec<f64>,
    },
    None,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

/// Backward products needed by curvature fits in addition to gradients.
pub struct BackwardDetail {
    pub grads: Gradients,
    /// Per adapted layer: gradient of the objective at the core-layer output
    /// `o = (x A) R`, i.e. `scale * G_out * B^T`, one row per example.
    pub core_out_grads: Vec<Option<Matrix>>,
}

impl Network {
    /// Fresh MLP with the given linear widths (`widths[0]` = input dim,
    /// `widths.last()` = class count), an activation between consecutive
    /// linears, all layers plain and trainable.
    pub fn mlp(widths: &[usize], activation: Activation, seed: u64) -> Result<Network> {
        if widths.len() < 2 {
            return Err(Error::invalid_arg("mlp needs at least input and output widths"));
        }
        let mut rng = SeededRng::new(seed);
        let mut layers = Vec::new();
        for w in 0..widths.len() - 1 {
            let (n, m) = (widths[w], widths[w + 1]);
            let std = 1.0 / (n as f64).sqrt();
            let mut weight = Matrix::zeros(n, m);
            for v in weight.as_mut_slice() {
                *v = std * rng.next_normal();
            }
            layers.push(Layer::Plain(PlainLinear {
                weight,
                bias: vec![0.0; m],
                trainable: true,
            }));
            if w + 2 < widths.len() {
                layers.push(Layer::Activation(activation));
            }
        }
        Ok(Network {
            layers,
            classes: *widths.last().unwrap(),
        })
    }

    pub fn in_dim(&self) -> usize {
        match &self.layers[0] {
            Layer::Adapted(l) => l.in_dim(),
            Layer::Plain(l) => l.weight.rows(),
            Layer::Activation(_) => 0,
        }
    }

    /// Indices of adapted layers, in layer order (the theta ordering).
    pub fn adapted_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, Layer::Adapted(_)).then_some(i))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut dim = self.in_dim();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Adapted(l) => {
                    if l.in_dim() != dim {
                        return Err(shape_err("network", i, dim, l.in_dim()));
                    }
                    if l.pair.a.rows() != l.in_dim()
                        || l.pair.b.cols() != l.out_dim()
                        || l.core.rows() != l.rank()
                        || l.core.cols() != l.rank()
                        || l.bias.len() != l.out_dim()
                    {
                        return Err(Error::invalid_arg(format!(
                            "adapted layer {i}: inconsistent factor shapes"
                        )));
                    }
                }
                Layer::Plain(l) => {
                    if l.weight.rows() != dim {
                        return Err(shape_err("network", i, dim, l.weight.rows()));
                    }
                    if l.bias.len() != l.weight.cols() {
                        return Err(Error::invalid_arg(format!(
                            "plain layer {i}: bias length mismatch"
                        )));
                    }
                }
                Layer::Activation(_) => {}
            }
            dim = layer.out_dim(dim);
        }
        if dim != self.classes {
            return Err(Error::invalid_arg(format!(
                "network emits {dim} features but declares {} classes",
                self.classes
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.logits)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<ForwardCache> {
        if x.cols() != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                expected: format!("{} input features", self.in_dim()),
                got: format!("{}", x.cols()),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut core_inputs = vec![None; self.layers.len()];
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let next = match layer {
                Layer::Adapted(l) => {
                    let base = add_bias(&cur.matmul(&l.w0), &l.bias);
                    let xa = cur.matmul(&l.pair.a);
                    let update = xa.matmul(&l.core).matmul(&l.pair.b).scaled(l.scale);
                    core_inputs[i] = Some(xa);
                    base.add(&update)
                }
                Layer::Plain(l) => add_bias(&cur.matmul(&l.weight), &l.bias),
                Layer::Activation(Activation::Tanh) => {
                    let mut out = cur.clone();
                    for v in out.as_mut_slice() {
                        *v = v.tanh();
                    }
                    out
                }
                Layer::Activation(Activation::Relu) => {
                    let mut out = cur.clone();
                    for v in out.as_mut_slice() {
                        *v = v.max(0.0);
                    }
                    out
                }
            };
            inputs.push(cur);
            cur = next;
        }
        if !cur.is_finite() {
            return Err(Error::NonFinite("forward logits"));
        }
        Ok(ForwardCache {
            inputs,
            core_inputs,
            logits: cur,
        })
    }

    /// Gradient of mean NLL over the batch w.r.t. every trainable parameter.
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<Gradients> {
        let upstream = softmax_cross_entropy_grad(&cache.logits, labels)?;
        Ok(self.backward_detailed(cache, &upstream).grads)
    }

    /// Reverse pass from an arbitrary upstream gradient at the logits.
    pub fn backward_detailed(&self, cache: &ForwardCache, upstream: &Matrix) -> BackwardDetail {
        assert_eq!(upstream.rows(), cache.logits.rows());
        assert_eq!(upstream.cols(), cache.logits.cols());
        let mut grad = upstream.clone();
        let mut layer_grads = vec![LayerGrads::None; self.layers.len()];
        let mut core_out_grads = vec![None; self.layers.len()];

        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            match layer {
                Layer::Adapted(l) => {
                    let xa = cache.core_inputs[i].as_ref().expect("cached core input");
                    // g_core = scale * G B^T, one row per example.
                    let g_core = grad.matmul_nt(&l.pair.b).scaled(l.scale);
                    let core_grad = xa.matmul_tn(&g_core);
                    let (a_grad, b_grad) = if l.trainable_ab {
                        let a_g = input.matmul_tn(&g_core.matmul_nt(&l.core));
                        let b_g = xa.matmul(&l.core).matmul_tn(&grad).scaled(l.scale);
                        (Some(a_g), Some(b_g))
                    } else {
                        (None, None)
                    };
                    // dL/dx = G W0^T + g_core R^T A^T
                    let next = grad
                        .matmul_nt(&l.w0)
                        .add(&g_core.matmul_nt(&l.core).matmul_nt(&l.pair.a));
                    layer_grads[i] = LayerGrads::Adapted {
                        core: core_grad,
                        a: a_grad,
                        b: b_grad,
                    };
                    core_out_grads[i] = Some(g_core);
                    grad = next;
                }
                Layer::Plain(l) => {
                    if l.trainable {
                        let weight = input.matmul_tn(&grad);
                        let mut bias = vec![0.0; l.weight.cols()];
                        for r in 0..grad.rows() {
                            for (c, b) in bias.iter_mut().enumerate() {
                                *b += grad[(r, c)];
                            }
                        }
                        layer_grads[i] = LayerGrads::Plain { weight, bias };
                    }
                    grad = grad.matmul_nt(&l.weight);
                }
                Layer::Activation(Activation::Tanh) => {
                    let mut next = grad;
                    for (g, z) in next.as_mut_slice().iter_mut().zip(input.as_slice()) {
                        let t = z.tanh();
                        *g *= 1.0 - t * t;
                    }
                    grad = next;
                }
                Layer::Activation(Activation::Relu) => {
                    let mut next = grad;
                    for (g, z) in next.as_mut_slice().iter_mut().zip(input.as_slice()) {
                        if *z <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    grad = next;
                }
            }
        }
        BackwardDetail {
            grads: Gradients { layers: layer_grads },
            core_out_grads,
        }
    }
}

fn shape_err(op: &'static str, layer: usize, expected: usize, got: usize) -> Error {
    Error::ShapeMismatch {
        op,
        expected: format!("layer {layer} input dim {expected}"),
        got: format!("{got}"),
    }
}

fn add_bias(m: &Matrix, bias: &[f64]) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    out
}

/// Row-wise softmax with log-sum-exp stabilization.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean cross-entropy of integer labels under softmax logits.
pub fn loss_nll(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "loss_nll",
            expected: format!("{} labels", logits.rows()),
            got: format!("{}", labels.len()),
        });
    }
    let classes = logits.cols();
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::invalid_arg(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    Ok(total / labels.len() as f64)
}

/// `(softmax(logits) - onehot(labels)) / N`: upstream gradient of mean NLL.
fn softmax_cross_entropy_grad(logits: &Matrix, labels: &[usize]) -> Result<Matrix> {
    if logits.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "backward",
            expected: format!("{} labels", logits.rows()),
            got: format!("{}", labels.len()),
        });
    }
    let n = labels.len() as f64;
    let mut g = softmax(logits);
    for (i, &label) in labels.iter().enumerate() {
        g[(i, label)] -= 1.0;
    }
    Ok(g.scaled(1.0 / n))
}

/// Flattened core parameters `theta` with the layer offset table.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    pub values: Vec<f64>,
    pub layout: ThetaLayout,
}

/// Maps each adapted layer to its slice of theta (row-major core entries).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThetaLayout {
    pub slices: Vec<ThetaSlice>,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThetaSlice {
    pub layer: usize,
    pub offset: usize,
    pub rank: usize,
}

impl ThetaLayout {
    pub fn of(net: &Network) -> ThetaLayout {
        let mut slices = Vec::new();
        let mut offset = 0;
        for (i, layer) in net.layers.iter().enumerate() {
            if let Layer::Adapted(l) = layer {
                slices.push(ThetaSlice {
                    layer: i,
                    offset,
                    rank: l.rank(),
                });
                offset += l.rank() * l.rank();
            }
        }
        ThetaLayout { slices, dim: offset }
    }
}

/// Gather all core entries into a flat vector (layer order, row-major cores).
pub fn flatten(net: &Network) -> ThetaVector {
    let layout = ThetaLayout::of(net);
    let mut values = Vec::with_capacity(layout.dim);
    for slice in &layout.slices {
        if let Layer::Adapted(l) = &net.layers[slice.layer] {
            values.extend_from_slice(l.core.as_slice());
        }
    }
    ThetaVector { values, layout }
}

/// Write a flat theta vector back into the network cores.
pub fn unflatten(net: &mut Network, theta: &[f64]) -> Result<()> {
    let layout = ThetaLayout::of(net);
    if theta.len() != layout.dim {
        return Err(Error::ShapeMismatch {
            op: "unflatten",
            expected: format!("{} core entries", layout.dim),
            got: format!("{}", theta.len()),
        });
    }
    for slice in &layout.slices {
        if let Layer::Adapted(l) = &mut net.layers[slice.layer] {
            let len = slice.rank * slice.rank;
            l.core
                .as_mut_slice()
                .copy_from_slice(&theta[slice.offset..slice.offset + len]);
        }
    }
    Ok(())
}

/// Gradient entries for the cores only, in theta order.
pub fn core_grads_to_theta(net: &Network, grads: &Gradients) -> Vec<f64> {
    let layout = ThetaLayout::of(net);
    let mut out = Vec::with_capacity(layout.dim);
    for slice in &layout.slices {
        match &grads.layers[slice.layer] {
            LayerGrads::Adapted { core, .. } => out.extend_from_slice(core.as_slice()),
            _ => out.extend(std::iter::repeat(0.0).take(slice.rank * slice.rank)),
        }
    }
    out
}

/// Jacobian of the logits at a single input w.r.t. theta (C x dim),
/// computed by one reverse pass per class.
pub fn logit_jacobian(net: &Network, x_row: &Matrix) -> Result<Matrix> {
    assert_eq!(x_row.rows(), 1, "logit_jacobian expects a single input row");
    let cache = net.forward_cached(x_row)?;
    let classes = net.classes;
    let layout = ThetaLayout::of(net);
    let mut jac = Matrix::zeros(classes, layout.dim.max(1));
    for c in 0..classes {
        let mut upstream = Matrix::zeros(1, classes);
        upstream[(0, c)] = 1.0;
        let detail = net.backward_detailed(&cache, &upstream);
        let row = core_grads_to_theta(net, &detail.grads);
        for (j, v) in row.into_iter().enumerate() {
            jac[(c, j)] = v;
        }
    }
    Ok(jac)
}

/// Replace selected plain layers of a pretrained network with adapted layers.
///
/// `pairs[i]` provides the projection for layer `i`; layers with `None` are
/// kept as-is but frozen (except the final plain layer, which stays trainable
/// as the classification head). Cores start at zero so the adapted network
/// reproduces the base model exactly.
pub fn adapt_network(
    base: &Network,
    pairs: Vec<Option<ProjectionPair>>,
    alpha: f64,
    trainable_ab: bool,
) -> Result<Network> {
    if pairs.len() != base.layers.len() {
        return Err(Error::invalid_arg(format!(
            "adapt_network: {} pair slots for {} layers",
            pairs.len(),
            base.layers.len()
        )));
    }
    let head_index = base
        .layers
        .iter()
        .rposition(|l| !matches!(l, Layer::Activation(_)))
        .ok_or_else(|| Error::invalid_arg("network has no linear layers"))?;

    let mut layers = Vec::with_capacity(base.layers.len());
    for (i, (layer, pair)) in base.layers.iter().zip(pairs).enumerate() {
        let new_layer = match (layer, pair) {
            (Layer::Plain(l), Some(pair)) => {
                if pair.a.rows() != l.weight.rows() || pair.b.cols() != l.weight.cols() {
                    return Err(Error::ShapeMismatch {
                        op: "adapt_network",
                        expected: format!("{}x{} factors", l.weight.rows(), l.weight.cols()),
                        got: format!(
                            "A {}x{}, B {}x{}",
                            pair.a.rows(),
                            pair.a.cols(),
                            pair.b.rows(),
                            pair.b.cols()
                        ),
                    });
                }
                let rank = pair.rank;
                Layer::Adapted(AdaptedLinear {
                    w0: l.weight.clone(),
                    bias: l.bias.clone(),
                    pair,
                    core: Matrix::zeros(rank, rank),
                    scale: alpha / rank as f64,
                    trainable_ab,
                })
            }
            (Layer::Plain(l), None) => Layer::Plain(PlainLinear {
                weight: l.weight.clone(),
                bias: l.bias.clone(),
                trainable: i == head_index,
            }),
            (Layer::Activation(a), _) => Layer::Activation(*a),
            (Layer::Adapted(_), _) => {
                return Err(Error::invalid_arg(
                    "adapt_network expects a plain (pretrained) base network",
                ));
            }
        };
        layers.push(new_layer);
    }
    let net = Network {
        layers,
        classes: base.classes,
    };
    net.validate()?;
    Ok(net)
}

#[cfg(test)]
mod tests;
