//! Parameter storage, initialization and forward/backward execution.

use rand::Rng as _;

use super::graph::{LayerKind, NetworkGraph, ParamRole, Shape};
use super::kernels::{self, BnStats, ConvGeom, PoolGeom};
use super::scalar::Scalar;
use super::ModelError;
use crate::augment::ClassWeights;
use crate::seed::{derive_seed, rng_from_seed};

/// A graph together with one tensor per [`ParamSpec`](super::ParamSpec).
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub graph: NetworkGraph,
    pub params: Vec<Vec<T>>,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Fan-in-scaled uniform weights (limit `sqrt(6 / fan_in)`), zero biases,
/// unit batch-norm scale and zero shift.
///
/// Each tensor draws from its own stream keyed by its name, so a tensor's
/// initial value does not depend on the rest of the graph.
pub fn init_parameters<T: Scalar>(graph: NetworkGraph, seed: u64) -> Network<T> {
    let params = graph
        .params
        .iter()
        .map(|spec| match spec.role {
            ParamRole::Kernel => {
                let fan_in: usize = spec.shape[1..].iter().product();
                let limit = (6.0 / fan_in as f64).sqrt();
                let mut rng = rng_from_seed(derive_seed(&[seed, name_hash(&spec.name)]));
                (0..spec.numel())
                    .map(|_| T::of(rng.random_range(-limit..limit)))
                    .collect()
            }
            ParamRole::Gamma | ParamRole::MovingVariance => vec![T::one(); spec.numel()],
            ParamRole::Bias | ParamRole::Beta | ParamRole::MovingMean => {
                vec![T::zero(); spec.numel()]
            }
        })
        .collect();
    Network { graph, params }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Moving batch-norm statistics, no dropout.
    Inference,
    /// Batch statistics for batch-norm layers owned by trainable
    /// convolutions; `seed` drives dropout masks.
    Training { seed: u64 },
}

#[derive(Debug, Clone)]
enum Aux<T> {
    None,
    BatchNorm(BnStats),
    MaxPool(Vec<u32>),
    Dropout(Vec<T>),
}

/// Every intermediate output of one forward pass, kept for backward.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub batch: usize,
    pub mode: Mode,
    outputs: Vec<Vec<T>>,
    aux: Vec<Aux<T>>,
}

impl<T: Scalar> ForwardPass<T> {
    /// Softmax output, `batch x num_classes` row-major.
    pub fn probabilities(&self) -> &[T] {
        self.outputs.last().expect("non-empty graph")
    }

    pub fn output_of(&self, layer: usize) -> &[T] {
        &self.outputs[layer]
    }
}

/// Gradients for each parameter tensor; `None` for frozen ones and buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v.f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

impl<T: Scalar> Network<T> {
    pub fn num_classes(&self) -> usize {
        self.graph.config.num_classes
    }

    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.graph.param_index(name).map(|i| &self.params[i][..])
    }

    fn layer_params(&self, layer: usize) -> &[Vec<T>] {
        &self.params[self.graph.layers[layer].params.clone()]
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            graph: self.graph.clone(),
            params: self
                .params
                .iter()
                .map(|t| t.iter().map(|v| U::of(v.f64())).collect())
                .collect(),
        }
    }

    /// Runs the graph on `batch` images laid out `[batch][3][h][w]`.
    pub fn forward(&self, input: &[T], batch: usize, mode: Mode) -> Result<ForwardPass<T>, ModelError> {
        let in_shape = self.graph.input_shape();
        if batch == 0 || input.len() != batch * in_shape.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "input of {} values for a batch of {batch} images of {in_shape}",
                input.len()
            )));
        }
        let n = self.graph.layers.len();
        let mut outputs: Vec<Vec<T>> = Vec::with_capacity(n);
        let mut aux = Vec::with_capacity(n);
        for (i, layer) in self.graph.layers.iter().enumerate() {
            let input_shape = |k: usize| self.graph.layers[layer.inputs[k]].shape;
            let x = |k: usize| -> &[T] { &outputs[layer.inputs[k]] };
            let p = self.layer_params(i);
            let (out, a) = match layer.kind {
                LayerKind::Input => (input.to_vec(), Aux::None),
                LayerKind::Conv2d {
                    kernel,
                    stride,
                    padding,
                    bias,
                    ..
                } => {
                    let g = ConvGeom::new(input_shape(0), layer.shape, kernel, stride, padding);
                    let b = bias.then(|| &p[1][..]);
                    (kernels::conv_forward(&g, batch, x(0), &p[0], b), Aux::None)
                }
                LayerKind::BatchNorm { epsilon, .. } => {
                    let batch_stats = matches!(mode, Mode::Training { .. }) && self.graph.is_trainable(i);
                    let (mean, var) = if batch_stats {
                        kernels::bn_batch_stats(layer.shape, batch, x(0))
                    } else {
                        (
                            p[2].iter().map(|v| v.f64()).collect(),
                            p[3].iter().map(|v| v.f64()).collect(),
                        )
                    };
                    let (y, stats) = kernels::bn_forward(
                        layer.shape, batch, x(0), &p[0], &p[1], mean, var, epsilon, batch_stats,
                    );
                    (y, Aux::BatchNorm(stats))
                }
                LayerKind::Relu => (x(0).iter().map(|&v| v.max(T::zero())).collect(), Aux::None),
                LayerKind::MaxPool { size, stride, padding } => {
                    let g = PoolGeom::new(input_shape(0), layer.shape, size, stride, padding);
                    let (y, arg) = kernels::maxpool_forward(&g, batch, x(0));
                    (y, Aux::MaxPool(arg))
                }
                LayerKind::AvgPool { size, stride, padding } => {
                    let g = PoolGeom::new(input_shape(0), layer.shape, size, stride, padding);
                    (kernels::avgpool_forward(&g, batch, x(0)), Aux::None)
                }
                LayerKind::Concat => {
                    let mut y = Vec::with_capacity(batch * layer.shape.len());
                    for b in 0..batch {
                        for k in 0..layer.inputs.len() {
                            let len = input_shape(k).len();
                            y.extend_from_slice(&x(k)[b * len..(b + 1) * len]);
                        }
                    }
                    (y, Aux::None)
                }
                LayerKind::ResidualAdd { scale } => {
                    let s = T::of(scale);
                    let y = x(0).iter().zip(x(1)).map(|(&a, &r)| a + s * r).collect();
                    (y, Aux::None)
                }
                LayerKind::GlobalAvgPool => {
                    let ins = input_shape(0);
                    let plane = T::of(ins.plane() as f64);
                    let y = x(0)
                        .chunks_exact(ins.plane())
                        .map(|c| c.iter().copied().sum::<T>() / plane)
                        .collect();
                    (y, Aux::None)
                }
                LayerKind::Flatten => (x(0).to_vec(), Aux::None),
                LayerKind::Dropout { rate } => match mode {
                    Mode::Inference => (x(0).to_vec(), Aux::None),
                    Mode::Training { seed } => {
                        let mut rng = rng_from_seed(derive_seed(&[seed, i as u64]));
                        let keep = T::of(1.0 / (1.0 - rate));
                        let mask: Vec<T> = (0..x(0).len())
                            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
                            .collect();
                        let y = x(0).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                        (y, Aux::Dropout(mask))
                    }
                },
                LayerKind::Dense { units } => {
                    let fan_in = input_shape(0).len();
                    (kernels::dense_forward(batch, fan_in, units, x(0), &p[0], &p[1]), Aux::None)
                }
                LayerKind::Softmax => (kernels::softmax(layer.shape.c, x(0)), Aux::None),
            };
            debug_assert_eq!(out.len(), batch * layer.shape.len(), "{}", layer.name);
            outputs.push(out);
            aux.push(a);
        }
        Ok(ForwardPass {
            batch,
            mode,
            outputs,
            aux,
        })
    }

    /// Inference-mode class probabilities.
    pub fn predict(&self, input: &[T], batch: usize) -> Result<Vec<T>, ModelError> {
        Ok(self.forward(input, batch, Mode::Inference)?.probabilities().to_vec())
    }

    /// Folds the batch statistics of a training pass into the moving
    /// averages: `moving = momentum * moving + (1 - momentum) * batch`.
    pub fn update_moving_stats(&mut self, pass: &ForwardPass<T>) {
        for (i, layer) in self.graph.layers.iter().enumerate() {
            let (LayerKind::BatchNorm { momentum, .. }, Aux::BatchNorm(stats)) = (layer.kind, &pass.aux[i]) else {
                continue;
            };
            if !stats.from_batch {
                continue;
            }
            let r = layer.params.clone();
            let (mean_idx, var_idx) = (r.start + 2, r.start + 3);
            for (c, &m) in stats.mean.iter().enumerate() {
                let v = &mut self.params[mean_idx][c];
                *v = T::of(momentum * v.f64() + (1.0 - momentum) * m);
            }
            for (c, &s) in stats.var.iter().enumerate() {
                let v = &mut self.params[var_idx][c];
                *v = T::of(momentum * v.f64() + (1.0 - momentum) * s);
            }
        }
    }

    /// Gradients of the class-weighted cross-entropy of `pass` against
    /// `targets` with respect to every trainable parameter.
    pub fn backward(
        &self,
        pass: &ForwardPass<T>,
        targets: &[usize],
        weights: &ClassWeights,
    ) -> Result<Gradients<T>, ModelError> {
        let k = self.num_classes();
        if targets.len() != pass.batch || weights.len() != k {
            return Err(ModelError::ShapeMismatch(format!(
                "{} targets and {} class weights for a batch of {} over {k} classes",
                targets.len(),
                weights.len(),
                pass.batch
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(ModelError::ShapeMismatch(format!("target {t} outside 0..{k}")));
        }
        let dlogits = crate::training::weighted_cce_grad(pass.probabilities(), targets, weights);
        let dlogits: Vec<T> = dlogits.into_iter().map(T::of).collect();
        self.backward_from_logits(pass, dlogits)
    }

    /// Backpropagates a gradient given with respect to the softmax input.
    pub fn backward_from_logits(&self, pass: &ForwardPass<T>, dlogits: Vec<T>) -> Result<Gradients<T>, ModelError> {
        let g = &self.graph;
        let n = g.layers.len();
        let softmax = g.output_index();
        let logits = g.layers[softmax].inputs[0];
        if dlogits.len() != pass.outputs[logits].len() {
            return Err(ModelError::ShapeMismatch("logit gradient".into()));
        }
        // A layer's output needs a gradient if it or anything feeding it
        // holds trainable parameters.
        let mut requires = vec![false; n];
        for i in 0..n {
            requires[i] = g.layers[i].params.clone().any(|p| g.param_trainable(p))
                || g.layers[i].inputs.iter().any(|&j| requires[j]);
        }
        let batch = pass.batch;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; g.params.len()];
        let mut douts: Vec<Option<Vec<T>>> = vec![None; n];
        douts[logits] = Some(dlogits);

        let accumulate = |slot: &mut Option<Vec<T>>, v: Vec<T>| match slot {
            Some(acc) => acc.iter_mut().zip(&v).for_each(|(a, b)| *a = *a + *b),
            None => *slot = Some(v),
        };

        for i in (0..=logits).rev() {
            let Some(dy) = douts[i].take() else { continue };
            if !requires[i] {
                continue;
            }
            let layer = &g.layers[i];
            let pr = layer.params.clone();
            let train_params = pr.clone().any(|p| g.param_trainable(p));
            let want = |k: usize| requires[layer.inputs[k]];
            let input_shape = |k: usize| g.layers[layer.inputs[k]].shape;
            let x = |k: usize| -> &[T] { &pass.outputs[layer.inputs[k]] };
            let push_input = |k: usize, v: Vec<T>, douts: &mut Vec<Option<Vec<T>>>| {
                if want(k) {
                    accumulate(&mut douts[layer.inputs[k]], v);
                }
            };
            match layer.kind {
                LayerKind::Input | LayerKind::Softmax => {}
                LayerKind::Conv2d {
                    kernel,
                    stride,
                    padding,
                    bias,
                    ..
                } => {
                    let geom = ConvGeom::new(input_shape(0), layer.shape, kernel, stride, padding);
                    let r = kernels::conv_backward(
                        &geom, batch, x(0), &self.params[pr.start], &dy, want(0), train_params, bias,
                    );
                    if let Some(dw) = r.dw {
                        grads[pr.start] = Some(dw);
                    }
                    if let Some(db) = r.db {
                        grads[pr.start + 1] = Some(db);
                    }
                    if let Some(dx) = r.dx {
                        push_input(0, dx, &mut douts);
                    }
                }
                LayerKind::BatchNorm { .. } => {
                    let Aux::BatchNorm(stats) = &pass.aux[i] else { unreachable!() };
                    let (dx, dgamma, dbeta) =
                        kernels::bn_backward(layer.shape, batch, x(0), &self.params[pr.start], stats, &dy);
                    if train_params {
                        grads[pr.start] = Some(dgamma);
                        grads[pr.start + 1] = Some(dbeta);
                    }
                    push_input(0, dx, &mut douts);
                }
                LayerKind::Relu => {
                    let y = &pass.outputs[i];
                    let dx = dy
                        .iter()
                        .zip(y)
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect();
                    push_input(0, dx, &mut douts);
                }
                LayerKind::MaxPool { .. } => {
                    let Aux::MaxPool(arg) = &pass.aux[i] else { unreachable!() };
                    push_input(0, kernels::maxpool_backward(x(0).len(), arg, &dy), &mut douts);
                }
                LayerKind::AvgPool { size, stride, padding } => {
                    let geom = PoolGeom::new(input_shape(0), layer.shape, size, stride, padding);
                    push_input(0, kernels::avgpool_backward(&geom, batch, &dy), &mut douts);
                }
                LayerKind::Concat => {
                    let shapes: Vec<Shape> = (0..layer.inputs.len()).map(input_shape).collect();
                    let mut parts: Vec<Vec<T>> =
                        shapes.iter().map(|s| Vec::with_capacity(batch * s.len())).collect();
                    let mut off = 0;
                    for _ in 0..batch {
                        for (part, s) in parts.iter_mut().zip(&shapes) {
                            part.extend_from_slice(&dy[off..off + s.len()]);
                            off += s.len();
                        }
                    }
                    for (k, part) in parts.into_iter().enumerate() {
                        push_input(k, part, &mut douts);
                    }
                }
                LayerKind::ResidualAdd { scale } => {
                    let s = T::of(scale);
                    if want(1) {
                        push_input(1, dy.iter().map(|&d| d * s).collect(), &mut douts);
                    }
                    push_input(0, dy, &mut douts);
                }
                LayerKind::GlobalAvgPool => {
                    let plane = input_shape(0).plane();
                    let inv = T::of(1.0 / plane as f64);
                    let dx = dy.iter().flat_map(|&d| std::iter::repeat_n(d * inv, plane)).collect();
                    push_input(0, dx, &mut douts);
                }
                LayerKind::Flatten => push_input(0, dy, &mut douts),
                LayerKind::Dropout { .. } => {
                    let dx = match &pass.aux[i] {
                        Aux::Dropout(mask) => dy.iter().zip(mask).map(|(&d, &m)| d * m).collect(),
                        _ => dy,
                    };
                    push_input(0, dx, &mut douts);
                }
                LayerKind::Dense { units } => {
                    let fan_in = input_shape(0).len();
                    let (dx, dw, db) = kernels::dense_backward(
                        batch,
                        fan_in,
                        units,
                        x(0),
                        &self.params[pr.start],
                        &dy,
                        want(0),
                        train_params,
                    );
                    if let (Some(dw), Some(db)) = (dw, db) {
                        grads[pr.start] = Some(dw);
                        grads[pr.start + 1] = Some(db);
                    }
                    if let Some(dx) = dx {
                        push_input(0, dx, &mut douts);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}
