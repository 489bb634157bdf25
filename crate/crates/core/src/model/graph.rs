//! Layer graph of the Inception-ResNet network and its shape calculus.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Per-sample feature map shape: channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.h == 1 && self.w == 1 {
            write!(f, "{}", self.c)
        } else {
            write!(f, "{}x{}x{}", self.h, self.w, self.c)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

/// Output length and leading pad of a windowed op along one axis.
pub(crate) fn window_out(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => (input >= kernel).then(|| ((input - kernel) / stride + 1, 0)),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            (input >= 1).then_some((out, total / 2))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Conv2d {
        filters: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: Padding,
        bias: bool,
    },
    BatchNorm {
        epsilon: f64,
        momentum: f64,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
        padding: Padding,
    },
    /// Padded positions are excluded from the average.
    AvgPool {
        size: usize,
        stride: usize,
        padding: Padding,
    },
    Concat,
    /// `inputs[0] + scale * inputs[1]`.
    ResidualAdd {
        scale: f64,
    },
    GlobalAvgPool,
    Flatten,
    Dropout {
        rate: f64,
    },
    Dense {
        units: usize,
    },
    Softmax,
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv2d { .. } => "convolution",
            LayerKind::BatchNorm { .. } => "batch-norm",
            LayerKind::Relu => "activation",
            LayerKind::MaxPool { .. } => "max-pool",
            LayerKind::AvgPool { .. } => "average-pool",
            LayerKind::Concat => "concat",
            LayerKind::ResidualAdd { .. } => "residual-add",
            LayerKind::GlobalAvgPool => "global-average-pool",
            LayerKind::Flatten => "flatten",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Dense { .. } => "fully-connected",
            LayerKind::Softmax => "softmax",
        }
    }

    /// Convolution and fully-connected layers; batch-norm belongs to its conv.
    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Dense { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Kernel,
    Bias,
    Gamma,
    Beta,
    MovingMean,
    MovingVariance,
}

impl ParamRole {
    /// Moving statistics are state, never touched by the optimizer.
    pub fn is_buffer(self) -> bool {
        matches!(self, ParamRole::MovingMean | ParamRole::MovingVariance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub layer: usize,
    pub role: ParamRole,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Input,
    Stem,
    BlockA,
    ReductionA,
    BlockB,
    ReductionB,
    BlockC,
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
    pub shape: Shape,
    pub stage: Stage,
    /// Range into [`NetworkGraph::params`].
    pub params: Range<usize>,
    pub trainable: bool,
    /// For batch-norm: the convolution whose output it normalizes.
    pub owner: Option<usize>,
}

/// Hyperparameters of the network. Defaults give the full-size model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_hw: usize,
    pub num_classes: usize,
    /// Repetitions of the Inception-ResNet A, B and C blocks.
    pub block_counts: [usize; 3],
    pub residual_scale: f64,
    pub head_widths: Vec<usize>,
    /// Filters of the first stem convolution (32 at full width). Every other
    /// filter count scales by `stem_filters / 32`.
    pub stem_filters: usize,
    /// Average-pool the final feature map before flattening.
    pub global_pool: bool,
    /// Dropout rate applied to the flattened features; 0 disables it.
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_hw: 299,
            num_classes: 7,
            block_counts: [10, 20, 10],
            residual_scale: 0.1,
            head_widths: vec![64, 64],
            stem_filters: 32,
            global_pool: false,
            dropout: 0.0,
            bn_momentum: 0.99,
            bn_epsilon: 1e-3,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// The reduced network used for desk-scale runs: 75x75 input, one block
    /// of each kind and an 8-filter stem.
    pub fn toy() -> Self {
        Self {
            input_hw: 75,
            block_counts: [1, 1, 1],
            stem_filters: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.block_counts.contains(&0) {
            return bad("block_counts must all be at least 1");
        }
        if !(self.residual_scale > 0.0 && self.residual_scale <= 1.0) {
            return bad("residual_scale must lie in (0, 1]");
        }
        if self.head_widths.contains(&0) {
            return bad("head widths must be positive");
        }
        if self.stem_filters == 0 {
            return bad("stem_filters must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_epsilon <= 0.0 {
            return bad("batch-norm momentum must lie in [0, 1) and epsilon be positive");
        }
        Ok(())
    }
}

/// Ordered layer list; every layer's inputs precede it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkGraph {
    pub config: NetworkConfig,
    pub layers: Vec<Layer>,
    pub params: Vec<ParamSpec>,
}

impl NetworkGraph {
    pub fn input_shape(&self) -> Shape {
        self.layers[0].shape
    }

    pub fn output_index(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn output_shape(&self) -> Shape {
        self.layers[self.output_index()].shape
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Indices of convolution and fully-connected layers in graph order.
    pub fn parameterized_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].kind.is_parameterized())
            .collect()
    }

    /// Whether the optimizer updates the layer's parameters. Batch-norm
    /// follows its owning convolution.
    pub fn is_trainable(&self, layer: usize) -> bool {
        let l = &self.layers[layer];
        match l.owner {
            Some(owner) => self.layers[owner].trainable,
            None => l.trainable,
        }
    }

    pub fn param_trainable(&self, param: usize) -> bool {
        let spec = &self.params[param];
        !spec.role.is_buffer() && self.is_trainable(spec.layer)
    }

    pub fn trainable_layer_names(&self) -> Vec<String> {
        self.parameterized_layers()
            .into_iter()
            .filter(|&i| self.layers[i].trainable)
            .map(|i| self.layers[i].name.clone())
            .collect()
    }

    /// Makes exactly the last `n` parameterized layers trainable, counting
    /// backward from the output, and freezes the rest.
    pub fn freeze_for_fine_tuning(&mut self, n: usize) -> Result<(), ModelError> {
        let order = self.parameterized_layers();
        if n == 0 || n > order.len() {
            return Err(ModelError::OutOfRange {
                requested: n,
                total: order.len(),
            });
        }
        for l in &mut self.layers {
            l.trainable = false;
        }
        for &i in order.iter().rev().take(n) {
            self.layers[i].trainable = true;
        }
        Ok(())
    }

    /// Marks exactly the named parameterized layers trainable.
    pub fn set_trainable_layers(&mut self, names: &[String]) -> Result<(), ModelError> {
        for l in &mut self.layers {
            l.trainable = false;
        }
        for name in names {
            let i = self
                .layer_index(name)
                .filter(|&i| self.layers[i].kind.is_parameterized())
                .ok_or_else(|| ModelError::InvalidConfig(format!("no parameterized layer {name}")))?;
            self.layers[i].trainable = true;
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(ParamSpec::numel).sum()
    }

    /// Plain-text table: name, kind, output shape, parameter count, trainable.
    pub fn listing(&self) -> String {
        let width = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(4).max(4);
        let mut out = format!(
            "{:<width$}  {:<19}  {:>12}  {:>10}  trainable\n",
            "name", "kind", "output", "params"
        );
        for (i, l) in self.layers.iter().enumerate() {
            let count: usize = self.params[l.params.clone()].iter().map(ParamSpec::numel).sum();
            let trainable = if count == 0 {
                "-"
            } else if self.is_trainable(i) {
                "yes"
            } else {
                "no"
            };
            writeln!(
                out,
                "{:<width$}  {:<19}  {:>12}  {:>10}  {}",
                l.name,
                l.kind.label(),
                l.shape.to_string(),
                count,
                trainable
            )
            .unwrap();
        }
        writeln!(out, "total parameters: {}", self.parameter_count()).unwrap();
        out
    }
}

struct Builder {
    cfg: NetworkConfig,
    layers: Vec<Layer>,
    params: Vec<ParamSpec>,
    stage: Stage,
    prefix: String,
}

impl Builder {
    fn width(&self, full: usize) -> usize {
        ((full * self.cfg.stem_filters) as f64 / 32.0).round().max(1.0) as usize
    }

    fn shape(&self, i: usize) -> Shape {
        self.layers[i].shape
    }

    fn push(
        &mut self,
        name: &str,
        kind: LayerKind,
        inputs: Vec<usize>,
        shape: Shape,
        params: Vec<(&str, Vec<usize>, ParamRole)>,
        owner: Option<usize>,
    ) -> usize {
        let index = self.layers.len();
        let name = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{}", self.prefix, name)
        };
        let start = self.params.len();
        for (pname, pshape, role) in params {
            self.params.push(ParamSpec {
                name: format!("{name}/{pname}"),
                shape: pshape,
                layer: index,
                role,
            });
        }
        self.layers.push(Layer {
            name,
            kind,
            inputs,
            shape,
            stage: self.stage,
            params: start..self.params.len(),
            trainable: kind.is_parameterized(),
            owner,
        });
        index
    }

    fn underflow(&self, size: usize) -> ModelError {
        ModelError::ShapeUnderflow {
            stage: format!("{:?}", self.stage),
            input: self.cfg.input_hw,
            size,
        }
    }

    fn window(
        &self,
        input: Shape,
        kernel: [usize; 2],
        stride: usize,
        padding: Padding,
    ) -> Result<(usize, usize), ModelError> {
        let h = window_out(input.h, kernel[0], stride, padding).map(|o| o.0);
        let w = window_out(input.w, kernel[1], stride, padding).map(|o| o.0);
        match (h, w) {
            (Some(h), Some(w)) if h >= 1 && w >= 1 => Ok((h, w)),
            _ => Err(self.underflow(input.h.min(input.w))),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        input: usize,
        filters: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: Padding,
        bias: bool,
    ) -> Result<usize, ModelError> {
        let ins = self.shape(input);
        let (h, w) = self.window(ins, kernel, stride, padding)?;
        let mut params = vec![(
            "kernel",
            vec![filters, ins.c, kernel[0], kernel[1]],
            ParamRole::Kernel,
        )];
        if bias {
            params.push(("bias", vec![filters], ParamRole::Bias));
        }
        Ok(self.push(
            name,
            LayerKind::Conv2d {
                filters,
                kernel,
                stride,
                padding,
                bias,
            },
            vec![input],
            Shape::new(filters, h, w),
            params,
            None,
        ))
    }

    /// Convolution without bias, batch-norm, ReLU.
    fn conv_bn(
        &mut self,
        name: &str,
        input: usize,
        full_filters: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: Padding,
    ) -> Result<usize, ModelError> {
        let filters = self.width(full_filters);
        let conv = self.conv(name, input, filters, kernel, stride, padding, false)?;
        let shape = self.shape(conv);
        let bn = self.push(
            &format!("{name}_bn"),
            LayerKind::BatchNorm {
                epsilon: self.cfg.bn_epsilon,
                momentum: self.cfg.bn_momentum,
            },
            vec![conv],
            shape,
            vec![
                ("gamma", vec![filters], ParamRole::Gamma),
                ("beta", vec![filters], ParamRole::Beta),
                ("moving_mean", vec![filters], ParamRole::MovingMean),
                ("moving_variance", vec![filters], ParamRole::MovingVariance),
            ],
            Some(conv),
        );
        Ok(self.push(&format!("{name}_relu"), LayerKind::Relu, vec![bn], shape, vec![], None))
    }

    fn pool(
        &mut self,
        name: &str,
        input: usize,
        max: bool,
        size: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<usize, ModelError> {
        let ins = self.shape(input);
        let (h, w) = self.window(ins, [size, size], stride, padding)?;
        let kind = if max {
            LayerKind::MaxPool {
                size,
                stride,
                padding,
            }
        } else {
            LayerKind::AvgPool {
                size,
                stride,
                padding,
            }
        };
        Ok(self.push(name, kind, vec![input], Shape::new(ins.c, h, w), vec![], None))
    }

    fn concat(&mut self, name: &str, inputs: Vec<usize>) -> usize {
        let first = self.shape(inputs[0]);
        debug_assert!(inputs
            .iter()
            .all(|&i| self.shape(i).h == first.h && self.shape(i).w == first.w));
        let c = inputs.iter().map(|&i| self.shape(i).c).sum();
        self.push(name, LayerKind::Concat, inputs, Shape::new(c, first.h, first.w), vec![], None)
    }

    /// Projects the concatenated branches back to the block's width and adds
    /// them, scaled, onto the block input.
    fn residual(&mut self, input: usize, mixed: usize) -> Result<usize, ModelError> {
        let ins = self.shape(input);
        let up = self.conv("up", mixed, ins.c, [1, 1], 1, Padding::Same, true)?;
        assert_eq!(self.shape(up), ins, "residual operands must agree");
        let add = self.push(
            "add",
            LayerKind::ResidualAdd {
                scale: self.cfg.residual_scale,
            },
            vec![input, up],
            ins,
            vec![],
            None,
        );
        Ok(self.push("relu", LayerKind::Relu, vec![add], ins, vec![], None))
    }

    fn scope(&mut self, stage: Stage, prefix: &str) {
        self.stage = stage;
        self.prefix = prefix.to_string();
    }

    fn stem(&mut self, input: usize) -> Result<usize, ModelError> {
        use Padding::*;
        self.scope(Stage::Stem, "stem");
        let x = self.conv_bn("conv1_3x3s2", input, 32, [3, 3], 2, Valid)?;
        let x = self.conv_bn("conv2_3x3", x, 32, [3, 3], 1, Valid)?;
        let x = self.conv_bn("conv3_3x3", x, 64, [3, 3], 1, Same)?;
        let x = self.pool("pool1_3x3s2", x, true, 3, 2, Valid)?;
        let x = self.conv_bn("conv4_1x1", x, 80, [1, 1], 1, Valid)?;
        let x = self.conv_bn("conv5_3x3", x, 192, [3, 3], 1, Valid)?;
        let x = self.pool("pool2_3x3s2", x, true, 3, 2, Valid)?;

        self.scope(Stage::Stem, "stem/mixed");
        let b0 = self.conv_bn("b0_1x1", x, 96, [1, 1], 1, Same)?;
        let b1 = self.conv_bn("b1_1x1", x, 48, [1, 1], 1, Same)?;
        let b1 = self.conv_bn("b1_5x5", b1, 64, [5, 5], 1, Same)?;
        let b2 = self.conv_bn("b2_1x1", x, 64, [1, 1], 1, Same)?;
        let b2 = self.conv_bn("b2_3x3a", b2, 96, [3, 3], 1, Same)?;
        let b2 = self.conv_bn("b2_3x3b", b2, 96, [3, 3], 1, Same)?;
        let b3 = self.pool("pool_3x3", x, false, 3, 1, Same)?;
        let b3 = self.conv_bn("pool_1x1", b3, 64, [1, 1], 1, Same)?;
        Ok(self.concat("concat", vec![b0, b1, b2, b3]))
    }

    fn block_a(&mut self, input: usize, n: usize) -> Result<usize, ModelError> {
        use Padding::Same;
        self.scope(Stage::BlockA, &format!("block_a{n:02}"));
        let b0 = self.conv_bn("b0_1x1", input, 32, [1, 1], 1, Same)?;
        let b1 = self.conv_bn("b1_1x1", input, 32, [1, 1], 1, Same)?;
        let b1 = self.conv_bn("b1_3x3", b1, 32, [3, 3], 1, Same)?;
        let b2 = self.conv_bn("b2_1x1", input, 32, [1, 1], 1, Same)?;
        let b2 = self.conv_bn("b2_3x3a", b2, 48, [3, 3], 1, Same)?;
        let b2 = self.conv_bn("b2_3x3b", b2, 64, [3, 3], 1, Same)?;
        let mixed = self.concat("concat", vec![b0, b1, b2]);
        self.residual(input, mixed)
    }

    fn reduction_a(&mut self, input: usize) -> Result<usize, ModelError> {
        use Padding::*;
        self.scope(Stage::ReductionA, "reduction_a");
        let b0 = self.conv_bn("b0_3x3s2", input, 384, [3, 3], 2, Valid)?;
        let b1 = self.conv_bn("b1_1x1", input, 256, [1, 1], 1, Same)?;
        let b1 = self.conv_bn("b1_3x3", b1, 256, [3, 3], 1, Same)?;
        let b1 = self.conv_bn("b1_3x3s2", b1, 384, [3, 3], 2, Valid)?;
        let b2 = self.pool("pool_3x3s2", input, true, 3, 2, Valid)?;
        Ok(self.concat("concat", vec![b0, b1, b2]))
    }

    fn block_b(&mut self, input: usize, n: usize) -> Result<usize, ModelError> {
        use Padding::Same;
        self.scope(Stage::BlockB, &format!("block_b{n:02}"));
        let b0 = self.conv_bn("b0_1x1", input, 192, [1, 1], 1, Same)?;
        let b1 = self.conv_bn("b1_1x1", input, 128, [1, 1], 1, Same)?;
        let b1 = self.conv_bn("b1_1x7", b1, 160, [1, 7], 1, Same)?;
        let b1 = self.conv_bn("b1_7x1", b1, 192, [7, 1], 1, Same)?;
        let mixed = self.concat("concat", vec![b0, b1]);
        self.residual(input, mixed)
    }

    fn reduction_b(&mut self, input: usize) -> Result<usize, ModelError> {
        use Padding::*;
        self.scope(Stage::ReductionB, "reduction_b");
        let b0 = self.conv_bn("b0_1x1", input, 256, [1, 1], 1, Same)?;
        let b0 = self.conv_bn("b0_3x3s2", b0, 384, [3, 3], 2, Valid)?;
        let b1 = self.conv_bn("b1_1x1", input, 256, [1, 1], 1, Same)?;
        let b1 = self.conv_bn("b1_3x3s2", b1, 288, [3, 3], 2, Valid)?;
        let b2 = self.conv_bn("b2_1x1", input, 256, [1, 1], 1, Same)?;
        let b2 = self.conv_bn("b2_3x3", b2, 288, [3, 3], 1, Same)?;
        let b2 = self.conv_bn("b2_3x3s2", b2, 320, [3, 3], 2, Valid)?;
        let b3 = self.pool("pool_3x3s2", input, true, 3, 2, Valid)?;
        Ok(self.concat("concat", vec![b0, b1, b2, b3]))
    }

    fn block_c(&mut self, input: usize, n: usize) -> Result<usize, ModelError> {
        use Padding::Same;
        self.scope(Stage::BlockC, &format!("block_c{n:02}"));
        let b0 = self.conv_bn("b0_1x1", input, 192, [1, 1], 1, Same)?;
        let b1 = self.conv_bn("b1_1x1", input, 192, [1, 1], 1, Same)?;
        let b1 = self.conv_bn("b1_1x3", b1, 224, [1, 3], 1, Same)?;
        let b1 = self.conv_bn("b1_3x1", b1, 256, [3, 1], 1, Same)?;
        let mixed = self.concat("concat", vec![b0, b1]);
        self.residual(input, mixed)
    }

    fn head(&mut self, input: usize) -> usize {
        self.scope(Stage::Head, "head");
        let ins = self.shape(input);
        let mut x = if self.cfg.global_pool {
            self.push("global_pool", LayerKind::GlobalAvgPool, vec![input], Shape::new(ins.c, 1, 1), vec![], None)
        } else {
            self.push("flatten", LayerKind::Flatten, vec![input], Shape::new(ins.len(), 1, 1), vec![], None)
        };
        if self.cfg.dropout > 0.0 {
            let s = self.shape(x);
            x = self.push("dropout", LayerKind::Dropout { rate: self.cfg.dropout }, vec![x], s, vec![], None);
        }
        let widths = self.cfg.head_widths.clone();
        for (i, &units) in widths.iter().enumerate() {
            x = self.dense(&format!("fc{}", i + 1), x, units);
            let s = self.shape(x);
            x = self.push(&format!("fc{}_relu", i + 1), LayerKind::Relu, vec![x], s, vec![], None);
        }
        let logits = self.dense("logits", x, self.cfg.num_classes);
        let s = self.shape(logits);
        self.push("softmax", LayerKind::Softmax, vec![logits], s, vec![], None)
    }

    fn dense(&mut self, name: &str, input: usize, units: usize) -> usize {
        let fan_in = self.shape(input).len();
        self.push(
            name,
            LayerKind::Dense { units },
            vec![input],
            Shape::new(units, 1, 1),
            vec![
                ("kernel", vec![units, fan_in], ParamRole::Kernel),
                ("bias", vec![units], ParamRole::Bias),
            ],
            None,
        )
    }
}

/// Builds stem, A blocks, Reduction-A, B blocks, Reduction-B, C blocks and the
/// classifier head, checking every shape on the way.
pub fn build_network(cfg: &NetworkConfig) -> Result<NetworkGraph, ModelError> {
    cfg.validate()?;
    let mut b = Builder {
        cfg: cfg.clone(),
        layers: Vec::new(),
        params: Vec::new(),
        stage: Stage::Input,
        prefix: String::new(),
    };
    let input = b.push(
        "input",
        LayerKind::Input,
        vec![],
        Shape::new(3, cfg.input_hw, cfg.input_hw),
        vec![],
        None,
    );
    let mut x = b.stem(input)?;
    for n in 1..=cfg.block_counts[0] {
        x = b.block_a(x, n)?;
    }
    x = b.reduction_a(x)?;
    for n in 1..=cfg.block_counts[1] {
        x = b.block_b(x, n)?;
    }
    x = b.reduction_b(x)?;
    for n in 1..=cfg.block_counts[2] {
        x = b.block_c(x, n)?;
    }
    b.head(x);
    Ok(NetworkGraph {
        config: b.cfg,
        layers: b.layers,
        params: b.params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stage_output(g: &NetworkGraph, name: &str) -> Shape {
        g.layers[g.layer_index(name).unwrap()].shape
    }

    /// Stride/padding walk written out independently of the builder.
    fn hand_walk(input: usize) -> (usize, usize, usize) {
        let valid = |n: usize, k: usize, s: usize| (n - k) / s + 1;
        let mut n = valid(input, 3, 2); // conv1
        n = valid(n, 3, 1); // conv2
        // conv3 is 'same'
        n = valid(n, 3, 2); // pool1
        // conv4 1x1
        n = valid(n, 3, 1); // conv5
        n = valid(n, 3, 2); // pool2
        let stem = n;
        let red_a = valid(stem, 3, 2);
        let red_b = valid(red_a, 3, 2);
        (stem, red_a, red_b)
    }

    #[test]
    fn default_stage_sizes() {
        let g = build_network(&NetworkConfig::default()).unwrap();
        assert_eq!(hand_walk(299), (35, 17, 8));
        assert_eq!(stage_output(&g, "stem/mixed/concat"), Shape::new(320, 35, 35));
        assert_eq!(stage_output(&g, "reduction_a/concat"), Shape::new(1088, 17, 17));
        assert_eq!(stage_output(&g, "reduction_b/concat"), Shape::new(2080, 8, 8));
        assert_eq!(g.output_shape(), Shape::new(7, 1, 1));
        assert_eq!(g.parameterized_layers().len(), 246);
    }

    #[test]
    fn toy_stage_sizes() {
        let g = build_network(&NetworkConfig::toy()).unwrap();
        let (stem, a, b) = hand_walk(75);
        assert_eq!(stage_output(&g, "stem/mixed/concat").h, stem);
        assert_eq!(stage_output(&g, "reduction_a/concat").h, a);
        assert_eq!(stage_output(&g, "reduction_b/concat").h, b);
        assert_eq!(stage_output(&g, "stem/conv1_3x3s2").c, 8);
    }

    #[test]
    fn too_small_input_underflows() {
        let cfg = NetworkConfig {
            input_hw: 74,
            ..NetworkConfig::toy()
        };
        assert!(matches!(build_network(&cfg), Err(ModelError::ShapeUnderflow { .. })));
    }

    #[test]
    fn residual_blocks_preserve_shape() {
        let g = build_network(&NetworkConfig::default()).unwrap();
        for l in &g.layers {
            if let LayerKind::ResidualAdd { scale } = l.kind {
                assert_eq!(scale, 0.1);
                let a = g.layers[l.inputs[0]].shape;
                let b = g.layers[l.inputs[1]].shape;
                assert_eq!(a, b);
                assert_eq!(a, l.shape);
            }
            for &i in &l.inputs {
                assert!(i < g.layer_index(&l.name).unwrap());
            }
        }
    }

    #[test]
    fn freezing() {
        let mut g = build_network(&NetworkConfig::toy()).unwrap();
        let total = g.parameterized_layers().len();
        g.freeze_for_fine_tuning(total).unwrap();
        assert_eq!(g.trainable_layer_names().len(), total);
        g.freeze_for_fine_tuning(3).unwrap();
        assert_eq!(g.trainable_layer_names(), ["head/fc1", "head/fc2", "head/logits"]);
        let bn = g.layer_index("block_c01/b1_3x1_bn").unwrap();
        assert!(!g.is_trainable(bn));
        assert!(matches!(
            g.freeze_for_fine_tuning(total + 1),
            Err(ModelError::OutOfRange { .. })
        ));
        assert!(g.freeze_for_fine_tuning(0).is_err());
    }

    #[test]
    fn listing_mentions_every_layer() {
        let g = build_network(&NetworkConfig::toy()).unwrap();
        let text = g.listing();
        assert_eq!(text.lines().count(), g.layers.len() + 2);
        assert!(text.contains("reduction_a/pool_3x3s2"));
        assert!(text.contains("max-pool"));
    }
}
