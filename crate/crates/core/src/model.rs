//! ResNet graphs with bottleneck blocks in variants A/B/C/D, and a
//! desk-scale family for 32x32 inputs.
//!
//! Each stage starts with a downsampling block (path A: 1x1, 3x3, 1x1
//! convolutions; path B: projection) followed by residual blocks whose
//! path B is the identity. The final BN of path A is what zero-gamma
//! initialization targets.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{BnConfig, Mode, PoolKind, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::output_extent;
use crate::params::{ParamKind, ParamStore};
use crate::precision::PrecisionPolicy;
use crate::tensor::Tensor;

const EXPANSION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
    D,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A, Variant::B, Variant::C, Variant::D];

    /// Stride moved from the first 1x1 to the 3x3 convolution of path A.
    fn strided_3x3(self) -> bool {
        matches!(self, Variant::B | Variant::C | Variant::D)
    }

    fn deep_stem(self) -> bool {
        matches!(self, Variant::C | Variant::D)
    }

    fn avg_down(self) -> bool {
        self == Variant::D
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "C" => Ok(Variant::C),
            "D" => Ok(Variant::D),
            other => Err(Error::InvalidArgument(format!(
                "unknown ResNet variant `{other}`"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Network depth: full ResNet-50 or a desk-scale preset with three stages
/// of bottleneck blocks (`desk11`, `desk20`, `desk29` have 1, 2 and 3
/// blocks per stage).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Depth {
    ResNet50,
    Desk11,
    Desk20,
    Desk29,
}

impl Depth {
    pub fn stage_blocks(self) -> &'static [usize] {
        match self {
            Depth::ResNet50 => &[3, 4, 6, 3],
            Depth::Desk11 => &[1, 1, 1],
            Depth::Desk20 => &[2, 2, 2],
            Depth::Desk29 => &[3, 3, 3],
        }
    }

    pub fn is_desk(self) -> bool {
        self != Depth::ResNet50
    }

    /// The next deeper desk preset, used for distillation teachers.
    pub fn deeper(self) -> Option<Depth> {
        match self {
            Depth::Desk11 => Some(Depth::Desk20),
            Depth::Desk20 => Some(Depth::Desk29),
            _ => None,
        }
    }

    fn widths(self) -> &'static [usize] {
        if self.is_desk() {
            &[16, 32, 64]
        } else {
            &[64, 128, 256, 512]
        }
    }
}

impl FromStr for Depth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "50" | "resnet50" | "resnet-50" => Ok(Depth::ResNet50),
            "desk11" => Ok(Depth::Desk11),
            "desk20" => Ok(Depth::Desk20),
            "desk29" => Ok(Depth::Desk29),
            other => Err(Error::InvalidArgument(format!(
                "unknown depth `{other}` (expected 50, desk11, desk20 or desk29)"
            ))),
        }
    }
}

impl TryFrom<String> for Depth {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Depth> for String {
    fn from(d: Depth) -> String {
        d.to_string()
    }
}

impl fmt::Display for Depth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Depth::ResNet50 => "resnet50",
            Depth::Desk11 => "desk11",
            Depth::Desk20 => "desk20",
            Depth::Desk29 => "desk29",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv,
    Bn,
    Relu,
    MaxPool,
    AvgPool,
    Dense,
    Add,
    GlobalPool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    fn new(name: String, kind: LayerKind, channels: usize) -> Self {
        Self {
            name,
            kind,
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
            in_channels: channels,
            out_channels: channels,
        }
    }

    pub fn conv(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        Self {
            kernel: (k, k),
            stride: (stride, stride),
            padding: (k / 2, k / 2),
            in_channels: c_in,
            out_channels: c_out,
            ..Self::new(name.into(), LayerKind::Conv, c_in)
        }
    }

    pub fn bn(name: impl Into<String>, c: usize) -> Self {
        Self::new(name.into(), LayerKind::Bn, c)
    }

    pub fn relu(name: impl Into<String>, c: usize) -> Self {
        Self::new(name.into(), LayerKind::Relu, c)
    }

    pub fn max_pool(
        name: impl Into<String>,
        c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self {
            kernel: (k, k),
            stride: (stride, stride),
            padding: (pad, pad),
            ..Self::new(name.into(), LayerKind::MaxPool, c)
        }
    }

    pub fn avg_pool(name: impl Into<String>, c: usize, k: usize, stride: usize) -> Self {
        Self {
            kernel: (k, k),
            stride: (stride, stride),
            ..Self::new(name.into(), LayerKind::AvgPool, c)
        }
    }

    pub fn dense(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self {
            in_channels: d_in,
            out_channels: d_out,
            ..Self::new(name.into(), LayerKind::Dense, d_in)
        }
    }

    /// Output `(channels, height, width)` for an input of spatial size `h x w`.
    pub fn output_shape(&self, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let spatial = |h: usize, w: usize| -> Result<(usize, usize)> {
            let oh = output_extent(h, self.kernel.0, self.stride.0, self.padding.0);
            let ow = output_extent(w, self.kernel.1, self.stride.1, self.padding.1);
            match (oh, ow) {
                (Some(a), Some(b)) if a > 0 && b > 0 => Ok((a, b)),
                _ => Err(Error::EmptyOutput {
                    op: "layer",
                    input: h.min(w),
                    kernel: self.kernel.0,
                    stride: self.stride.0,
                    padding: self.padding.0,
                }),
            }
        };
        match self.kind {
            LayerKind::Conv | LayerKind::MaxPool | LayerKind::AvgPool => {
                let (oh, ow) = spatial(h, w)?;
                Ok((self.out_channels, oh, ow))
            }
            LayerKind::Bn | LayerKind::Relu | LayerKind::Add => Ok((self.out_channels, h, w)),
            LayerKind::GlobalPool | LayerKind::Dense => Ok((self.out_channels, 1, 1)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Downsampling,
    Residual,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub kind: BlockKind,
    pub stage: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub path_a: Vec<LayerSpec>,
    /// Empty for residual blocks (identity shortcut).
    pub path_b: Vec<LayerSpec>,
}

impl BlockSpec {
    /// The BN closing path A, whose gamma zero-gamma init sets to 0.
    pub fn summand_bn(&self) -> &LayerSpec {
        self.path_a
            .iter()
            .rev()
            .find(|l| l.kind == LayerKind::Bn)
            .expect("path A ends with batch norm")
    }

    /// Every layer of the block including the merge, in execution order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut v: Vec<LayerSpec> = self.path_a.iter().chain(&self.path_b).cloned().collect();
        v.push(LayerSpec::new(
            format!("{}.add", self.name),
            LayerKind::Add,
            self.out_channels,
        ));
        v.push(LayerSpec::relu(
            format!("{}.relu", self.name),
            self.out_channels,
        ));
        v
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub depth: Depth,
    pub variant: Variant,
    pub num_classes: usize,
    pub input_size: usize,
    pub stem: Vec<LayerSpec>,
    pub blocks: Vec<BlockSpec>,
    pub head: Vec<LayerSpec>,
}

fn conv_bn(
    layers: &mut Vec<LayerSpec>,
    prefix: &str,
    idx: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    s: usize,
) {
    layers.push(LayerSpec::conv(
        format!("{prefix}.conv{idx}"),
        c_in,
        c_out,
        k,
        s,
    ));
    layers.push(LayerSpec::bn(format!("{prefix}.bn{idx}"), c_out));
}

fn stem(depth: Depth, variant: Variant) -> Vec<LayerSpec> {
    let mut l = Vec::new();
    let out = depth.widths()[0];
    match (depth.is_desk(), variant.deep_stem()) {
        (false, false) => {
            conv_bn(&mut l, "stem", 1, 3, out, 7, 2);
            l.push(LayerSpec::relu("stem.relu1", out));
        }
        (false, true) => {
            let mid = out / 2;
            for (i, (ci, co, s)) in [(3, mid, 2), (mid, mid, 1), (mid, out, 1)]
                .into_iter()
                .enumerate()
            {
                conv_bn(&mut l, "stem", i + 1, ci, co, 3, s);
                l.push(LayerSpec::relu(format!("stem.relu{}", i + 1), co));
            }
        }
        (true, false) => {
            conv_bn(&mut l, "stem", 1, 3, out, 3, 1);
            l.push(LayerSpec::relu("stem.relu1", out));
        }
        (true, true) => {
            let mid = out / 2;
            for (i, (ci, co)) in [(3, mid), (mid, mid), (mid, out)].into_iter().enumerate() {
                conv_bn(&mut l, "stem", i + 1, ci, co, 3, 1);
                l.push(LayerSpec::relu(format!("stem.relu{}", i + 1), co));
            }
        }
    }
    if !depth.is_desk() {
        l.push(LayerSpec::max_pool("stem.pool", out, 3, 2, 1));
    }
    l
}

fn bottleneck(
    name: String,
    stage: usize,
    c_in: usize,
    width: usize,
    stride: usize,
    variant: Variant,
) -> BlockSpec {
    let c_out = width * EXPANSION;
    let projection = stride != 1 || c_in != c_out;
    let (s1, s2) = if variant.strided_3x3() {
        (1, stride)
    } else {
        (stride, 1)
    };
    let mut a = Vec::new();
    conv_bn(&mut a, &name, 1, c_in, width, 1, s1);
    a.push(LayerSpec::relu(format!("{name}.relu1"), width));
    conv_bn(&mut a, &name, 2, width, width, 3, s2);
    a.push(LayerSpec::relu(format!("{name}.relu2"), width));
    conv_bn(&mut a, &name, 3, width, c_out, 1, 1);

    let mut b = Vec::new();
    if projection {
        let short = format!("{name}.down");
        if variant.avg_down() && stride > 1 {
            b.push(LayerSpec::avg_pool(
                format!("{short}.pool"),
                c_in,
                stride,
                stride,
            ));
            conv_bn(&mut b, &short, 1, c_in, c_out, 1, 1);
        } else {
            conv_bn(&mut b, &short, 1, c_in, c_out, 1, stride);
        }
    }
    BlockSpec {
        name,
        kind: if projection {
            BlockKind::Downsampling
        } else {
            BlockKind::Residual
        },
        stage,
        stride,
        in_channels: c_in,
        out_channels: c_out,
        path_a: a,
        path_b: b,
    }
}

/// Builds a ResNet graph. Full depth needs `input_size` divisible by 32;
/// desk presets need a multiple of 4.
pub fn build_resnet(
    depth: Depth,
    variant: Variant,
    num_classes: usize,
    input_size: usize,
) -> Result<ModelGraph> {
    let divisor = if depth.is_desk() { 4 } else { 32 };
    if input_size == 0 || !input_size.is_multiple_of(divisor) {
        return Err(Error::InvalidArgument(format!(
            "{depth} needs an input size divisible by {divisor}, got {input_size}"
        )));
    }
    if num_classes == 0 {
        return Err(Error::InvalidArgument(
            "num_classes must be positive".into(),
        ));
    }
    let widths = depth.widths();
    let mut c_in = widths[0];
    let mut blocks = Vec::new();
    for (stage, (&n, &width)) in depth.stage_blocks().iter().zip(widths).enumerate() {
        for i in 0..n {
            let stride = if stage > 0 && i == 0 { 2 } else { 1 };
            let b = bottleneck(
                format!("stage{}.block{}", stage + 1, i + 1),
                stage + 1,
                c_in,
                width,
                stride,
                variant,
            );
            c_in = b.out_channels;
            blocks.push(b);
        }
    }
    let graph = ModelGraph {
        depth,
        variant,
        num_classes,
        input_size,
        stem: stem(depth, variant),
        blocks,
        head: vec![
            LayerSpec::new("head.pool".into(), LayerKind::GlobalPool, c_in),
            LayerSpec::dense("fc", c_in, num_classes),
        ],
    };
    graph.validate()?;
    Ok(graph)
}

/// Spatial/channel shape `(C, H, W)` seen between layers.
pub type FeatureShape = (usize, usize, usize);

impl ModelGraph {
    /// All layers in execution order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut v = self.stem.clone();
        for b in &self.blocks {
            v.extend(b.layers());
        }
        v.extend(self.head.iter().cloned());
        v
    }

    fn run_shapes(layers: &[LayerSpec], mut s: FeatureShape) -> Result<FeatureShape> {
        for l in layers {
            if l.in_channels != s.0 && l.kind != LayerKind::Dense {
                return Err(Error::ChannelMismatch {
                    op: "model graph",
                    expected: l.in_channels,
                    actual: s.0,
                });
            }
            s = l.output_shape(s.1, s.2)?;
        }
        Ok(s)
    }

    /// Input and output feature shapes of every block.
    pub fn block_shapes(&self) -> Result<Vec<(FeatureShape, FeatureShape)>> {
        let mut s = Self::run_shapes(&self.stem, (3, self.input_size, self.input_size))?;
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let a = Self::run_shapes(&b.path_a, s)?;
            let short = Self::run_shapes(&b.path_b, s)?;
            if a != short {
                return Err(Error::InvalidShape {
                    shape: vec![a.0, a.1, a.2],
                    reason: format!("{}: path B yields {:?}", b.name, short),
                });
            }
            out.push((s, a));
            s = a;
        }
        Ok(out)
    }

    /// Checks shape consistency and the bottleneck channel rule.
    pub fn validate(&self) -> Result<()> {
        self.block_shapes()?;
        for b in &self.blocks {
            let convs: Vec<&LayerSpec> = b
                .path_a
                .iter()
                .filter(|l| l.kind == LayerKind::Conv)
                .collect();
            if convs.len() != 3 || convs[2].out_channels != EXPANSION * convs[0].out_channels {
                return Err(Error::InvalidArgument(format!(
                    "{} is not a bottleneck",
                    b.name
                )));
            }
        }
        Ok(())
    }
}

/// A graph together with its parameters and BN running statistics.
#[derive(Clone, Debug)]
pub struct Model {
    pub graph: ModelGraph,
    pub params: ParamStore,
    pub bn_stats: BTreeMap<String, RunningStats>,
    pub bn: BnConfig,
    quantize_activations: bool,
}

/// Input and output nodes of one block, recorded during a traced forward.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub block: usize,
    pub input: Var,
    pub output: Var,
}

impl Model {
    /// Allocates parameters (weights zero, gamma one, beta zero). Call
    /// [`crate::init::init_model`] before training.
    pub fn new(graph: ModelGraph) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut bn_stats = BTreeMap::new();
        for l in graph.layers() {
            match l.kind {
                LayerKind::Conv => {
                    let shape = [l.out_channels, l.in_channels, l.kernel.0, l.kernel.1];
                    params.add(
                        format!("{}.weight", l.name),
                        ParamKind::Weight,
                        Tensor::zeros(&shape),
                    )?;
                }
                LayerKind::Bn => {
                    params.add(
                        format!("{}.gamma", l.name),
                        ParamKind::BnGamma,
                        Tensor::full(&[l.out_channels], 1.0),
                    )?;
                    params.add(
                        format!("{}.beta", l.name),
                        ParamKind::BnBeta,
                        Tensor::zeros(&[l.out_channels]),
                    )?;
                    bn_stats.insert(l.name.clone(), RunningStats::new(l.out_channels));
                }
                LayerKind::Dense => {
                    params.add(
                        format!("{}.weight", l.name),
                        ParamKind::Weight,
                        Tensor::zeros(&[l.out_channels, l.in_channels]),
                    )?;
                    params.add(
                        format!("{}.bias", l.name),
                        ParamKind::Bias,
                        Tensor::zeros(&[l.out_channels]),
                    )?;
                }
                _ => {}
            }
        }
        Ok(Self {
            graph,
            params,
            bn_stats,
            bn: BnConfig::default(),
            quantize_activations: false,
        })
    }

    /// Switches to binary16 working copies and activation rounding in fp16 mode.
    pub fn set_precision(&mut self, policy: &PrecisionPolicy) {
        policy.prepare(&mut self.params);
        self.quantize_activations = policy.is_fp16();
    }

    pub fn quantizes_activations(&self) -> bool {
        self.quantize_activations
    }

    fn expected_input(&self) -> [usize; 3] {
        [3, self.graph.input_size, self.graph.input_size]
    }

    fn layer(&mut self, tape: &mut Tape, l: &LayerSpec, x: Var, mode: Mode) -> Result<Var> {
        let y = match l.kind {
            LayerKind::Conv => {
                let w = tape.param(&self.params, self.params.id(&format!("{}.weight", l.name))?);
                tape.conv2d(x, w, l.stride, l.padding)?
            }
            LayerKind::Bn => {
                let g = tape.param(&self.params, self.params.id(&format!("{}.gamma", l.name))?);
                let b = tape.param(&self.params, self.params.id(&format!("{}.beta", l.name))?);
                let stats = self
                    .bn_stats
                    .get_mut(&l.name)
                    .ok_or_else(|| Error::UnknownParameter(l.name.clone()))?;
                tape.batch_norm(x, g, b, stats, mode, self.bn)?
            }
            LayerKind::Relu => tape.relu(x),
            LayerKind::MaxPool => {
                tape.pool2d(PoolKind::Max, x, l.kernel.0, l.stride.0, l.padding.0)?
            }
            LayerKind::AvgPool => {
                tape.pool2d(PoolKind::Avg, x, l.kernel.0, l.stride.0, l.padding.0)?
            }
            LayerKind::GlobalPool => tape.global_avg_pool(x)?,
            LayerKind::Dense => {
                let w = tape.param(&self.params, self.params.id(&format!("{}.weight", l.name))?);
                let b = tape.param(&self.params, self.params.id(&format!("{}.bias", l.name))?);
                tape.dense(x, w, Some(b))?
            }
            LayerKind::Add => {
                return Err(Error::InvalidArgument("add is applied by the block".into()))
            }
        };
        Ok(if self.quantize_activations && l.kind != LayerKind::Relu {
            tape.quantize_f16(y)
        } else {
            y
        })
    }

    fn run(
        &mut self,
        tape: &mut Tape,
        layers: &[LayerSpec],
        mut x: Var,
        mode: Mode,
    ) -> Result<Var> {
        for l in layers {
            x = self.layer(tape, l, x, mode)?;
        }
        Ok(x)
    }

    /// Records the forward pass of an `(N, 3, S, S)` batch and returns the
    /// `(N, classes)` logits node.
    pub fn forward(&mut self, tape: &mut Tape, input: Var, mode: Mode) -> Result<Var> {
        self.forward_traced(tape, input, mode).map(|(z, _)| z)
    }

    pub fn forward_traced(
        &mut self,
        tape: &mut Tape,
        input: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<BlockTrace>)> {
        let shape = tape.value(input).shape();
        if shape.len() != 4 || shape[1..] != self.expected_input() {
            let mut right = vec![shape.first().copied().unwrap_or(0)];
            right.extend(self.expected_input());
            return Err(Error::ShapeMismatch {
                op: "model input",
                left: shape.to_vec(),
                right,
            });
        }
        let mut x = if self.quantize_activations {
            tape.quantize_f16(input)
        } else {
            input
        };
        let graph = self.graph.clone();
        x = self.run(tape, &graph.stem, x, mode)?;
        let mut trace = Vec::with_capacity(graph.blocks.len());
        for (i, b) in graph.blocks.iter().enumerate() {
            let a = self.run(tape, &b.path_a, x, mode)?;
            let short = self.run(tape, &b.path_b, x, mode)?;
            let sum = tape.add(a, short)?;
            let sum = if self.quantize_activations {
                tape.quantize_f16(sum)
            } else {
                sum
            };
            let y = tape.relu(sum);
            trace.push(BlockTrace {
                block: i,
                input: x,
                output: y,
            });
            x = y;
        }
        let z = self.run(tape, &graph.head, x, mode)?;
        Ok((z, trace))
    }

    /// Forward without gradient tracking needs; returns the logits tensor.
    pub fn predict(&mut self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let z = self.forward(&mut tape, x, mode)?;
        Ok(tape.value(z).clone())
    }
}
