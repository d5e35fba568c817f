//! Layer graphs, end-to-end inference and parameter accounting, including the
//! keyword-spotting CNN (32x32x1 input, 12 classes).

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    sparse_dense_conv, sparse_dense_linear, sparse_sparse_conv, sparse_sparse_linear, ConvConfig, MacCounts,
};
use crate::kwta::{global_kwta_histogram, local_kwta, KwtaConfig, KwtaMode, SparseActivation, SparseMap};
use crate::oracle::{dense_conv_reference, dense_linear_reference, expand_weights, naive_topk};
use crate::packing::{generate_complementary_masks, unpack, AugmentedWeightTensor};
use crate::tensor::{requantize, QTensor, Requantizer, SparseKernel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum ExecMode {
    /// Mask-expanded dense weights through the oracle.
    Dense,
    SparseDense,
    /// Sparse-sparse wherever the incoming activation is sparse, otherwise sparse-dense.
    #[default]
    SparseSparse,
}

impl ExecMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExecMode::Dense => "dense",
            ExecMode::SparseDense => "sparse-dense",
            ExecMode::SparseSparse => "sparse-sparse",
        }
    }
}

impl fmt::Display for ExecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ExecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(ExecMode::Dense),
            "sparse-dense" => Ok(ExecMode::SparseDense),
            "sparse-sparse" => Ok(ExecMode::SparseSparse),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LayerKind {
    Conv {
        kernel_size: usize,
        out_channels: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Maxpool {
        #[serde(default = "two")]
        size: usize,
        #[serde(default = "two")]
        stride: usize,
    },
    Flatten,
    Linear {
        out_features: usize,
    },
    Relu,
    /// On maps the competition runs per location over channels, in partitions
    /// of `partition` channels (all channels when unset). On vectors an unset
    /// partition means a global competition.
    Kwta {
        k: usize,
        #[serde(default)]
        partition: Option<usize>,
        #[serde(default)]
        mode: KwtaMode,
    },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Maxpool { .. } => "maxpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Linear { .. } => "linear",
            LayerKind::Relu => "relu",
            LayerKind::Kwta { .. } => "kwta",
        }
    }

    pub fn is_compute(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Linear { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Non-zero weights per kernel; unset means dense kernels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
}

impl LayerSpec {
    pub fn new(name: &str, kind: LayerKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            n: None,
        }
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = Some(n);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Shape {
    Map { height: usize, width: usize, channels: usize },
    Vector(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Map { height, width, channels } => height * width * channels,
            Shape::Vector(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Map { height, width, channels } => write!(f, "{height}x{width}x{channels}"),
            Shape::Vector(n) => write!(f, "{n}"),
        }
    }
}

/// Per-layer `N` keyed by layer name.
pub type Allocation = BTreeMap<String, usize>;

/// Geometry of a weight-bearing layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComputeGeometry {
    pub conv: Option<ConvConfig>,
    pub kernel_shape: Vec<usize>,
    pub n_out: usize,
    pub dense_macs: u64,
}

impl ComputeGeometry {
    pub fn kernel_volume(&self) -> usize {
        self.kernel_shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanSpec {
    pub input: [usize; 3],
    #[serde(default)]
    pub mode: ExecMode,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    /// Dense weights plus convolution biases.
    pub dense: u64,
    /// Sum of `N x kernels` over weight-bearing layers.
    pub nonzero: u64,
}

fn chain_err(layer: &LayerSpec, reason: impl Into<String>) -> Error {
    Error::ShapeChain {
        layer: layer.name.clone(),
        reason: reason.into(),
    }
}

impl PlanSpec {
    pub fn input_shape(&self) -> Shape {
        let [height, width, channels] = self.input;
        Shape::Map { height, width, channels }
    }

    /// Input shape followed by every layer's output shape.
    pub fn shape_chain(&self) -> Result<Vec<Shape>> {
        if self.input.contains(&0) {
            return Err(Error::InvalidConfig(format!("empty input shape {:?}", self.input)));
        }
        let mut shapes = vec![self.input_shape()];
        for layer in &self.layers {
            let shape = *shapes.last().unwrap();
            shapes.push(next_shape(layer, shape)?);
        }
        match self.layers.last() {
            None => return Err(Error::InvalidConfig("plan has no layers".into())),
            Some(last) if !last.kind.is_compute() => {
                return Err(chain_err(last, "the final layer must be conv or linear"));
            }
            _ => {}
        }
        Ok(shapes)
    }

    /// Geometry for each layer, `None` for layers without weights.
    pub fn geometry(&self) -> Result<Vec<Option<ComputeGeometry>>> {
        let shapes = self.shape_chain()?;
        Ok(self
            .layers
            .iter()
            .zip(shapes.windows(2))
            .map(|(l, io)| compute_geometry(l, io[0], io[1]))
            .collect())
    }

    /// Replaces `N` for the named layers.
    pub fn with_allocation(mut self, allocation: &Allocation) -> Result<Self> {
        for (name, &n) in allocation {
            let layer = self
                .layers
                .iter_mut()
                .find(|l| &l.name == name)
                .ok_or_else(|| Error::InvalidConfig(format!("allocation names unknown layer {name:?}")))?;
            if !layer.kind.is_compute() {
                return Err(Error::InvalidConfig(format!(
                    "allocation names {name:?}, which has no weights"
                )));
            }
            layer.n = Some(n);
        }
        self.shape_chain()?;
        Ok(self)
    }

    pub fn count_parameters(&self) -> Result<ParameterCount> {
        let mut count = ParameterCount { dense: 0, nonzero: 0 };
        for (layer, geo) in self.layers.iter().zip(self.geometry()?) {
            let Some(geo) = geo else { continue };
            let volume = geo.kernel_volume() as u64;
            let n_out = geo.n_out as u64;
            count.dense += volume * n_out;
            if geo.conv.is_some() {
                count.dense += n_out;
            }
            count.nonzero += layer.n.map_or(volume, |n| n as u64) * n_out;
        }
        Ok(count)
    }
}

fn next_shape(layer: &LayerSpec, shape: Shape) -> Result<Shape> {
    let map = |what: &str| match shape {
        Shape::Map { height, width, channels } => Ok((height, width, channels)),
        Shape::Vector(_) => Err(chain_err(layer, format!("{what} needs a spatial map, got {shape}"))),
    };
    if layer.n.is_some() && !layer.kind.is_compute() {
        return Err(chain_err(layer, "N is only meaningful for conv and linear layers"));
    }
    let out = match &layer.kind {
        LayerKind::Conv {
            kernel_size,
            out_channels,
            stride,
            padding,
        } => {
            let (h, w, c) = map("conv")?;
            let cfg = ConvConfig {
                kernel_size: *kernel_size,
                stride: *stride,
                padding: *padding,
                in_channels: c,
                out_channels: *out_channels,
            };
            let (oh, ow) = cfg.output_dims(h, w).map_err(|e| chain_err(layer, e.to_string()))?;
            Shape::Map {
                height: oh,
                width: ow,
                channels: *out_channels,
            }
        }
        LayerKind::Maxpool { size, stride } => {
            let (h, w, c) = map("maxpool")?;
            let fits = |n: usize| *size > 0 && *stride > 0 && n >= *size && (n - size).is_multiple_of(*stride);
            if !fits(h) || !fits(w) {
                return Err(chain_err(
                    layer,
                    format!("{size}x{size}/{stride} pooling does not tile {shape}"),
                ));
            }
            Shape::Map {
                height: (h - size) / stride + 1,
                width: (w - size) / stride + 1,
                channels: c,
            }
        }
        LayerKind::Flatten => {
            let (h, w, c) = map("flatten")?;
            Shape::Vector(h * w * c)
        }
        LayerKind::Linear { out_features } => match shape {
            Shape::Vector(_) if *out_features > 0 => Shape::Vector(*out_features),
            Shape::Vector(_) => return Err(chain_err(layer, "zero output features")),
            Shape::Map { .. } => {
                return Err(chain_err(layer, format!("linear needs a flattened vector, got {shape}")));
            }
        },
        LayerKind::Relu => shape,
        LayerKind::Kwta { k, partition, .. } => {
            let (len, part) = match shape {
                Shape::Map { channels, .. } => (channels, Some(partition.unwrap_or(channels))),
                Shape::Vector(n) => (n, *partition),
            };
            if let Some(p) = part {
                if p == 0 || len % p != 0 {
                    return Err(chain_err(layer, format!("partition {p} does not divide {len}")));
                }
                if *k > p {
                    return Err(chain_err(layer, format!("k = {k} exceeds partition {p}")));
                }
            }
            shape
        }
    };
    if let Some(n) = layer.n {
        let volume = match (&layer.kind, shape) {
            (LayerKind::Conv { kernel_size, .. }, Shape::Map { channels, .. }) => kernel_size * kernel_size * channels,
            (_, s) => s.len(),
        };
        if n == 0 || n > volume {
            return Err(chain_err(layer, format!("N = {n} outside 1..={volume}")));
        }
    }
    Ok(out)
}

fn compute_geometry(layer: &LayerSpec, input: Shape, output: Shape) -> Option<ComputeGeometry> {
    match (&layer.kind, input, output) {
        (
            LayerKind::Conv {
                kernel_size,
                out_channels,
                stride,
                padding,
            },
            Shape::Map { channels, .. },
            Shape::Map { height, width, .. },
        ) => {
            let cfg = ConvConfig {
                kernel_size: *kernel_size,
                stride: *stride,
                padding: *padding,
                in_channels: channels,
                out_channels: *out_channels,
            };
            Some(ComputeGeometry {
                kernel_shape: cfg.kernel_shape(),
                n_out: *out_channels,
                dense_macs: (height * width * cfg.kernel_volume() * out_channels) as u64,
                conv: Some(cfg),
            })
        }
        (LayerKind::Linear { out_features }, Shape::Vector(n), _) => Some(ComputeGeometry {
            conv: None,
            kernel_shape: vec![n],
            n_out: *out_features,
            dense_macs: (n * out_features) as u64,
        }),
        _ => None,
    }
}

/// Packed weights, bias and requantization shift of one weight-bearing layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerWeights {
    pub name: String,
    pub weights: AugmentedWeightTensor,
    pub bias: Vec<i32>,
    pub shift: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMacs {
    pub layer: String,
    pub kind: String,
    pub dense_macs: u64,
    pub executed_mults: u64,
    pub executed_adds: u64,
    pub ratio: f64,
}

impl LayerMacs {
    pub fn new(layer: &str, kind: &str, dense_macs: u64, executed: MacCounts) -> Self {
        let mut m = Self {
            layer: layer.to_string(),
            kind: kind.to_string(),
            dense_macs,
            executed_mults: executed.mults,
            executed_adds: executed.adds,
            ratio: 0.0,
        };
        m.update_ratio();
        m
    }

    fn update_ratio(&mut self) {
        self.ratio = if self.dense_macs == 0 {
            0.0
        } else {
            self.executed_mults as f64 / self.dense_macs as f64
        };
    }
}

/// Dense versus executed work per weight-bearing layer.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MacReport {
    pub layers: Vec<LayerMacs>,
}

impl MacReport {
    pub fn total(&self) -> LayerMacs {
        let executed = MacCounts {
            mults: self.layers.iter().map(|l| l.executed_mults).sum(),
            adds: self.layers.iter().map(|l| l.executed_adds).sum(),
        };
        LayerMacs::new("total", "total", self.layers.iter().map(|l| l.dense_macs).sum(), executed)
    }

    pub fn ratio(&self) -> f64 {
        self.total().ratio
    }

    /// Adds another report over the same layers, e.g. a second frame.
    pub fn accumulate(&mut self, other: &MacReport) -> Result<()> {
        if self.layers.is_empty() {
            self.layers = other.layers.clone();
            return Ok(());
        }
        if self.layers.len() != other.layers.len() || self.layers.iter().zip(&other.layers).any(|(a, b)| a.layer != b.layer) {
            return Err(Error::InvalidConfig("reports cover different layers".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.dense_macs += b.dense_macs;
            a.executed_mults += b.executed_mults;
            a.executed_adds += b.executed_adds;
            a.update_ratio();
        }
        Ok(())
    }

    /// `layer,kind,dense_macs,executed_mults,executed_adds,ratio` with a total row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,dense_macs,executed_mults,executed_adds,ratio\n");
        for l in self.layers.iter().chain(std::iter::once(&self.total())) {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6}\n",
                l.layer, l.kind, l.dense_macs, l.executed_mults, l.executed_adds, l.ratio
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub logits: Vec<i32>,
    pub macs: MacReport,
    /// Fraction of zeros in each k-WTA layer's output.
    pub activation_sparsity: Vec<(String, f64)>,
    pub layer_times: Vec<(String, Duration)>,
}

impl Inference {
    /// Index of the largest logit; the first one wins ties.
    pub fn predicted_class(&self) -> usize {
        self.logits
            .iter()
            .enumerate()
            .fold((0, i32::MIN), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }
}

#[derive(Debug)]
struct Compiled {
    geo: ComputeGeometry,
    w: LayerWeights,
    requant: Requantizer,
    dense: OnceLock<QTensor>,
}

impl Compiled {
    fn dense_weights(&self) -> &QTensor {
        self.dense.get_or_init(|| {
            let mut shape = vec![self.geo.n_out];
            shape.extend_from_slice(&self.geo.kernel_shape);
            expand_weights(&unpack(&self.w.weights), self.geo.n_out, &self.geo.kernel_shape)
                .unwrap_or_else(|_| QTensor::zeros(shape))
        })
    }
}

#[derive(Debug, Clone)]
enum Act {
    Map(QTensor),
    SparseMap(SparseMap),
    Vector(Vec<i8>),
    SparseVector(SparseActivation),
}

impl Act {
    fn is_sparse(&self) -> bool {
        matches!(self, Act::SparseMap(_) | Act::SparseVector(_))
    }

    fn dense_map(&self) -> Result<QTensor> {
        match self {
            Act::Map(t) => Ok(t.clone()),
            Act::SparseMap(m) => Ok(m.densify()),
            _ => Err(Error::ShapeMismatch("expected a spatial map".into())),
        }
    }

    fn dense_vec(&self) -> Result<Vec<i8>> {
        match self {
            Act::Vector(v) => Ok(v.clone()),
            Act::SparseVector(a) => Ok(a.densify()),
            _ => Err(Error::ShapeMismatch("expected a vector".into())),
        }
    }

    fn zero_fraction(&self) -> f64 {
        let (zeros, len) = match self {
            Act::Map(t) => (t.values().iter().filter(|&&v| v == 0).count(), t.len()),
            Act::Vector(v) => (v.iter().filter(|&&x| x == 0).count(), v.len()),
            Act::SparseMap(m) => {
                let len = m.height() * m.width() * m.channels();
                let nonzero: usize = m
                    .locations()
                    .iter()
                    .map(|l| l.winners().iter().filter(|w| w.value != 0).count())
                    .sum();
                (len - nonzero, len)
            }
            Act::SparseVector(a) => return a.zero_fraction(),
        };
        if len == 0 {
            0.0
        } else {
            zeros as f64 / len as f64
        }
    }
}

/// Max pooling on an `H x W x C` map; the window must tile the map exactly.
pub fn maxpool(input: &QTensor, size: usize, stride: usize) -> Result<QTensor> {
    let [h, w, c] = crate::kwta::spatial_dims(input.shape())?;
    let fits = |n: usize| size > 0 && stride > 0 && n >= size && (n - size).is_multiple_of(stride);
    if !fits(h) || !fits(w) {
        return Err(Error::ShapeMismatch(format!(
            "{size}x{size}/{stride} pooling does not tile a {h}x{w} map"
        )));
    }
    let (oh, ow) = ((h - size) / stride + 1, (w - size) / stride + 1);
    let x = input.values();
    let mut out = vec![i8::MIN; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for dy in 0..size {
                for dx in 0..size {
                    let src = ((oy * stride + dy) * w + ox * stride + dx) * c;
                    for (d, &s) in dst.iter_mut().zip(&x[src..src + c]) {
                        *d = (*d).max(s);
                    }
                }
            }
        }
    }
    QTensor::new(vec![oh, ow, c], out)
}

pub fn maxpool2x2(input: &QTensor) -> Result<QTensor> {
    maxpool(input, 2, 2)
}

/// Pooling over a channel-sparse map; absent channels count as zero.
pub fn maxpool_sparse(input: &SparseMap, size: usize, stride: usize) -> Result<SparseMap> {
    SparseMap::from_dense(&maxpool(&input.densify(), size, stride)?)
}

/// Row-major HWC flattening.
pub fn flatten(input: &QTensor) -> Vec<i8> {
    input.values().to_vec()
}

fn add_bias(acc: &mut [i32], bias: &[i32]) {
    for chunk in acc.chunks_mut(bias.len()) {
        for (a, b) in chunk.iter_mut().zip(bias) {
            *a += b;
        }
    }
}

/// An immutable, validated model: plan, packed weights and requantizers.
#[derive(Debug)]
pub struct ModelGraph {
    plan: PlanSpec,
    shapes: Vec<Shape>,
    compiled: Vec<Option<Compiled>>,
}

impl ModelGraph {
    pub fn new(plan: PlanSpec, weights: Vec<LayerWeights>) -> Result<Self> {
        let shapes = plan.shape_chain()?;
        let geometry = plan.geometry()?;
        let mut by_name: BTreeMap<String, LayerWeights> = BTreeMap::new();
        for w in weights {
            if by_name.contains_key(&w.name) {
                return Err(Error::InvalidConfig(format!("duplicate weights for layer {:?}", w.name)));
            }
            by_name.insert(w.name.clone(), w);
        }
        let mut compiled = Vec::with_capacity(plan.layers.len());
        for (layer, geo) in plan.layers.iter().zip(geometry) {
            let Some(geo) = geo else {
                compiled.push(None);
                continue;
            };
            let w = by_name
                .remove(&layer.name)
                .ok_or_else(|| chain_err(layer, "no weights supplied"))?;
            if w.weights.kernel_shape() != geo.kernel_shape.as_slice() || w.weights.n_out() != geo.n_out {
                return Err(chain_err(
                    layer,
                    format!(
                        "weights are {:?} x {}, layer needs {:?} x {}",
                        w.weights.kernel_shape(),
                        w.weights.n_out(),
                        geo.kernel_shape,
                        geo.n_out
                    ),
                ));
            }
            let n = layer.n.unwrap_or(geo.kernel_volume());
            if w.weights.n_per_kernel() > n {
                return Err(chain_err(
                    layer,
                    format!("a kernel has {} non-zeros, plan allows N = {n}", w.weights.n_per_kernel()),
                ));
            }
            if w.bias.len() != geo.n_out {
                return Err(chain_err(layer, format!("{} biases for {} outputs", w.bias.len(), geo.n_out)));
            }
            let requant = Requantizer::new(w.shift)?;
            compiled.push(Some(Compiled {
                geo,
                w,
                requant,
                dense: OnceLock::new(),
            }));
        }
        if let Some(name) = by_name.keys().next() {
            return Err(Error::InvalidConfig(format!("weights for unknown layer {name:?}")));
        }
        Ok(Self { plan, shapes, compiled })
    }

    pub fn plan(&self) -> &PlanSpec {
        &self.plan
    }

    pub fn mode(&self) -> ExecMode {
        self.plan.mode
    }

    /// Input shape followed by each layer's output shape.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn output_len(&self) -> usize {
        self.shapes.last().map_or(0, |s| s.len())
    }

    pub fn layer_weights(&self) -> impl Iterator<Item = &LayerWeights> {
        self.compiled.iter().flatten().map(|c| &c.w)
    }

    pub fn count_parameters(&self) -> Result<ParameterCount> {
        self.plan.count_parameters()
    }

    /// How each weight-bearing layer runs under `mode`.
    pub fn layer_executions(&self, mode: ExecMode) -> Vec<(String, ExecMode)> {
        let mut sparse = false;
        let mut out = Vec::new();
        for layer in &self.plan.layers {
            match layer.kind {
                LayerKind::Conv { .. } | LayerKind::Linear { .. } => {
                    let exec = match mode {
                        ExecMode::SparseSparse if !sparse => ExecMode::SparseDense,
                        m => m,
                    };
                    out.push((layer.name.clone(), exec));
                    sparse = false;
                }
                LayerKind::Kwta { .. } => sparse = true,
                LayerKind::Relu => sparse = false,
                LayerKind::Maxpool { .. } | LayerKind::Flatten => {}
            }
        }
        out
    }

    pub fn infer(&self, input: &QTensor) -> Result<Inference> {
        self.infer_with(input, self.plan.mode)
    }

    pub fn infer_with(&self, input: &QTensor, mode: ExecMode) -> Result<Inference> {
        let last = self.plan.layers.len() - 1;
        self.forward(input, mode, last)
    }

    /// Sets each intermediate layer's shift to the smallest value that keeps
    /// the largest accumulator seen on `frames` inside int8.
    pub fn calibrate(&mut self, frames: &[QTensor]) -> Result<()> {
        let last = self.plan.layers.len() - 1;
        for idx in 0..last {
            if self.compiled[idx].is_none() {
                continue;
            }
            let mut peak: i64 = 0;
            for f in frames {
                let acc = self.forward(f, ExecMode::SparseSparse, idx)?.logits;
                peak = acc.iter().map(|&a| (a as i64).abs()).fold(peak, i64::max);
            }
            let mut shift = 0u32;
            while shift < 31 && (peak >> shift) > 127 {
                shift += 1;
            }
            let c = self.compiled[idx].as_mut().unwrap();
            c.w.shift = shift;
            c.requant = Requantizer::new(shift)?;
        }
        Ok(())
    }

    /// Runs layers `0..=stop`; layer `stop` must carry weights and its raw
    /// accumulators are returned as logits.
    fn forward(&self, input: &QTensor, mode: ExecMode, stop: usize) -> Result<Inference> {
        let [h, w, c] = self.plan.input;
        if input.shape() != [h, w, c] {
            return Err(Error::ShapeMismatch(format!(
                "input shape {:?}, model expects {:?}",
                input.shape(),
                self.plan.input
            )));
        }
        let mut act = Act::Map(input.clone());
        let mut result = Inference {
            logits: Vec::new(),
            macs: MacReport::default(),
            activation_sparsity: Vec::new(),
            layer_times: Vec::new(),
        };
        for (idx, layer) in self.plan.layers.iter().enumerate().take(stop + 1) {
            let start = Instant::now();
            act = match &layer.kind {
                LayerKind::Conv { .. } | LayerKind::Linear { .. } => {
                    let c = self.compiled[idx].as_ref().expect("compiled weight layer");
                    let (mut acc, counts) = self.compute(c, &act, mode)?;
                    add_bias(&mut acc, &c.w.bias);
                    result
                        .macs
                        .layers
                        .push(LayerMacs::new(&layer.name, layer.kind.name(), c.geo.dense_macs, counts));
                    if idx == stop {
                        result.logits = acc;
                        result.layer_times.push((layer.name.clone(), start.elapsed()));
                        break;
                    }
                    let q: Vec<i8> = acc.iter().map(|&a| requantize(a, &c.requant)).collect();
                    match self.shapes[idx + 1] {
                        Shape::Map { height, width, channels } => Act::Map(QTensor::new(vec![height, width, channels], q)?),
                        Shape::Vector(_) => Act::Vector(q),
                    }
                }
                LayerKind::Maxpool { size, stride } => match &act {
                    Act::SparseMap(m) => Act::SparseMap(maxpool_sparse(m, *size, *stride)?),
                    a => Act::Map(maxpool(&a.dense_map()?, *size, *stride)?),
                },
                LayerKind::Flatten => match &act {
                    Act::SparseMap(m) => Act::SparseVector(m.flatten()),
                    a => Act::Vector(flatten(&a.dense_map()?)),
                },
                LayerKind::Relu => match &act {
                    Act::Map(_) | Act::SparseMap(_) => {
                        let mut t = act.dense_map()?;
                        t.values_mut().iter_mut().for_each(|v| *v = (*v).max(0));
                        Act::Map(t)
                    }
                    a => Act::Vector(a.dense_vec()?.into_iter().map(|v| v.max(0)).collect()),
                },
                LayerKind::Kwta { k, partition, mode: kmode } => {
                    let out = apply_kwta(&act, *k, *partition, *kmode, mode)?;
                    result.activation_sparsity.push((layer.name.clone(), out.zero_fraction()));
                    out
                }
            };
            result.layer_times.push((layer.name.clone(), start.elapsed()));
        }
        Ok(result)
    }

    fn compute(&self, c: &Compiled, act: &Act, mode: ExecMode) -> Result<(Vec<i32>, MacCounts)> {
        let sparse_in = mode == ExecMode::SparseSparse && act.is_sparse();
        match (&c.geo.conv, mode) {
            (Some(cfg), ExecMode::Dense) => {
                let r = dense_conv_reference(&act.dense_map()?, c.dense_weights(), cfg)?;
                let n = r.dense_macs;
                Ok((r.output.into_values(), MacCounts { mults: n, adds: n }))
            }
            (None, ExecMode::Dense) => {
                let r = dense_linear_reference(&act.dense_vec()?, c.dense_weights())?;
                let n = r.dense_macs;
                Ok((r.output.into_values(), MacCounts { mults: n, adds: n }))
            }
            (Some(cfg), _) => {
                let (out, counts) = match act {
                    Act::SparseMap(m) if sparse_in => sparse_sparse_conv(m, &c.w.weights, cfg)?,
                    a => sparse_dense_conv(&a.dense_map()?, &c.w.weights, cfg)?,
                };
                Ok((out.into_values(), counts))
            }
            (None, _) => match act {
                Act::SparseVector(v) if sparse_in => sparse_sparse_linear(v, &c.w.weights),
                a => sparse_dense_linear(&a.dense_vec()?, &c.w.weights),
            },
        }
    }
}

fn apply_kwta(act: &Act, k: usize, partition: Option<usize>, kmode: KwtaMode, mode: ExecMode) -> Result<Act> {
    // the oracle path selects with a full sort
    let oracle = mode == ExecMode::Dense && kmode == KwtaMode::Exact;
    let pick = |v: &[i8], part: Option<usize>| -> Result<SparseActivation> {
        match part {
            Some(p) if oracle => {
                let mut dense = vec![0i8; v.len()];
                for (i, chunk) in v.chunks(p).enumerate() {
                    for w in naive_topk(chunk, k).winners() {
                        dense[i * p + w.index] = w.value;
                    }
                }
                Ok(SparseActivation::from_dense(&dense))
            }
            None if oracle => Ok(naive_topk(v, k)),
            Some(p) => local_kwta(v, &KwtaConfig::local(k, p)),
            None => global_kwta_histogram(v, &KwtaConfig::global(k).with_mode(kmode)),
        }
    };
    match act {
        Act::Map(_) | Act::SparseMap(_) => {
            let t = act.dense_map()?;
            let [h, w, c] = crate::kwta::spatial_dims(t.shape())?;
            let part = Some(partition.unwrap_or(c));
            let locations = t
                .values()
                .chunks(c)
                .map(|v| pick(v, part))
                .collect::<Result<Vec<_>>>()?;
            let map = SparseMap::new(h, w, c, locations)?;
            Ok(if mode == ExecMode::Dense {
                Act::Map(map.densify())
            } else {
                Act::SparseMap(map)
            })
        }
        Act::Vector(_) | Act::SparseVector(_) => {
            let sel = pick(&act.dense_vec()?, partition)?;
            Ok(if mode == ExecMode::Dense {
                Act::Vector(sel.densify())
            } else {
                Act::SparseVector(sel)
            })
        }
    }
}

/// Random complementary masks and non-zero int8 weights for every weight
/// layer, with small random biases and zero shifts.
pub fn synthetic_weights(plan: &PlanSpec, seed: u64) -> Result<Vec<LayerWeights>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (layer, geo) in plan.layers.iter().zip(plan.geometry()?) {
        let Some(geo) = geo else { continue };
        let n = layer.n.unwrap_or(geo.kernel_volume());
        let mask_seed: u64 = rng.gen();
        let kernels = if geo.conv.is_some_and(|c| c.kernel_size == 7 && c.in_channels == 3) && n % 3 == 0 {
            // stems keep whole three-channel blocks per spatial tap
            let spatial = generate_complementary_masks(&geo.kernel_shape[..2], n / 3, geo.n_out, mask_seed)?;
            crate::packing::expand_blocks(&spatial, 3)
        } else {
            generate_complementary_masks(&geo.kernel_shape, n, geo.n_out, mask_seed)?
        };
        let kernels = kernels
            .iter()
            .enumerate()
            .map(|(id, m)| {
                let weights: Vec<i8> = (0..m.count_ones())
                    .map(|_| {
                        let w: i8 = rng.gen_range(1..=127);
                        if rng.gen_bool(0.5) {
                            w
                        } else {
                            -w
                        }
                    })
                    .collect();
                SparseKernel::from_support(id, geo.kernel_shape.clone(), m.ones(), &weights)
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = AugmentedWeightTensor::pack(&kernels, geo.kernel_shape.clone(), geo.n_out)?;
        let bias = (0..geo.n_out).map(|_| rng.gen_range(-64..=64)).collect();
        out.push(LayerWeights {
            name: layer.name.clone(),
            weights,
            bias,
            shift: 0,
        });
    }
    Ok(out)
}

/// Uniform random int8 frames.
pub fn random_frames(shape: [usize; 3], count: usize, seed: u64) -> Vec<QTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = shape.iter().product();
    (0..count)
        .map(|_| QTensor::new(shape.to_vec(), (0..len).map(|_| rng.gen()).collect()).expect("length matches shape"))
        .collect()
}

/// Synthetic model with shifts calibrated on `calibration_frames` random frames.
pub fn build_synthetic(plan: PlanSpec, seed: u64, calibration_frames: usize) -> Result<ModelGraph> {
    let weights = synthetic_weights(&plan, seed)?;
    let frames = random_frames(plan.input, calibration_frames, seed ^ 0x5eed);
    let mut model = ModelGraph::new(plan, weights)?;
    model.calibrate(&frames)?;
    Ok(model)
}

pub const GSC_INPUT: [usize; 3] = [32, 32, 1];
pub const GSC_CLASSES: usize = 12;

/// Default split of the 127,696 non-zero weights.
pub const GSC_ALLOCATION: [(&str, usize); 4] = [("conv1", 1), ("conv2", 108), ("linear1", 80), ("output", 60)];
/// Winners per location after each convolution block (of 64 channels).
pub const GSC_CONV_K: usize = 7;
/// Winners after the hidden linear layer (of 1500 units).
pub const GSC_LINEAR_K: usize = 165;

pub fn default_allocation() -> Allocation {
    GSC_ALLOCATION.iter().map(|&(n, v)| (n.to_string(), v)).collect()
}

fn conv5(out_channels: usize) -> LayerKind {
    LayerKind::Conv {
        kernel_size: 5,
        out_channels,
        stride: 1,
        padding: 0,
    }
}

fn pool2() -> LayerKind {
    LayerKind::Maxpool { size: 2, stride: 2 }
}

/// Dense network: ReLU activations, no weight sparsity.
pub fn gsc_dense_plan() -> PlanSpec {
    PlanSpec {
        input: GSC_INPUT,
        mode: ExecMode::Dense,
        layers: vec![
            LayerSpec::new("conv1", conv5(64)),
            LayerSpec::new("relu1", LayerKind::Relu),
            LayerSpec::new("pool1", pool2()),
            LayerSpec::new("conv2", conv5(64)),
            LayerSpec::new("relu2", LayerKind::Relu),
            LayerSpec::new("pool2", pool2()),
            LayerSpec::new("flatten", LayerKind::Flatten),
            LayerSpec::new("linear1", LayerKind::Linear { out_features: 1500 }),
            LayerSpec::new("relu3", LayerKind::Relu),
            LayerSpec::new("output", LayerKind::Linear { out_features: GSC_CLASSES }),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GscSparsity {
    pub mode: ExecMode,
    pub allocation: Allocation,
    pub conv_k: usize,
    pub linear_k: usize,
}

impl Default for GscSparsity {
    fn default() -> Self {
        Self {
            mode: ExecMode::SparseSparse,
            allocation: default_allocation(),
            conv_k: GSC_CONV_K,
            linear_k: GSC_LINEAR_K,
        }
    }
}

/// Sparse network: each convolution is pooled and then passed through a
/// per-location k-WTA; the hidden linear layer uses a global k-WTA.
pub fn gsc_sparse_plan(s: &GscSparsity) -> Result<PlanSpec> {
    let kwta = |k: usize| LayerKind::Kwta {
        k,
        partition: None,
        mode: KwtaMode::Exact,
    };
    PlanSpec {
        input: GSC_INPUT,
        mode: s.mode,
        layers: vec![
            LayerSpec::new("conv1", conv5(64)),
            LayerSpec::new("pool1", pool2()),
            LayerSpec::new("kwta1", kwta(s.conv_k)),
            LayerSpec::new("conv2", conv5(64)),
            LayerSpec::new("pool2", pool2()),
            LayerSpec::new("kwta2", kwta(s.conv_k)),
            LayerSpec::new("flatten", LayerKind::Flatten),
            LayerSpec::new("linear1", LayerKind::Linear { out_features: 1500 }),
            LayerSpec::new("kwta3", kwta(s.linear_k)),
            LayerSpec::new("output", LayerKind::Linear { out_features: GSC_CLASSES }),
        ],
    }
    .with_allocation(&s.allocation)
}

pub enum WeightSource {
    Synthetic { seed: u64, calibration_frames: usize },
    Provided(Vec<LayerWeights>),
}

/// `None` builds the dense network.
pub fn build_gsc_network(sparsity: Option<&GscSparsity>, source: WeightSource) -> Result<ModelGraph> {
    let plan = match sparsity {
        Some(s) => gsc_sparse_plan(s)?,
        None => gsc_dense_plan(),
    };
    match source {
        WeightSource::Synthetic { seed, calibration_frames } => build_synthetic(plan, seed, calibration_frames),
        WeightSource::Provided(w) => ModelGraph::new(plan, w),
    }
}
