//! Sparse compute core over augmented weight tensors.
//!
//! Every operator follows the same datapath: gather the `S` augmented entries
//! at an input position, multiply them by the activation, assign each product
//! an adder slot with a prefix-sum over kernel IDs, and sum each kernel's slots.
//! Products are counted as they are formed, so the returned [`MacCounts`] are
//! the work actually executed.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kwta::{spatial_dims, SparseActivation, SparseMap};
use crate::packing::{unpack, AugmentedEntry, AugmentedWeightTensor};
use crate::tensor::{AccTensor, QTensor, SparseKernel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvConfig {
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvConfig {
    pub const KERNEL_SIZES: [usize; 4] = [1, 3, 5, 7];

    pub fn new(kernel_size: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel_size,
            stride: 1,
            padding: 0,
            in_channels,
            out_channels,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !Self::KERNEL_SIZES.contains(&self.kernel_size) {
            return Err(Error::InvalidConfig(format!(
                "kernel size {} not one of {:?}",
                self.kernel_size,
                Self::KERNEL_SIZES
            )));
        }
        if self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidConfig(format!(
                "stride and channel counts must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// `floor((in + 2 * pad - k) / stride) + 1` per spatial axis.
    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let span = |n: usize| {
            let padded = n + 2 * self.padding;
            if padded < self.kernel_size {
                None
            } else {
                Some((padded - self.kernel_size) / self.stride + 1)
            }
        };
        match (span(height), span(width)) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(Error::ShapeMismatch(format!(
                "{height}x{width} input is smaller than a {0}x{0} kernel",
                self.kernel_size
            ))),
        }
    }

    /// Per-kernel weight shape `[k, k, C_in]`.
    pub fn kernel_shape(&self) -> Vec<usize> {
        vec![self.kernel_size, self.kernel_size, self.in_channels]
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel_size * self.kernel_size * self.in_channels
    }
}

/// Executed multiplies and adds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MacCounts {
    pub mults: u64,
    pub adds: u64,
}

impl MacCounts {
    fn record(&mut self, products: usize) {
        self.mults += products as u64;
        self.adds += products as u64;
    }
}

impl AddAssign for MacCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.mults += rhs.mults;
        self.adds += rhs.adds;
    }
}

impl Add for MacCounts {
    type Output = MacCounts;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

/// A product tagged with its destination kernel and adder-tree slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutedProduct {
    pub kernel_id: u16,
    pub slot_offset: u32,
    pub product: i32,
}

/// The non-null entries stored at one input position.
pub fn gather_weights(awt: &AugmentedWeightTensor, activation_index: usize) -> Result<Vec<AugmentedEntry>> {
    if activation_index >= awt.positions() {
        return Err(Error::IndexOutOfRange {
            index: activation_index,
            len: awt.positions(),
        });
    }
    Ok(awt
        .slots(activation_index)
        .iter()
        .copied()
        .filter(|e| !e.is_null())
        .collect())
}

/// `offset[i]` = number of earlier entries carrying the same kernel ID.
pub fn prefix_sum_arbitrate(kernel_ids: &[u16]) -> Vec<u32> {
    let Some(&max) = kernel_ids.iter().max() else {
        return Vec::new();
    };
    let mut running = vec![0u32; max as usize + 1];
    kernel_ids
        .iter()
        .map(|&id| {
            let slot = running[id as usize];
            running[id as usize] += 1;
            slot
        })
        .collect()
}

/// Sums `(kernel_id, product)` pairs per kernel into a fresh accumulator vector.
pub fn route_and_sum(products: &[(u16, i32)], n_out: usize) -> Result<Vec<i32>> {
    if let Some(&(id, _)) = products.iter().find(|(id, _)| *id as usize >= n_out) {
        return Err(Error::IndexOutOfRange {
            index: id as usize,
            len: n_out,
        });
    }
    let mut out = vec![0i32; n_out];
    Router::new(n_out).route(products, &mut out);
    Ok(out)
}

/// Reusable scratch for arbitration and adder-tree summation.
///
/// Each kernel owns a contiguous block of adder slots starting at the exclusive
/// prefix sum of the per-kernel product counts; a product lands at its
/// kernel's base plus its arbitration offset. Kernels are then summed in
/// ascending ID order, each over its slots in ascending order.
#[derive(Debug, Clone)]
pub struct Router {
    counts: Vec<u32>,
    base: Vec<u32>,
    offsets: Vec<u32>,
    tree: Vec<i32>,
}

impl Router {
    pub fn new(n_out: usize) -> Self {
        Self {
            counts: vec![0; n_out],
            base: vec![0; n_out],
            offsets: Vec::new(),
            tree: Vec::new(),
        }
    }

    fn arbitrate(&mut self, products: &[(u16, i32)]) {
        self.counts.fill(0);
        self.offsets.clear();
        for &(id, _) in products {
            let c = &mut self.counts[id as usize];
            self.offsets.push(*c);
            *c += 1;
        }
        let mut acc = 0;
        for (b, &c) in self.base.iter_mut().zip(&self.counts) {
            *b = acc;
            acc += c;
        }
    }

    /// Adds each kernel's routed sum into `out[kernel_id]`.
    pub fn route(&mut self, products: &[(u16, i32)], out: &mut [i32]) {
        if products.is_empty() {
            return;
        }
        self.arbitrate(products);
        self.tree.clear();
        self.tree.resize(products.len(), 0);
        for (&(id, p), &off) in products.iter().zip(&self.offsets) {
            self.tree[(self.base[id as usize] + off) as usize] = p;
        }
        for (id, o) in out.iter_mut().enumerate() {
            let n = self.counts[id];
            if n == 0 {
                continue;
            }
            let start = self.base[id] as usize;
            *o += self.tree[start..start + n as usize].iter().sum::<i32>();
        }
    }

    /// Arbitration trace for one batch, in input order.
    pub fn trace(&mut self, products: &[(u16, i32)]) -> Vec<RoutedProduct> {
        self.arbitrate(products);
        products
            .iter()
            .zip(&self.offsets)
            .map(|(&(kernel_id, product), &slot_offset)| RoutedProduct {
                kernel_id,
                slot_offset,
                product,
            })
            .collect()
    }
}

#[inline]
fn multiply_into(products: &mut Vec<(u16, i32)>, slots: &[AugmentedEntry], activation: i8) {
    let a = activation as i32;
    products.extend(
        slots
            .iter()
            .filter(|e| !e.is_null())
            .map(|e| (e.kernel_id, a * e.weight as i32)),
    );
}

fn check_conv(awt: &AugmentedWeightTensor, cfg: &ConvConfig, channels: usize) -> Result<()> {
    cfg.validate()?;
    if channels != cfg.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "input has {channels} channels, layer expects {}",
            cfg.in_channels
        )));
    }
    if awt.kernel_shape() != cfg.kernel_shape().as_slice() || awt.n_out() != cfg.out_channels {
        return Err(Error::ShapeMismatch(format!(
            "weights are {:?} x {} outputs, layer is {:?} x {}",
            awt.kernel_shape(),
            awt.n_out(),
            cfg.kernel_shape(),
            cfg.out_channels
        )));
    }
    Ok(())
}

/// In-bounds input coordinate for output `(oy, ox)` and tap `(ky, kx)`.
#[inline]
fn tap_source(cfg: &ConvConfig, oy: usize, ox: usize, ky: usize, kx: usize, h: usize, w: usize) -> Option<(usize, usize)> {
    let iy = (oy * cfg.stride + ky).checked_sub(cfg.padding)?;
    let ix = (ox * cfg.stride + kx).checked_sub(cfg.padding)?;
    (iy < h && ix < w).then_some((iy, ix))
}

/// Weight-sparse convolution over a dense input: every receptive-field
/// element is multiplied against all entries stored at its position.
pub fn sparse_dense_conv(input: &QTensor, awt: &AugmentedWeightTensor, cfg: &ConvConfig) -> Result<(AccTensor, MacCounts)> {
    let [h, w, c] = spatial_dims(input.shape())?;
    check_conv(awt, cfg, c)?;
    let (oh, ow) = cfg.output_dims(h, w)?;
    let (k, cout) = (cfg.kernel_size, cfg.out_channels);
    let x = input.values();
    let mut out = vec![0i32; oh * ow * cout];
    let mut router = Router::new(cout);
    let mut products = Vec::with_capacity(awt.filled());
    let mut counts = MacCounts::default();
    for oy in 0..oh {
        for ox in 0..ow {
            products.clear();
            for ky in 0..k {
                for kx in 0..k {
                    let Some((iy, ix)) = tap_source(cfg, oy, ox, ky, kx, h, w) else {
                        continue;
                    };
                    let pixel = &x[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                    let tap_base = (ky * k + kx) * c;
                    for (ci, &a) in pixel.iter().enumerate() {
                        multiply_into(&mut products, awt.slots(tap_base + ci), a);
                    }
                }
            }
            counts.record(products.len());
            let loc = (oy * ow + ox) * cout;
            router.route(&products, &mut out[loc..loc + cout]);
        }
    }
    Ok((AccTensor::new(vec![oh, ow, cout], out)?, counts))
}

/// Sparse-weight x sparse-activation convolution. For each output location the
/// receptive-field window is re-sparsified into its active (position, value)
/// pairs, and only those positions are gathered and multiplied.
pub fn sparse_sparse_conv(input: &SparseMap, awt: &AugmentedWeightTensor, cfg: &ConvConfig) -> Result<(AccTensor, MacCounts)> {
    check_conv(awt, cfg, input.channels())?;
    let (h, w, c) = (input.height(), input.width(), input.channels());
    let (oh, ow) = cfg.output_dims(h, w)?;
    let (k, cout) = (cfg.kernel_size, cfg.out_channels);
    let mut out = vec![0i32; oh * ow * cout];
    let mut router = Router::new(cout);
    let mut window: Vec<(usize, i8)> = Vec::new();
    let mut products = Vec::new();
    let mut counts = MacCounts::default();
    for oy in 0..oh {
        for ox in 0..ow {
            window.clear();
            for ky in 0..k {
                for kx in 0..k {
                    let Some((iy, ix)) = tap_source(cfg, oy, ox, ky, kx, h, w) else {
                        continue;
                    };
                    let tap_base = (ky * k + kx) * c;
                    window.extend(input.at(iy, ix).winners().iter().map(|a| (tap_base + a.index, a.value)));
                }
            }
            products.clear();
            for &(pos, a) in &window {
                multiply_into(&mut products, awt.slots(pos), a);
            }
            counts.record(products.len());
            let loc = (oy * ow + ox) * cout;
            router.route(&products, &mut out[loc..loc + cout]);
        }
    }
    Ok((AccTensor::new(vec![oh, ow, cout], out)?, counts))
}

/// Splits `[3, 3, C]` kernels into nine per-tap `[1, 1, C]` kernel lists,
/// tap-major (`ky * 3 + kx`). Kernels without weights at a tap are omitted.
pub fn split_taps(kernels: &[SparseKernel], in_channels: usize) -> Result<Vec<Vec<SparseKernel>>> {
    let mut taps: Vec<Vec<SparseKernel>> = vec![Vec::new(); 9];
    for k in kernels {
        if k.shape() != [3, 3, in_channels] {
            return Err(Error::KernelShape {
                kernel_id: k.kernel_id(),
                expected: vec![3, 3, in_channels],
                found: k.shape().to_vec(),
            });
        }
        let mut per_tap: Vec<Vec<(usize, i8)>> = vec![Vec::new(); 9];
        for &(p, wgt) in k.entries() {
            per_tap[p / in_channels].push((p % in_channels, wgt));
        }
        for (t, entries) in per_tap.into_iter().enumerate() {
            if !entries.is_empty() {
                taps[t].push(SparseKernel::new(k.kernel_id(), vec![1, 1, in_channels], entries)?);
            }
        }
    }
    Ok(taps)
}

/// Packs each tap of a 3x3 layer into its own 1x1 augmented tensor.
pub fn pack_taps(kernels: &[SparseKernel], cfg: &ConvConfig) -> Result<Vec<AugmentedWeightTensor>> {
    split_taps(kernels, cfg.in_channels)?
        .iter()
        .map(|tap| AugmentedWeightTensor::pack(tap, vec![1, 1, cfg.in_channels], cfg.out_channels))
        .collect()
}

/// 3x3 convolution executed as nine shifted 1x1 sparse-sparse convolutions
/// whose partial maps are accumulated one tap after another.
pub fn conv3x3_via_nine_1x1(input: &SparseMap, taps: &[AugmentedWeightTensor], cfg: &ConvConfig) -> Result<(AccTensor, MacCounts)> {
    if taps.len() != 9 {
        return Err(Error::MissingTap(taps.len()));
    }
    if cfg.kernel_size != 3 {
        return Err(Error::InvalidConfig(format!(
            "nine-tap decomposition needs a 3x3 layer, got {}x{}",
            cfg.kernel_size, cfg.kernel_size
        )));
    }
    let tap_cfg = ConvConfig {
        kernel_size: 1,
        stride: 1,
        padding: 0,
        ..*cfg
    };
    for t in taps {
        check_conv(t, &tap_cfg, input.channels())?;
    }
    let (h, w) = (input.height(), input.width());
    let (oh, ow) = cfg.output_dims(h, w)?;
    let cout = cfg.out_channels;
    let mut out = vec![0i32; oh * ow * cout];
    let mut partial = vec![0i32; oh * ow * cout];
    let mut router = Router::new(cout);
    let mut products = Vec::new();
    let mut counts = MacCounts::default();
    for (t, awt) in taps.iter().enumerate() {
        let (ky, kx) = (t / 3, t % 3);
        partial.fill(0);
        for oy in 0..oh {
            for ox in 0..ow {
                let Some((iy, ix)) = tap_source(cfg, oy, ox, ky, kx, h, w) else {
                    continue;
                };
                products.clear();
                for a in input.at(iy, ix).winners() {
                    multiply_into(&mut products, awt.slots(a.index), a.value);
                }
                counts.record(products.len());
                let loc = (oy * ow + ox) * cout;
                router.route(&products, &mut partial[loc..loc + cout]);
            }
        }
        for (o, p) in out.iter_mut().zip(&partial) {
            *o += p;
        }
    }
    Ok((AccTensor::new(vec![oh, ow, cout], out)?, counts))
}

/// Checks that every kernel (shape `[k, k, block]`) keeps whole channel blocks:
/// at each spatial tap, either all `block` weights are present or none.
pub fn verify_block_sparsity(kernels: &[SparseKernel], block: usize) -> Result<()> {
    for k in kernels {
        let mut per_tap = vec![0usize; k.positions() / block];
        for p in k.support() {
            per_tap[p / block] += 1;
        }
        if let Some(tap) = per_tap.iter().position(|&n| n != 0 && n != block) {
            return Err(Error::BlockInvariant {
                kernel_id: k.kernel_id(),
                tap,
                block,
            });
        }
    }
    Ok(())
}

/// 7x7 stem over a dense three-channel image. Weights are complementary in the
/// spatial taps, with each retained tap carrying all three channel weights.
pub fn stem_conv7x7(input: &QTensor, awt: &AugmentedWeightTensor, cfg: &ConvConfig) -> Result<(AccTensor, MacCounts)> {
    if cfg.kernel_size != 7 || cfg.in_channels != 3 {
        return Err(Error::InvalidConfig(format!(
            "stem expects a 7x7x3 layer, got {0}x{0}x{1}",
            cfg.kernel_size, cfg.in_channels
        )));
    }
    verify_block_sparsity(&unpack(awt), 3)?;
    sparse_dense_conv(input, awt, cfg)
}

fn check_linear(awt: &AugmentedWeightTensor, len: usize) -> Result<()> {
    if awt.positions() != len {
        return Err(Error::ShapeMismatch(format!(
            "input of length {len} for a layer with {} input features",
            awt.positions()
        )));
    }
    Ok(())
}

/// Weight-sparse linear layer over a dense input vector.
pub fn sparse_dense_linear(input: &[i8], awt: &AugmentedWeightTensor) -> Result<(Vec<i32>, MacCounts)> {
    check_linear(awt, input.len())?;
    let mut products = Vec::with_capacity(awt.filled());
    for (pos, &a) in input.iter().enumerate() {
        multiply_into(&mut products, awt.slots(pos), a);
    }
    let mut out = vec![0i32; awt.n_out()];
    Router::new(awt.n_out()).route(&products, &mut out);
    let mut counts = MacCounts::default();
    counts.record(products.len());
    Ok((out, counts))
}

/// Sparse-sparse linear layer: `K` gathers of `S` entries each.
pub fn sparse_sparse_linear(input: &SparseActivation, awt: &AugmentedWeightTensor) -> Result<(Vec<i32>, MacCounts)> {
    check_linear(awt, input.length())?;
    let mut products = Vec::with_capacity(input.winners().len() * awt.sets());
    for a in input.winners() {
        multiply_into(&mut products, awt.slots(a.index), a.value);
    }
    let mut out = vec![0i32; awt.n_out()];
    Router::new(awt.n_out()).route(&products, &mut out);
    let mut counts = MacCounts::default();
    counts.record(products.len());
    Ok((out, counts))
}
