//! Binary model container.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "CSNN" | version u16 | mode u8 | input h,w,c u32 | layer count u32
//! per layer: tag u8 | name (u16 length + UTF-8) | kind fields
//!   conv:    kernel_size, out_channels, stride, padding u32 | weight block
//!   linear:  out_features u32 | weight block
//!   maxpool: size, stride u32
//!   kwta:    k u32 | partition u32 (0 = none) | mode u8
//! weight block: N u32 (0 = dense) | shift u32 | bias count u32 + i32s
//!   | positions u32 | sets u32
//!   | per set: entry count u32 + (position u32, kernel_id u16, weight i8)
//! CRC-32 u32 of everything before it
//! ```
//!
//! Each set stream lists every position in order; vacant slots carry kernel ID
//! 0xFFFF and weight 0.

use std::path::Path;

use compsparse::network::{ExecMode, LayerKind, LayerSpec, LayerWeights, ModelGraph, PlanSpec};
use compsparse::{AugmentedEntry, AugmentedWeightTensor, KwtaMode};
use thiserror::Error;

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"CSNN";
pub const VERSION: u16 = 1;

const TAG_CONV: u8 = 0;
const TAG_MAXPOOL: u8 = 1;
const TAG_FLATTEN: u8 = 2;
const TAG_LINEAR: u8 = 3;
const TAG_RELU: u8 = 4;
const TAG_KWTA: u8 = 5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContainerError {
    #[error("not a model container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u16),
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("container truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("model rejected on load: {0}")]
    Model(#[from] compsparse::Error),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("field exceeds u32"));
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(ContainerError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize, ContainerError> {
        Ok(self.u32()? as usize)
    }
    fn i32(&mut self) -> Result<i32, ContainerError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn mode_code(m: ExecMode) -> u8 {
    match m {
        ExecMode::Dense => 0,
        ExecMode::SparseDense => 1,
        ExecMode::SparseSparse => 2,
    }
}

fn write_weights(w: &mut Writer, n: Option<usize>, lw: &LayerWeights) {
    w.usize(n.unwrap_or(0));
    w.u32(lw.shift);
    w.usize(lw.bias.len());
    for &b in &lw.bias {
        w.i32(b);
    }
    let awt = &lw.weights;
    w.usize(awt.positions());
    w.usize(awt.sets());
    for s in 0..awt.sets() {
        w.usize(awt.positions());
        for pos in 0..awt.positions() {
            let e = awt.slots(pos)[s];
            w.usize(pos);
            w.u16(e.kernel_id);
            w.u8(e.weight as u8);
        }
    }
}

pub fn encode(model: &ModelGraph) -> Vec<u8> {
    let plan = model.plan();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION);
    w.u8(mode_code(plan.mode));
    for d in plan.input {
        w.usize(d);
    }
    w.usize(plan.layers.len());
    let mut weights = model.layer_weights();
    for layer in &plan.layers {
        let name = layer.name.as_bytes();
        let tag = match layer.kind {
            LayerKind::Conv { .. } => TAG_CONV,
            LayerKind::Maxpool { .. } => TAG_MAXPOOL,
            LayerKind::Flatten => TAG_FLATTEN,
            LayerKind::Linear { .. } => TAG_LINEAR,
            LayerKind::Relu => TAG_RELU,
            LayerKind::Kwta { .. } => TAG_KWTA,
        };
        w.u8(tag);
        w.u16(u16::try_from(name.len()).expect("layer name too long"));
        w.0.extend_from_slice(name);
        match &layer.kind {
            LayerKind::Conv {
                kernel_size,
                out_channels,
                stride,
                padding,
            } => {
                for v in [*kernel_size, *out_channels, *stride, *padding] {
                    w.usize(v);
                }
                write_weights(&mut w, layer.n, weights.next().expect("weights for every conv"));
            }
            LayerKind::Linear { out_features } => {
                w.usize(*out_features);
                write_weights(&mut w, layer.n, weights.next().expect("weights for every linear"));
            }
            LayerKind::Maxpool { size, stride } => {
                w.usize(*size);
                w.usize(*stride);
            }
            LayerKind::Kwta { k, partition, mode } => {
                w.usize(*k);
                w.usize(partition.unwrap_or(0));
                w.u8(match mode {
                    KwtaMode::Exact => 0,
                    KwtaMode::Threshold => 1,
                });
            }
            LayerKind::Flatten | LayerKind::Relu => {}
        }
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

struct RawWeights {
    shift: u32,
    bias: Vec<i32>,
    positions: usize,
    sets: usize,
    entries: Vec<AugmentedEntry>,
}

fn read_weights(r: &mut Reader) -> Result<(Option<usize>, RawWeights), ContainerError> {
    let n = match r.usize()? {
        0 => None,
        n => Some(n),
    };
    let shift = r.u32()?;
    let bias_len = r.usize()?;
    if bias_len > r.buf.len() {
        return Err(ContainerError::Truncated(r.pos));
    }
    let bias = (0..bias_len).map(|_| r.i32()).collect::<Result<Vec<_>, _>>()?;
    let positions = r.usize()?;
    let sets = r.usize()?;
    if positions.saturating_mul(sets).saturating_mul(7) > r.buf.len() {
        return Err(ContainerError::Truncated(r.pos));
    }
    let mut entries = vec![AugmentedEntry::NULL; positions * sets];
    for s in 0..sets {
        let count = r.usize()?;
        if count != positions {
            return Err(ContainerError::Malformed(format!(
                "set {s} lists {count} entries for {positions} positions"
            )));
        }
        for expect in 0..positions {
            let pos = r.usize()?;
            let kernel_id = r.u16()?;
            let weight = r.u8()? as i8;
            if pos != expect {
                return Err(ContainerError::Malformed(format!(
                    "set {s} entry {expect} records position {pos}"
                )));
            }
            let e = AugmentedEntry { weight, kernel_id };
            if e.is_null() && weight != 0 {
                return Err(ContainerError::Malformed(format!(
                    "vacant slot at position {pos} of set {s} carries weight {weight}"
                )));
            }
            entries[pos * sets + s] = e;
        }
    }
    Ok((
        n,
        RawWeights {
            shift,
            bias,
            positions,
            sets,
            entries,
        },
    ))
}

pub fn decode(bytes: &[u8]) -> Result<ModelGraph, ContainerError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    if bytes.len() < 10 {
        return Err(ContainerError::Truncated(bytes.len()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ContainerError::Crc { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u16()?;
    if version != VERSION {
        return Err(ContainerError::Version(version));
    }
    let mode = match r.u8()? {
        0 => ExecMode::Dense,
        1 => ExecMode::SparseDense,
        2 => ExecMode::SparseSparse,
        m => return Err(ContainerError::Malformed(format!("unknown mode code {m}"))),
    };
    let input = [r.usize()?, r.usize()?, r.usize()?];
    let count = r.usize()?;
    let mut layers = Vec::new();
    let mut raw = Vec::new();
    for _ in 0..count {
        let tag = r.u8()?;
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ContainerError::Malformed("layer name is not UTF-8".into()))?
            .to_string();
        let mut n = None;
        let kind = match tag {
            TAG_CONV => {
                let kind = LayerKind::Conv {
                    kernel_size: r.usize()?,
                    out_channels: r.usize()?,
                    stride: r.usize()?,
                    padding: r.usize()?,
                };
                let (ln, w) = read_weights(&mut r)?;
                n = ln;
                raw.push((name.clone(), w));
                kind
            }
            TAG_LINEAR => {
                let kind = LayerKind::Linear {
                    out_features: r.usize()?,
                };
                let (ln, w) = read_weights(&mut r)?;
                n = ln;
                raw.push((name.clone(), w));
                kind
            }
            TAG_MAXPOOL => LayerKind::Maxpool {
                size: r.usize()?,
                stride: r.usize()?,
            },
            TAG_FLATTEN => LayerKind::Flatten,
            TAG_RELU => LayerKind::Relu,
            TAG_KWTA => LayerKind::Kwta {
                k: r.usize()?,
                partition: match r.usize()? {
                    0 => None,
                    p => Some(p),
                },
                mode: match r.u8()? {
                    0 => KwtaMode::Exact,
                    1 => KwtaMode::Threshold,
                    m => return Err(ContainerError::Malformed(format!("unknown k-WTA mode {m}"))),
                },
            },
            t => return Err(ContainerError::Malformed(format!("unknown layer tag {t}"))),
        };
        layers.push(LayerSpec { name, kind, n });
    }
    if r.pos != body.len() {
        return Err(ContainerError::Malformed(format!(
            "{} trailing bytes after the last layer",
            body.len() - r.pos
        )));
    }
    let plan = PlanSpec { input, mode, layers };
    let geometry = plan.geometry()?;
    let mut raw = raw.into_iter();
    let mut weights = Vec::new();
    for (layer, geo) in plan.layers.iter().zip(geometry) {
        let Some(geo) = geo else { continue };
        let (name, w) = raw.next().expect("one weight block per weight layer");
        if w.positions != geo.kernel_volume() {
            return Err(ContainerError::Malformed(format!(
                "layer {:?} stores {} positions, geometry needs {}",
                layer.name,
                w.positions,
                geo.kernel_volume()
            )));
        }
        let awt = AugmentedWeightTensor::from_entries(geo.kernel_shape.clone(), geo.n_out, w.sets, w.entries)?;
        weights.push(LayerWeights {
            name,
            weights: awt,
            bias: w.bias,
            shift: w.shift,
        });
    }
    Ok(ModelGraph::new(plan, weights)?)
}

pub fn save(model: &ModelGraph, path: &Path) -> CliResult<()> {
    std::fs::write(path, encode(model)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> CliResult<ModelGraph> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(decode(&bytes)?)
}
