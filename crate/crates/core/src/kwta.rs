//! k-Winner-Take-All: histogram-threshold global selection for linear layers,
//! partitioned selection along channels for convolutions, and an emulation of
//! the sorting-network + FIFO merge datapath for 64-element vectors.
//!
//! Ordering is signed. Equal values are resolved lowest-index-first.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::QTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Winner {
    pub index: usize,
    pub value: i8,
}

/// Sparse vector: surviving `(index, value)` pairs in ascending index order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseActivation {
    length: usize,
    k: usize,
    winners: Vec<Winner>,
}

impl SparseActivation {
    pub fn new(length: usize, k: usize, winners: Vec<Winner>) -> Result<Self> {
        for (i, w) in winners.iter().enumerate() {
            if w.index >= length {
                return Err(Error::IndexOutOfRange {
                    index: w.index,
                    len: length,
                });
            }
            if i > 0 && winners[i - 1].index >= w.index {
                return Err(Error::InvalidConfig(
                    "winner indices must be strictly increasing".into(),
                ));
            }
        }
        Ok(Self { length, k, winners })
    }

    /// Non-zero entries of a dense vector; `k` is set to their count.
    pub fn from_dense(values: &[i8]) -> Self {
        let winners: Vec<Winner> = values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(index, &value)| Winner { index, value })
            .collect();
        Self {
            length: values.len(),
            k: winners.len(),
            winners,
        }
    }

    pub fn empty(length: usize) -> Self {
        Self {
            length,
            k: 0,
            winners: Vec::new(),
        }
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn winners(&self) -> &[Winner] {
        &self.winners
    }

    pub fn indices(&self) -> Vec<usize> {
        self.winners.iter().map(|w| w.index).collect()
    }

    /// Set when more winners were requested than the vector holds.
    pub fn is_saturated(&self) -> bool {
        self.k > self.length
    }

    pub fn densify(&self) -> Vec<i8> {
        let mut out = vec![0i8; self.length];
        for w in &self.winners {
            out[w.index] = w.value;
        }
        out
    }

    /// Fraction of positions holding zero once densified.
    pub fn zero_fraction(&self) -> f64 {
        if self.length == 0 {
            return 0.0;
        }
        let nonzero = self.winners.iter().filter(|w| w.value != 0).count();
        1.0 - nonzero as f64 / self.length as f64
    }
}

/// Channel-sparse spatial map: one [`SparseActivation`] over channels per
/// `(row, col)` location, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseMap {
    height: usize,
    width: usize,
    channels: usize,
    locations: Vec<SparseActivation>,
}

impl SparseMap {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        locations: Vec<SparseActivation>,
    ) -> Result<Self> {
        if locations.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} locations for a {height}x{width} map",
                locations.len()
            )));
        }
        if let Some(bad) = locations.iter().find(|l| l.length != channels) {
            return Err(Error::ShapeMismatch(format!(
                "location of length {} in a {channels}-channel map",
                bad.length
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            locations,
        })
    }

    /// Collects the non-zero channels of an `H x W x C` tensor.
    pub fn from_dense(t: &QTensor) -> Result<Self> {
        let [h, w, c] = spatial_dims(t.shape())?;
        let locations = t
            .values()
            .chunks(c.max(1))
            .take(h * w)
            .map(SparseActivation::from_dense)
            .collect();
        Self::new(h, w, c, locations)
    }

    /// Splits a flat HWC activation into per-location channel vectors.
    pub fn from_flat(act: &SparseActivation, height: usize, width: usize, channels: usize) -> Result<Self> {
        if act.length != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "activation of length {} for a {height}x{width}x{channels} map",
                act.length
            )));
        }
        let mut locations: Vec<Vec<Winner>> = vec![Vec::new(); height * width];
        for w in &act.winners {
            locations[w.index / channels].push(Winner {
                index: w.index % channels,
                value: w.value,
            });
        }
        let per_location_k = act.k / (height * width).max(1);
        let locations = locations
            .into_iter()
            .map(|winners| SparseActivation {
                length: channels,
                k: per_location_k,
                winners,
            })
            .collect();
        Self::new(height, width, channels, locations)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn locations(&self) -> &[SparseActivation] {
        &self.locations
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> &SparseActivation {
        &self.locations[row * self.width + col]
    }

    pub fn densify(&self) -> QTensor {
        let mut t = QTensor::zeros(vec![self.height, self.width, self.channels]);
        let c = self.channels;
        for (loc, act) in self.locations.iter().enumerate() {
            for w in &act.winners {
                t.values_mut()[loc * c + w.index] = w.value;
            }
        }
        t
    }

    /// Row-major HWC flattening into a single sparse vector.
    pub fn flatten(&self) -> SparseActivation {
        let c = self.channels;
        let winners = self
            .locations
            .iter()
            .enumerate()
            .flat_map(|(loc, act)| {
                act.winners.iter().map(move |w| Winner {
                    index: loc * c + w.index,
                    value: w.value,
                })
            })
            .collect::<Vec<_>>();
        SparseActivation {
            length: self.height * self.width * c,
            k: winners.len(),
            winners,
        }
    }

    pub fn nnz(&self) -> usize {
        self.locations.iter().map(|l| l.winners.len()).sum()
    }
}

pub(crate) fn spatial_dims(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        &[h, w, c] => Ok([h, w, c]),
        other => Err(Error::ShapeMismatch(format!(
            "expected an H x W x C map, got shape {other:?}"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KwtaMode {
    /// Exactly `min(k, length)` winners; ties at the threshold go to the lowest indices.
    #[default]
    Exact,
    /// Every value at or above the threshold passes, which may exceed `k`.
    Threshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KwtaConfig {
    pub k: usize,
    #[serde(default)]
    pub mode: KwtaMode,
    /// `None` for a global competition; otherwise the partition length.
    #[serde(default)]
    pub partition: Option<usize>,
}

impl KwtaConfig {
    pub fn global(k: usize) -> Self {
        Self {
            k,
            mode: KwtaMode::Exact,
            partition: None,
        }
    }

    pub fn local(k: usize, partition: usize) -> Self {
        Self {
            k,
            mode: KwtaMode::Exact,
            partition: Some(partition),
        }
    }

    pub fn with_mode(mut self, mode: KwtaMode) -> Self {
        self.mode = mode;
        self
    }
}

const BINS: usize = 256;

#[inline]
fn bin(v: i8) -> usize {
    (v as i16 + 128) as usize
}

/// Reads the histogram largest-bin-first until the running count reaches `k`.
/// Returns the threshold value and the number of elements strictly above it.
fn histogram_threshold(hist: &[u32; BINS], k: usize) -> (i8, usize) {
    let mut above = 0usize;
    for b in (0..BINS).rev() {
        let here = hist[b] as usize;
        if above + here >= k {
            return ((b as i16 - 128) as i8, above);
        }
        above += here;
    }
    (i8::MIN, above)
}

fn select(v: &[i8], cfg: &KwtaConfig, hist: &[u32; BINS]) -> SparseActivation {
    if cfg.k == 0 || v.is_empty() {
        return SparseActivation {
            length: v.len(),
            k: cfg.k,
            winners: Vec::new(),
        };
    }
    let k = cfg.k.min(v.len());
    let (threshold, above) = histogram_threshold(hist, k);
    let mut ties_left = k - above;
    let mut winners = Vec::with_capacity(k);
    for (index, &value) in v.iter().enumerate() {
        let take = match cfg.mode {
            KwtaMode::Threshold => value >= threshold,
            KwtaMode::Exact if value > threshold => true,
            KwtaMode::Exact if value == threshold && ties_left > 0 => {
                ties_left -= 1;
                true
            }
            KwtaMode::Exact => false,
        };
        if take {
            winners.push(Winner { index, value });
        }
    }
    SparseActivation {
        length: v.len(),
        k: cfg.k,
        winners,
    }
}

fn global_unchecked(v: &[i8], cfg: &KwtaConfig) -> SparseActivation {
    let mut hist = [0u32; BINS];
    for &x in v {
        hist[bin(x)] += 1;
    }
    select(v, cfg, &hist)
}

/// Global k-WTA over the whole vector via a 256-bin value histogram.
///
/// If `k` exceeds the length every element is returned and the result reports
/// [`SparseActivation::is_saturated`].
pub fn global_kwta_histogram(v: &[i8], cfg: &KwtaConfig) -> Result<SparseActivation> {
    if cfg.partition.is_some() {
        return Err(Error::InvalidConfig(
            "global k-WTA takes no partition".into(),
        ));
    }
    Ok(global_unchecked(v, cfg))
}

/// Global k-WTA with `lanes` histograms built in parallel over interleaved
/// blocks (`v` viewed as `len / lanes` blocks of `lanes` elements) and merged
/// before the threshold search.
pub fn global_kwta_parallel(v: &[i8], cfg: &KwtaConfig, lanes: usize) -> Result<SparseActivation> {
    if cfg.partition.is_some() {
        return Err(Error::InvalidConfig(
            "global k-WTA takes no partition".into(),
        ));
    }
    if lanes == 0 {
        return Err(Error::InvalidConfig("at least one histogram lane".into()));
    }
    let mut lane_hists = vec![[0u32; BINS]; lanes];
    for block in v.chunks(lanes) {
        for (lane, &x) in block.iter().enumerate() {
            lane_hists[lane][bin(x)] += 1;
        }
    }
    let mut merged = [0u32; BINS];
    for h in &lane_hists {
        for (m, c) in merged.iter_mut().zip(h) {
            *m += c;
        }
    }
    Ok(select(v, cfg, &merged))
}

/// Exact-k winners chosen independently inside each partition; indices are
/// reported against the full vector.
pub fn local_kwta(v: &[i8], cfg: &KwtaConfig) -> Result<SparseActivation> {
    let partition = cfg
        .partition
        .ok_or_else(|| Error::InvalidConfig("local k-WTA needs a partition size".into()))?;
    if partition == 0 || !v.len().is_multiple_of(partition) {
        return Err(Error::NotDivisible {
            len: v.len(),
            partition,
        });
    }
    if cfg.k > partition {
        return Err(Error::InvalidConfig(format!(
            "k = {} exceeds partition size {partition}",
            cfg.k
        )));
    }
    let part_cfg = KwtaConfig {
        k: cfg.k,
        mode: KwtaMode::Exact,
        partition: None,
    };
    let mut winners = Vec::with_capacity(cfg.k * v.len() / partition);
    for (p, chunk) in v.chunks(partition).enumerate() {
        let local = global_unchecked(chunk, &part_cfg);
        winners.extend(local.winners.into_iter().map(|w| Winner {
            index: p * partition + w.index,
            value: w.value,
        }));
    }
    Ok(SparseActivation {
        length: v.len(),
        k: cfg.k * (v.len() / partition),
        winners,
    })
}

/// Batcher odd-even merge sort for 8 inputs: 19 comparators in 6 layers.
pub const SORT8_NETWORK: [&[(usize, usize)]; 6] = [
    &[(0, 1), (2, 3), (4, 5), (6, 7)],
    &[(0, 2), (1, 3), (4, 6), (5, 7)],
    &[(1, 2), (5, 6)],
    &[(0, 4), (1, 5), (2, 6), (3, 7)],
    &[(2, 4), (3, 5)],
    &[(1, 2), (3, 4), (5, 6)],
];

/// (value, index) pair ordered so that "greater" means larger value, then
/// smaller index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Tagged {
    value: i8,
    index: usize,
}

impl Tagged {
    #[inline]
    fn beats(&self, other: &Tagged) -> bool {
        self.value > other.value || (self.value == other.value && self.index < other.index)
    }
}

/// Runs the 8-input network, leaving the winner of each comparator in the
/// lower lane (descending order).
fn sort8_descending(lanes: &mut [Tagged; 8]) {
    for layer in SORT8_NETWORK {
        for &(a, b) in layer {
            if lanes[b].beats(&lanes[a]) {
                lanes.swap(a, b);
            }
        }
    }
}

/// Sorts eight `i8` values descending with the comparator network; equal values
/// keep their original order. Exposed for network verification.
pub fn sort8(values: [i8; 8]) -> [i8; 8] {
    let mut lanes = values.map(|value| Tagged { value, index: 0 });
    for (i, l) in lanes.iter_mut().enumerate() {
        l.index = i;
    }
    sort8_descending(&mut lanes);
    lanes.map(|t| t.value)
}

/// Index of the best head among eight FIFOs via a 3-level pairwise tree; on
/// equal heads the lower FIFO wins.
fn comparator_tree(heads: [Option<Tagged>; 8]) -> Option<usize> {
    let mut round: Vec<(usize, Option<Tagged>)> = heads.into_iter().enumerate().collect();
    while round.len() > 1 {
        round = round
            .chunks(2)
            .map(|pair| match (pair[0].1, pair[1].1) {
                (Some(a), Some(b)) if b.beats(&a) => pair[1],
                (Some(_), _) => pair[0],
                (None, _) => pair[1],
            })
            .collect();
    }
    round[0].1.map(|_| round[0].0)
}

/// Emulates the local k-WTA datapath for one 64-element vector: eight sorted
/// 8-element sub-vectors feed eight FIFOs, and `k` rounds of a comparator tree
/// over the FIFO heads pop the winners.
pub fn topk_fifo_merge(v: &[i8], k: usize) -> Result<SparseActivation> {
    if v.len() != 64 {
        return Err(Error::ShapeMismatch(format!(
            "FIFO merge takes a 64-element vector, got {}",
            v.len()
        )));
    }
    let mut fifos: Vec<VecDeque<Tagged>> = v
        .chunks_exact(8)
        .enumerate()
        .map(|(f, chunk)| {
            let mut lanes = [Tagged { value: 0, index: 0 }; 8];
            for (i, (lane, &value)) in lanes.iter_mut().zip(chunk).enumerate() {
                *lane = Tagged {
                    value,
                    index: f * 8 + i,
                };
            }
            sort8_descending(&mut lanes);
            lanes.into_iter().collect()
        })
        .collect();

    let mut winners = Vec::with_capacity(k.min(64));
    for _ in 0..k.min(64) {
        let heads: [Option<Tagged>; 8] = std::array::from_fn(|f| fifos[f].front().copied());
        let Some(f) = comparator_tree(heads) else { break };
        let t = fifos[f].pop_front().expect("tree picked a non-empty FIFO");
        winners.push(Winner {
            index: t.index,
            value: t.value,
        });
    }
    winners.sort_unstable_by_key(|w| w.index);
    Ok(SparseActivation {
        length: 64,
        k,
        winners,
    })
}
