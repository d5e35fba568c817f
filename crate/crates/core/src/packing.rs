//! Offline "combine" step: partition sparse kernels into complementary sets and
//! overlay each set into one dense, kernel-ID-augmented slice.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::SparseKernel;

/// Kernel ID stored in vacant augmented slots.
pub const NULL_KERNEL_ID: u16 = u16::MAX;

/// Two kernels sharing a non-zero position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Collision {
    pub position: usize,
    pub kernels: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComplementarySet {
    pub member_kernel_ids: Vec<usize>,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AugmentedEntry {
    pub weight: i8,
    pub kernel_id: u16,
}

impl AugmentedEntry {
    pub const NULL: AugmentedEntry = AugmentedEntry {
        weight: 0,
        kernel_id: NULL_KERNEL_ID,
    };

    pub fn is_null(&self) -> bool {
        self.kernel_id == NULL_KERNEL_ID
    }
}

/// One complementary set overlaid into a single dense slice: exactly one entry
/// per kernel position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedSlice {
    shape: Vec<usize>,
    entries: Vec<AugmentedEntry>,
}

impl AugmentedSlice {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn entries(&self) -> &[AugmentedEntry] {
        &self.entries
    }

    pub fn filled(&self) -> usize {
        self.entries.iter().filter(|e| !e.is_null()).count()
    }
}

/// `S` overlaid complementary slices, stored position-major so that one read
/// at an input position returns all `S` (weight, kernel ID) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedWeightTensor {
    kernel_shape: Vec<usize>,
    n_out: usize,
    sets: usize,
    entries: Vec<AugmentedEntry>,
    n_per_kernel: usize,
}

impl AugmentedWeightTensor {
    /// Stacks slices into a tensor. Every slice must share `kernel_shape` and
    /// carry only kernel IDs below `n_out`.
    pub fn stack(kernel_shape: Vec<usize>, n_out: usize, slices: &[AugmentedSlice]) -> Result<Self> {
        if n_out >= NULL_KERNEL_ID as usize {
            return Err(Error::InvalidConfig(format!(
                "{n_out} output channels exceed the kernel ID range"
            )));
        }
        let positions: usize = kernel_shape.iter().product();
        let sets = slices.len();
        let mut entries = vec![AugmentedEntry::NULL; positions * sets];
        let mut per_kernel = vec![0usize; n_out];
        for (s, slice) in slices.iter().enumerate() {
            if slice.shape != kernel_shape {
                return Err(Error::ShapeMismatch(format!(
                    "slice {s} has shape {:?}, expected {:?}",
                    slice.shape, kernel_shape
                )));
            }
            for (pos, e) in slice.entries.iter().enumerate() {
                if e.is_null() {
                    continue;
                }
                let id = e.kernel_id as usize;
                if id >= n_out {
                    return Err(Error::InvalidKernel {
                        kernel_id: id,
                        reason: format!("kernel ID not below {n_out} output channels"),
                    });
                }
                per_kernel[id] += 1;
                entries[pos * sets + s] = *e;
            }
        }
        let t = Self {
            kernel_shape,
            n_out,
            sets,
            entries,
            n_per_kernel: per_kernel.into_iter().max().unwrap_or(0),
        };
        t.check_distinct_ids()?;
        Ok(t)
    }

    /// Partitions `kernels` greedily and overlays each complementary set.
    pub fn pack(kernels: &[SparseKernel], kernel_shape: Vec<usize>, n_out: usize) -> Result<Self> {
        for k in kernels {
            if k.shape() != kernel_shape.as_slice() {
                return Err(Error::KernelShape {
                    kernel_id: k.kernel_id(),
                    expected: kernel_shape.clone(),
                    found: k.shape().to_vec(),
                });
            }
        }
        let sets = partition_into_complementary_sets(kernels)?;
        let slices = sets
            .iter()
            .map(|set| combine(set, kernels))
            .collect::<Result<Vec<_>>>()?;
        Self::stack(kernel_shape, n_out, &slices)
    }

    /// Rebuilds a tensor from a raw position-major entry stream.
    pub fn from_entries(
        kernel_shape: Vec<usize>,
        n_out: usize,
        sets: usize,
        entries: Vec<AugmentedEntry>,
    ) -> Result<Self> {
        let positions: usize = kernel_shape.iter().product();
        if entries.len() != positions * sets {
            return Err(Error::ShapeMismatch(format!(
                "{} entries for {positions} positions x {sets} sets",
                entries.len()
            )));
        }
        let mut per_kernel = vec![0usize; n_out];
        for e in entries.iter().filter(|e| !e.is_null()) {
            let id = e.kernel_id as usize;
            if id >= n_out {
                return Err(Error::InvalidKernel {
                    kernel_id: id,
                    reason: format!("kernel ID not below {n_out} output channels"),
                });
            }
            if e.weight == 0 {
                return Err(Error::InvalidKernel {
                    kernel_id: id,
                    reason: "zero weight in a filled slot".into(),
                });
            }
            per_kernel[id] += 1;
        }
        let t = Self {
            kernel_shape,
            n_out,
            sets,
            entries,
            n_per_kernel: per_kernel.into_iter().max().unwrap_or(0),
        };
        t.check_distinct_ids()?;
        Ok(t)
    }

    fn check_distinct_ids(&self) -> Result<()> {
        for pos in 0..self.positions() {
            let slots = self.slots(pos);
            for (i, a) in slots.iter().enumerate() {
                if a.is_null() {
                    continue;
                }
                if slots[i + 1..].iter().any(|b| b.kernel_id == a.kernel_id) {
                    return Err(Error::InvalidKernel {
                        kernel_id: a.kernel_id as usize,
                        reason: format!("appears twice at position {pos}"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn kernel_shape(&self) -> &[usize] {
        &self.kernel_shape
    }

    /// Number of input positions (the product of the kernel shape).
    pub fn positions(&self) -> usize {
        self.kernel_shape.iter().product()
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    /// `S`: overlaid complementary sets, i.e. entries per position.
    pub fn sets(&self) -> usize {
        self.sets
    }

    /// Largest non-zero count of any packed kernel.
    pub fn n_per_kernel(&self) -> usize {
        self.n_per_kernel
    }

    pub fn weight_bits(&self) -> u32 {
        8
    }

    /// Bits for a kernel ID including one null code.
    pub fn id_bits(&self) -> u32 {
        id_bits_for(self.n_out)
    }

    pub fn entries(&self) -> &[AugmentedEntry] {
        &self.entries
    }

    /// The `S` slots at one input position, nulls included.
    #[inline]
    pub fn slots(&self, position: usize) -> &[AugmentedEntry] {
        &self.entries[position * self.sets..(position + 1) * self.sets]
    }

    /// All entries of set `s`, one per position.
    pub fn slice(&self, s: usize) -> AugmentedSlice {
        AugmentedSlice {
            shape: self.kernel_shape.clone(),
            entries: (0..self.positions())
                .map(|p| self.entries[p * self.sets + s])
                .collect(),
        }
    }

    /// Distinct kernel IDs present in each set.
    pub fn set_members(&self) -> Vec<Vec<usize>> {
        (0..self.sets)
            .map(|s| {
                let mut ids: Vec<usize> = (0..self.positions())
                    .map(|p| self.entries[p * self.sets + s])
                    .filter(|e| !e.is_null())
                    .map(|e| e.kernel_id as usize)
                    .collect();
                ids.sort_unstable();
                ids.dedup();
                ids
            })
            .collect()
    }

    pub fn filled(&self) -> usize {
        self.entries.iter().filter(|e| !e.is_null()).count()
    }
}

/// `ceil(log2(n_out + 1))`, reserving one code for the null kernel ID.
pub fn id_bits_for(n_out: usize) -> u32 {
    let codes = n_out + 1;
    usize::BITS - (codes - 1).leading_zeros()
}

fn check_shapes(kernels: &[SparseKernel]) -> Result<()> {
    if let Some(first) = kernels.first() {
        for k in &kernels[1..] {
            if k.shape() != first.shape() {
                return Err(Error::KernelShape {
                    kernel_id: k.kernel_id(),
                    expected: first.shape().to_vec(),
                    found: k.shape().to_vec(),
                });
            }
        }
    }
    Ok(())
}

/// Ok when the supports are pairwise disjoint; otherwise every colliding
/// (position, kernel pair) is reported.
pub fn verify_complementarity(kernels: &[SparseKernel]) -> Result<()> {
    check_shapes(kernels)?;
    let Some(first) = kernels.first() else {
        return Ok(());
    };
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); first.positions()];
    for k in kernels {
        for p in k.support() {
            owners[p].push(k.kernel_id());
        }
    }
    let mut collisions = Vec::new();
    for (position, ids) in owners.iter().enumerate() {
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                collisions.push(Collision {
                    position,
                    kernels: (a, b),
                });
            }
        }
    }
    if collisions.is_empty() {
        Ok(())
    } else {
        Err(Error::Collision(collisions))
    }
}

/// Greedy first-fit by ascending kernel ID: each kernel joins the first set
/// whose occupied positions it does not touch.
pub fn partition_into_complementary_sets(kernels: &[SparseKernel]) -> Result<Vec<ComplementarySet>> {
    check_shapes(kernels)?;
    let Some(first) = kernels.first() else {
        return Ok(Vec::new());
    };
    let shape = first.shape().to_vec();
    let positions = first.positions();

    let mut order: Vec<&SparseKernel> = kernels.iter().collect();
    order.sort_by_key(|k| k.kernel_id());

    let mut occupied: Vec<Vec<bool>> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for k in order {
        let slot = occupied
            .iter()
            .position(|occ| k.support().all(|p| !occ[p]));
        let s = match slot {
            Some(s) => s,
            None => {
                occupied.push(vec![false; positions]);
                members.push(Vec::new());
                occupied.len() - 1
            }
        };
        for p in k.support() {
            occupied[s][p] = true;
        }
        members[s].push(k.kernel_id());
    }
    Ok(members
        .into_iter()
        .map(|member_kernel_ids| ComplementarySet {
            member_kernel_ids,
            shape: shape.clone(),
        })
        .collect())
}

/// Overlays the members of `set` (looked up by ID in `kernels`) into one slice.
pub fn combine(set: &ComplementarySet, kernels: &[SparseKernel]) -> Result<AugmentedSlice> {
    let positions: usize = set.shape.iter().product();
    let mut entries = vec![AugmentedEntry::NULL; positions];
    let mut owner: Vec<Option<usize>> = vec![None; positions];
    let mut collisions = Vec::new();
    for &id in &set.member_kernel_ids {
        let k = kernels
            .iter()
            .find(|k| k.kernel_id() == id)
            .ok_or_else(|| Error::InvalidKernel {
                kernel_id: id,
                reason: "set member missing from kernel list".into(),
            })?;
        if k.shape() != set.shape.as_slice() {
            return Err(Error::KernelShape {
                kernel_id: id,
                expected: set.shape.clone(),
                found: k.shape().to_vec(),
            });
        }
        let kernel_id = u16::try_from(id)
            .ok()
            .filter(|&v| v != NULL_KERNEL_ID)
            .ok_or_else(|| Error::InvalidKernel {
                kernel_id: id,
                reason: "kernel ID does not fit the 16-bit ID field".into(),
            })?;
        for &(p, weight) in k.entries() {
            if let Some(prev) = owner[p] {
                collisions.push(Collision {
                    position: p,
                    kernels: (prev, id),
                });
                continue;
            }
            owner[p] = Some(id);
            entries[p] = AugmentedEntry { weight, kernel_id };
        }
    }
    if !collisions.is_empty() {
        return Err(Error::Collision(collisions));
    }
    Ok(AugmentedSlice {
        shape: set.shape.clone(),
        entries,
    })
}

/// Inverse of packing: one kernel per kernel ID found, ascending by ID.
pub fn unpack(awt: &AugmentedWeightTensor) -> Vec<SparseKernel> {
    let mut per_kernel: Vec<Vec<(usize, i8)>> = vec![Vec::new(); awt.n_out()];
    for p in 0..awt.positions() {
        for e in awt.slots(p).iter().filter(|e| !e.is_null()) {
            per_kernel[e.kernel_id as usize].push((p, e.weight));
        }
    }
    per_kernel
        .into_iter()
        .enumerate()
        .filter(|(_, entries)| !entries.is_empty())
        .map(|(id, entries)| {
            SparseKernel::new(id, awt.kernel_shape().to_vec(), entries)
                .expect("packed entries are position-ordered and non-zero")
        })
        .collect()
}

/// Binary support mask over a flattened kernel shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    len: usize,
    ones: Vec<usize>,
}

impl Mask {
    pub fn new(len: usize, mut ones: Vec<usize>) -> Result<Self> {
        ones.sort_unstable();
        if ones.windows(2).any(|w| w[0] == w[1]) || ones.last().is_some_and(|&p| p >= len) {
            return Err(Error::InvalidConfig(format!(
                "mask positions must be unique and below {len}"
            )));
        }
        Ok(Self { len, ones })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Sorted positions of the ones.
    pub fn ones(&self) -> &[usize] {
        &self.ones
    }

    pub fn count_ones(&self) -> usize {
        self.ones.len()
    }

    pub fn to_bits(&self) -> Vec<bool> {
        let mut bits = vec![false; self.len];
        for &p in &self.ones {
            bits[p] = true;
        }
        bits
    }
}

/// Deterministic masks with exactly `n_per_kernel` ones each. Kernels are taken
/// in groups of `positions / n_per_kernel`; within a group the masks tile
/// disjoint slices of one random permutation of the positions.
pub fn generate_complementary_masks(
    shape: &[usize],
    n_per_kernel: usize,
    n_kernels: usize,
    seed: u64,
) -> Result<Vec<Mask>> {
    let positions: usize = shape.iter().product();
    if n_per_kernel == 0 || n_per_kernel > positions {
        return Err(Error::Infeasible(format!(
            "{n_per_kernel} non-zeros per kernel over {positions} positions"
        )));
    }
    let group = positions / n_per_kernel;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..positions).collect();
    let mut masks = Vec::with_capacity(n_kernels);
    while masks.len() < n_kernels {
        perm.shuffle(&mut rng);
        for chunk in perm.chunks_exact(n_per_kernel).take(group) {
            if masks.len() == n_kernels {
                break;
            }
            masks.push(Mask::new(positions, chunk.to_vec())?);
        }
    }
    Ok(masks)
}

/// Expands spatial masks so that each retained tap covers a full block of
/// `block` consecutive channel positions.
pub fn expand_blocks(spatial: &[Mask], block: usize) -> Vec<Mask> {
    spatial
        .iter()
        .map(|m| Mask {
            len: m.len * block,
            ones: m
                .ones
                .iter()
                .flat_map(|&tap| (0..block).map(move |c| tap * block + c))
                .collect(),
        })
        .collect()
}
