#![allow(dead_code)]

use compsparse::kwta::{local_kwta, KwtaConfig, SparseMap};
use compsparse::packing::{expand_blocks, generate_complementary_masks};
use compsparse::{AugmentedWeightTensor, QTensor, SparseKernel};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn nonzero_i8(rng: &mut ChaCha8Rng) -> i8 {
    let w: i8 = rng.gen_range(1..=127);
    if rng.gen_bool(0.5) {
        w
    } else {
        -w
    }
}

pub fn kernels_from_masks(rng: &mut ChaCha8Rng, shape: &[usize], n: usize, count: usize, block: usize) -> Vec<SparseKernel> {
    let seed = rng.gen();
    let masks = if block > 1 {
        let spatial = generate_complementary_masks(&shape[..2], n / block, count, seed).unwrap();
        expand_blocks(&spatial, block)
    } else {
        generate_complementary_masks(shape, n, count, seed).unwrap()
    };
    masks
        .iter()
        .enumerate()
        .map(|(id, m)| {
            let w: Vec<i8> = (0..m.count_ones()).map(|_| nonzero_i8(rng)).collect();
            SparseKernel::from_support(id, shape.to_vec(), m.ones(), &w).unwrap()
        })
        .collect()
}

pub fn pack(kernels: &[SparseKernel], shape: &[usize], n_out: usize) -> AugmentedWeightTensor {
    AugmentedWeightTensor::pack(kernels, shape.to_vec(), n_out).unwrap()
}

pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> QTensor {
    QTensor::new(vec![h, w, c], (0..h * w * c).map(|_| rng.gen()).collect()).unwrap()
}

/// Per-location k-WTA of a random map.
pub fn random_sparse_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, k: usize) -> SparseMap {
    let dense = random_map(rng, h, w, c);
    let locations = dense
        .values()
        .chunks(c)
        .map(|v| local_kwta(v, &KwtaConfig::local(k, c)).unwrap())
        .collect();
    SparseMap::new(h, w, c, locations).unwrap()
}
