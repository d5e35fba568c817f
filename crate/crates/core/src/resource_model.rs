//! Memory-port and bandwidth model for a sparse-sparse layer.
//!
//! Each of the `K` non-zero activations reads one position of the augmented
//! weight memory per cycle, so a layer needs `K` read ports, each wide enough
//! for `S` (weight, kernel ID) pairs. Memory is counted in URAM blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packing::id_bits_for;

pub const URAM_PORT_BITS: u64 = 72;
pub const URAM_PORTS: u64 = 2;
pub const URAM_CAPACITY_BITS: u64 = 288 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UramBound {
    Bandwidth,
    Capacity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortEstimate {
    pub ports: u64,
    pub sets: u64,
    pub port_width_bits: u64,
    pub total_bandwidth_bits_per_cycle: u64,
    /// Blocks needed to expose `ports` reads of `port_width_bits` per cycle.
    pub urams_bandwidth: u64,
    /// Blocks needed to hold the `C_in` augmented weight words.
    pub urams_capacity: u64,
    pub storage_bits: u64,
    pub urams: u64,
    pub bound: UramBound,
}

/// `b_id` defaults to the bits needed for `C_out` kernel IDs plus the null ID.
pub fn estimate_ports(c_in: u64, c_out: u64, n: u64, k: u64, b_w: u64, b_id: Option<u64>) -> Result<PortEstimate> {
    if c_in == 0 || c_out == 0 || n == 0 || k == 0 || b_w == 0 {
        return Err(Error::InvalidConfig(
            "C_in, C_out, N, K and B_W must all be positive".into(),
        ));
    }
    let b_id = b_id.unwrap_or_else(|| id_bits_for(c_out as usize) as u64);
    if b_id == 0 || b_w > 16 || b_id > 16 {
        return Err(Error::InvalidConfig(format!(
            "bit widths must lie in 1..=16, got B_W={b_w} B_ID={b_id}"
        )));
    }
    if n > c_in {
        return Err(Error::InvalidConfig(format!("N={n} exceeds C_in={c_in}")));
    }
    let sets = (c_out * n).div_ceil(c_in);
    let port_width_bits = sets * (b_w + b_id);
    let ports = k;
    let urams_bandwidth = ports.div_ceil(URAM_PORTS) * port_width_bits.div_ceil(URAM_PORT_BITS);
    let storage_bits = c_in * port_width_bits;
    let urams_capacity = storage_bits.div_ceil(URAM_CAPACITY_BITS);
    let bound = if urams_bandwidth >= urams_capacity {
        UramBound::Bandwidth
    } else {
        UramBound::Capacity
    };
    Ok(PortEstimate {
        ports,
        sets,
        port_width_bits,
        total_bandwidth_bits_per_cycle: ports * port_width_bits,
        urams_bandwidth,
        urams_capacity,
        storage_bits,
        urams: urams_bandwidth.max(urams_capacity),
        bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sixty_four_channel_example() {
        let e = estimate_ports(64, 64, 4, 8, 8, Some(6)).unwrap();
        assert_eq!(e.ports, 8);
        assert_eq!(e.sets, 4);
        assert_eq!(e.port_width_bits, 56);
        assert_eq!(e.total_bandwidth_bits_per_cycle, 448);
        assert_eq!(e.urams_bandwidth, 4);
        assert_eq!(e.urams_capacity, 1);
        assert_eq!(e.bound, UramBound::Bandwidth);
    }

    #[test]
    fn halving_k_and_n() {
        let base = estimate_ports(64, 64, 8, 16, 8, None).unwrap();
        let half_k = estimate_ports(64, 64, 8, 8, 8, None).unwrap();
        let half_n = estimate_ports(64, 64, 4, 16, 8, None).unwrap();
        assert_eq!(base.ports, 2 * half_k.ports);
        assert_eq!(base.total_bandwidth_bits_per_cycle, 2 * half_k.total_bandwidth_bits_per_cycle);
        assert_eq!(base.port_width_bits, 2 * half_n.port_width_bits);
    }

    #[test]
    fn default_id_width_and_errors() {
        assert_eq!(estimate_ports(64, 64, 1, 1, 8, None).unwrap().port_width_bits, 8 + 7);
        assert!(estimate_ports(0, 64, 1, 1, 8, None).is_err());
        assert!(estimate_ports(64, 64, 1, 0, 8, None).is_err());
        assert!(estimate_ports(64, 64, 1, 1, 17, None).is_err());
        assert!(estimate_ports(4, 64, 5, 1, 8, None).is_err());
    }

    #[test]
    fn capacity_bound_for_wide_inputs() {
        let e = estimate_ports(65536, 64, 1, 1, 8, None).unwrap();
        assert_eq!(e.sets, 1);
        assert_eq!(e.urams_capacity, 4);
        assert_eq!(e.bound, UramBound::Capacity);
        assert_eq!(e.urams, e.urams_capacity);
    }

    proptest! {
        #[test]
        fn invariants_hold(c_in in 1u64..256, c_out in 1u64..256, n_frac in 0.0f64..1.0, k in 1u64..128, b_w in 1u64..=16) {
            let n = 1 + ((c_in - 1) as f64 * n_frac) as u64;
            let e = estimate_ports(c_in, c_out, n, k, b_w, None).unwrap();
            prop_assert_eq!(e.total_bandwidth_bits_per_cycle, e.ports * e.port_width_bits);
            prop_assert!(e.urams >= (e.ports * e.port_width_bits).div_ceil(2 * URAM_PORT_BITS));
            let e2 = estimate_ports(c_in, c_out, n, 2 * k, b_w, None).unwrap();
            prop_assert_eq!(e2.ports, 2 * e.ports);
            prop_assert!(e2.urams >= e.urams);
        }
    }
}
