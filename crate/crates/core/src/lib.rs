//! Network-slicing simulator for a sliced O-RAN downlink and a Q-guided
//! diffusion policy agent for joint PRB and power allocation.
//!
//! - [`model`]: SINR, rates, delay, capacity and constraint checks.
//! - [`env`]: the allocation task as an MDP with a feasibility-preserving action decoder.
//! - [`nn`]: dense networks with exact reverse-mode gradients, Adam and soft updates.
//! - [`diffusion`]: noise schedule, denoising loss and the critic-guided sampler.
//! - [`agent`]: replay buffer, twin critics, the Diffusion-QL trainer and a DQN baseline.
//! - [`esa`]: exhaustive search for optimal allocations on small instances.
//! - [`metrics`]: agreement metrics against exhaustive-search labels.

pub mod agent;
pub mod diffusion;
pub mod env;
pub mod esa;
pub mod metrics;
pub mod model;
pub mod nn;

/// Derives an independent stream seed from a base seed (SplitMix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
