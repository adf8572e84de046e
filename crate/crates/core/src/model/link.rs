use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Allocation, ChannelRealization, InterferenceMode, NetworkConfig};

/// Per-link and aggregate performance of an allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkMetrics {
    /// `sinr[[u, k]]` on the UE's serving RU; zero on unscheduled PRBs.
    pub sinr: Array2<f64>,
    pub rate_ue: Vec<f64>,
    pub rate_slice: Vec<f64>,
    pub rate_total: f64,
    /// Packet delay per UE; `+inf` for starved UEs.
    pub delay: Vec<f64>,
    pub ru_capacity: Vec<f64>,
}

fn interference(
    alloc: &Allocation,
    chan: &ChannelRealization,
    config: &NetworkConfig,
    ue_slices: &[usize],
    u: usize,
    k: usize,
    r: usize,
) -> f64 {
    let (u_n, r_n, _) = alloc.shape();
    let mut total = 0.0;
    for j in (0..r_n).filter(|&j| j != r) {
        for i in (0..u_n).filter(|&i| i != u) {
            if config.interference_mode == InterferenceMode::OtherCellsOtherSlices
                && ue_slices[i] == ue_slices[u]
            {
                continue;
            }
            if alloc.assoc[[i, j]] && alloc.prb[[i, j, k]] {
                total += alloc.power[[i, j, k]] * chan.gain[[u, j, k]];
            }
        }
    }
    if let (Some(ext), Some(gain)) = (&config.external_interferer, &chan.external) {
        total += super::dbm_to_watts(ext.power_dbm) * gain[[u, k]];
    }
    total
}

fn sinr_with(
    alloc: &Allocation,
    chan: &ChannelRealization,
    config: &NetworkConfig,
    ue_slices: &[usize],
    u: usize,
    k: usize,
    r: usize,
) -> f64 {
    if !(alloc.assoc[[u, r]] && alloc.prb[[u, r, k]]) {
        return 0.0;
    }
    let signal = alloc.power[[u, r, k]] * chan.gain[[u, r, k]];
    signal / (config.prb_noise() + interference(alloc, chan, config, ue_slices, u, k, r))
}

/// SINR of UE `u` served by RU `r` on PRB `k`. Interference counts the
/// co-PRB transmissions of other RUs as received at `u`, filtered by
/// [`InterferenceMode`], plus the external source when configured.
pub fn sinr(
    alloc: &Allocation,
    chan: &ChannelRealization,
    config: &NetworkConfig,
    u: usize,
    k: usize,
    r: usize,
) -> f64 {
    sinr_with(alloc, chan, config, &config.ue_slices(), u, k, r)
}

fn ue_rate_with(
    alloc: &Allocation,
    chan: &ChannelRealization,
    config: &NetworkConfig,
    ue_slices: &[usize],
    u: usize,
) -> (f64, Vec<f64>) {
    let (_, r_n, k_n) = alloc.shape();
    let mut per_prb = vec![0.0; k_n];
    let mut rate = 0.0;
    for r in 0..r_n {
        if !alloc.assoc[[u, r]] {
            continue;
        }
        for k in 0..k_n {
            if alloc.prb[[u, r, k]] {
                let rho = sinr_with(alloc, chan, config, ue_slices, u, k, r);
                per_prb[k] += rho;
                rate += config.prb_bandwidth * (1.0 + rho).log2();
            }
        }
    }
    (rate, per_prb)
}

/// Achievable rate of UE `u` in bit/s, summed over its scheduled PRBs.
pub fn rate_ue(alloc: &Allocation, chan: &ChannelRealization, config: &NetworkConfig, u: usize) -> f64 {
    ue_rate_with(alloc, chan, config, &config.ue_slices(), u).0
}

pub fn rate_slice(
    alloc: &Allocation,
    chan: &ChannelRealization,
    config: &NetworkConfig,
    slice: usize,
) -> f64 {
    let ue_slices = config.ue_slices();
    config
        .ues_of_slice(slice)
        .map(|u| ue_rate_with(alloc, chan, config, &ue_slices, u).0)
        .sum()
}

pub fn rate_total(alloc: &Allocation, chan: &ChannelRealization, config: &NetworkConfig) -> f64 {
    evaluate(alloc, chan, config).rate_total
}

/// Transmission delay `L / R`; a starved UE gets `+inf`.
pub fn delay(packet_bits: f64, rate: f64) -> f64 {
    if rate > 0.0 {
        packet_bits / rate
    } else {
        f64::INFINITY
    }
}

/// Aggregate rate of the UEs attached to RU `r`.
pub fn ru_capacity(alloc: &Allocation, chan: &ChannelRealization, config: &NetworkConfig, r: usize) -> f64 {
    let ue_slices = config.ue_slices();
    let (u_n, _, k_n) = alloc.shape();
    let mut cap = 0.0;
    for u in 0..u_n {
        if !alloc.assoc[[u, r]] {
            continue;
        }
        for k in 0..k_n {
            if alloc.prb[[u, r, k]] {
                let rho = sinr_with(alloc, chan, config, &ue_slices, u, k, r);
                cap += config.prb_bandwidth * (1.0 + rho).log2();
            }
        }
    }
    cap
}

/// Evaluates every link metric in one pass.
pub fn evaluate(alloc: &Allocation, chan: &ChannelRealization, config: &NetworkConfig) -> LinkMetrics {
    let ue_slices = config.ue_slices();
    let (u_n, r_n, k_n) = alloc.shape();
    let mut sinr = Array2::zeros((u_n, k_n));
    let mut rate_ue = vec![0.0; u_n];
    for u in 0..u_n {
        let (rate, per_prb) = ue_rate_with(alloc, chan, config, &ue_slices, u);
        rate_ue[u] = rate;
        for (k, rho) in per_prb.into_iter().enumerate() {
            sinr[[u, k]] = rho;
        }
    }
    let rate_slice: Vec<f64> = (0..config.num_slices())
        .map(|s| config.ues_of_slice(s).map(|u| rate_ue[u]).sum())
        .collect();
    let rate_total = rate_slice.iter().sum();
    let delay = (0..u_n)
        .map(|u| delay(config.slices[ue_slices[u]].packet_bits, rate_ue[u]))
        .collect();
    let ru_capacity = (0..r_n)
        .map(|r| (0..u_n).filter(|&u| alloc.assoc[[u, r]]).map(|u| rate_ue[u]).sum())
        .collect();
    LinkMetrics {
        sinr,
        rate_ue,
        rate_slice,
        rate_total,
        delay,
        ru_capacity,
    }
}

/// Total achievable rate, the quantity the allocator maximizes.
pub fn objective(alloc: &Allocation, chan: &ChannelRealization, config: &NetworkConfig) -> f64 {
    rate_total(alloc, chan, config)
}
