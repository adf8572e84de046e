//! Physical-layer model of a sliced O-RAN downlink.
//!
//! Scenario description ([`NetworkConfig`]), channel sampling, per-PRB SINR with
//! inter-cell interference, achievable rates, packet delay, RU capacity and the
//! constraint set of the joint PRB/power allocation problem.
//!
//! Powers are carried in dBm only inside [`NetworkConfig`]; every computation
//! works in watts.

mod allocation;
mod channel;
mod constraints;
mod link;

pub use allocation::{Allocation, AllocationError};
pub use channel::{sample_channel, ChannelRealization, Point, Scenario, Topology};
pub use constraints::{
    check_constraints, constraints_with_metrics, ConstraintCheck, ConstraintReport, POWER_TOLERANCE,
};
pub use link::{
    delay, evaluate, objective, rate_slice, rate_total, rate_ue, ru_capacity, sinr, LinkMetrics,
};

use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

/// Converts a power level in dBm to watts.
pub fn dbm_to_watts(level_dbm: f64) -> f64 {
    10f64.powf((level_dbm - 30.0) / 10.0)
}

/// Converts watts to dBm.
pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

/// Thermal noise power in watts over `bandwidth_hz` for a PSD given in dBm/Hz.
pub fn noise_power(psd_dbm_hz: f64, bandwidth_hz: f64) -> f64 {
    dbm_to_watts(psd_dbm_hz) * bandwidth_hz
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Service {
    Embb,
    Urllc,
    Mmtc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceSpec {
    pub service: Service,
    pub num_ues: usize,
    /// Average packet size in bits.
    pub packet_bits: f64,
    /// Minimum per-UE rate in bit/s. Zero means no rate target.
    pub min_rate: f64,
    /// Per-packet delay bound in seconds.
    #[serde(default)]
    pub max_delay: Option<f64>,
    /// Cap on the total power one RU may spend on this slice, in dBm.
    #[serde(default)]
    pub power_cap_dbm: Option<f64>,
    /// Number of PRBs reserved for this slice. `None` takes the proportional split.
    #[serde(default)]
    pub prb_quota: Option<usize>,
}

impl SliceSpec {
    pub fn embb(num_ues: usize) -> Self {
        Self {
            service: Service::Embb,
            num_ues,
            packet_bits: 12_000.0,
            min_rate: 10e6,
            max_delay: None,
            power_cap_dbm: None,
            prb_quota: None,
        }
    }

    pub fn urllc(num_ues: usize) -> Self {
        Self {
            service: Service::Urllc,
            num_ues,
            packet_bits: 1_500.0,
            min_rate: 2e6,
            max_delay: Some(1e-3),
            power_cap_dbm: None,
            prb_quota: None,
        }
    }

    pub fn mmtc(num_ues: usize) -> Self {
        Self {
            service: Service::Mmtc,
            num_ues,
            packet_bits: 800.0,
            min_rate: 0.0,
            max_delay: None,
            power_cap_dbm: None,
            prb_quota: None,
        }
    }

    /// Default share of the PRB pool for each service class (40/40/20).
    pub fn default_share(&self) -> f64 {
        match self.service {
            Service::Embb => 0.4,
            Service::Urllc => 0.4,
            Service::Mmtc => 0.2,
        }
    }
}

/// How the inter-cell interference sum selects interfering transmissions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterferenceMode {
    /// Other RUs, other slices, other UEs: the triple exclusion taken literally.
    /// With slice-partitioned PRBs this leaves only the external source.
    #[default]
    OtherCellsOtherSlices,
    /// Every co-PRB transmission of every other RU.
    AllOtherCells,
}

/// An additional transmitter outside the operator's control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalInterferer {
    /// Transmit power radiated on every PRB, in dBm.
    pub power_dbm: f64,
    /// Position in meters, relative to RU 0.
    pub position: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub num_rus: usize,
    pub slices: Vec<SliceSpec>,
    pub total_prbs: usize,
    /// PRB bandwidth in Hz.
    pub prb_bandwidth: f64,
    /// Noise power spectral density in dBm/Hz.
    pub noise_psd_dbm_hz: f64,
    pub ru_max_power_dbm: f64,
    /// RU capacity ceiling in bit/s. `None` leaves capacity unconstrained.
    pub ru_max_capacity: Option<f64>,
    pub cell_radius: f64,
    pub path_loss_exponent: f64,
    /// Reference distance of the path-loss law, in meters.
    pub reference_distance: f64,
    /// Explicit RU coordinates. Empty places RUs on a line one cell radius apart.
    pub ru_positions: Vec<Point>,
    pub interference_mode: InterferenceMode,
    pub external_interferer: Option<ExternalInterferer>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            num_rus: 2,
            slices: vec![SliceSpec::embb(4), SliceSpec::urllc(4), SliceSpec::mmtc(2)],
            total_prbs: 50,
            prb_bandwidth: 180e3,
            noise_psd_dbm_hz: -174.0,
            ru_max_power_dbm: 46.0,
            ru_max_capacity: None,
            cell_radius: 400.0,
            path_loss_exponent: 3.76,
            reference_distance: 1.0,
            ru_positions: Vec::new(),
            interference_mode: InterferenceMode::default(),
            external_interferer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{key}: {reason}")]
    Invalid { key: String, reason: String },
}

fn invalid(key: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        reason: reason.into(),
    }
}

impl NetworkConfig {
    /// The desk-scale benchmark: one RU, four UEs split 2/1/1, four PRBs.
    pub fn desk() -> Self {
        Self {
            num_rus: 1,
            slices: vec![SliceSpec::embb(2), SliceSpec::urllc(1), SliceSpec::mmtc(1)],
            total_prbs: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_rus == 0 {
            return Err(invalid("network.num_rus", "must be at least 1"));
        }
        if self.total_prbs == 0 {
            return Err(invalid("network.total_prbs", "must be at least 1"));
        }
        if !(self.prb_bandwidth > 0.0 && self.prb_bandwidth.is_finite()) {
            return Err(invalid("network.prb_bandwidth", "must be positive and finite"));
        }
        for (key, v) in [
            ("network.noise_psd_dbm_hz", self.noise_psd_dbm_hz),
            ("network.ru_max_power_dbm", self.ru_max_power_dbm),
            ("network.path_loss_exponent", self.path_loss_exponent),
        ] {
            if !v.is_finite() {
                return Err(invalid(key, "must be finite"));
            }
        }
        if !(self.cell_radius > 0.0) {
            return Err(invalid("network.cell_radius", "must be positive"));
        }
        if !(self.reference_distance > 0.0) {
            return Err(invalid("network.reference_distance", "must be positive"));
        }
        if let Some(c) = self.ru_max_capacity {
            if !(c >= 0.0) {
                return Err(invalid("network.ru_max_capacity", "must be nonnegative"));
            }
        }
        if !self.ru_positions.is_empty() && self.ru_positions.len() != self.num_rus {
            return Err(invalid(
                "network.ru_positions",
                format!("expected {} positions, got {}", self.num_rus, self.ru_positions.len()),
            ));
        }
        if let Some(ext) = &self.external_interferer {
            if !ext.power_dbm.is_finite() {
                return Err(invalid("network.external_interferer.power_dbm", "must be finite"));
            }
        }
        for (i, s) in self.slices.iter().enumerate() {
            if !(s.packet_bits > 0.0) {
                return Err(invalid(format!("network.slices[{i}].packet_bits"), "must be positive"));
            }
            if !(s.min_rate >= 0.0) {
                return Err(invalid(format!("network.slices[{i}].min_rate"), "must be nonnegative"));
            }
            if let Some(d) = s.max_delay {
                if !(d > 0.0) {
                    return Err(invalid(format!("network.slices[{i}].max_delay"), "must be positive"));
                }
            }
            if let Some(p) = s.power_cap_dbm {
                if !p.is_finite() {
                    return Err(invalid(format!("network.slices[{i}].power_cap_dbm"), "must be finite"));
                }
            }
        }
        let quota: usize = self.prb_quotas().iter().sum();
        if quota > self.total_prbs {
            return Err(invalid(
                "network.slices.prb_quota",
                format!("slice quotas sum to {quota}, exceeding {} PRBs", self.total_prbs),
            ));
        }
        Ok(())
    }

    pub fn num_ues(&self) -> usize {
        self.slices.iter().map(|s| s.num_ues).sum()
    }

    pub fn num_slices(&self) -> usize {
        self.slices.len()
    }

    /// Slice index of every UE. UEs are numbered slice by slice.
    pub fn ue_slices(&self) -> Vec<usize> {
        self.slices
            .iter()
            .enumerate()
            .flat_map(|(s, spec)| std::iter::repeat(s).take(spec.num_ues))
            .collect()
    }

    pub fn slice_of(&self, ue: usize) -> usize {
        let mut acc = 0;
        for (s, spec) in self.slices.iter().enumerate() {
            acc += spec.num_ues;
            if ue < acc {
                return s;
            }
        }
        panic!("UE index {ue} out of range");
    }

    pub fn ues_of_slice(&self, slice: usize) -> Range<usize> {
        let start: usize = self.slices[..slice].iter().map(|s| s.num_ues).sum();
        start..start + self.slices[slice].num_ues
    }

    /// PRBs reserved per slice. Explicit quotas are used verbatim; the rest are
    /// filled from the default shares by largest remainder (ties to the lower index).
    pub fn prb_quotas(&self) -> Vec<usize> {
        let explicit: usize = self.slices.iter().filter_map(|s| s.prb_quota).sum();
        let free = self.total_prbs.saturating_sub(explicit);
        let open: Vec<usize> = (0..self.slices.len())
            .filter(|&i| self.slices[i].prb_quota.is_none())
            .collect();
        let share_sum: f64 = open.iter().map(|&i| self.slices[i].default_share()).sum();
        let mut quotas: Vec<usize> = self.slices.iter().map(|s| s.prb_quota.unwrap_or(0)).collect();
        if open.is_empty() || share_sum <= 0.0 {
            return quotas;
        }
        let exact: Vec<f64> = open
            .iter()
            .map(|&i| free as f64 * self.slices[i].default_share() / share_sum)
            .collect();
        let mut assigned = 0;
        for (j, &i) in open.iter().enumerate() {
            quotas[i] = exact[j].floor() as usize;
            assigned += quotas[i];
        }
        let mut order: Vec<usize> = (0..open.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &j in order.iter().take(free.saturating_sub(assigned)) {
            quotas[open[j]] += 1;
        }
        quotas
    }

    /// Owning slice of every PRB; `None` for PRBs outside all quotas.
    /// Slices own contiguous PRB blocks in slice order.
    pub fn prb_owners(&self) -> Vec<Option<usize>> {
        let mut owners = vec![None; self.total_prbs];
        let mut k = 0;
        for (s, q) in self.prb_quotas().into_iter().enumerate() {
            for _ in 0..q {
                if k < owners.len() {
                    owners[k] = Some(s);
                }
                k += 1;
            }
        }
        owners
    }

    pub fn ru_max_power(&self) -> f64 {
        dbm_to_watts(self.ru_max_power_dbm)
    }

    pub fn slice_power_cap(&self, slice: usize) -> Option<f64> {
        self.slices[slice].power_cap_dbm.map(dbm_to_watts)
    }

    /// Noise power on one PRB, in watts.
    pub fn prb_noise(&self) -> f64 {
        noise_power(self.noise_psd_dbm_hz, self.prb_bandwidth)
    }

    pub fn ru_capacity_limit(&self) -> f64 {
        self.ru_max_capacity.unwrap_or(f64::INFINITY)
    }

    /// RU coordinates, either explicit or spaced one cell radius apart along x.
    pub fn ru_coordinates(&self) -> Vec<Point> {
        if !self.ru_positions.is_empty() {
            return self.ru_positions.clone();
        }
        (0..self.num_rus)
            .map(|r| Point::new(r as f64 * self.cell_radius, 0.0))
            .collect()
    }

    /// Resizes the scenario to `n` UEs using the default 40/40/20 service split.
    pub fn with_num_ues(&self, n: usize) -> Self {
        let mut out = self.clone();
        let shares: Vec<f64> = out.slices.iter().map(|s| s.default_share()).collect();
        let total: f64 = shares.iter().sum();
        let exact: Vec<f64> = shares.iter().map(|w| n as f64 * w / total).collect();
        let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| {
            (exact[b] - exact[b].floor())
                .total_cmp(&(exact[a] - exact[a].floor()))
                .then(a.cmp(&b))
        });
        let missing = n - counts.iter().sum::<usize>();
        for &i in order.iter().take(missing) {
            counts[i] += 1;
        }
        for (s, c) in out.slices.iter_mut().zip(counts) {
            s.num_ues = c;
        }
        out
    }
}
