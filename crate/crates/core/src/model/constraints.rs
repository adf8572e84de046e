use serde::{Deserialize, Serialize};

use super::{evaluate, Allocation, ChannelRealization, LinkMetrics, NetworkConfig};

/// Absolute slack, in watts, when comparing power sums against budgets.
pub const POWER_TOLERANCE: f64 = 1e-9;

/// Outcome of one constraint family.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConstraintCheck {
    pub satisfied: bool,
    /// Violation in the constraint's own unit (seconds, watts, bit/s or a count).
    pub magnitude: f64,
    /// Violation scaled to be commensurate across families, each term capped at 1.
    pub normalized: f64,
}

impl ConstraintCheck {
    fn ok() -> Self {
        Self {
            satisfied: true,
            magnitude: 0.0,
            normalized: 0.0,
        }
    }

    fn add(&mut self, magnitude: f64, normalized: f64) {
        self.satisfied = false;
        self.magnitude += magnitude;
        self.normalized += normalized.min(1.0);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    /// Packet delay within `max_delay`.
    pub delay: ConstraintCheck,
    /// Per-RU power budget.
    pub power: ConstraintCheck,
    /// Per-RU, per-slice power cap.
    pub slice_power: ConstraintCheck,
    /// Per-RU capacity ceiling.
    pub capacity: ConstraintCheck,
    /// Each UE attached to exactly one RU.
    pub association: ConstraintCheck,
    /// PRBs (and power) only on the serving RU, nonnegative power.
    pub prb_gating: ConstraintCheck,
    /// At most one UE per `(RU, PRB)`.
    pub exclusivity: ConstraintCheck,
    /// Slice quotas fit the PRB pool and UEs stay inside their slice's PRBs.
    pub prb_budget: ConstraintCheck,
    /// Per-slice minimum rate.
    pub min_rate: ConstraintCheck,
}

impl ConstraintReport {
    /// Association, gating, exclusivity and PRB budget.
    pub fn structural_ok(&self) -> bool {
        self.association.satisfied
            && self.prb_gating.satisfied
            && self.exclusivity.satisfied
            && self.prb_budget.satisfied
    }

    pub fn structural_violations(&self) -> f64 {
        self.association.magnitude
            + self.prb_gating.magnitude
            + self.exclusivity.magnitude
            + self.prb_budget.magnitude
    }

    /// Feasible for the rate-maximization problem: structure, delay, power and capacity.
    pub fn problem_feasible(&self) -> bool {
        self.structural_ok()
            && self.delay.satisfied
            && self.power.satisfied
            && self.slice_power.satisfied
            && self.capacity.satisfied
    }

    /// Problem-feasible and every minimum-rate target met.
    pub fn qos_feasible(&self) -> bool {
        self.problem_feasible() && self.min_rate.satisfied
    }

    fn checks(&self) -> [&ConstraintCheck; 9] {
        [
            &self.delay,
            &self.power,
            &self.slice_power,
            &self.capacity,
            &self.association,
            &self.prb_gating,
            &self.exclusivity,
            &self.prb_budget,
            &self.min_rate,
        ]
    }

    /// Sum of normalized violations over every family, min-rate included.
    pub fn normalized_violation(&self) -> f64 {
        self.checks().iter().map(|c| c.normalized).sum()
    }

    /// Normalized violation restricted to the problem constraints (no min-rate).
    pub fn problem_violation(&self) -> f64 {
        self.normalized_violation() - self.min_rate.normalized
    }
}

pub fn check_constraints(
    alloc: &Allocation,
    chan: &ChannelRealization,
    config: &NetworkConfig,
) -> ConstraintReport {
    let metrics = evaluate(alloc, chan, config);
    constraints_with_metrics(alloc, &metrics, config)
}

pub fn constraints_with_metrics(
    alloc: &Allocation,
    metrics: &LinkMetrics,
    config: &NetworkConfig,
) -> ConstraintReport {
    let (u_n, r_n, k_n) = alloc.shape();
    let ue_slices = config.ue_slices();
    let owners = config.prb_owners();
    let p_max = config.ru_max_power();

    let mut delay = ConstraintCheck::ok();
    let mut min_rate = ConstraintCheck::ok();
    for u in 0..u_n {
        let spec = &config.slices[ue_slices[u]];
        if let Some(d_max) = spec.max_delay {
            let d = metrics.delay[u];
            if d > d_max {
                delay.add(d - d_max, (d - d_max) / d_max);
            }
        }
        if spec.min_rate > 0.0 && metrics.rate_ue[u] < spec.min_rate {
            let short = spec.min_rate - metrics.rate_ue[u];
            min_rate.add(short, short / spec.min_rate);
        }
    }

    let mut power = ConstraintCheck::ok();
    let mut slice_power = ConstraintCheck::ok();
    let mut capacity = ConstraintCheck::ok();
    let cap_limit = config.ru_capacity_limit();
    for r in 0..r_n {
        let used = alloc.ru_power(r);
        if used > p_max + POWER_TOLERANCE {
            power.add(used - p_max, (used - p_max) / p_max);
        }
        for s in 0..config.num_slices() {
            if let Some(cap) = config.slice_power_cap(s) {
                let spent: f64 = config
                    .ues_of_slice(s)
                    .filter(|&u| alloc.assoc[[u, r]])
                    .flat_map(|u| (0..k_n).filter(move |&k| alloc.prb[[u, r, k]]).map(move |k| (u, k)))
                    .map(|(u, k)| alloc.power[[u, r, k]])
                    .sum();
                if spent > cap + POWER_TOLERANCE {
                    slice_power.add(spent - cap, (spent - cap) / cap.max(f64::MIN_POSITIVE));
                }
            }
        }
        if metrics.ru_capacity[r] > cap_limit {
            let over = metrics.ru_capacity[r] - cap_limit;
            capacity.add(over, over / cap_limit.max(1.0));
        }
    }

    let mut association = ConstraintCheck::ok();
    for u in 0..u_n {
        if alloc.assoc.row(u).iter().filter(|&&a| a).count() != 1 {
            association.add(1.0, 1.0);
        }
    }

    let mut prb_gating = ConstraintCheck::ok();
    let mut prb_budget = ConstraintCheck::ok();
    for u in 0..u_n {
        for r in 0..r_n {
            for k in 0..k_n {
                let scheduled = alloc.prb[[u, r, k]];
                let p = alloc.power[[u, r, k]];
                let gated_off = scheduled && !alloc.assoc[[u, r]];
                let stray_power = !scheduled && p != 0.0;
                if gated_off || stray_power || p < 0.0 || !p.is_finite() {
                    prb_gating.add(1.0, 1.0);
                }
                if scheduled && owners[k] != Some(ue_slices[u]) {
                    prb_budget.add(1.0, 1.0);
                }
            }
        }
    }
    let quota: usize = config.prb_quotas().iter().sum();
    if quota > config.total_prbs {
        prb_budget.add((quota - config.total_prbs) as f64, 1.0);
    }

    let mut exclusivity = ConstraintCheck::ok();
    for r in 0..r_n {
        for k in 0..k_n {
            let holders = (0..u_n)
                .filter(|&u| alloc.assoc[[u, r]] && alloc.prb[[u, r, k]])
                .count();
            if holders > 1 {
                exclusivity.add((holders - 1) as f64, 1.0);
            }
        }
    }

    ConstraintReport {
        delay,
        power,
        slice_power,
        capacity,
        association,
        prb_gating,
        exclusivity,
        prb_budget,
        min_rate,
    }
}
