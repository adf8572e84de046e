//! Exhaustive search for the rate-optimal allocation of tiny instances.
//!
//! Candidates are enumerated association first, then the occupant of every
//! `(RU, PRB)` slot (idle or an attached UE of the owning slice), then a power
//! level `i / P_levels` of the RU's even split for each occupied slot. The
//! first strictly better candidate wins, so ties resolve to the smallest
//! `(association, occupants, levels)` tuple.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    constraints_with_metrics, evaluate, Allocation, ChannelRealization, NetworkConfig, Scenario,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsaConfig {
    pub power_levels: usize,
    /// Refuse instances whose predicted candidate count exceeds this.
    pub max_candidates: u128,
}

impl Default for EsaConfig {
    fn default() -> Self {
        Self {
            power_levels: 3,
            max_candidates: 20_000_000,
        }
    }
}

#[derive(Debug, Error)]
pub enum EsaError {
    #[error("esa.power_levels must be at least 1")]
    PowerLevels,
    #[error("instance too large: {predicted} candidates exceed the ceiling of {ceiling}")]
    TooLarge { predicted: u128, ceiling: u128 },
    #[error("channel shape {found:?} does not match the network {expected:?}")]
    Shape {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsaSolution {
    pub allocation: Allocation,
    /// Total rate in bit/s.
    pub objective: f64,
    /// False when no candidate met the constraints; the allocation is then
    /// the one with the smallest normalized violation.
    pub feasible: bool,
    pub visited: u128,
}

fn binomial(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1))
}

fn sat_pow(base: u128, exp: usize) -> u128 {
    (0..exp).fold(1u128, |acc, _| acc.saturating_mul(base))
}

/// Exact number of candidates [`enumerate_optimal`] visits.
///
/// Per association the count is `prod_slots (1 + P * eligible)`. Slices are
/// independent, so the sum over associations factorizes into per-slice sums
/// over how many of the slice's UEs each RU hosts.
pub fn predicted_count(config: &NetworkConfig, esa: &EsaConfig) -> u128 {
    let p = esa.power_levels as u128;
    let quotas = config.prb_quotas();
    let mut total = 1u128;
    for (s, spec) in config.slices.iter().enumerate() {
        let m = spec.num_ues;
        let q = quotas[s];
        // dp[j]: weighted count with j of the slice's UEs placed so far
        let mut dp = vec![0u128; m + 1];
        dp[0] = 1;
        for _ in 0..config.num_rus {
            let mut next = vec![0u128; m + 1];
            for j in 0..=m {
                if dp[j] == 0 {
                    continue;
                }
                for n in 0..=m - j {
                    let w = binomial(m - j, n).saturating_mul(sat_pow(1 + p * n as u128, q));
                    next[j + n] = next[j + n].saturating_add(dp[j].saturating_mul(w));
                }
            }
            dp = next;
        }
        total = total.saturating_mul(dp[m]);
    }
    total
}

/// Advances a little-endian-last odometer; returns false after the last state.
fn advance(digits: &mut [usize], radix: impl Fn(usize) -> usize) -> bool {
    for i in (0..digits.len()).rev() {
        digits[i] += 1;
        if digits[i] < radix(i) {
            return true;
        }
        digits[i] = 0;
    }
    false
}

struct Best {
    allocation: Allocation,
    objective: f64,
    violation: f64,
    feasible: bool,
}

pub fn enumerate_optimal(
    config: &NetworkConfig,
    chan: &ChannelRealization,
    esa: &EsaConfig,
) -> Result<EsaSolution, EsaError> {
    if esa.power_levels == 0 {
        return Err(EsaError::PowerLevels);
    }
    let expected = (config.num_ues(), config.num_rus, config.total_prbs);
    if chan.gain.dim() != expected {
        return Err(EsaError::Shape {
            expected,
            found: chan.gain.dim(),
        });
    }
    let predicted = predicted_count(config, esa);
    if predicted > esa.max_candidates {
        return Err(EsaError::TooLarge {
            predicted,
            ceiling: esa.max_candidates,
        });
    }

    let (u_n, r_n, k_n) = expected;
    let owners = config.prb_owners();
    let ue_slices = config.ue_slices();
    let p_max = config.ru_max_power();
    let levels = esa.power_levels;
    let slots: Vec<(usize, usize)> = (0..r_n).flat_map(|r| (0..k_n).map(move |k| (r, k))).collect();

    let mut best: Option<Best> = None;
    let mut visited = 0u128;
    let mut assoc = vec![0usize; u_n];
    let mut alloc = Allocation::empty_for(config);
    loop {
        // occupants per slot: None (idle) then eligible UEs ascending
        let options: Vec<Vec<Option<usize>>> = slots
            .iter()
            .map(|&(r, k)| {
                std::iter::once(None)
                    .chain((0..u_n).filter(|&u| assoc[u] == r && owners[k] == Some(ue_slices[u])).map(Some))
                    .collect()
            })
            .collect();
        let mut pick = vec![0usize; slots.len()];
        loop {
            let occupied: Vec<usize> = (0..slots.len()).filter(|&i| pick[i] > 0).collect();
            let mut per_ru = vec![0usize; r_n];
            for &i in &occupied {
                per_ru[slots[i].0] += 1;
            }
            let mut lv = vec![0usize; occupied.len()];
            loop {
                alloc.assoc.fill(false);
                alloc.prb.fill(false);
                alloc.power.fill(0.0);
                for (u, &r) in assoc.iter().enumerate() {
                    alloc.assoc[[u, r]] = true;
                }
                for (j, &i) in occupied.iter().enumerate() {
                    let (r, k) = slots[i];
                    let u = options[i][pick[i]].expect("occupied slot");
                    alloc.prb[[u, r, k]] = true;
                    alloc.power[[u, r, k]] = (lv[j] + 1) as f64 / levels as f64 * p_max / per_ru[r] as f64;
                }
                visited += 1;
                let metrics = evaluate(&alloc, chan, config);
                let report = constraints_with_metrics(&alloc, &metrics, config);
                let feasible = report.problem_feasible();
                let violation = report.problem_violation();
                let better = match &best {
                    None => true,
                    Some(b) => match (feasible, b.feasible) {
                        (true, false) => true,
                        (false, true) => false,
                        (true, true) => metrics.rate_total > b.objective,
                        (false, false) => violation < b.violation,
                    },
                };
                if better {
                    best = Some(Best {
                        allocation: alloc.clone(),
                        objective: metrics.rate_total,
                        violation,
                        feasible,
                    });
                }
                if !advance(&mut lv, |_| levels) {
                    break;
                }
            }
            if !advance(&mut pick, |i| options[i].len()) {
                break;
            }
        }
        if !advance(&mut assoc, |_| r_n) {
            break;
        }
    }
    let best = best.expect("at least one candidate");
    Ok(EsaSolution {
        allocation: best.allocation,
        objective: best.objective,
        feasible: best.feasible,
        visited,
    })
}

pub const DATASET_FORMAT: &str = "oran-diffql-esa-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub instances: usize,
    pub network: NetworkConfig,
    pub esa: EsaConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub index: usize,
    /// Seed passed to `Scenario::draw` for this instance.
    pub scenario_seed: u64,
    pub objective: f64,
    pub feasible: bool,
    pub allocation: Allocation,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("record {index}: {reason}")]
    Invalid { index: usize, reason: String },
    #[error(transparent)]
    Esa(#[from] EsaError),
}

pub fn instance_seed(seed: u64, index: usize) -> u64 {
    crate::derive_seed(seed, index as u64)
}

/// Draws instance `index` and labels it.
pub fn label_instance(
    network: &NetworkConfig,
    esa: &EsaConfig,
    seed: u64,
    index: usize,
) -> Result<DatasetRecord, EsaError> {
    let scenario_seed = instance_seed(seed, index);
    let scenario = Scenario::draw(network, scenario_seed);
    let sol = enumerate_optimal(network, &scenario.channel, esa)?;
    Ok(DatasetRecord {
        index,
        scenario_seed,
        objective: sol.objective,
        feasible: sol.feasible,
        allocation: sol.allocation,
    })
}

pub fn write_dataset<W: Write>(mut w: W, header: &DatasetHeader, records: &[DatasetRecord]) -> io::Result<()> {
    writeln!(w, "{}", serde_json::to_string(header).map_err(io::Error::other)?)?;
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).map_err(io::Error::other)?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    /// Parses a dataset and re-checks every record against a fresh draw of
    /// its scenario: shape, objective and claimed feasibility.
    pub fn read<R: BufRead>(reader: R) -> Result<Self, DatasetError> {
        let mut lines = reader.lines().enumerate();
        let (_, first) = lines.next().ok_or(DatasetError::Parse {
            line: 1,
            reason: "empty file".into(),
        })?;
        let header: DatasetHeader = serde_json::from_str(&first?).map_err(|e| DatasetError::Parse {
            line: 1,
            reason: e.to_string(),
        })?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(DatasetError::Parse {
                line: 1,
                reason: format!("unsupported dataset {} v{}", header.format, header.version),
            });
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            validate_record(&header.network, &rec)?;
            records.push(rec);
        }
        Ok(Self { header, records })
    }
}

fn validate_record(network: &NetworkConfig, rec: &DatasetRecord) -> Result<(), DatasetError> {
    let invalid = |reason: String| DatasetError::Invalid { index: rec.index, reason };
    rec.allocation
        .check_shape(network)
        .map_err(|e| invalid(e.to_string()))?;
    let scenario = Scenario::draw(network, rec.scenario_seed);
    let metrics = evaluate(&rec.allocation, &scenario.channel, network);
    let report = constraints_with_metrics(&rec.allocation, &metrics, network);
    if rec.feasible && !report.problem_feasible() {
        return Err(invalid("labelled feasible but violates constraints".into()));
    }
    let tol = 1e-9 * rec.objective.abs().max(1.0);
    if (metrics.rate_total - rec.objective).abs() > tol {
        return Err(invalid(format!(
            "objective {} does not match recomputed {}",
            rec.objective, metrics.rate_total
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SliceSpec;
    use ndarray::Array3;

    fn one_slice(ues: usize, rus: usize, prbs: usize) -> NetworkConfig {
        let mut spec = SliceSpec::embb(ues);
        spec.min_rate = 0.0;
        spec.prb_quota = Some(prbs);
        NetworkConfig {
            num_rus: rus,
            slices: vec![spec],
            total_prbs: prbs,
            ..NetworkConfig::default()
        }
    }

    fn flat_channel(cfg: &NetworkConfig, g: f64) -> ChannelRealization {
        ChannelRealization {
            gain: Array3::from_elem((cfg.num_ues(), cfg.num_rus, cfg.total_prbs), g),
            external: None,
            seed: 0,
        }
    }

    #[test]
    fn hand_counts() {
        let esa = EsaConfig {
            power_levels: 2,
            ..EsaConfig::default()
        };
        // idle, or the UE at one of two levels
        assert_eq!(predicted_count(&one_slice(1, 1, 1), &esa), 3);
        assert_eq!(predicted_count(&one_slice(0, 1, 1), &esa), 1);
        // two RUs each with one slot: UE on RU0 => 3 * 1, on RU1 => 1 * 3
        assert_eq!(predicted_count(&one_slice(1, 2, 1), &esa), 6);
        let four = EsaConfig {
            power_levels: 4,
            ..esa
        };
        assert_eq!(predicted_count(&one_slice(1, 1, 1), &four), 5);
        // desk: (1 + 3*2)^2 * (1 + 3) * (1 + 3)
        assert_eq!(predicted_count(&NetworkConfig::desk(), &EsaConfig::default()), 784);
    }

    #[test]
    fn single_link_takes_full_power() {
        let cfg = one_slice(1, 1, 1);
        let sol = enumerate_optimal(&cfg, &flat_channel(&cfg, 1e-9), &EsaConfig::default()).unwrap();
        assert!(sol.feasible);
        assert!(sol.allocation.prb[[0, 0, 0]]);
        assert_eq!(sol.allocation.power[[0, 0, 0]], cfg.ru_max_power());
        assert_eq!(sol.visited, 4);
    }

    #[test]
    fn symmetric_tie_goes_to_first_ue() {
        let cfg = one_slice(2, 1, 1);
        let sol = enumerate_optimal(&cfg, &flat_channel(&cfg, 1e-9), &EsaConfig::default()).unwrap();
        assert!(sol.allocation.prb[[0, 0, 0]]);
        assert!(!sol.allocation.prb[[1, 0, 0]]);
        assert_eq!(sol.allocation.power[[0, 0, 0]], cfg.ru_max_power());
    }

    #[test]
    fn oversized_instance_is_refused_with_count() {
        let cfg = NetworkConfig::default();
        match enumerate_optimal(&cfg, &flat_channel(&cfg, 1.0), &EsaConfig::default()) {
            Err(EsaError::TooLarge { predicted, .. }) => assert!(predicted > 20_000_000),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dataset_round_trip_revalidates() {
        let network = NetworkConfig::desk();
        let esa = EsaConfig::default();
        let records: Vec<_> = (0..2).map(|i| label_instance(&network, &esa, 5, i).unwrap()).collect();
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            config_hash: "h".into(),
            seed: 5,
            instances: 2,
            network,
            esa,
        };
        let mut buf = Vec::new();
        write_dataset(&mut buf, &header, &records).unwrap();
        let back = Dataset::read(buf.as_slice()).unwrap();
        assert_eq!(back.records, records);

        let mut tampered = records.clone();
        tampered[1].objective *= 2.0;
        let mut buf = Vec::new();
        write_dataset(&mut buf, &header, &tampered).unwrap();
        assert!(matches!(Dataset::read(buf.as_slice()), Err(DatasetError::Invalid { index: 1, .. })));
    }
}
