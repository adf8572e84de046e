//! Comparison of learned allocations with exhaustive-search labels, and
//! aggregation of sweep results.
//!
//! Vector metrics act on the encoding `[assoc bits | prb bits | power / P_max]`
//! from [`Allocation::continuous_vector`].

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Allocation;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("length mismatch: {pred} vs {truth}")]
    Length { pred: usize, truth: usize },
    #[error("empty input")]
    Empty,
    #[error("reference has zero variance; R^2 is undefined")]
    ZeroVariance,
    #[error("zero vector; cosine similarity is undefined")]
    ZeroVector,
    #[error("allocation shapes differ: {pred:?} vs {truth:?}")]
    Shape {
        pred: (usize, usize, usize),
        truth: (usize, usize, usize),
    },
}

fn check(pred: &[f64], truth: &[f64]) -> Result<(), MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::Length {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    check(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// `1 - SS_res / SS_tot`.
pub fn r2(pred: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    check(pred, truth)?;
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn cosine_similarity(pred: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    check(pred, truth)?;
    let dot: f64 = pred.iter().zip(truth).map(|(p, t)| p * t).sum();
    let np = pred.iter().map(|p| p * p).sum::<f64>().sqrt();
    let nt = truth.iter().map(|t| t * t).sum::<f64>().sqrt();
    if np == 0.0 || nt == 0.0 {
        return Err(MetricsError::ZeroVector);
    }
    Ok((dot / (np * nt)).clamp(-1.0, 1.0))
}

/// Percentage of association and PRB bits that differ.
pub fn baep(pred: &Allocation, truth: &Allocation) -> Result<f64, MetricsError> {
    if pred.shape() != truth.shape() {
        return Err(MetricsError::Shape {
            pred: pred.shape(),
            truth: truth.shape(),
        });
    }
    let a = pred.binary_vector();
    let b = truth.binary_vector();
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    let wrong = a.iter().zip(&b).filter(|(x, y)| x != y).count();
    Ok(100.0 * wrong as f64 / a.len() as f64)
}

/// The four comparison metrics for one set of paired allocations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonMetrics {
    pub mae: f64,
    /// `None` when the reference encoding is constant.
    pub r2: Option<f64>,
    pub cosine: Option<f64>,
    pub baep: f64,
}

/// Compares pairs `(pred, truth)`; vectors of all pairs are concatenated.
pub fn compare(pairs: &[(&Allocation, &Allocation)], max_power: f64) -> Result<ComparisonMetrics, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut p = Vec::new();
    let mut t = Vec::new();
    let (mut wrong, mut bits) = (0.0, 0.0);
    for (pred, truth) in pairs {
        let b = baep(pred, truth)?;
        let n = pred.binary_vector().len() as f64;
        wrong += b * n;
        bits += n;
        p.extend(pred.continuous_vector(max_power));
        t.extend(truth.continuous_vector(max_power));
    }
    Ok(ComparisonMetrics {
        mae: mae(&p, &t)?,
        r2: r2(&p, &t).ok(),
        cosine: cosine_similarity(&p, &t).ok(),
        baep: wrong / bits,
    })
}

/// One run (one seed at one sweep point).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub sweep_value: f64,
    pub seed: u64,
    pub total_throughput: f64,
    pub slice_throughput: Vec<f64>,
    pub mean_reward: f64,
    /// Fraction of evaluated steps that broke a constraint.
    pub violation_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub sweep_value: f64,
    pub runs: usize,
    pub total_throughput: MeanStd,
    pub slice_throughput: Vec<MeanStd>,
    pub mean_reward: MeanStd,
    pub violation_rate: MeanStd,
}

/// Groups runs by sweep value (ascending) and summarizes each group.
pub fn aggregate_report(runs: &[RunOutput]) -> Result<Vec<AggregateRow>, MetricsError> {
    if runs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut groups: BTreeMap<u64, Vec<&RunOutput>> = BTreeMap::new();
    for r in runs {
        // order-preserving key for finite floats
        let bits = r.sweep_value.to_bits();
        let key = if r.sweep_value.is_sign_negative() { !bits } else { bits | (1 << 63) };
        groups.entry(key).or_default().push(r);
    }
    let mut rows = Vec::with_capacity(groups.len());
    for group in groups.values() {
        let slices = group[0].slice_throughput.len();
        if group.iter().any(|r| r.slice_throughput.len() != slices) {
            return Err(MetricsError::Length {
                pred: slices,
                truth: group.iter().map(|r| r.slice_throughput.len()).max().unwrap_or(0),
            });
        }
        let col = |f: &dyn Fn(&RunOutput) -> f64| MeanStd::of(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
        rows.push(AggregateRow {
            sweep_value: group[0].sweep_value,
            runs: group.len(),
            total_throughput: col(&|r| r.total_throughput),
            slice_throughput: (0..slices).map(|s| col(&|r| r.slice_throughput[s])).collect(),
            mean_reward: col(&|r| r.mean_reward),
            violation_rate: col(&|r| r.violation_rate),
        });
    }
    Ok(rows)
}

/// CSV with one row per sweep value. `prefix` adds leading constant columns.
pub fn write_aggregate_csv<W: Write>(
    mut w: W,
    sweep_name: &str,
    slice_names: &[String],
    rows: &[AggregateRow],
    prefix: &[(&str, &str)],
) -> io::Result<()> {
    let mut header: Vec<String> = prefix.iter().map(|(k, _)| k.to_string()).collect();
    header.extend([sweep_name.to_string(), "runs".into()]);
    header.extend(["total_throughput_mean".into(), "total_throughput_std".into()]);
    for s in slice_names {
        header.push(format!("{s}_throughput_mean"));
        header.push(format!("{s}_throughput_std"));
    }
    header.extend([
        "mean_reward_mean".into(),
        "mean_reward_std".into(),
        "violation_rate_mean".into(),
        "violation_rate_std".into(),
    ]);
    writeln!(w, "{}", header.join(","))?;
    for r in rows {
        let mut cells: Vec<String> = prefix.iter().map(|(_, v)| v.to_string()).collect();
        cells.push(format!("{}", r.sweep_value));
        cells.push(r.runs.to_string());
        let mut push = |m: &MeanStd| {
            cells.push(format!("{:.17e}", m.mean));
            cells.push(format!("{:.17e}", m.std));
        };
        push(&r.total_throughput);
        for s in &r.slice_throughput {
            push(s);
        }
        push(&r.mean_reward);
        push(&r.violation_rate);
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(mae(&[1.5, 0.5], &[1.0, 0.0]).unwrap(), 0.5);
        assert_eq!(mae(&[0.0, 1.0], &[1.0, 1.0]).unwrap(), 0.5);
        assert_eq!(mae(&[1.0], &[1.0, 2.0]), Err(MetricsError::Length { pred: 1, truth: 2 }));
        assert_eq!(mae(&[], &[]), Err(MetricsError::Empty));
    }

    #[test]
    fn r2_examples() {
        let t = [1.0, 2.0, 3.0];
        assert_eq!(r2(&t, &t).unwrap(), 1.0);
        assert_eq!(r2(&[2.0, 2.0, 2.0], &t).unwrap(), 0.0);
        // SS_res = 4 + 0 + 4, SS_tot = 1 + 0 + 1
        assert_eq!(r2(&[3.0, 2.0, 1.0], &t).unwrap(), -3.0);
        assert_eq!(r2(&t, &[1.0, 1.0, 1.0]), Err(MetricsError::ZeroVariance));
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[0.2, 0.4], &[0.2, 0.4]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(MetricsError::ZeroVector));
    }

    fn one_by_one(assoc: bool, prb: [bool; 3]) -> Allocation {
        Allocation {
            assoc: array![[assoc]],
            prb: ndarray::Array3::from_shape_vec((1, 1, 3), prb.to_vec()).unwrap(),
            power: ndarray::Array3::zeros((1, 1, 3)),
        }
    }

    #[test]
    fn baep_examples() {
        let a = one_by_one(true, [true, false, false]);
        assert_eq!(baep(&a, &a).unwrap(), 0.0);
        let b = one_by_one(true, [true, true, false]);
        assert_eq!(baep(&a, &b).unwrap(), 25.0);
        assert_eq!(baep(&b, &a).unwrap(), 25.0);
        let c = one_by_one(false, [false, true, true]);
        assert_eq!(baep(&a, &c).unwrap(), 100.0);
        let wrong = Allocation::zeros(2, 1, 3);
        assert!(matches!(baep(&a, &wrong), Err(MetricsError::Shape { .. })));
    }

    #[test]
    fn self_comparison_is_perfect() {
        let mut a = one_by_one(true, [true, false, true]);
        a.power[[0, 0, 0]] = 2.0;
        a.power[[0, 0, 2]] = 1.0;
        let m = compare(&[(&a, &a)], 4.0).unwrap();
        assert_eq!(m.mae, 0.0);
        assert_eq!(m.r2, Some(1.0));
        assert!((m.cosine.unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(m.baep, 0.0);
    }

    fn run(v: f64, seed: u64, total: f64, slices: Vec<f64>) -> RunOutput {
        RunOutput {
            sweep_value: v,
            seed,
            total_throughput: total,
            slice_throughput: slices,
            mean_reward: total / 10.0,
            violation_rate: 0.5,
        }
    }

    #[test]
    fn aggregate_examples() {
        let rows = aggregate_report(&[run(2.0, 0, 3.0, vec![1.0, 2.0])]).unwrap();
        assert_eq!(rows[0].total_throughput, MeanStd { mean: 3.0, std: 0.0 });

        let rows = aggregate_report(&[
            run(4.0, 0, 10.0, vec![4.0, 6.0]),
            run(-1.0, 0, 1.0, vec![1.0, 0.0]),
            run(4.0, 1, 14.0, vec![6.0, 8.0]),
        ])
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].sweep_value, -1.0);
        assert_eq!(rows[1].runs, 2);
        assert_eq!(rows[1].total_throughput, MeanStd { mean: 12.0, std: 2.0 });
        assert_eq!(rows[1].slice_throughput[0], MeanStd { mean: 5.0, std: 1.0 });
        let per_slice: f64 = rows[1].slice_throughput.iter().map(|m| m.mean).sum();
        assert!((per_slice - rows[1].total_throughput.mean).abs() <= 1e-9 * 12.0);
        assert_eq!(aggregate_report(&[]), Err(MetricsError::Empty));

        let mut buf = Vec::new();
        write_aggregate_csv(&mut buf, "ru_power_dbm", &["embb".into(), "urllc".into()], &rows, &[("config_hash", "x")]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("config_hash,ru_power_dbm,runs,total_throughput_mean"));
        assert_eq!(text.lines().count(), 3);
    }
}
