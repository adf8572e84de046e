use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::NetworkConfig;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AllocationError {
    #[error("allocation shape {found:?} does not match scenario shape {expected:?}")]
    Shape {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
}

/// Decision variables of one scheduling interval.
///
/// `assoc[[u, r]]` is the UE-RU association, `prb[[u, r, k]]` the PRB
/// assignment and `power[[u, r, k]]` the transmit power in watts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub assoc: Array2<bool>,
    pub prb: Array3<bool>,
    pub power: Array3<f64>,
}

impl Allocation {
    pub fn zeros(num_ues: usize, num_rus: usize, num_prbs: usize) -> Self {
        Self {
            assoc: Array2::from_elem((num_ues, num_rus), false),
            prb: Array3::from_elem((num_ues, num_rus, num_prbs), false),
            power: Array3::zeros((num_ues, num_rus, num_prbs)),
        }
    }

    pub fn empty_for(config: &NetworkConfig) -> Self {
        Self::zeros(config.num_ues(), config.num_rus, config.total_prbs)
    }

    /// `(U, R, K)`
    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.prb.dim();
        (d.0, d.1, d.2)
    }

    pub fn check_shape(&self, config: &NetworkConfig) -> Result<(), AllocationError> {
        let expected = (config.num_ues(), config.num_rus, config.total_prbs);
        let found = self.shape();
        let consistent = self.assoc.dim() == (found.0, found.1) && self.power.dim() == self.prb.dim();
        if found != expected || !consistent {
            return Err(AllocationError::Shape { expected, found });
        }
        Ok(())
    }

    /// RU the UE is attached to, if exactly one.
    pub fn serving_ru(&self, ue: usize) -> Option<usize> {
        let mut found = None;
        for (r, &a) in self.assoc.row(ue).iter().enumerate() {
            if a {
                if found.is_some() {
                    return None;
                }
                found = Some(r);
            }
        }
        found
    }

    /// Power radiated by RU `r` on scheduled PRBs of attached UEs.
    pub fn ru_power(&self, r: usize) -> f64 {
        let (u_n, _, k_n) = self.shape();
        let mut total = 0.0;
        for u in 0..u_n {
            if !self.assoc[[u, r]] {
                continue;
            }
            for k in 0..k_n {
                if self.prb[[u, r, k]] {
                    total += self.power[[u, r, k]];
                }
            }
        }
        total
    }

    /// Binary decisions flattened as `[assoc | prb]`, row-major.
    pub fn binary_vector(&self) -> Vec<bool> {
        self.assoc.iter().chain(self.prb.iter()).copied().collect()
    }

    /// Continuous encoding `[assoc bits | prb bits | power / max_power]`.
    pub fn continuous_vector(&self, max_power: f64) -> Vec<f64> {
        let bit = |b: &bool| if *b { 1.0 } else { 0.0 };
        self.assoc
            .iter()
            .map(bit)
            .chain(self.prb.iter().map(bit))
            .chain(self.power.iter().map(|p| p / max_power))
            .collect()
    }

    /// Compact per-slot view: for each `(r, k)` the UE holding it, if any.
    pub fn slot_holders(&self) -> Array2<Option<usize>> {
        let (u_n, r_n, k_n) = self.shape();
        let mut out = Array2::from_elem((r_n, k_n), None);
        for r in 0..r_n {
            for k in 0..k_n {
                out[[r, k]] = (0..u_n).find(|&u| self.prb[[u, r, k]]);
            }
        }
        out
    }
}
