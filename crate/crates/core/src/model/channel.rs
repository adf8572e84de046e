use ndarray::{Array2, Array3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use super::NetworkConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Node placement for one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub rus: Vec<Point>,
    pub ues: Vec<Point>,
}

impl Topology {
    /// UE `u` is dropped uniformly over the disc of radius `cell_radius`
    /// centred on RU `u mod R`.
    pub fn generate<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Self {
        let rus = config.ru_coordinates();
        let ues = (0..config.num_ues())
            .map(|u| {
                let home = rus[u % rus.len()];
                let radius = config.cell_radius * rng.random::<f64>().sqrt();
                let angle = std::f64::consts::TAU * rng.random::<f64>();
                Point::new(home.x + radius * angle.cos(), home.y + radius * angle.sin())
            })
            .collect();
        Self { rus, ues }
    }
}

/// Channel power gains `|h|^2` for one coherence block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    /// `gain[[u, r, k]]` between UE `u` and RU `r` on PRB `k`.
    pub gain: Array3<f64>,
    /// `external[[u, k]]` between UE `u` and the external interferer, when configured.
    pub external: Option<Array2<f64>>,
    pub seed: u64,
}

fn path_gain(distance: f64, reference: f64, exponent: f64) -> f64 {
    (distance.max(reference) / reference).powf(-exponent)
}

/// Draws log-distance path loss times exponential(1) fading power, i.i.d. per
/// `(u, r, k)`. Distances below the reference distance are clamped to it.
pub fn sample_channel(config: &NetworkConfig, topology: &Topology, seed: u64) -> ChannelRealization {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (u_n, r_n, k_n) = (topology.ues.len(), topology.rus.len(), config.total_prbs);
    let d0 = config.reference_distance;
    let n = config.path_loss_exponent;
    let mut gain = Array3::zeros((u_n, r_n, k_n));
    for u in 0..u_n {
        for r in 0..r_n {
            let pl = path_gain(topology.ues[u].distance(&topology.rus[r]), d0, n);
            for k in 0..k_n {
                let fading: f64 = rng.sample(Exp1);
                gain[[u, r, k]] = pl * fading;
            }
        }
    }
    let external = config.external_interferer.as_ref().map(|ext| {
        let mut g = Array2::zeros((u_n, k_n));
        for u in 0..u_n {
            let pl = path_gain(topology.ues[u].distance(&ext.position), d0, n);
            for k in 0..k_n {
                let fading: f64 = rng.sample(Exp1);
                g[[u, k]] = pl * fading;
            }
        }
        g
    });
    ChannelRealization {
        gain,
        external,
        seed,
    }
}

/// A placed network together with its current channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub topology: Topology,
    pub channel: ChannelRealization,
}

impl Scenario {
    /// Places nodes and draws the first channel, both from `seed`.
    pub fn draw(config: &NetworkConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let topology = Topology::generate(config, &mut rng);
        let channel = sample_channel(config, &topology, rng.next_u64());
        Self { topology, channel }
    }

    /// Block fading: same placement, fresh channel.
    pub fn refade(&mut self, config: &NetworkConfig, seed: u64) {
        self.channel = sample_channel(config, &self.topology, seed);
    }
}
