//! State-conditional diffusion policy with critic-gradient guidance.
//!
//! Actions are generated by running a learned DDPM reverse chain from
//! `a_T ~ N(0, I)` down to `a_0`. At every step the posterior mean is shifted
//! by `w * Sigma_t * grad_a Q(s, a_t)`, which steers samples toward actions
//! the critic values highly.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Activation, DenseNet, Gradients, NnError, Tape};

/// Width of the sinusoidal timestep embedding fed to the denoiser.
pub const TIME_EMBED_DIM: usize = 16;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("timestep {t} outside 1..={steps}")]
    Timestep { t: usize, steps: usize },
    #[error("{what}: expected width {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Net(#[from] NnError),
}

/// Variance schedule with derived products, indexed by `t = 1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_variances: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear `beta_t` from `beta_min` (t = 1) to `beta_max` (t = T).
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::Schedule("at least one step required".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(DiffusionError::Schedule(format!(
                "need 0 < beta_min <= beta_max < 1, got {beta_min}..{beta_max}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + i as f64 / (steps - 1) as f64 * (beta_max - beta_min)
                }
            })
            .collect();
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_variances = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])
            })
            .collect();
        Self {
            betas,
            alphas,
            alpha_bars,
            posterior_variances,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::Timestep { t, steps: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Reverse-step variance `beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variances[t - 1]
    }
}

/// Sinusoidal embedding: `sin(t * f_i)` then `cos(t * f_i)`, `f_i = 10000^(-i / (dim/2))`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

/// Closed-form forward noising `sqrt(ab_t) a0 + sqrt(1 - ab_t) eps`.
pub fn forward_sample(a0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>, DiffusionError> {
    sched.check(t)?;
    if eps.len() != a0.len() {
        return Err(DiffusionError::Dimension {
            what: "noise",
            expected: a0.len(),
            found: eps.len(),
        });
    }
    let ab = sched.alpha_bar(t);
    let (c0, c1) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(a0.iter().zip(eps).map(|(a, e)| c0 * a + c1 * e).collect())
}

fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Anything that can report `grad_a Q(s, a)` row-wise.
pub trait Guide {
    fn action_gradient(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64>;
}

/// Critic network over `[s | a]` with a scalar output.
impl Guide for DenseNet {
    fn action_gradient(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64> {
        let x = concat_columns(&[states, actions]);
        let (_, tape) = self.forward_tape(x.view()).expect("critic input width");
        let ones = Array2::ones((x.nrows(), 1));
        let gx = self.input_gradient_tape(&tape, ones.view()).expect("critic output width");
        gx.slice(s![.., states.ncols()..]).to_owned()
    }
}

pub fn concat_columns(parts: &[ArrayView2<f64>]) -> Array2<f64> {
    ndarray::concatenate(Axis(1), parts).expect("row counts agree")
}

/// One reverse step from precomputed noise predictions, shared by the policy
/// and by analytic denoisers. Returns `(mu, mu_hat)`; `mu_hat` includes guidance.
pub fn guided_mean(
    sched: &NoiseSchedule,
    t: usize,
    a_t: ArrayView2<f64>,
    eps_hat: ArrayView2<f64>,
    guidance: Option<(f64, ArrayView2<f64>)>,
) -> (Array2<f64>, Array2<f64>) {
    let c1 = 1.0 / sched.alpha(t).sqrt();
    let c2 = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let mut mu = Array2::zeros(a_t.raw_dim());
    Zip::from(&mut mu)
        .and(&a_t)
        .and(&eps_hat)
        .for_each(|m, &a, &e| *m = c1 * (a - c2 * e));
    let mut mu_hat = mu.clone();
    if let Some((w, grad)) = guidance {
        let scale = w * sched.posterior_variance(t);
        Zip::from(&mut mu_hat).and(&grad).for_each(|m, &g| *m += scale * g);
    }
    (mu, mu_hat)
}

/// Adds `sqrt(Sigma_t) z` for `t > 1`; the last step is deterministic.
pub fn add_step_noise<R: Rng + ?Sized>(sched: &NoiseSchedule, t: usize, mean: &mut Array2<f64>, rng: &mut R) {
    if t > 1 {
        let sigma = sched.posterior_variance(t).sqrt();
        mean.mapv_inplace(|m| m + sigma * rng.sample::<f64, _>(StandardNormal));
    }
}

#[derive(Debug, Clone)]
struct ChainStep {
    t: usize,
    tape: Tape,
}

/// Recorded reverse chain for backpropagation into the denoiser.
///
/// The guidance shift and the injected noise are treated as constants with
/// respect to the denoiser parameters.
#[derive(Debug, Clone)]
pub struct ChainTape {
    steps: Vec<ChainStep>,
    /// 1 where the final clip left the coordinate untouched.
    clip_mask: Array2<f64>,
}

/// The policy network plus its schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionPolicy {
    pub denoiser: DenseNet,
    pub schedule: NoiseSchedule,
    pub guidance_scale: f64,
    pub action_dim: usize,
    pub state_dim: usize,
}

impl DiffusionPolicy {
    pub fn new<R: Rng + ?Sized>(
        action_dim: usize,
        state_dim: usize,
        hidden: &[usize],
        activation: Activation,
        schedule: NoiseSchedule,
        guidance_scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![action_dim + TIME_EMBED_DIM + state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        Self {
            denoiser: DenseNet::new(&sizes, activation, rng),
            schedule,
            guidance_scale,
            action_dim,
            state_dim,
        }
    }

    fn check_dims(&self, states: &ArrayView2<f64>, actions: &ArrayView2<f64>) -> Result<(), DiffusionError> {
        if states.ncols() != self.state_dim {
            return Err(DiffusionError::Dimension {
                what: "state",
                expected: self.state_dim,
                found: states.ncols(),
            });
        }
        if actions.ncols() != self.action_dim {
            return Err(DiffusionError::Dimension {
                what: "action",
                expected: self.action_dim,
                found: actions.ncols(),
            });
        }
        Ok(())
    }

    /// Denoiser input rows `[a_t | embed(t_j) | s_j]`.
    fn denoiser_input(&self, a_t: ArrayView2<f64>, ts: &[usize], states: ArrayView2<f64>) -> Array2<f64> {
        let n = a_t.nrows();
        let mut x = Array2::zeros((n, self.action_dim + TIME_EMBED_DIM + self.state_dim));
        x.slice_mut(s![.., ..self.action_dim]).assign(&a_t);
        let mut cached = (usize::MAX, Vec::new());
        for (j, &t) in ts.iter().enumerate() {
            if cached.0 != t {
                cached = (t, timestep_embedding(t, TIME_EMBED_DIM));
            }
            for (i, e) in cached.1.iter().enumerate() {
                x[[j, self.action_dim + i]] = *e;
            }
        }
        x.slice_mut(s![.., self.action_dim + TIME_EMBED_DIM..]).assign(&states);
        x
    }

    /// `eps_theta(a_t, t, s)` for a batch sharing one timestep.
    pub fn predict_noise(
        &self,
        a_t: ArrayView2<f64>,
        t: usize,
        states: ArrayView2<f64>,
    ) -> Result<Array2<f64>, DiffusionError> {
        self.schedule.check(t)?;
        self.check_dims(&states, &a_t)?;
        let x = self.denoiser_input(a_t, &vec![t; a_t.nrows()], states);
        Ok(self.denoiser.forward(x.view())?)
    }

    /// Unguided and guided reverse means at step `t`.
    pub fn reverse_mean(
        &self,
        a_t: ArrayView2<f64>,
        t: usize,
        states: ArrayView2<f64>,
        guide: Option<&dyn Guide>,
    ) -> Result<(Array2<f64>, Array2<f64>), DiffusionError> {
        let eps = self.predict_noise(a_t, t, states)?;
        let grad = guide.map(|g| g.action_gradient(states, a_t));
        Ok(guided_mean(
            &self.schedule,
            t,
            a_t,
            eps.view(),
            grad.as_ref().map(|g| (self.guidance_scale, g.view())),
        ))
    }

    /// Draws `a_{t-1}` given `a_t`.
    pub fn reverse_step<R: Rng + ?Sized>(
        &self,
        a_t: ArrayView2<f64>,
        t: usize,
        states: ArrayView2<f64>,
        guide: Option<&dyn Guide>,
        rng: &mut R,
    ) -> Result<Array2<f64>, DiffusionError> {
        let (_, mut next) = self.reverse_mean(a_t, t, states, guide)?;
        add_step_noise(&self.schedule, t, &mut next, rng);
        Ok(next)
    }

    /// Full reverse chain from Gaussian noise, clipped to `[-1, 1]`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        states: ArrayView2<f64>,
        guide: Option<&dyn Guide>,
        rng: &mut R,
    ) -> Result<Array2<f64>, DiffusionError> {
        let mut a = standard_normal(states.nrows(), self.action_dim, rng);
        for t in (1..=self.schedule.steps()).rev() {
            a = self.reverse_step(a.view(), t, states, guide, rng)?;
        }
        a.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        Ok(a)
    }

    /// Like [`DiffusionPolicy::sample`] but records what [`DiffusionPolicy::chain_backward`] needs.
    pub fn sample_with_tape<R: Rng + ?Sized>(
        &self,
        states: ArrayView2<f64>,
        guide: Option<&dyn Guide>,
        rng: &mut R,
    ) -> Result<(Array2<f64>, ChainTape), DiffusionError> {
        self.check_dims(&states, &Array2::<f64>::zeros((0, self.action_dim)).view())?;
        let n = states.nrows();
        let mut a = standard_normal(n, self.action_dim, rng);
        let mut steps = Vec::with_capacity(self.schedule.steps());
        for t in (1..=self.schedule.steps()).rev() {
            let x = self.denoiser_input(a.view(), &vec![t; n], states);
            let (eps, tape) = self.denoiser.forward_tape(x.view())?;
            let grad = guide.map(|g| g.action_gradient(states, a.view()));
            let (_, mut next) = guided_mean(
                &self.schedule,
                t,
                a.view(),
                eps.view(),
                grad.as_ref().map(|g| (self.guidance_scale, g.view())),
            );
            add_step_noise(&self.schedule, t, &mut next, rng);
            steps.push(ChainStep { t, tape });
            a = next;
        }
        let clip_mask = a.mapv(|v| if (-1.0..=1.0).contains(&v) { 1.0 } else { 0.0 });
        a.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        Ok((a, ChainTape { steps, clip_mask }))
    }

    /// Denoiser-parameter gradient of `sum(a_0 * grad_a0)` through the
    /// recorded chain.
    pub fn chain_backward(&self, tape: &ChainTape, grad_a0: ArrayView2<f64>) -> Result<Gradients, DiffusionError> {
        let mut g = &grad_a0 * &tape.clip_mask;
        let mut total = Gradients::zeros_like(&self.denoiser);
        for step in tape.steps.iter().rev() {
            let t = step.t;
            let c1 = 1.0 / self.schedule.alpha(t).sqrt();
            let c2 = self.schedule.beta(t) / (1.0 - self.schedule.alpha_bar(t)).sqrt();
            let upstream = g.mapv(|v| -c1 * c2 * v);
            let (grads, gx) = self.denoiser.backward_tape(&step.tape, upstream.view())?;
            total.add_assign(&grads);
            let through_eps = gx.slice(s![.., ..self.action_dim]).to_owned();
            g = g.mapv(|v| c1 * v) + through_eps;
        }
        Ok(total)
    }

    /// Noise-prediction loss `mean_j ||eps_j - eps_theta(.)||^2` for given
    /// timesteps and noise, with its parameter gradient.
    pub fn denoise_loss_with(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        ts: &[usize],
        eps: ArrayView2<f64>,
    ) -> Result<(f64, Gradients), DiffusionError> {
        self.check_dims(&states, &actions)?;
        let n = actions.nrows();
        let mut noisy = Array2::zeros(actions.raw_dim());
        for (j, &t) in ts.iter().enumerate() {
            self.schedule.check(t)?;
            let ab = self.schedule.alpha_bar(t);
            let (c0, c1) = (ab.sqrt(), (1.0 - ab).sqrt());
            Zip::from(noisy.row_mut(j))
                .and(actions.row(j))
                .and(eps.row(j))
                .for_each(|x, &a, &e| *x = c0 * a + c1 * e);
        }
        let x = self.denoiser_input(noisy.view(), ts, states);
        let (pred, tape) = self.denoiser.forward_tape(x.view())?;
        let diff = &pred - &eps;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n as f64;
        let upstream = diff.mapv(|d| 2.0 * d / n as f64);
        let (grads, _) = self.denoiser.backward_tape(&tape, upstream.view())?;
        Ok((loss, grads))
    }

    /// Denoising loss with `t ~ U{1..T}` and `eps ~ N(0, I)` drawn per sample.
    pub fn denoise_loss<R: Rng + ?Sized>(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        rng: &mut R,
    ) -> Result<(f64, Gradients), DiffusionError> {
        let n = actions.nrows();
        let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=self.schedule.steps())).collect();
        let eps = standard_normal(n, self.action_dim, rng);
        self.denoise_loss_with(states, actions, &ts, eps.view())
    }
}
