//! Denoising-diffusion machinery shared by all teachers: the noise
//! schedule, forward noising, the denoiser training loop, and
//! ancestral sampling.
//!
//! Diffusion runs directly in pixel space on [0,1] images at desk
//! scale; there is no latent stage.

use rayon::prelude::*;

use crate::numcore::{AdamState, CheckMode, Rng, Tensor};
use crate::{Error, Result};

/// How w(t) weights the per-timestep loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum WeightMode {
    /// w(t) = 1 - alpha_bar(t), the conventional distillation choice.
    OneMinusAlphaBar,
    /// w(t) = 1.
    One,
}

/// Timesteps T, the beta/alpha arrays, and the loss weighting.
/// Index convention: t runs 1..=T; array index t-1.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub t_steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub weights: Vec<f64>,
}

impl DiffusionSchedule {
    #[inline]
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    #[inline]
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// alpha_bar(t-1), with alpha_bar(0) = 1.
    #[inline]
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t > 1 {
            self.alpha_bars[t - 2]
        } else {
            1.0
        }
    }

    #[inline]
    pub fn weight(&self, t: usize) -> f64 {
        self.weights[t - 1]
    }
}

/// Linear beta schedule from `beta_min` to `beta_max` over `t_steps`.
pub fn make_schedule(
    t_steps: usize,
    beta_min: f64,
    beta_max: f64,
    weight_mode: WeightMode,
) -> Result<DiffusionSchedule> {
    if t_steps < 2 {
        return Err(Error::invalid("schedule needs at least 2 steps"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::invalid(format!(
            "beta bounds ({beta_min}, {beta_max}) violate 0 < min <= max < 1"
        )));
    }
    let betas: Vec<f64> = (0..t_steps)
        .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (t_steps - 1) as f64)
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    let weights = alpha_bars
        .iter()
        .map(|&ab| match weight_mode {
            WeightMode::OneMinusAlphaBar => 1.0 - ab,
            WeightMode::One => 1.0,
        })
        .collect();
    Ok(DiffusionSchedule {
        t_steps,
        betas,
        alphas,
        alpha_bars,
        weights,
    })
}

/// Forward noising: x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape(format!(
            "q_sample: x0 {:?} vs eps {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    if t < 1 || t > schedule.t_steps {
        return Err(Error::invalid(format!("t {t} outside 1..={}", schedule.t_steps)));
    }
    let ab = schedule.alpha_bar(t);
    let (s_sig, s_noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| s_sig * x + s_noise * e)
        .collect();
    Ok(Tensor::from_vec_unchecked(x0.shape(), data))
}

// ---------------------------------------------------------------------------
// Training.

/// Gradient container that a model can zero, merge, and step with.
pub trait GradAccum: Send {
    fn add(&mut self, other: &Self);
}

impl GradAccum for () {
    fn add(&mut self, _other: &Self) {}
}

impl GradAccum for crate::numcore::ParamGrads {
    fn add(&mut self, other: &Self) {
        crate::numcore::ParamGrads::add(self, other);
    }
}

/// A conditional noise predictor trainable with the standard denoising
/// objective. `Example` carries the clean image and whatever
/// conditioning the concrete model consumes.
pub trait NoiseModel: Sync {
    type Example: Sync;
    type Cache;
    type Grads: GradAccum;

    fn clean_image(ex: &Self::Example) -> &Tensor;
    /// Predicted noise plus the activation record for backward.
    fn predict_train(&self, x_t: &Tensor, t: usize, ex: &Self::Example) -> (Tensor, Self::Cache);
    fn zero_grads(&self) -> Self::Grads;
    fn backward(&self, cache: Self::Cache, ex: &Self::Example, grad_pred: &Tensor, grads: &mut Self::Grads);
    fn new_optimizer(&self, lr: f64) -> AdamState;
    fn apply_step(&mut self, grads: &Self::Grads, opt: &mut AdamState, mode: CheckMode) -> Result<()>;
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub check: CheckMode,
}

/// Batch elements are processed in a fixed number of chunks merged in
/// chunk order, so results do not depend on the worker thread count.
const GRAD_CHUNKS: usize = 4;

/// The denoiser training loop: per step, sample a batch, t uniform in
/// 1..=T and eps ~ N(0, I) per element, and take one optimizer step on
/// the weighted noise-prediction loss
/// `mean_b w(t_b) * mean_pixels (eps - pred)^2`. Returns the loss
/// trace (one entry per step).
pub fn train_denoiser<M: NoiseModel>(
    model: &mut M,
    examples: &[M::Example],
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if cfg.batch == 0 || cfg.steps == 0 {
        return Err(Error::invalid("steps and batch must be positive"));
    }
    let mut opt = model.new_optimizer(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);

    for _step in 0..cfg.steps {
        // All randomness is drawn sequentially up front.
        let draws: Vec<(usize, usize, Tensor)> = (0..cfg.batch)
            .map(|_| {
                let idx = rng.index(examples.len());
                let t = rng.int_in(1, schedule.t_steps);
                let eps = rng.normal_tensor(M::clean_image(&examples[idx]).shape());
                (idx, t, eps)
            })
            .collect();

        let chunk_size = cfg.batch.div_ceil(GRAD_CHUNKS);
        let results: Vec<(f64, M::Grads)> = draws
            .par_chunks(chunk_size)
            .map(|chunk| {
                let mut grads = model.zero_grads();
                let mut loss_sum = 0.0;
                for (idx, t, eps) in chunk {
                    let ex = &examples[*idx];
                    let x0 = M::clean_image(ex);
                    let x_t = q_sample(x0, *t, eps, schedule).expect("shapes match");
                    let (pred, cache) = model.predict_train(&x_t, *t, ex);
                    let w = schedule.weight(*t);
                    let n_pix = pred.len() as f64;
                    let mut residual = pred.sub(eps);
                    loss_sum += w * residual.sum_squares() / n_pix;
                    // d loss / d pred for the batch-mean objective.
                    residual.scale(2.0 * w / (n_pix * cfg.batch as f64));
                    model.backward(cache, ex, &residual, &mut grads);
                }
                (loss_sum, grads)
            })
            .collect();

        let mut grads = model.zero_grads();
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            grads.add(g);
        }
        loss /= cfg.batch as f64;
        model.apply_step(&grads, &mut opt, cfg.check)?;
        trace.push(loss);
    }
    Ok(trace)
}

/// Deterministic held-out loss: `draws` fixed (t, eps) pairs per
/// example from `seed`, averaged with the same weighting as training.
pub fn heldout_loss<M: NoiseModel>(
    model: &M,
    examples: &[M::Example],
    schedule: &DiffusionSchedule,
    draws: usize,
    seed: u64,
) -> f64 {
    let mut rng = Rng::new(seed);
    let mut jobs = Vec::with_capacity(examples.len() * draws);
    for ex in examples {
        for _ in 0..draws {
            let t = rng.int_in(1, schedule.t_steps);
            let eps = rng.normal_tensor(M::clean_image(ex).shape());
            jobs.push((ex, t, eps));
        }
    }
    let total: f64 = jobs
        .par_iter()
        .map(|(ex, t, eps)| {
            let x_t = q_sample(M::clean_image(ex), *t, eps, schedule).expect("shapes match");
            let (pred, _) = model.predict_train(&x_t, *t, ex);
            schedule.weight(*t) * pred.sub(eps).sum_squares() / pred.len() as f64
        })
        .sum();
    total / jobs.len() as f64
}

// ---------------------------------------------------------------------------
// Sampling.

/// Ancestral sampling from x_T ~ N(0, I) down to x_0, using `predict`
/// for the noise estimate at each step; exactly T predictor calls.
/// The result is clamped to [0, 1].
pub fn ddpm_sample(
    predict: impl Fn(&Tensor, usize) -> Tensor,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
    shape: &[usize],
) -> Tensor {
    let mut x = rng.normal_tensor(shape);
    for t in (1..=schedule.t_steps).rev() {
        let eps_hat = predict(&x, t);
        assert_eq!(eps_hat.shape(), x.shape(), "predictor changed shape");
        let a = schedule.alpha(t);
        let ab = schedule.alpha_bar(t);
        let coef = schedule.beta(t) / (1.0 - ab).sqrt();
        let inv_sqrt_a = 1.0 / a.sqrt();
        let noise_scale = if t > 1 {
            ((1.0 - schedule.alpha_bar_prev(t)) / (1.0 - ab) * schedule.beta(t)).sqrt()
        } else {
            0.0
        };
        let data: Vec<f64> = x
            .data()
            .iter()
            .zip(eps_hat.data())
            .map(|(xv, ev)| {
                let mean = inv_sqrt_a * (xv - coef * ev);
                if t > 1 {
                    mean + noise_scale * rng.normal()
                } else {
                    mean
                }
            })
            .collect();
        x = Tensor::from_vec_unchecked(shape, data);
    }
    for v in x.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    x
}
