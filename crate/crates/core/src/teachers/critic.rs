//! Slot-classifier critic used for evaluation.
//!
//! Maps an image to per-slot (class, color, presence) logits for up to
//! four slots. Slots are ordered left to right by box center during
//! training, so slot k learns "the k-th leftmost object". The critic
//! replaces an external image/text scorer with an in-repo prompt-match
//! probability.
//!
//! The trunk runs at full resolution, then features are average-pooled
//! before the dense head; without the pooling the head memorizes the
//! training renders and held-out accuracy collapses to chance. Inputs
//! are noise-augmented during training for the same reason, and
//! because the critic must score imperfect generated scenes.

use rayon::prelude::*;

use super::{hwc_to_chw, with_coord_channels};
use crate::numcore::{
    adam_step, backward_into, forward, param_tensors, param_tensors_mut, zero_like_params,
    AdamState, CheckMode, ForwardCache, LayerSpec, ParamGrads, Rng, Tensor,
};
use crate::world::{LayoutRecord, MAX_ENTITIES, NUM_CLASSES, NUM_COLORS};
use crate::{Error, Result};

pub const CRITIC_SLOTS: usize = MAX_ENTITIES;
/// Per-slot logits: 3 class + 4 color + 1 presence.
pub const SLOT_WIDTH: usize = NUM_CLASSES + NUM_COLORS + 1;
const HIDDEN: usize = 96;
const CHANNELS: usize = 24;
const POOL: usize = 4;

#[derive(Debug, Clone)]
pub struct CriticNet {
    /// Full-resolution conv stack.
    pub conv: Vec<LayerSpec>,
    /// Post-pooling stack ending in the slot logits.
    pub head: Vec<LayerSpec>,
    pub pool: usize,
}

/// Per-slot probabilities after softmax/sigmoid.
#[derive(Debug, Clone, Copy)]
pub struct SlotProbs {
    pub class: [f64; NUM_CLASSES],
    pub color: [f64; NUM_COLORS],
    pub presence: f64,
}

fn softmax<const N: usize>(logits: &[f64]) -> [f64; N] {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; N];
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in &mut out {
        *o /= sum;
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Non-overlapping average pooling on [C, H, W].
fn avg_pool(t: &Tensor, k: usize) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (ph, pw) = (h / k, w / k);
    let src = t.data();
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for y in 0..ph {
            for x in 0..pw {
                let mut acc = 0.0;
                for dy in 0..k {
                    let row = (ch * h + y * k + dy) * w + x * k;
                    for dx in 0..k {
                        acc += src[row + dx];
                    }
                }
                out[(ch * ph + y) * pw + x] = acc * norm;
            }
        }
    }
    Tensor::from_vec_unchecked(&[c, ph, pw], out)
}

/// Adjoint of [`avg_pool`]: spreads each pooled gradient uniformly.
fn avg_pool_backward(grad: &Tensor, k: usize, h: usize, w: usize) -> Tensor {
    let s = grad.shape();
    let (c, ph, pw) = (s[0], s[1], s[2]);
    let g = grad.data();
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..ph {
            for x in 0..pw {
                let gv = g[(ch * ph + y) * pw + x] * norm;
                for dy in 0..k {
                    let row = (ch * h + y * k + dy) * w + x * k;
                    for dx in 0..k {
                        out[row + dx] += gv;
                    }
                }
            }
        }
    }
    Tensor::from_vec_unchecked(&[c, h, w], out)
}

impl CriticNet {
    pub fn new(res: usize, rng: &mut Rng) -> CriticNet {
        let pooled = res / POOL;
        CriticNet {
            conv: vec![
                LayerSpec::conv3x3(5, CHANNELS, rng),
                LayerSpec::silu(),
                LayerSpec::conv3x3(CHANNELS, CHANNELS, rng),
                LayerSpec::silu(),
            ],
            head: vec![
                LayerSpec::conv3x3(CHANNELS, CHANNELS, rng),
                LayerSpec::silu(),
                LayerSpec::linear(CHANNELS * pooled * pooled, HIDDEN, rng),
                LayerSpec::silu(),
                LayerSpec::linear(HIDDEN, CRITIC_SLOTS * SLOT_WIDTH, rng),
            ],
            pool: POOL,
        }
    }

    fn forward_cached(&self, image_hwc: &Tensor) -> Result<(Tensor, CriticCache)> {
        let input = with_coord_channels(&hwc_to_chw(image_hwc));
        let (feat, conv_cache) = forward(&self.conv, &input, None)?;
        let pooled = avg_pool(&feat, self.pool);
        let (logits, head_cache) = forward(&self.head, &pooled, None)?;
        Ok((
            logits,
            CriticCache {
                conv: conv_cache,
                head: head_cache,
                feat_shape: [feat.shape()[0], feat.shape()[1], feat.shape()[2]],
            },
        ))
    }

    fn backward_cached(
        &self,
        cache: &CriticCache,
        grad_logits: &Tensor,
        grads: &mut CriticGrads,
    ) -> Result<()> {
        let (g_pooled, _) = backward_into(&self.head, &cache.head, grad_logits, &mut grads.head)?;
        let g_feat = avg_pool_backward(&g_pooled, self.pool, cache.feat_shape[1], cache.feat_shape[2]);
        backward_into(&self.conv, &cache.conv, &g_feat, &mut grads.conv)?;
        Ok(())
    }

    /// Raw logits, shape `[CRITIC_SLOTS * SLOT_WIDTH]`.
    pub fn logits(&self, image_hwc: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(image_hwc)?.0)
    }

    pub fn slot_probs(&self, image_hwc: &Tensor) -> Result<[SlotProbs; CRITIC_SLOTS]> {
        let logits = self.logits(image_hwc)?;
        Ok(probs_from_logits(logits.data()))
    }

    pub fn param_checksum(&self) -> u64 {
        let mut acc = 0xcbf29ce484222325u64;
        for net in [&self.conv, &self.head] {
            for t in param_tensors(net) {
                for v in t.data() {
                    acc = (acc ^ v.to_bits()).wrapping_mul(0x100000001b3);
                }
            }
        }
        acc
    }

    /// Image resolution the trunk was built for, recovered from the
    /// flatten boundary of the head.
    pub fn input_res(&self) -> Result<usize> {
        let linear = self
            .head
            .iter()
            .find(|l| l.kind == crate::numcore::LayerKind::Linear)
            .ok_or_else(|| Error::invalid("critic head has no flatten boundary"))?;
        let pooled2 = linear.in_dim / CHANNELS;
        let pooled = (pooled2 as f64).sqrt().round() as usize;
        if pooled * pooled * CHANNELS != linear.in_dim {
            return Err(Error::invalid("critic head dims are not square"));
        }
        Ok(pooled * self.pool)
    }
}

struct CriticCache {
    conv: ForwardCache,
    head: ForwardCache,
    feat_shape: [usize; 3],
}

struct CriticGrads {
    conv: ParamGrads,
    head: ParamGrads,
}

impl CriticGrads {
    fn add(&mut self, other: &CriticGrads) {
        self.conv.add(&other.conv);
        self.head.add(&other.head);
    }
}

pub fn probs_from_logits(logits: &[f64]) -> [SlotProbs; CRITIC_SLOTS] {
    std::array::from_fn(|slot| {
        let base = slot * SLOT_WIDTH;
        SlotProbs {
            class: softmax::<NUM_CLASSES>(&logits[base..base + NUM_CLASSES]),
            color: softmax::<NUM_COLORS>(
                &logits[base + NUM_CLASSES..base + NUM_CLASSES + NUM_COLORS],
            ),
            presence: sigmoid(logits[base + NUM_CLASSES + NUM_COLORS]),
        }
    })
}

/// Entity indices ordered left to right by box center x (ties broken
/// by entity index); this is the slot assignment rule everywhere.
pub fn slot_order(entities: &[crate::world::GroundedEntity]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..entities.len()).collect();
    order.sort_by(|&a, &b| {
        entities[a]
            .box2d
            .center()
            .0
            .partial_cmp(&entities[b].box2d.center().0)
            .unwrap()
            .then(a.cmp(&b))
    });
    order
}

/// Per-slot labels: `Some((class, color))` for filled slots.
fn slot_labels(rec: &LayoutRecord) -> [Option<(u8, u8)>; CRITIC_SLOTS] {
    let order = slot_order(&rec.entities);
    std::array::from_fn(|slot| {
        order
            .get(slot)
            .map(|&i| (rec.entities[i].class_id, rec.entities[i].color_id))
    })
}

/// Cross-entropy over filled slots (class and color) plus presence
/// BCE over all slots; returns (loss, dloss/dlogits).
fn slot_loss(logits: &[f64], labels: &[Option<(u8, u8)>; CRITIC_SLOTS]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    let probs = probs_from_logits(logits);
    for (slot, label) in labels.iter().enumerate() {
        let base = slot * SLOT_WIDTH;
        let p = &probs[slot];
        // Presence.
        let target = if label.is_some() { 1.0 } else { 0.0 };
        let pp = p.presence.clamp(1e-12, 1.0 - 1e-12);
        loss -= target * pp.ln() + (1.0 - target) * (1.0 - pp).ln();
        grad[base + NUM_CLASSES + NUM_COLORS] = p.presence - target;
        if let Some((class_id, color_id)) = label {
            loss -= p.class[*class_id as usize].max(1e-12).ln();
            for c in 0..NUM_CLASSES {
                grad[base + c] = p.class[c] - if c == *class_id as usize { 1.0 } else { 0.0 };
            }
            loss -= p.color[*color_id as usize].max(1e-12).ln();
            for c in 0..NUM_COLORS {
                grad[base + NUM_CLASSES + c] =
                    p.color[c] - if c == *color_id as usize { 1.0 } else { 0.0 };
            }
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone)]
pub struct CriticTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Std of the Gaussian noise added to training images.
    pub noise_aug: f64,
}

impl Default for CriticTrainConfig {
    fn default() -> Self {
        CriticTrainConfig {
            steps: 3000,
            batch: 16,
            lr: 1e-3,
            noise_aug: 0.03,
        }
    }
}

/// Supervised training on (image -> slot labels). Returns the trained
/// net and the loss trace.
pub fn train_critic(
    records: &[LayoutRecord],
    cfg: &CriticTrainConfig,
    rng: &mut Rng,
) -> Result<(CriticNet, Vec<f64>)> {
    if records.len() < 200 {
        return Err(Error::invalid(format!(
            "critic training wants >= 200 records, got {}",
            records.len()
        )));
    }
    let res = records[0].image.shape()[0];
    if res % POOL != 0 {
        return Err(Error::invalid(format!("image res {res} not divisible by the pool factor")));
    }
    let mut net = CriticNet::new(res, rng);
    let mut shapes = param_tensors(&net.conv);
    shapes.extend(param_tensors(&net.head));
    let mut opt = AdamState::new(&shapes, cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        // Indices and augmentation noise drawn sequentially up front.
        let batch: Vec<(usize, Tensor)> = (0..cfg.batch)
            .map(|_| {
                let idx = rng.index(records.len());
                let noise = rng.normal_tensor(records[idx].image.shape());
                (idx, noise)
            })
            .collect();
        // Fixed four-way chunking keeps the reduction order independent
        // of the worker pool size.
        let chunk = cfg.batch.div_ceil(4);
        let partials: Vec<(f64, CriticGrads)> = batch
            .par_chunks(chunk)
            .map(|items| {
                let mut grads = CriticGrads {
                    conv: zero_like_params(&net.conv),
                    head: zero_like_params(&net.head),
                };
                let mut loss_sum = 0.0;
                for (idx, noise) in items {
                    let rec = &records[*idx];
                    let mut image = rec.image.clone();
                    image.add_scaled(noise, cfg.noise_aug);
                    let (logits, cache) = net.forward_cached(&image).expect("critic forward");
                    let labels = slot_labels(rec);
                    let (loss, mut dlogits) = slot_loss(logits.data(), &labels);
                    loss_sum += loss;
                    for g in &mut dlogits {
                        *g /= cfg.batch as f64;
                    }
                    let g = Tensor::from_vec_unchecked(&[logits.len()], dlogits);
                    net.backward_cached(&cache, &g, &mut grads).expect("critic backward");
                }
                (loss_sum, grads)
            })
            .collect();

        let mut grads = CriticGrads {
            conv: zero_like_params(&net.conv),
            head: zero_like_params(&net.head),
        };
        let mut loss = 0.0;
        for (l, g) in &partials {
            loss += l;
            grads.add(g);
        }
        loss /= cfg.batch as f64;
        let grad_refs: Vec<&Tensor> = grads
            .conv
            .tensors()
            .iter()
            .chain(grads.head.tensors().iter())
            .collect();
        let mut params = param_tensors_mut(&mut net.conv);
        params.extend(param_tensors_mut(&mut net.head));
        adam_step(&mut params, &grad_refs, &mut opt, CheckMode::Fast)?;
        trace.push(loss);
    }
    Ok((net, trace))
}

/// Fraction of filled slots whose class argmax is correct.
pub fn critic_slot_accuracy(net: &CriticNet, records: &[LayoutRecord]) -> f64 {
    let (hits, total) = records
        .par_iter()
        .map(|rec| {
            let probs = net.slot_probs(&rec.image).expect("critic forward");
            let labels = slot_labels(rec);
            let mut hits = 0usize;
            let mut total = 0usize;
            for (slot, label) in labels.iter().enumerate() {
                if let Some((class_id, _)) = label {
                    total += 1;
                    let argmax = probs[slot]
                        .class
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0;
                    if argmax == *class_id as usize {
                        hits += 1;
                    }
                }
            }
            (hits, total)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}
