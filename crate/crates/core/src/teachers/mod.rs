//! The conditional denoisers: a layout teacher conditioned on
//! (caption, grounded boxes), a multi-view teacher conditioned on
//! (reference image, relative camera), and the base copy that the
//! adapter chain fine-tunes online. Plus a slot-classifier critic used
//! only for evaluation.
//!
//! Architecture: a plain conv stack over the noised image (with two
//! coordinate channels appended so box conditioning can localize
//! pixels), and a single condition vector broadcast-concatenated as
//! extra channels midway through the stack. The condition vector is a
//! learned linear projection of role-specific parts: caption
//! embedding, grounding tokens, camera encoding, and a timestep
//! embedding. Grounded denoisers carry a camera block that stays zero
//! for the layout role; the fine-tuned copy feeds the render camera
//! through the same slot, so base and fine-tuned model share one
//! architecture exactly.

mod checkpoint;
mod critic;

pub use checkpoint::{load_critic, load_denoiser, save_critic, save_denoiser};
pub use critic::{
    critic_slot_accuracy, probs_from_logits, slot_order, train_critic, CriticNet,
    CriticTrainConfig, SlotProbs, CRITIC_SLOTS, SLOT_WIDTH,
};

use crate::diffusion::{GradAccum, NoiseModel};
use crate::numcore::{
    adam_step, backward_into, forward, param_tensors, param_tensors_mut, zero_like_params,
    AdamState, CheckMode, ForwardCache, LayerSpec, ParamGrads, Rng, Tensor,
};
use crate::render::Camera;
use crate::world::{GroundedEntity, LayoutRecord, MvRecord, ScenePrompt, MAX_ENTITIES, VOCAB_SIZE};
use crate::{Error, Result};

// Dimension constants shared by every teacher.
pub const CAPTION_DIM: usize = 16;
pub const CLASS_EMBED_DIM: usize = 6;
pub const COLOR_EMBED_DIM: usize = 6;
pub const GROUND_TOKEN_DIM: usize = 8;
pub const GROUND_MLP_HIDDEN: usize = 24;
pub const CAMERA_DIM: usize = 5;
pub const TIME_DIM: usize = 3;
pub const COND_DIM: usize = 16;
pub const REF_ENC_DIM: usize = 16;
pub const BACKBONE_CHANNELS: usize = 16;

/// Raw condition width for grounded denoisers:
/// caption | grounding tokens | camera | time.
pub const GROUNDED_RAW_DIM: usize =
    CAPTION_DIM + MAX_ENTITIES * GROUND_TOKEN_DIM + CAMERA_DIM + TIME_DIM;
/// Raw condition width for the multi-view denoiser:
/// reference encoding | camera | time.
pub const VIEWREF_RAW_DIM: usize = REF_ENC_DIM + CAMERA_DIM + TIME_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Layout,
    Multiview,
    ColaBase,
}

// ---------------------------------------------------------------------------
// Shared encodings.

/// (t/T, sin(2 pi t/T), cos(2 pi t/T)).
pub fn time_embedding(t: usize, t_steps: usize) -> [f64; 3] {
    let f = t as f64 / t_steps as f64;
    let w = std::f64::consts::TAU * f;
    [f, w.sin(), w.cos()]
}

/// Pose of `camera` relative to `reference`: sin/cos of the azimuth
/// and elevation offsets plus the radius ratio.
pub fn camera_encoding(camera: &Camera, reference: &Camera) -> [f64; CAMERA_DIM] {
    let daz = (camera.azimuth_deg - reference.azimuth_deg).to_radians();
    let del = (camera.elevation_deg - reference.elevation_deg).to_radians();
    [
        daz.sin(),
        daz.cos(),
        del.sin(),
        del.cos(),
        camera.radius / reference.radius,
    ]
}

/// [H, W, C] -> [C, H, W].
pub fn hwc_to_chw(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = src[(y * w + x) * c + ch];
            }
        }
    }
    Tensor::from_vec_unchecked(&[c, h, w], out)
}

/// [C, H, W] -> [H, W, C].
pub fn chw_to_hwc(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(y * w + x) * c + ch] = src[(ch * h + y) * w + x];
            }
        }
    }
    Tensor::from_vec_unchecked(&[h, w, c], out)
}

/// Appends two coordinate channels (pixel-center x and y in [0,1],
/// the same units box coordinates use) to a [3, H, W] image.
pub fn with_coord_channels(chw: &Tensor) -> Tensor {
    let s = chw.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity((c + 2) * h * w);
    out.extend_from_slice(chw.data());
    // x channel, then y channel.
    for _y in 0..h {
        for x in 0..w {
            out.push((x as f64 + 0.5) / w as f64);
        }
    }
    for y in 0..h {
        for _x in 0..w {
            out.push((y as f64 + 0.5) / h as f64);
        }
    }
    Tensor::from_vec_unchecked(&[c + 2, h, w], out)
}

// ---------------------------------------------------------------------------
// Embedding tables (stored as linear layers; the embedding path reads
// weight columns and never touches the bias).

fn table_column(table: &LayerSpec, col: usize) -> Vec<f64> {
    let rows = table.out_dim;
    let cols = table.in_dim;
    let w = table.weights.data();
    (0..rows).map(|r| w[r * cols + col]).collect()
}

fn add_to_table_column(grads: &mut ParamGrads, table: &LayerSpec, col: usize, g: &[f64]) {
    let cols = table.in_dim;
    let gw = grads.tensors_mut()[0].data_mut();
    for (r, gv) in g.iter().enumerate() {
        gw[r * cols + col] += gv;
    }
}

// ---------------------------------------------------------------------------
// Grounding tokens.

/// Per-entity encoded rows, zero-padded to the entity cap.
#[derive(Debug, Clone)]
pub struct GroundingTokens {
    /// `[MAX_ENTITIES, GROUND_TOKEN_DIM]`; rows past `entity_count`
    /// are zero.
    pub tokens: Tensor,
    pub mask: [bool; MAX_ENTITIES],
    pub entity_count: usize,
}

impl GroundingTokens {
    pub fn flattened(&self) -> &[f64] {
        self.tokens.data()
    }
}

// ---------------------------------------------------------------------------
// Condition encoders.

#[derive(Debug, Clone)]
pub struct GroundedEncoder {
    pub caption_table: LayerSpec,
    pub class_table: LayerSpec,
    pub color_table: LayerSpec,
    pub ground_mlp: Vec<LayerSpec>,
    pub proj: Vec<LayerSpec>,
}

impl GroundedEncoder {
    fn new(rng: &mut Rng) -> GroundedEncoder {
        GroundedEncoder {
            caption_table: LayerSpec::linear(VOCAB_SIZE, CAPTION_DIM, rng),
            class_table: LayerSpec::linear(crate::world::NUM_CLASSES, CLASS_EMBED_DIM, rng),
            color_table: LayerSpec::linear(crate::world::NUM_COLORS, COLOR_EMBED_DIM, rng),
            ground_mlp: vec![
                LayerSpec::linear(CLASS_EMBED_DIM + COLOR_EMBED_DIM + 4, GROUND_MLP_HIDDEN, rng),
                LayerSpec::silu(),
                LayerSpec::linear(GROUND_MLP_HIDDEN, GROUND_TOKEN_DIM, rng),
            ],
            proj: vec![LayerSpec::linear(GROUNDED_RAW_DIM, COND_DIM, rng)],
        }
    }

    /// Sum of learned token embeddings; the empty caption embeds to
    /// the zero vector. Tokens are accumulated in sorted id order so
    /// the sum is bit-exactly invariant under caption permutation.
    pub fn embed_prompt(&self, caption: &[u8]) -> Result<Tensor> {
        let mut tokens = caption.to_vec();
        tokens.sort_unstable();
        let mut out = vec![0.0; CAPTION_DIM];
        for &tok in &tokens {
            if tok as usize >= VOCAB_SIZE {
                return Err(Error::invalid(format!("unknown token id {tok}")));
            }
            for (o, v) in out.iter_mut().zip(table_column(&self.caption_table, tok as usize)) {
                *o += v;
            }
        }
        Ok(Tensor::from_vec_unchecked(&[CAPTION_DIM], out))
    }

    fn entity_input(&self, e: &GroundedEntity) -> Vec<f64> {
        let mut input = table_column(&self.class_table, e.class_id as usize);
        input.extend(table_column(&self.color_table, e.color_id as usize));
        input.extend([e.box2d.x0, e.box2d.y0, e.box2d.x1, e.box2d.y1]);
        input
    }

    /// Per-entity MLP over (class embedding | color embedding | box
    /// coordinates); rows beyond the entity count stay zero. Row i
    /// depends only on entity i.
    pub fn encode_grounding(&self, entities: &[GroundedEntity]) -> Result<(GroundingTokens, Vec<ForwardCache>)> {
        if entities.len() > MAX_ENTITIES {
            return Err(Error::invalid(format!(
                "{} entities exceed the cap of {MAX_ENTITIES}",
                entities.len()
            )));
        }
        let mut tokens = Tensor::zeros(&[MAX_ENTITIES, GROUND_TOKEN_DIM]);
        let mut mask = [false; MAX_ENTITIES];
        let mut caches = Vec::with_capacity(entities.len());
        for (i, e) in entities.iter().enumerate() {
            e.box2d.validate()?;
            let input = Tensor::from_vec_unchecked(
                &[CLASS_EMBED_DIM + COLOR_EMBED_DIM + 4],
                self.entity_input(e),
            );
            let (row, cache) = forward(&self.ground_mlp, &input, None)?;
            tokens.data_mut()[i * GROUND_TOKEN_DIM..(i + 1) * GROUND_TOKEN_DIM]
                .copy_from_slice(row.data());
            mask[i] = true;
            caches.push(cache);
        }
        Ok((
            GroundingTokens {
                tokens,
                mask,
                entity_count: entities.len(),
            },
            caches,
        ))
    }

    /// Raw condition vector: caption | grounding | camera | time.
    fn raw_condition(
        &self,
        prompt: &ScenePrompt,
        camera: Option<[f64; CAMERA_DIM]>,
        t_embed: [f64; TIME_DIM],
    ) -> Result<(Tensor, Vec<ForwardCache>)> {
        let caption = self.embed_prompt(&prompt.caption)?;
        let (tokens, caches) = self.encode_grounding(&prompt.entities)?;
        let mut raw = Vec::with_capacity(GROUNDED_RAW_DIM);
        raw.extend_from_slice(caption.data());
        raw.extend_from_slice(tokens.flattened());
        raw.extend_from_slice(&camera.unwrap_or([0.0; CAMERA_DIM]));
        raw.extend_from_slice(&t_embed);
        Ok((Tensor::from_vec_unchecked(&[GROUNDED_RAW_DIM], raw), caches))
    }
}

#[derive(Debug, Clone)]
pub struct ViewRefEncoder {
    pub ref_conv: Vec<LayerSpec>,
    pub proj: Vec<LayerSpec>,
}

impl ViewRefEncoder {
    fn new(res: usize, rng: &mut Rng) -> ViewRefEncoder {
        ViewRefEncoder {
            ref_conv: vec![
                LayerSpec::conv3x3(3, 8, rng),
                LayerSpec::silu(),
                LayerSpec::conv3x3(8, 8, rng),
                LayerSpec::silu(),
                LayerSpec::linear(8 * res * res, REF_ENC_DIM, rng),
            ],
            proj: vec![LayerSpec::linear(VIEWREF_RAW_DIM, COND_DIM, rng)],
        }
    }

    fn raw_condition(
        &self,
        ref_chw: &Tensor,
        camera: [f64; CAMERA_DIM],
        t_embed: [f64; TIME_DIM],
    ) -> Result<(Tensor, ForwardCache)> {
        let (enc, cache) = forward(&self.ref_conv, ref_chw, None)?;
        let mut raw = Vec::with_capacity(VIEWREF_RAW_DIM);
        raw.extend_from_slice(enc.data());
        raw.extend_from_slice(&camera);
        raw.extend_from_slice(&t_embed);
        Ok((Tensor::from_vec_unchecked(&[VIEWREF_RAW_DIM], raw), cache))
    }
}

#[derive(Debug, Clone)]
pub enum CondEncoder {
    Grounded(GroundedEncoder),
    ViewRef(ViewRefEncoder),
}

// ---------------------------------------------------------------------------
// The denoiser.

#[derive(Debug, Clone)]
pub struct DenoiserNet {
    pub role: Role,
    pub t_steps: usize,
    pub backbone: Vec<LayerSpec>,
    pub cond: CondEncoder,
}

fn new_backbone(rng: &mut Rng) -> Vec<LayerSpec> {
    let c = BACKBONE_CHANNELS;
    let mut net = vec![
        LayerSpec::conv3x3(5, c, rng),
        LayerSpec::silu(),
        LayerSpec::conv3x3(c, c, rng),
        LayerSpec::silu(),
        LayerSpec::concat_condition(COND_DIM),
        LayerSpec::conv3x3(c + COND_DIM, c, rng),
        LayerSpec::silu(),
        LayerSpec::conv3x3(c, 3, rng),
    ];
    // Small output init so the initial prediction is near zero.
    if let Some(last) = net.last_mut() {
        last.weights.scale(0.01);
    }
    net
}

impl DenoiserNet {
    pub fn new_layout(t_steps: usize, rng: &mut Rng) -> DenoiserNet {
        DenoiserNet {
            role: Role::Layout,
            t_steps,
            backbone: new_backbone(rng),
            cond: CondEncoder::Grounded(GroundedEncoder::new(rng)),
        }
    }

    pub fn new_multiview(t_steps: usize, res: usize, rng: &mut Rng) -> DenoiserNet {
        DenoiserNet {
            role: Role::Multiview,
            t_steps,
            backbone: new_backbone(rng),
            cond: CondEncoder::ViewRef(ViewRefEncoder::new(res, rng)),
        }
    }

    /// Exact copy with the fine-tuning role; the adapter chain owns it.
    pub fn clone_as_cola_base(&self) -> Result<DenoiserNet> {
        if self.role != Role::Layout {
            return Err(Error::invalid("the fine-tuned chain clones the layout teacher"));
        }
        let mut base = self.clone();
        base.role = Role::ColaBase;
        Ok(base)
    }

    pub fn grounded(&self) -> Result<&GroundedEncoder> {
        match &self.cond {
            CondEncoder::Grounded(g) => Ok(g),
            CondEncoder::ViewRef(_) => Err(Error::invalid("denoiser has no grounded encoder")),
        }
    }

    fn viewref(&self) -> Result<&ViewRefEncoder> {
        match &self.cond {
            CondEncoder::ViewRef(v) => Ok(v),
            CondEncoder::Grounded(_) => Err(Error::invalid("denoiser has no reference encoder")),
        }
    }

    /// Canonical parameter order: backbone, then encoder parts.
    pub fn all_nets(&self) -> Vec<&[LayerSpec]> {
        let mut nets: Vec<&[LayerSpec]> = vec![&self.backbone];
        match &self.cond {
            CondEncoder::Grounded(g) => {
                nets.push(std::slice::from_ref(&g.caption_table));
                nets.push(std::slice::from_ref(&g.class_table));
                nets.push(std::slice::from_ref(&g.color_table));
                nets.push(&g.ground_mlp);
                nets.push(&g.proj);
            }
            CondEncoder::ViewRef(v) => {
                nets.push(&v.ref_conv);
                nets.push(&v.proj);
            }
        }
        nets
    }

    fn all_nets_mut(&mut self) -> Vec<&mut [LayerSpec]> {
        let mut nets: Vec<&mut [LayerSpec]> = vec![&mut self.backbone];
        match &mut self.cond {
            CondEncoder::Grounded(g) => {
                nets.push(std::slice::from_mut(&mut g.caption_table));
                nets.push(std::slice::from_mut(&mut g.class_table));
                nets.push(std::slice::from_mut(&mut g.color_table));
                nets.push(&mut g.ground_mlp);
                nets.push(&mut g.proj);
            }
            CondEncoder::ViewRef(v) => {
                nets.push(&mut v.ref_conv);
                nets.push(&mut v.proj);
            }
        }
        nets
    }

    /// Image resolution the reference encoder was built for (only the
    /// multi-view role has one), recovered from its flatten boundary.
    pub fn ref_input_res(&self) -> Option<usize> {
        match &self.cond {
            CondEncoder::ViewRef(v) => {
                let linear = v.ref_conv.iter().find(|l| l.kind == crate::numcore::LayerKind::Linear)?;
                let res = ((linear.in_dim / 8) as f64).sqrt().round() as usize;
                (res * res * 8 == linear.in_dim).then_some(res)
            }
            CondEncoder::Grounded(_) => None,
        }
    }

    /// Folds every parameter bit into one checksum; used to assert
    /// teacher weights never move during distillation.
    pub fn param_checksum(&self) -> u64 {
        let mut acc = 0xcbf29ce484222325u64;
        for net in self.all_nets() {
            for t in param_tensors(net) {
                for v in t.data() {
                    acc = (acc ^ v.to_bits()).wrapping_mul(0x100000001b3);
                }
            }
        }
        acc
    }

    fn run_backbone(&self, x_t: &Tensor, cond: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let input = with_coord_channels(&hwc_to_chw(x_t));
        let (out_chw, cache) = forward(&self.backbone, &input, Some(cond))?;
        Ok((chw_to_hwc(&out_chw), cache))
    }

    /// Layout-conditioned prediction: condition is (caption, boxes)
    /// with the camera block zeroed.
    pub fn layout_denoise(&self, x_t: &Tensor, t: usize, prompt: &ScenePrompt) -> Result<Tensor> {
        if self.role != Role::Layout {
            return Err(Error::invalid("layout_denoise wants the layout role"));
        }
        let g = self.grounded()?;
        let (raw, _) = g.raw_condition(prompt, None, time_embedding(t, self.t_steps))?;
        let (cond, _) = forward(&g.proj, &raw, None)?;
        Ok(self.run_backbone(x_t, &cond)?.0)
    }

    /// Multi-view prediction conditioned on the reference image and
    /// the camera pose relative to the front camera.
    pub fn mv_denoise(
        &self,
        x_t: &Tensor,
        t: usize,
        ref_image: &Tensor,
        camera: &Camera,
        reference_camera: &Camera,
    ) -> Result<Tensor> {
        if self.role != Role::Multiview {
            return Err(Error::invalid("mv_denoise wants the multiview role"));
        }
        let v = self.viewref()?;
        let (raw, _) = v.raw_condition(
            &hwc_to_chw(ref_image),
            camera_encoding(camera, reference_camera),
            time_embedding(t, self.t_steps),
        )?;
        let (cond, _) = forward(&v.proj, &raw, None)?;
        Ok(self.run_backbone(x_t, &cond)?.0)
    }

    /// Fine-tuned-model prediction conditioned on (caption, boxes,
    /// camera); used through the adapter chain.
    pub fn cola_denoise(
        &self,
        x_t: &Tensor,
        t: usize,
        prompt: &ScenePrompt,
        camera: &Camera,
        reference_camera: &Camera,
    ) -> Result<Tensor> {
        if self.role != Role::ColaBase {
            return Err(Error::invalid("cola_denoise wants the fine-tuning role"));
        }
        let g = self.grounded()?;
        let (raw, _) = g.raw_condition(
            prompt,
            Some(camera_encoding(camera, reference_camera)),
            time_embedding(t, self.t_steps),
        )?;
        let (cond, _) = forward(&g.proj, &raw, None)?;
        Ok(self.run_backbone(x_t, &cond)?.0)
    }

    /// Full forward with activation records for training.
    pub fn predict_cached(&self, x_t: &Tensor, t: usize, cond_in: &CondInput) -> Result<(Tensor, TeacherCache)> {
        let t_embed = time_embedding(t, self.t_steps);
        match (&self.cond, cond_in) {
            (CondEncoder::Grounded(g), CondInput::Grounded { prompt, camera }) => {
                let (raw, mlp_caches) = g.raw_condition(prompt, *camera, t_embed)?;
                let (cond, proj_cache) = forward(&g.proj, &raw, None)?;
                let input = with_coord_channels(&hwc_to_chw(x_t));
                let (out_chw, backbone_cache) = forward(&self.backbone, &input, Some(&cond))?;
                Ok((
                    chw_to_hwc(&out_chw),
                    TeacherCache {
                        backbone: backbone_cache,
                        proj: proj_cache,
                        mlp_caches,
                        ref_cache: None,
                    },
                ))
            }
            (CondEncoder::ViewRef(v), CondInput::ViewRef { ref_image, camera }) => {
                let (raw, ref_cache) = v.raw_condition(&hwc_to_chw(ref_image), *camera, t_embed)?;
                let (cond, proj_cache) = forward(&v.proj, &raw, None)?;
                let input = with_coord_channels(&hwc_to_chw(x_t));
                let (out_chw, backbone_cache) = forward(&self.backbone, &input, Some(&cond))?;
                Ok((
                    chw_to_hwc(&out_chw),
                    TeacherCache {
                        backbone: backbone_cache,
                        proj: proj_cache,
                        mlp_caches: Vec::new(),
                        ref_cache: Some(ref_cache),
                    },
                ))
            }
            _ => Err(Error::invalid("condition input does not match encoder")),
        }
    }

    /// Backward through the whole model, accumulating into `grads`.
    /// `cond_in` must be the input used in `predict_cached`.
    pub fn backward_cached(
        &self,
        cache: TeacherCache,
        cond_in: &CondInput,
        grad_pred: &Tensor,
        grads: &mut TeacherGrads,
    ) -> Result<()> {
        let g_chw = hwc_to_chw(grad_pred);
        let (_, g_cond) = backward_into(&self.backbone, &cache.backbone, &g_chw, &mut grads.backbone)?;
        let g_cond = g_cond.ok_or_else(|| Error::invalid("backbone lost its condition"))?;
        match (&self.cond, cond_in, &mut grads.cond) {
            (
                CondEncoder::Grounded(enc),
                CondInput::Grounded { prompt, .. },
                CondGrads::Grounded {
                    caption,
                    class,
                    color,
                    mlp,
                    proj,
                },
            ) => {
                let (g_raw, _) = backward_into(&enc.proj, &cache.proj, &g_cond, proj)?;
                let g_raw = g_raw.data();
                // Caption block: token columns each receive the sum.
                for &tok in &prompt.caption {
                    add_to_table_column(caption, &enc.caption_table, tok as usize, &g_raw[..CAPTION_DIM]);
                }
                // Grounding block: per-entity MLP, then embed tables.
                for (i, (e, mlp_cache)) in prompt.entities.iter().zip(cache.mlp_caches).enumerate() {
                    let lo = CAPTION_DIM + i * GROUND_TOKEN_DIM;
                    let g_tok = Tensor::from_vec_unchecked(
                        &[GROUND_TOKEN_DIM],
                        g_raw[lo..lo + GROUND_TOKEN_DIM].to_vec(),
                    );
                    let (g_in, _) = backward_into(&enc.ground_mlp, &mlp_cache, &g_tok, mlp)?;
                    let g_in = g_in.data();
                    add_to_table_column(class, &enc.class_table, e.class_id as usize, &g_in[..CLASS_EMBED_DIM]);
                    add_to_table_column(
                        color,
                        &enc.color_table,
                        e.color_id as usize,
                        &g_in[CLASS_EMBED_DIM..CLASS_EMBED_DIM + COLOR_EMBED_DIM],
                    );
                }
                // Camera and time blocks carry no parameters.
                Ok(())
            }
            (
                CondEncoder::ViewRef(enc),
                CondInput::ViewRef { .. },
                CondGrads::ViewRef { ref_conv, proj },
            ) => {
                let (g_raw, _) = backward_into(&enc.proj, &cache.proj, &g_cond, proj)?;
                let g_enc = Tensor::from_vec_unchecked(&[REF_ENC_DIM], g_raw.data()[..REF_ENC_DIM].to_vec());
                let ref_cache = cache.ref_cache.ok_or_else(|| Error::invalid("missing ref cache"))?;
                backward_into(&enc.ref_conv, &ref_cache, &g_enc, ref_conv)?;
                Ok(())
            }
            _ => Err(Error::invalid("gradient container does not match encoder")),
        }
    }

    pub fn zero_grads(&self) -> TeacherGrads {
        TeacherGrads {
            backbone: zero_like_params(&self.backbone),
            cond: match &self.cond {
                CondEncoder::Grounded(g) => CondGrads::Grounded {
                    caption: zero_like_params(std::slice::from_ref(&g.caption_table)),
                    class: zero_like_params(std::slice::from_ref(&g.class_table)),
                    color: zero_like_params(std::slice::from_ref(&g.color_table)),
                    mlp: zero_like_params(&g.ground_mlp),
                    proj: zero_like_params(&g.proj),
                },
                CondEncoder::ViewRef(v) => CondGrads::ViewRef {
                    ref_conv: zero_like_params(&v.ref_conv),
                    proj: zero_like_params(&v.proj),
                },
            },
        }
    }

    pub fn new_optimizer(&self, lr: f64) -> AdamState {
        let mut shapes = Vec::new();
        for net in self.all_nets() {
            shapes.extend(param_tensors(net));
        }
        AdamState::new(&shapes, lr)
    }

    pub fn apply_step(&mut self, grads: &TeacherGrads, opt: &mut AdamState, mode: CheckMode) -> Result<()> {
        let grad_list = grads.tensor_list();
        let mut params = Vec::new();
        for net in self.all_nets_mut() {
            params.extend(param_tensors_mut(net));
        }
        adam_step(&mut params, &grad_list, opt, mode)
    }
}

/// The trained models one generation run needs.
pub struct TeacherSet {
    pub layout: DenoiserNet,
    pub multiview: DenoiserNet,
    pub critic: CriticNet,
}

impl TeacherSet {
    /// Loads `layout.wts`, `multiview.wts`, and `critic.wts` from a
    /// checkpoint directory.
    pub fn load(dir: &std::path::Path) -> Result<TeacherSet> {
        let layout = load_denoiser(&dir.join("layout.wts"))?;
        if layout.role != Role::Layout {
            return Err(Error::Format("layout.wts does not hold a layout teacher".into()));
        }
        let multiview = load_denoiser(&dir.join("multiview.wts"))?;
        if multiview.role != Role::Multiview {
            return Err(Error::Format("multiview.wts does not hold a multi-view teacher".into()));
        }
        let critic = load_critic(&dir.join("critic.wts"))?;
        Ok(TeacherSet {
            layout,
            multiview,
            critic,
        })
    }

    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_denoiser(&dir.join("layout.wts"), &self.layout)?;
        save_denoiser(&dir.join("multiview.wts"), &self.multiview)?;
        save_critic(&dir.join("critic.wts"), &self.critic)?;
        Ok(())
    }

    pub fn checksum(&self) -> u64 {
        self.layout
            .param_checksum()
            .wrapping_mul(31)
            .wrapping_add(self.multiview.param_checksum())
            .wrapping_mul(31)
            .wrapping_add(self.critic.param_checksum())
    }
}

/// Conditioning inputs in trainable form.
pub enum CondInput<'a> {
    Grounded {
        prompt: &'a ScenePrompt,
        camera: Option<[f64; CAMERA_DIM]>,
    },
    ViewRef {
        ref_image: &'a Tensor,
        camera: [f64; CAMERA_DIM],
    },
}

pub struct TeacherCache {
    backbone: ForwardCache,
    proj: ForwardCache,
    mlp_caches: Vec<ForwardCache>,
    ref_cache: Option<ForwardCache>,
}

pub enum CondGrads {
    Grounded {
        caption: ParamGrads,
        class: ParamGrads,
        color: ParamGrads,
        mlp: ParamGrads,
        proj: ParamGrads,
    },
    ViewRef {
        ref_conv: ParamGrads,
        proj: ParamGrads,
    },
}

pub struct TeacherGrads {
    pub backbone: ParamGrads,
    pub cond: CondGrads,
}

impl TeacherGrads {
    /// Flat view aligned with the canonical parameter order.
    fn tensor_list(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.backbone.tensors().iter().collect();
        match &self.cond {
            CondGrads::Grounded {
                caption,
                class,
                color,
                mlp,
                proj,
            } => {
                for g in [caption, class, color, mlp, proj] {
                    out.extend(g.tensors().iter());
                }
            }
            CondGrads::ViewRef { ref_conv, proj } => {
                for g in [ref_conv, proj] {
                    out.extend(g.tensors().iter());
                }
            }
        }
        out
    }
}

impl GradAccum for TeacherGrads {
    fn add(&mut self, other: &Self) {
        self.backbone.add(&other.backbone);
        match (&mut self.cond, &other.cond) {
            (
                CondGrads::Grounded {
                    caption,
                    class,
                    color,
                    mlp,
                    proj,
                },
                CondGrads::Grounded {
                    caption: oc,
                    class: ocl,
                    color: oco,
                    mlp: om,
                    proj: op,
                },
            ) => {
                caption.add(oc);
                class.add(ocl);
                color.add(oco);
                mlp.add(om);
                proj.add(op);
            }
            (
                CondGrads::ViewRef { ref_conv, proj },
                CondGrads::ViewRef {
                    ref_conv: or,
                    proj: op,
                },
            ) => {
                ref_conv.add(or);
                proj.add(op);
            }
            _ => panic!("mismatched gradient containers"),
        }
    }
}

// ---------------------------------------------------------------------------
// Trainable wrappers for the diffusion loop.

/// Layout teacher over layout dataset records.
pub struct LayoutModel(pub DenoiserNet);

impl NoiseModel for LayoutModel {
    type Example = LayoutRecord;
    type Cache = (TeacherCache, ScenePrompt);
    type Grads = TeacherGrads;

    fn clean_image(ex: &LayoutRecord) -> &Tensor {
        &ex.image
    }

    fn predict_train(&self, x_t: &Tensor, t: usize, ex: &LayoutRecord) -> (Tensor, Self::Cache) {
        let prompt = ex.prompt();
        let (pred, cache) = self
            .0
            .predict_cached(
                x_t,
                t,
                &CondInput::Grounded {
                    prompt: &prompt,
                    camera: None,
                },
            )
            .expect("layout forward");
        (pred, (cache, prompt))
    }

    fn zero_grads(&self) -> TeacherGrads {
        self.0.zero_grads()
    }

    fn backward(&self, cache: Self::Cache, _ex: &LayoutRecord, grad_pred: &Tensor, grads: &mut TeacherGrads) {
        let (cache, prompt) = cache;
        self.0
            .backward_cached(
                cache,
                &CondInput::Grounded {
                    prompt: &prompt,
                    camera: None,
                },
                grad_pred,
                grads,
            )
            .expect("layout backward");
    }

    fn new_optimizer(&self, lr: f64) -> AdamState {
        self.0.new_optimizer(lr)
    }

    fn apply_step(&mut self, grads: &TeacherGrads, opt: &mut AdamState, mode: CheckMode) -> Result<()> {
        self.0.apply_step(grads, opt, mode)
    }
}

/// Multi-view teacher over multi-view dataset records.
pub struct MultiviewModel(pub DenoiserNet);

impl MultiviewModel {
    fn cond_of(ex: &MvRecord) -> [f64; CAMERA_DIM] {
        let reference = Camera::front(ex.radius, crate::render::DEFAULT_FOV_DEG);
        camera_encoding(&ex.target_camera(), &reference)
    }
}

impl NoiseModel for MultiviewModel {
    type Example = MvRecord;
    type Cache = TeacherCache;
    type Grads = TeacherGrads;

    fn clean_image(ex: &MvRecord) -> &Tensor {
        &ex.target_image
    }

    fn predict_train(&self, x_t: &Tensor, t: usize, ex: &MvRecord) -> (Tensor, TeacherCache) {
        self.0
            .predict_cached(
                x_t,
                t,
                &CondInput::ViewRef {
                    ref_image: &ex.ref_image,
                    camera: Self::cond_of(ex),
                },
            )
            .expect("mv forward")
    }

    fn zero_grads(&self) -> TeacherGrads {
        self.0.zero_grads()
    }

    fn backward(&self, cache: TeacherCache, ex: &MvRecord, grad_pred: &Tensor, grads: &mut TeacherGrads) {
        self.0
            .backward_cached(
                cache,
                &CondInput::ViewRef {
                    ref_image: &ex.ref_image,
                    camera: Self::cond_of(ex),
                },
                grad_pred,
                grads,
            )
            .expect("mv backward");
    }

    fn new_optimizer(&self, lr: f64) -> AdamState {
        self.0.new_optimizer(lr)
    }

    fn apply_step(&mut self, grads: &TeacherGrads, opt: &mut AdamState, mode: CheckMode) -> Result<()> {
        self.0.apply_step(grads, opt, mode)
    }
}
