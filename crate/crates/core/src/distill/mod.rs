//! Score distillation: the three gradient operators, the online
//! low-rank fine-tuning chain, and the end-to-end generation loop.
//!
//! All three operators share one pattern: render the scene from a
//! camera, noise the render, ask a frozen denoiser for its noise
//! estimate, and push the weighted residual back through the renderer
//! onto the voxel grids. No gradient ever flows through a denoiser
//! into its weights; the residual is treated as a constant pixel
//! gradient.
//!
//! The unified operator queries the layout teacher, the multi-view
//! teacher, and an online fine-tuned copy of the layout teacher on a
//! single shared noised render; its residual is
//! `(eps_layout + eps_mv) - 2 * eps_cola`, in exactly that
//! association. The injected noise cancels analytically and never
//! appears in it.

mod lora;

pub use lora::{ColaChain, LoraAdapter};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{ddpm_sample, make_schedule, q_sample, DiffusionSchedule, WeightMode};
use crate::numcore::{adam_step, AdamState, CheckMode, Rng, Tensor};
use crate::render::{
    render, render_with_grad, save_scene, write_ppm, Camera, Image, VoxelScene,
    DEFAULT_CAMERA_RADIUS, DEFAULT_FOV_DEG,
};
use crate::teachers::{DenoiserNet, TeacherSet};
use crate::world::ScenePrompt;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Denoiser access traits; tests inject oracles through these.

pub trait LayoutDenoiser: Sync {
    fn predict_layout(&self, x_t: &Tensor, t: usize, prompt: &ScenePrompt) -> Tensor;
}

pub trait MultiviewDenoiser: Sync {
    fn predict_mv(
        &self,
        x_t: &Tensor,
        t: usize,
        ref_image: &Tensor,
        camera: &Camera,
        reference_camera: &Camera,
    ) -> Tensor;
}

pub trait ColaDenoiser: Sync {
    fn predict_cola(
        &self,
        x_t: &Tensor,
        t: usize,
        prompt: &ScenePrompt,
        camera: &Camera,
        reference_camera: &Camera,
    ) -> Tensor;
}

impl LayoutDenoiser for DenoiserNet {
    fn predict_layout(&self, x_t: &Tensor, t: usize, prompt: &ScenePrompt) -> Tensor {
        self.layout_denoise(x_t, t, prompt).expect("layout prediction")
    }
}

impl MultiviewDenoiser for DenoiserNet {
    fn predict_mv(
        &self,
        x_t: &Tensor,
        t: usize,
        ref_image: &Tensor,
        camera: &Camera,
        reference_camera: &Camera,
    ) -> Tensor {
        self.mv_denoise(x_t, t, ref_image, camera, reference_camera)
            .expect("multiview prediction")
    }
}

impl ColaDenoiser for DenoiserNet {
    fn predict_cola(
        &self,
        x_t: &Tensor,
        t: usize,
        prompt: &ScenePrompt,
        camera: &Camera,
        reference_camera: &Camera,
    ) -> Tensor {
        self.cola_denoise(x_t, t, prompt, camera, reference_camera)
            .expect("fine-tuned prediction")
    }
}

// ---------------------------------------------------------------------------
// Configuration.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoLsds,
    NoMvsds,
    NoLmsd,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Full,
        AblationVariant::NoLsds,
        AblationVariant::NoMvsds,
        AblationVariant::NoLmsd,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoLsds => "no_lsds",
            AblationVariant::NoMvsds => "no_mvsds",
            AblationVariant::NoLmsd => "no_lmsd",
        }
    }

    pub fn parse(s: &str) -> Option<AblationVariant> {
        AblationVariant::ALL.into_iter().find(|v| v.name() == s)
    }
}

/// Trade-off weights, loop schedule, and every numeric default of one
/// generation run. Serialized alongside every run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    /// Weight of the layout term.
    pub alpha: f64,
    /// Weight of the multi-view term.
    pub beta: f64,
    /// Weight of the unified term.
    pub lambda: f64,
    pub total_steps: usize,
    pub grid_dim: usize,
    pub render_res: usize,
    pub samples_per_ray: usize,
    pub camera_radius: f64,
    pub fov_deg: f64,
    pub elevation_range: (f64, f64),
    /// Timestep draws stay in [t_lo_frac * T, t_hi_frac * T].
    pub t_lo_frac: f64,
    pub t_hi_frac: f64,
    pub lr_scene: f64,
    pub lr_cola: f64,
    pub cola_steps_per_step: usize,
    pub merge_interval: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    /// Raise density inside each box's front-camera frustum at
    /// initialization. Off by default and forced off in ablations.
    pub box_seeding: bool,
    pub seed_boost: f64,
    /// Resample the prior image every step (experimental; the default
    /// samples it once and freezes it).
    pub resample_prior: bool,
    pub cola_enabled: bool,
    pub density_scale: f64,
    pub init_density_raw: f64,
    pub init_color_raw: f64,
    pub schedule_t: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub weight_mode: WeightMode,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> GenConfig {
        GenConfig {
            alpha: 1.0,
            beta: 1.0,
            lambda: 0.5,
            total_steps: 2000,
            grid_dim: 32,
            render_res: 32,
            samples_per_ray: 48,
            camera_radius: DEFAULT_CAMERA_RADIUS,
            fov_deg: DEFAULT_FOV_DEG,
            elevation_range: (-10.0, 40.0),
            t_lo_frac: 0.02,
            t_hi_frac: 0.98,
            lr_scene: 0.05,
            lr_cola: 1e-3,
            cola_steps_per_step: 1,
            merge_interval: 200,
            lora_rank: 4,
            lora_scale: 1.0,
            box_seeding: false,
            seed_boost: 1.5,
            resample_prior: false,
            cola_enabled: true,
            density_scale: 10.0,
            init_density_raw: -2.0,
            init_color_raw: 0.0,
            schedule_t: 64,
            beta_min: 1e-4,
            beta_max: 0.02,
            weight_mode: WeightMode::OneMinusAlphaBar,
            seed: 3,
        }
    }
}

impl GenConfig {
    pub fn apply_ablation(&mut self, variant: AblationVariant) {
        match variant {
            AblationVariant::Full => {}
            AblationVariant::NoLsds => {
                self.alpha = 0.0;
                self.box_seeding = false;
            }
            AblationVariant::NoMvsds => {
                self.beta = 0.0;
            }
            AblationVariant::NoLmsd => {
                self.lambda = 0.0;
                self.cola_enabled = false;
            }
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.schedule_t, self.beta_min, self.beta_max, self.weight_mode)
    }

    pub fn front_camera(&self) -> Camera {
        Camera::front(self.camera_radius, self.fov_deg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.lambda < 0.0 {
            return Err(Error::invalid("trade-off weights must be non-negative"));
        }
        if self.total_steps < 1 {
            return Err(Error::invalid("total_steps must be at least 1"));
        }
        if self.lambda > 0.0 && !self.cola_enabled {
            return Err(Error::invalid(
                "the unified term needs the fine-tuning chain (lambda > 0 with cola disabled)",
            ));
        }
        if !(self.t_lo_frac >= 0.0 && self.t_lo_frac < self.t_hi_frac && self.t_hi_frac <= 1.0) {
            return Err(Error::invalid("bad timestep range fractions"));
        }
        Ok(())
    }

    /// Inclusive timestep draw bounds.
    pub fn t_bounds(&self) -> (usize, usize) {
        let lo = ((self.t_lo_frac * self.schedule_t as f64).ceil() as usize).max(1);
        let hi = ((self.t_hi_frac * self.schedule_t as f64).floor() as usize).min(self.schedule_t);
        (lo, hi.max(lo))
    }
}

// ---------------------------------------------------------------------------
// The gradient operators.

/// The shared chain-rule step: pushes `w_t * residual` through the
/// renderer's analytic adjoint onto the raw grids. The residual enters
/// as a constant; nothing differentiates the denoiser that produced it.
pub fn sds_residual_to_scene_grad(
    scene: &VoxelScene,
    camera: &Camera,
    residual: &Tensor,
    res: usize,
    samples_per_ray: usize,
    w_t: f64,
) -> Result<(Tensor, Tensor)> {
    let mut grad_pixels = residual.clone();
    grad_pixels.scale(w_t);
    render_with_grad(scene, camera, res, samples_per_ray, &grad_pixels)
}

/// One (t, eps) draw for a distillation step.
pub struct StepDraw {
    pub t: usize,
    pub eps: Tensor,
}

pub fn draw_step(rng: &mut Rng, cfg: &GenConfig) -> StepDraw {
    let (lo, hi) = cfg.t_bounds();
    StepDraw {
        t: rng.int_in(lo, hi),
        eps: rng.normal_tensor(&[cfg.render_res, cfg.render_res, 3]),
    }
}

/// Gradients plus the logged magnitude `w_t * mean(residual^2)`.
pub type OpResult = ((Tensor, Tensor), f64);

fn residual_to_grads(
    scene: &VoxelScene,
    camera: &Camera,
    residual: &Tensor,
    cfg: &GenConfig,
    w_t: f64,
) -> Result<OpResult> {
    let mag = w_t * residual.sum_squares() / residual.len() as f64;
    let grads = sds_residual_to_scene_grad(
        scene,
        camera,
        residual,
        cfg.render_res,
        cfg.samples_per_ray,
        w_t,
    )?;
    Ok((grads, mag))
}

/// Layout term at an injected draw: residual
/// `eps_layout(x_t, t, (y, l)) - eps`.
pub fn l_sds_step_at(
    scene: &VoxelScene,
    teacher: &dyn LayoutDenoiser,
    prompt: &ScenePrompt,
    schedule: &DiffusionSchedule,
    camera: &Camera,
    cfg: &GenConfig,
    t: usize,
    eps: &Tensor,
) -> Result<OpResult> {
    let x = render(scene, camera, cfg.render_res, cfg.samples_per_ray);
    let x_t = q_sample(&x.pixels, t, eps, schedule)?;
    let pred = teacher.predict_layout(&x_t, t, prompt);
    let residual = pred.sub(eps);
    residual_to_grads(scene, camera, &residual, cfg, schedule.weight(t))
}

pub fn l_sds_step(
    scene: &VoxelScene,
    teacher: &dyn LayoutDenoiser,
    prompt: &ScenePrompt,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
    camera: &Camera,
    cfg: &GenConfig,
) -> Result<OpResult> {
    let draw = draw_step(rng, cfg);
    l_sds_step_at(scene, teacher, prompt, schedule, camera, cfg, draw.t, &draw.eps)
}

/// Multi-view term at an injected draw: residual
/// `eps_mv(x_t; prior, t, c) - eps`.
#[allow(clippy::too_many_arguments)]
pub fn mv_sds_step_at(
    scene: &VoxelScene,
    teacher: &dyn MultiviewDenoiser,
    prior: &Image,
    schedule: &DiffusionSchedule,
    camera: &Camera,
    cfg: &GenConfig,
    t: usize,
    eps: &Tensor,
) -> Result<OpResult> {
    let x = render(scene, camera, cfg.render_res, cfg.samples_per_ray);
    let x_t = q_sample(&x.pixels, t, eps, schedule)?;
    let pred = teacher.predict_mv(&x_t, t, &prior.pixels, camera, &cfg.front_camera());
    let residual = pred.sub(eps);
    residual_to_grads(scene, camera, &residual, cfg, schedule.weight(t))
}

pub fn mv_sds_step(
    scene: &VoxelScene,
    teacher: &dyn MultiviewDenoiser,
    prior: &Image,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
    camera: &Camera,
    cfg: &GenConfig,
) -> Result<OpResult> {
    let draw = draw_step(rng, cfg);
    mv_sds_step_at(scene, teacher, prior, schedule, camera, cfg, draw.t, &draw.eps)
}

/// Unified term at an injected draw. One shared (x, t, eps, x_t) feeds
/// all three denoisers; the residual is
/// `(eps_layout + eps_mv) - 2 * eps_cola` and the injected noise
/// cancels out of it analytically.
#[allow(clippy::too_many_arguments)]
pub fn lmsd_step_at(
    scene: &VoxelScene,
    layout: &dyn LayoutDenoiser,
    multiview: &dyn MultiviewDenoiser,
    cola: &dyn ColaDenoiser,
    prompt: &ScenePrompt,
    prior: &Image,
    schedule: &DiffusionSchedule,
    camera: &Camera,
    cfg: &GenConfig,
    t: usize,
    eps: &Tensor,
) -> Result<OpResult> {
    let x = render(scene, camera, cfg.render_res, cfg.samples_per_ray);
    let x_t = q_sample(&x.pixels, t, eps, schedule)?;
    let front = cfg.front_camera();
    let e_layout = layout.predict_layout(&x_t, t, prompt);
    let e_mv = multiview.predict_mv(&x_t, t, &prior.pixels, camera, &front);
    let e_cola = cola.predict_cola(&x_t, t, prompt, camera, &front);
    let mut residual = e_layout;
    residual.add_scaled(&e_mv, 1.0);
    residual.add_scaled(&e_cola, -2.0);
    residual_to_grads(scene, camera, &residual, cfg, schedule.weight(t))
}

#[allow(clippy::too_many_arguments)]
pub fn lmsd_step(
    scene: &VoxelScene,
    layout: &dyn LayoutDenoiser,
    multiview: &dyn MultiviewDenoiser,
    cola: &dyn ColaDenoiser,
    prompt: &ScenePrompt,
    prior: &Image,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
    camera: &Camera,
    cfg: &GenConfig,
) -> Result<OpResult> {
    let draw = draw_step(rng, cfg);
    lmsd_step_at(
        scene, layout, multiview, cola, prompt, prior, schedule, camera, cfg, draw.t, &draw.eps,
    )
}

// ---------------------------------------------------------------------------
// Generation.

/// Everything a generation run owns.
pub struct GenState {
    pub scene: VoxelScene,
    pub prior: Image,
    pub cola: Option<ColaChain>,
    pub opt: AdamState,
    pub step: usize,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub step: usize,
    pub lsds: f64,
    pub mvsds: f64,
    pub lmsd: f64,
    pub cola_loss: f64,
}

pub struct GenOutcome {
    pub scene: VoxelScene,
    pub prior: Image,
    pub trace: Vec<TraceRow>,
}

/// Turntable export: azimuth sweep at this elevation.
pub const TURNTABLE_FRAMES: usize = 12;
pub const TURNTABLE_ELEVATION_DEG: f64 = 15.0;

fn init_scene(prompt: &ScenePrompt, cfg: &GenConfig) -> VoxelScene {
    let mut scene = VoxelScene::new(
        cfg.grid_dim,
        cfg.init_density_raw,
        cfg.init_color_raw,
        cfg.density_scale,
    );
    if cfg.box_seeding {
        let cam = cfg.front_camera();
        let (right, up, forward) = cam.basis();
        let pos = cam.position();
        let tan_f = (cfg.fov_deg.to_radians() / 2.0).tan();
        let d = cfg.grid_dim;
        for ix in 0..d {
            for iy in 0..d {
                for iz in 0..d {
                    let p = [
                        scene.center_coord(ix),
                        scene.center_coord(iy),
                        scene.center_coord(iz),
                    ];
                    let q = [p[0] - pos[0], p[1] - pos[1], p[2] - pos[2]];
                    let cx = q[0] * right[0] + q[1] * right[1] + q[2] * right[2];
                    let cy = q[0] * up[0] + q[1] * up[1] + q[2] * up[2];
                    let cz = q[0] * forward[0] + q[1] * forward[1] + q[2] * forward[2];
                    let x01 = (cx / (cz * tan_f) + 1.0) / 2.0;
                    let y01 = (1.0 - cy / (cz * tan_f)) / 2.0;
                    let inside = prompt.entities.iter().any(|e| {
                        x01 >= e.box2d.x0 && x01 <= e.box2d.x1 && y01 >= e.box2d.y0 && y01 <= e.box2d.y1
                    });
                    if inside {
                        let idx = scene.voxel_index(ix, iy, iz);
                        scene.density_raw.data_mut()[idx] += cfg.seed_boost;
                    }
                }
            }
        }
    }
    scene
}

fn sample_prior(
    teachers: &TeacherSet,
    prompt: &ScenePrompt,
    schedule: &DiffusionSchedule,
    cfg: &GenConfig,
    rng: &mut Rng,
) -> Image {
    let pixels = ddpm_sample(
        |x_t, t| teachers.layout.predict_layout(x_t, t, prompt),
        schedule,
        rng,
        &[cfg.render_res, cfg.render_res, 3],
    );
    Image { pixels }
}

fn sample_camera(rng: &mut Rng, cfg: &GenConfig) -> Camera {
    Camera {
        azimuth_deg: rng.uniform_in(0.0, 360.0),
        elevation_deg: rng.uniform_in(cfg.elevation_range.0, cfg.elevation_range.1),
        radius: cfg.camera_radius,
        fov_deg: cfg.fov_deg,
    }
}

/// One fine-tuning step: render the current scene from a fresh camera
/// (detached from the scene), noise it, and take one optimizer step on
/// the adapter parameters only. Returns the scalar loss.
pub fn cola_step(
    scene: &VoxelScene,
    chain: &mut ColaChain,
    prompt: &ScenePrompt,
    schedule: &DiffusionSchedule,
    cfg: &GenConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let camera = sample_camera(rng, cfg);
    let x = render(scene, &camera, cfg.render_res, cfg.samples_per_ray);
    let draw = draw_step(rng, cfg);
    let x_t = q_sample(&x.pixels, draw.t, &draw.eps, schedule)?;
    chain.adapter_step(&x_t, draw.t, &draw.eps, prompt, &camera, &cfg.front_camera())
}

/// The Fig.-2-shaped loop: initialize the scene, sample the 2D prior
/// once, then per step accumulate
/// `alpha * layout + beta * multiview + lambda * unified` gradients,
/// step the scene, run one adapter step, and merge the adapter every
/// `merge_interval` steps. Artifacts go to `out_dir` when given.
pub fn generate(
    prompt: &ScenePrompt,
    cfg: &GenConfig,
    teachers: &TeacherSet,
    out_dir: Option<&Path>,
) -> Result<GenOutcome> {
    cfg.validate()?;
    prompt.validate()?;
    if teachers.layout.t_steps != cfg.schedule_t || teachers.multiview.t_steps != cfg.schedule_t {
        return Err(Error::invalid(format!(
            "teachers were trained for T={} / {} but the config wants T={}",
            teachers.layout.t_steps, teachers.multiview.t_steps, cfg.schedule_t
        )));
    }
    if let Some(res) = teachers.multiview.ref_input_res() {
        if res != cfg.render_res {
            return Err(Error::invalid(format!(
                "multi-view teacher expects {res}x{res} renders but the config wants {}",
                cfg.render_res
            )));
        }
    }
    let schedule = cfg.schedule()?;
    let mut rng = Rng::new(cfg.seed);

    let mut state = GenState {
        scene: init_scene(prompt, cfg),
        prior: sample_prior(teachers, prompt, &schedule, cfg, &mut rng),
        cola: if cfg.cola_enabled {
            Some(ColaChain::new(
                &teachers.layout,
                cfg.lora_rank,
                cfg.lora_scale,
                cfg.merge_interval,
                cfg.lr_cola,
                &mut rng,
            )?)
        } else {
            None
        },
        opt: AdamState::new(&[&Tensor::zeros(&[0]); 0], cfg.lr_scene),
        step: 0,
        trace: Vec::with_capacity(cfg.total_steps),
    };
    state.opt = AdamState::new(&[&state.scene.density_raw, &state.scene.color_raw], cfg.lr_scene);

    for step in 0..cfg.total_steps {
        if cfg.resample_prior {
            state.prior = sample_prior(teachers, prompt, &schedule, cfg, &mut rng);
        }
        let camera = sample_camera(&mut rng, cfg);
        let mut gd = Tensor::zeros(state.scene.density_raw.shape());
        let mut gc = Tensor::zeros(state.scene.color_raw.shape());
        let mut row = TraceRow {
            step,
            lsds: 0.0,
            mvsds: 0.0,
            lmsd: 0.0,
            cola_loss: 0.0,
        };

        if cfg.alpha > 0.0 {
            let ((d, c), mag) = l_sds_step(
                &state.scene,
                &teachers.layout,
                prompt,
                &schedule,
                &mut rng,
                &camera,
                cfg,
            )?;
            gd.add_scaled(&d, cfg.alpha);
            gc.add_scaled(&c, cfg.alpha);
            row.lsds = mag;
        }
        if cfg.beta > 0.0 {
            let ((d, c), mag) = mv_sds_step(
                &state.scene,
                &teachers.multiview,
                &state.prior,
                &schedule,
                &mut rng,
                &camera,
                cfg,
            )?;
            gd.add_scaled(&d, cfg.beta);
            gc.add_scaled(&c, cfg.beta);
            row.mvsds = mag;
        }
        if cfg.lambda > 0.0 {
            let chain = state.cola.as_ref().expect("validated config");
            let adapted = chain.adapted();
            let ((d, c), mag) = lmsd_step(
                &state.scene,
                &teachers.layout,
                &teachers.multiview,
                &adapted,
                prompt,
                &state.prior,
                &schedule,
                &mut rng,
                &camera,
                cfg,
            )?;
            gd.add_scaled(&d, cfg.lambda);
            gc.add_scaled(&c, cfg.lambda);
            row.lmsd = mag;
        }

        adam_step(
            &mut [&mut state.scene.density_raw, &mut state.scene.color_raw],
            &[&gd, &gc],
            &mut state.opt,
            CheckMode::Fast,
        )?;

        if let Some(chain) = state.cola.as_mut() {
            for _ in 0..cfg.cola_steps_per_step {
                row.cola_loss = cola_step(&state.scene, chain, prompt, &schedule, cfg, &mut rng)?;
            }
            if (step + 1) % cfg.merge_interval == 0 {
                chain.merge(&mut rng);
            }
        }
        state.trace.push(row);
        state.step = step + 1;
    }

    if let Some(dir) = out_dir {
        write_run_dir(dir, cfg, &state)?;
    }
    Ok(GenOutcome {
        scene: state.scene,
        prior: state.prior,
        trace: state.trace,
    })
}

/// Atomic file write: temp name in the same directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_run_dir(dir: &Path, cfg: &GenConfig, state: &GenState) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let config_json = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::InvalidData(format!("config serialization: {e}")))?;
    write_atomic(&dir.join("config.json"), config_json.as_bytes())?;

    // Scene and prior through temp-and-rename as well.
    let tmp = dir.join("scene.cvox.tmp");
    save_scene(&tmp, &state.scene)?;
    std::fs::rename(&tmp, dir.join("scene.cvox"))?;
    let tmp = dir.join("prior.ppm.tmp");
    write_ppm(&tmp, &state.prior)?;
    std::fs::rename(&tmp, dir.join("prior.ppm"))?;

    let turret = dir.join("turntable");
    std::fs::create_dir_all(&turret)?;
    for i in 0..TURNTABLE_FRAMES {
        let cam = Camera {
            azimuth_deg: 360.0 * i as f64 / TURNTABLE_FRAMES as f64,
            elevation_deg: TURNTABLE_ELEVATION_DEG,
            radius: cfg.camera_radius,
            fov_deg: cfg.fov_deg,
        };
        let frame = render(&state.scene, &cam, cfg.render_res, cfg.samples_per_ray);
        let tmp = turret.join(format!("frame_{i:03}.ppm.tmp"));
        write_ppm(&tmp, &frame)?;
        std::fs::rename(&tmp, turret.join(format!("frame_{i:03}.ppm")))?;
    }

    let mut csv = String::from("step,lsds,mvsds,lmsd,cola\n");
    for row in &state.trace {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.step, row.lsds, row.mvsds, row.lmsd, row.cola_loss
        ));
    }
    write_atomic(&dir.join("trace.csv"), csv.as_bytes())?;
    Ok(())
}
