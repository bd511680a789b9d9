//! Quantitative evaluation of generated scenes: layout fidelity,
//! object count, a three-view critic score, and cross-view class
//! consistency, plus the four-config ablation runner.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::{generate, AblationVariant, GenConfig};
use crate::render::{render, render_alpha, Camera, VoxelScene};
use crate::teachers::{slot_order, CriticNet, SlotProbs, TeacherSet, CRITIC_SLOTS};
use crate::world::{BoundingBox2D, ScenePrompt};
use crate::{Error, Result};

pub const DEFAULT_TAU_ALPHA: f64 = 0.5;
pub const DEFAULT_TAU_SIGMA: f64 = 5.0;
/// Components smaller than this many voxels are speckle, not objects.
pub const SPECKLE_MIN_VOXELS: usize = 8;
/// Front-view alpha renders for the layout metric run at this
/// resolution regardless of the generation resolution.
pub const EVAL_ALPHA_RES: usize = 64;
pub const EVAL_SAMPLES_PER_RAY: usize = 48;
/// The three scoring views: front, left-front, right-front.
pub const SCORE_VIEWS_DEG: [(f64, f64); 3] = [(0.0, 15.0), (-30.0, 15.0), (30.0, 15.0)];
pub const CONSISTENCY_VIEWS: usize = 8;
pub const CONSISTENCY_ELEVATION_DEG: f64 = 15.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub layout_iou: f64,
    pub per_entity_iou: Vec<f64>,
    pub count_predicted: usize,
    pub count_expected: usize,
    pub count_ok: bool,
    pub critic_score: f64,
    pub view_consistency: f64,
}

// ---------------------------------------------------------------------------
// Layout IoU.

/// Greedy component-to-box assignment on descending IoU with
/// deterministic tie-breaking (entity index, then component index).
/// Returns per-entity IoU, 0 for unmatched entities; no component is
/// used twice.
pub fn greedy_match(components: &[BoundingBox2D], entities: &[BoundingBox2D]) -> Vec<f64> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (ei, e) in entities.iter().enumerate() {
        for (ci, c) in components.iter().enumerate() {
            pairs.push((e.iou(c), ei, ci));
        }
    }
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut entity_iou = vec![0.0; entities.len()];
    let mut entity_used = vec![false; entities.len()];
    let mut comp_used = vec![false; components.len()];
    for (iou, ei, ci) in pairs {
        if iou <= 0.0 || entity_used[ei] || comp_used[ci] {
            continue;
        }
        entity_used[ei] = true;
        comp_used[ci] = true;
        entity_iou[ei] = iou;
    }
    entity_iou
}

/// Bounding boxes (normalized coordinates) of the 4-connected
/// components of `mask`.
fn component_boxes(mask: &[bool], res: usize) -> Vec<BoundingBox2D> {
    let mut seen = vec![false; mask.len()];
    let mut boxes = Vec::new();
    for start in 0..mask.len() {
        if seen[start] || !mask[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let (mut min_x, mut max_x, mut min_y, mut max_y) = (res, 0, res, 0);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / res, i % res);
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
            let mut push = |yy: isize, xx: isize| {
                if yy < 0 || xx < 0 || yy as usize >= res || xx as usize >= res {
                    return;
                }
                let j = yy as usize * res + xx as usize;
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            push(y as isize + 1, x as isize);
            push(y as isize - 1, x as isize);
            push(y as isize, x as isize + 1);
            push(y as isize, x as isize - 1);
        }
        boxes.push(BoundingBox2D {
            x0: min_x as f64 / res as f64,
            y0: min_y as f64 / res as f64,
            x1: (max_x + 1) as f64 / res as f64,
            y1: (max_y + 1) as f64 / res as f64,
        });
    }
    boxes
}

/// Mean IoU between the front-view silhouette components and the
/// prompt boxes; unmatched entities score 0.
pub fn layout_iou(
    scene: &VoxelScene,
    prompt: &ScenePrompt,
    camera_front: &Camera,
    tau_alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    if prompt.entities.is_empty() {
        return Err(Error::invalid("layout metric wants at least one entity"));
    }
    let res = EVAL_ALPHA_RES;
    let alpha = render_alpha(scene, camera_front, res, EVAL_SAMPLES_PER_RAY);
    let mask: Vec<bool> = alpha.data().iter().map(|&a| a > tau_alpha).collect();
    let comps = component_boxes(&mask, res);
    let entity_boxes: Vec<BoundingBox2D> = prompt.entities.iter().map(|e| e.box2d).collect();
    let per_entity = greedy_match(&comps, &entity_boxes);
    let mean = per_entity.iter().sum::<f64>() / per_entity.len() as f64;
    Ok((mean, per_entity))
}

// ---------------------------------------------------------------------------
// Object count.

/// Number of 6-connected components of `sigma > tau_sigma` with at
/// least [`SPECKLE_MIN_VOXELS`] voxels.
pub fn count_objects(scene: &VoxelScene, tau_sigma: f64) -> usize {
    let d = scene.dim;
    let sigma = scene.sigma_grid();
    let mut seen = vec![false; d * d * d];
    let mut count = 0;
    for start in 0..sigma.len() {
        if seen[start] || sigma[start] <= tau_sigma {
            continue;
        }
        let mut volume = 0usize;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            volume += 1;
            let (ix, iy, iz) = (i / (d * d), (i / d) % d, i % d);
            let mut push = |jx: isize, jy: isize, jz: isize| {
                if jx < 0 || jy < 0 || jz < 0 {
                    return;
                }
                let (jx, jy, jz) = (jx as usize, jy as usize, jz as usize);
                if jx >= d || jy >= d || jz >= d {
                    return;
                }
                let j = (jx * d + jy) * d + jz;
                if !seen[j] && sigma[j] > tau_sigma {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            let (x, y, z) = (ix as isize, iy as isize, iz as isize);
            push(x + 1, y, z);
            push(x - 1, y, z);
            push(x, y + 1, z);
            push(x, y - 1, z);
            push(x, y, z + 1);
            push(x, y, z - 1);
        }
        if volume >= SPECKLE_MIN_VOXELS {
            count += 1;
        }
    }
    count
}

// ---------------------------------------------------------------------------
// Critic score.

/// Per-entity match probability from one view's slot predictions:
/// entities sorted left to right pair with slots in order, and each
/// contributes P(class) * P(color) * P(present).
pub fn prompt_match_from_probs(probs: &[SlotProbs; CRITIC_SLOTS], prompt: &ScenePrompt) -> f64 {
    let order = slot_order(&prompt.entities);
    let mut total = 0.0;
    for (slot, &ei) in order.iter().enumerate() {
        let e = &prompt.entities[ei];
        let p = &probs[slot];
        total += p.class[e.class_id as usize] * p.color[e.color_id as usize] * p.presence;
    }
    total / prompt.entities.len() as f64
}

fn view_camera(azimuth_deg: f64, elevation_deg: f64, scene_cam: &Camera) -> Camera {
    Camera {
        azimuth_deg,
        elevation_deg,
        radius: scene_cam.radius,
        fov_deg: scene_cam.fov_deg,
    }
}

/// Mean prompt-match probability over the front, left-front, and
/// right-front views.
pub fn critic_score(
    scene: &VoxelScene,
    prompt: &ScenePrompt,
    critic: &CriticNet,
    base_camera: &Camera,
) -> Result<f64> {
    let res = critic.input_res()?;
    let mut total = 0.0;
    for (az, el) in SCORE_VIEWS_DEG {
        let cam = view_camera(az, el, base_camera);
        let img = render(scene, &cam, res, EVAL_SAMPLES_PER_RAY);
        let probs = critic.slot_probs(&img.pixels)?;
        total += prompt_match_from_probs(&probs, prompt);
    }
    Ok(total / SCORE_VIEWS_DEG.len() as f64)
}

/// Consistency from per-view slot predictions: over the slots the
/// critic considers present (mean presence >= 0.5 across views, or
/// all slots when none qualify), the mean frequency of each slot's
/// modal class.
pub fn consistency_from_probs(views: &[[SlotProbs; CRITIC_SLOTS]]) -> f64 {
    let n_views = views.len();
    let mut present: Vec<usize> = (0..CRITIC_SLOTS)
        .filter(|&s| {
            views.iter().map(|v| v[s].presence).sum::<f64>() / n_views as f64 >= 0.5
        })
        .collect();
    if present.is_empty() {
        present = (0..CRITIC_SLOTS).collect();
    }
    let mut total = 0.0;
    for &slot in &present {
        let mut counts = [0usize; crate::world::NUM_CLASSES];
        for v in views {
            let argmax = v[slot]
                .class
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            counts[argmax] += 1;
        }
        total += *counts.iter().max().unwrap() as f64 / n_views as f64;
    }
    total / present.len() as f64
}

/// Renders a fixed azimuth sweep and scores how stable the critic's
/// per-slot class reads are across it.
pub fn view_consistency(scene: &VoxelScene, critic: &CriticNet, base_camera: &Camera) -> Result<f64> {
    let res = critic.input_res()?;
    let mut views = Vec::with_capacity(CONSISTENCY_VIEWS);
    for i in 0..CONSISTENCY_VIEWS {
        let cam = view_camera(
            360.0 * i as f64 / CONSISTENCY_VIEWS as f64,
            CONSISTENCY_ELEVATION_DEG,
            base_camera,
        );
        let img = render(scene, &cam, res, EVAL_SAMPLES_PER_RAY);
        views.push(critic.slot_probs(&img.pixels)?);
    }
    Ok(consistency_from_probs(&views))
}

// ---------------------------------------------------------------------------
// Full report and the ablation runner.

pub fn evaluate_scene(
    scene: &VoxelScene,
    prompt: &ScenePrompt,
    critic: &CriticNet,
    base_camera: &Camera,
) -> Result<MetricsReport> {
    let (iou, per_entity) = layout_iou(scene, prompt, &Camera::front(base_camera.radius, base_camera.fov_deg), DEFAULT_TAU_ALPHA)?;
    let count_predicted = count_objects(scene, DEFAULT_TAU_SIGMA);
    let count_expected = prompt.entities.len();
    Ok(MetricsReport {
        layout_iou: iou,
        per_entity_iou: per_entity,
        count_predicted,
        count_expected,
        count_ok: count_predicted == count_expected,
        critic_score: critic_score(scene, prompt, critic, base_camera)?,
        view_consistency: view_consistency(scene, critic, base_camera)?,
    })
}

/// The built-in evaluation suite: five prompts over one to three
/// objects with well-separated boxes sized like typical projected
/// objects.
pub fn builtin_prompt_suite() -> Vec<(String, ScenePrompt)> {
    let b = |x0, y0, x1, y1| BoundingBox2D::new(x0, y0, x1, y1).unwrap();
    vec![
        (
            "one_red_sphere".to_string(),
            ScenePrompt::from_groups(&[(1, 0, 0)], &[b(0.38, 0.38, 0.62, 0.62)]).unwrap(),
        ),
        (
            "red_blue_spheres".to_string(),
            ScenePrompt::from_groups(
                &[(1, 0, 0), (1, 0, 2)],
                &[b(0.15, 0.40, 0.37, 0.62), b(0.63, 0.40, 0.85, 0.62)],
            )
            .unwrap(),
        ),
        (
            "green_cube_yellow_sphere".to_string(),
            ScenePrompt::from_groups(
                &[(1, 1, 1), (1, 0, 3)],
                &[b(0.16, 0.40, 0.38, 0.62), b(0.62, 0.40, 0.84, 0.62)],
            )
            .unwrap(),
        ),
        (
            "two_blue_donuts".to_string(),
            ScenePrompt::from_groups(
                &[(2, 2, 2)],
                &[b(0.14, 0.39, 0.38, 0.63), b(0.62, 0.39, 0.86, 0.63)],
            )
            .unwrap(),
        ),
        (
            "cube_donut_sphere".to_string(),
            ScenePrompt::from_groups(
                &[(1, 1, 0), (1, 2, 1), (1, 0, 2)],
                &[
                    b(0.06, 0.40, 0.26, 0.60),
                    b(0.40, 0.40, 0.60, 0.60),
                    b(0.74, 0.40, 0.94, 0.60),
                ],
            )
            .unwrap(),
        ),
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub config: String,
    pub prompt_id: String,
    pub seed: u64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantSummary {
    pub config: String,
    pub mean_iou: f64,
    pub count_accuracy: f64,
    pub mean_critic: f64,
    pub mean_consistency: f64,
    /// Mean of the four [0,1] columns.
    pub aggregate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
    pub summaries: Vec<VariantSummary>,
}

impl AblationTable {
    /// Rebuilds the per-config summaries from an arbitrary cell set
    /// (e.g. two partial tables merged).
    pub fn from_cells(cells: Vec<AblationCell>) -> AblationTable {
        let summaries = summarize(&cells);
        AblationTable { cells, summaries }
    }

    pub fn summary_of(&self, variant: AblationVariant) -> &VariantSummary {
        self.summaries
            .iter()
            .find(|s| s.config == variant.name())
            .expect("every variant is summarized")
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("config,prompt_id,seed,iou,count_ok,critic,consistency\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{:.6},{},{:.6},{:.6}\n",
                c.config,
                c.prompt_id,
                c.seed,
                c.report.layout_iou,
                if c.report.count_ok { 1 } else { 0 },
                c.report.critic_score,
                c.report.view_consistency
            ));
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>8} {:>9} {:>8} {:>12} {:>10}\n",
            "config", "iou", "count_acc", "critic", "consistency", "aggregate"
        ));
        for s in &self.summaries {
            out.push_str(&format!(
                "{:<10} {:>8.4} {:>9.4} {:>8.4} {:>12.4} {:>10.4}\n",
                s.config, s.mean_iou, s.count_accuracy, s.mean_critic, s.mean_consistency, s.aggregate
            ));
        }
        out
    }
}

fn summarize(cells: &[AblationCell]) -> Vec<VariantSummary> {
    AblationVariant::ALL
        .iter()
        .map(|v| {
            let rows: Vec<&AblationCell> = cells.iter().filter(|c| c.config == v.name()).collect();
            let n = rows.len().max(1) as f64;
            let mean_iou = rows.iter().map(|c| c.report.layout_iou).sum::<f64>() / n;
            let count_accuracy =
                rows.iter().filter(|c| c.report.count_ok).count() as f64 / n;
            let mean_critic = rows.iter().map(|c| c.report.critic_score).sum::<f64>() / n;
            let mean_consistency =
                rows.iter().map(|c| c.report.view_consistency).sum::<f64>() / n;
            VariantSummary {
                config: v.name().to_string(),
                mean_iou,
                count_accuracy,
                mean_critic,
                mean_consistency,
                aggregate: (mean_iou + count_accuracy + mean_critic + mean_consistency) / 4.0,
            }
        })
        .collect()
}

/// Runs the four-config ablation over (prompt, seed) cells. Cells are
/// independent generation runs executed in parallel and merged in a
/// fixed order, so the table is deterministic given the seeds.
pub fn ablation_report(
    prompts: &[(String, ScenePrompt)],
    base_cfg: &GenConfig,
    teachers: &TeacherSet,
    seeds: &[u64],
    variants: &[AblationVariant],
) -> Result<AblationTable> {
    let mut jobs = Vec::new();
    for variant in variants {
        for (pid, prompt) in prompts {
            for &seed in seeds {
                jobs.push((*variant, pid.clone(), prompt.clone(), seed));
            }
        }
    }
    let cells: Vec<AblationCell> = jobs
        .par_iter()
        .map(|(variant, pid, prompt, seed)| {
            let mut cfg = base_cfg.clone();
            cfg.apply_ablation(*variant);
            cfg.seed = *seed;
            let out = generate(prompt, &cfg, teachers, None)?;
            let report = evaluate_scene(&out.scene, prompt, &teachers.critic, &cfg.front_camera())?;
            Ok(AblationCell {
                config: variant.name().to_string(),
                prompt_id: pid.clone(),
                seed: *seed,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summaries = summarize(&cells);
    Ok(AblationTable { cells, summaries })
}
