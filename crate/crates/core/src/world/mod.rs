//! Procedural multi-object world: prompts over a tiny closed
//! vocabulary, ground-truth scenes of analytic primitives, their
//! voxelizations, and projected 2D box labels.
//!
//! The vocabulary is 3 class words, 4 color words, and 4 count words.
//! Captions encode class/color/count but never position; position
//! information flows only through the per-entity boxes.

mod dataset;

pub use dataset::{
    make_layout_dataset, make_mv_dataset, read_dataset, Dataset, LayoutRecord, MvRecord,
    DS_MAGIC, MV_AZIMUTH_RANGE, MV_ELEVATION_RANGE,
};

use serde::{Deserialize, Serialize};

use crate::numcore::Rng;
use crate::render::{Camera, VoxelScene, DENSITY_RAW_FLOOR};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Vocabulary.

pub const NUM_CLASSES: usize = 3;
pub const NUM_COLORS: usize = 4;
pub const NUM_COUNTS: usize = 4;
/// Token ids: classes 0..3, colors 3..7, counts 7..11.
pub const VOCAB_SIZE: usize = NUM_CLASSES + NUM_COLORS + NUM_COUNTS;
pub const MAX_ENTITIES: usize = 4;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["sphere", "cube", "donut"];
pub const COLOR_NAMES: [&str; NUM_COLORS] = ["red", "green", "blue", "yellow"];
pub const COUNT_NAMES: [&str; NUM_COUNTS] = ["one", "two", "three", "four"];

pub fn class_token(class_id: u8) -> u8 {
    class_id
}

pub fn color_token(color_id: u8) -> u8 {
    NUM_CLASSES as u8 + color_id
}

pub fn count_token(count: usize) -> u8 {
    debug_assert!((1..=NUM_COUNTS).contains(&count));
    (NUM_CLASSES + NUM_COLORS) as u8 + (count as u8 - 1)
}

pub fn parse_class(name: &str) -> Option<u8> {
    CLASS_NAMES.iter().position(|&n| n == name).map(|i| i as u8)
}

pub fn parse_color(name: &str) -> Option<u8> {
    COLOR_NAMES.iter().position(|&n| n == name).map(|i| i as u8)
}

pub fn parse_count(name: &str) -> Option<usize> {
    COUNT_NAMES.iter().position(|&n| n == name).map(|i| i + 1)
}

/// RGB of each color word.
pub fn palette(color_id: u8) -> [f64; 3] {
    match color_id {
        0 => [1.0, 0.0, 0.0],
        1 => [0.0, 1.0, 0.0],
        2 => [0.0, 0.0, 1.0],
        3 => [1.0, 1.0, 0.0],
        other => panic!("color id {other} out of range"),
    }
}

// ---------------------------------------------------------------------------
// Prompt types.

/// Normalized image-space box, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox2D {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox2D {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<BoundingBox2D> {
        let b = BoundingBox2D { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.x0
            && self.x0 < self.x1
            && self.x1 <= 1.0
            && 0.0 <= self.y0
            && self.y0 < self.y1
            && self.y1 <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidData(format!(
                "box ({}, {}, {}, {}) violates 0 <= x0 < x1 <= 1, 0 <= y0 < y1 <= 1",
                self.x0, self.y0, self.x1, self.y1
            )))
        }
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn iou(&self, other: &BoundingBox2D) -> f64 {
        let ix = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let iy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundedEntity {
    pub class_id: u8,
    pub color_id: u8,
    pub box2d: BoundingBox2D,
}

impl GroundedEntity {
    pub fn validate(&self) -> Result<()> {
        if self.class_id as usize >= NUM_CLASSES {
            return Err(Error::InvalidData(format!("class id {}", self.class_id)));
        }
        if self.color_id as usize >= NUM_COLORS {
            return Err(Error::InvalidData(format!("color id {}", self.color_id)));
        }
        self.box2d.validate()
    }
}

/// The instruction: caption tokens plus grounded entities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePrompt {
    pub caption: Vec<u8>,
    pub entities: Vec<GroundedEntity>,
}

impl ScenePrompt {
    /// Builds caption tokens from (count, class, color) groups and
    /// expands one entity per object, boxes in group order.
    pub fn from_groups(groups: &[(usize, u8, u8)], boxes: &[BoundingBox2D]) -> Result<ScenePrompt> {
        let total: usize = groups.iter().map(|g| g.0).sum();
        if total != boxes.len() {
            return Err(Error::invalid(format!(
                "entity/box count mismatch: {total} entities, {} boxes",
                boxes.len()
            )));
        }
        let mut caption = Vec::new();
        let mut entities = Vec::new();
        let mut next_box = 0;
        for &(count, class_id, color_id) in groups {
            if count == 0 || count > NUM_COUNTS {
                return Err(Error::invalid(format!("group count {count}")));
            }
            caption.push(count_token(count));
            caption.push(class_token(class_id));
            caption.push(color_token(color_id));
            for _ in 0..count {
                entities.push(GroundedEntity {
                    class_id,
                    color_id,
                    box2d: boxes[next_box],
                });
                next_box += 1;
            }
        }
        let prompt = ScenePrompt { caption, entities };
        prompt.validate()?;
        Ok(prompt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entities.is_empty() || self.entities.len() > MAX_ENTITIES {
            return Err(Error::InvalidData(format!(
                "{} entities (must be 1..=4)",
                self.entities.len()
            )));
        }
        for tok in &self.caption {
            if *tok as usize >= VOCAB_SIZE {
                return Err(Error::InvalidData(format!("token id {tok} out of vocabulary")));
            }
        }
        for e in &self.entities {
            e.validate()?;
        }
        // Count words, when present, must add up to the entity count.
        let count_base = (NUM_CLASSES + NUM_COLORS) as u8;
        let counted: usize = self
            .caption
            .iter()
            .filter(|&&t| t >= count_base)
            .map(|&t| (t - count_base) as usize + 1)
            .sum();
        if counted != 0 && counted != self.entities.len() {
            return Err(Error::InvalidData(format!(
                "count words say {counted} objects but prompt has {} entities",
                self.entities.len()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Ground-truth scenes.

/// One analytic primitive. `radius` is the bounding-sphere radius for
/// every class: the sphere itself, a cube with half-side r/sqrt(3),
/// or a torus with R + a = r at tube ratio a/R = 0.4. The torus axis
/// is +y, so the ring faces the front camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtObject {
    pub class_id: u8,
    pub color_id: u8,
    pub center: [f64; 3],
    pub radius: f64,
}

/// Hard bounds on the radius field.
pub const RADIUS_RANGE: (f64, f64) = (0.1, 0.35);
/// The sampler draws from this narrower range: below ~0.16 a cube
/// rasterizes to fewer voxels than the evaluation speckle floor at
/// the default 32-grid.
pub const SAMPLE_RADIUS_RANGE: (f64, f64) = (0.16, 0.35);
/// Donuts need a thicker floor still: below ~0.22 the tube spans
/// under two voxel pitches and the rasterized ring can break apart.
pub const SAMPLE_DONUT_MIN_RADIUS: f64 = 0.22;
pub const TORUS_TUBE_RATIO: f64 = 0.4;
/// Extra clearance between bounding spheres at placement time; a bit
/// over two voxel pitches at the default grid, so voxelized objects
/// stay 6-disconnected and silhouettes stay separable.
pub const PLACEMENT_MARGIN: f64 = 0.15;

/// Raw density written inside objects; softplus(8) * scale 10 puts the
/// effective density around 80.
pub const DENSITY_RAW_INSIDE: f64 = 8.0;
pub const DEFAULT_DENSITY_SCALE: f64 = 10.0;
/// Raw color magnitude for the palette channels (sigmoid(4) = 0.982).
pub const COLOR_RAW_ON: f64 = 4.0;

impl GtObject {
    /// Analytic inside test in world coordinates.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let dz = p[2] - self.center[2];
        match self.class_id {
            // Sphere: ball of radius r.
            0 => dx * dx + dy * dy + dz * dz <= self.radius * self.radius,
            // Cube: axis-aligned box inscribed in the bounding sphere.
            1 => {
                let h = self.radius / 3f64.sqrt();
                dx.abs() <= h && dy.abs() <= h && dz.abs() <= h
            }
            // Donut: torus about the +y axis, R + a = r, a = 0.4 R.
            2 => {
                let major = self.radius / (1.0 + TORUS_TUBE_RATIO);
                let tube = TORUS_TUBE_RATIO * major;
                let ring = (dx * dx + dz * dz).sqrt() - major;
                ring * ring + dy * dy <= tube * tube
            }
            other => panic!("class id {other} out of range"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthScene {
    pub objects: Vec<GtObject>,
}

impl GroundTruthScene {
    pub fn validate(&self) -> Result<()> {
        for (i, o) in self.objects.iter().enumerate() {
            if o.class_id as usize >= NUM_CLASSES || o.color_id as usize >= NUM_COLORS {
                return Err(Error::InvalidData(format!("object {i} ids out of range")));
            }
            for a in 0..3 {
                if o.center[a].abs() + o.radius > 1.0 {
                    return Err(Error::InvalidData(format!("object {i} leaves the cube")));
                }
            }
        }
        for i in 0..self.objects.len() {
            for j in i + 1..self.objects.len() {
                let a = &self.objects[i];
                let b = &self.objects[j];
                let d2: f64 = (0..3).map(|k| (a.center[k] - b.center[k]).powi(2)).sum();
                let min = a.radius + b.radius;
                if d2.sqrt() <= min {
                    return Err(Error::InvalidData(format!("objects {i} and {j} interpenetrate")));
                }
            }
        }
        Ok(())
    }

    /// Caption groups: consecutive objects aggregated by (class, color)
    /// in first-appearance order.
    pub fn groups(&self) -> Vec<(usize, u8, u8)> {
        let mut groups: Vec<(usize, u8, u8)> = Vec::new();
        for o in &self.objects {
            if let Some(g) = groups
                .iter_mut()
                .find(|g| g.1 == o.class_id && g.2 == o.color_id)
            {
                g.0 += 1;
            } else {
                groups.push((1, o.class_id, o.color_id));
            }
        }
        groups
    }
}

/// Draws a scene with 1..=max_objects non-interpenetrating objects
/// fully inside the cube. Placement is rejection-sampled; with the
/// radius bounds here a valid placement always exists, but the
/// attempt cap guards the loop anyway.
pub fn sample_scene(rng: &mut Rng, max_objects: usize) -> Result<GroundTruthScene> {
    if !(1..=MAX_ENTITIES).contains(&max_objects) {
        return Err(Error::invalid(format!("max_objects {max_objects} not in 1..=4")));
    }
    let n = rng.int_in(1, max_objects);
    let mut objects: Vec<GtObject> = Vec::with_capacity(n);
    for i in 0..n {
        let class_id = rng.index(NUM_CLASSES) as u8;
        let color_id = rng.index(NUM_COLORS) as u8;
        let min_radius = if class_id == 2 {
            SAMPLE_DONUT_MIN_RADIUS
        } else {
            SAMPLE_RADIUS_RANGE.0
        };
        let mut placed = false;
        for _attempt in 0..1000 {
            let radius = rng.uniform_in(min_radius, SAMPLE_RADIUS_RANGE.1);
            let center = [
                rng.uniform_in(-1.0 + radius, 1.0 - radius),
                rng.uniform_in(-1.0 + radius, 1.0 - radius),
                rng.uniform_in(-1.0 + radius, 1.0 - radius),
            ];
            let clear = objects.iter().all(|o| {
                let d2: f64 = (0..3).map(|k| (o.center[k] - center[k]).powi(2)).sum();
                d2.sqrt() > o.radius + radius + PLACEMENT_MARGIN
            });
            if clear {
                objects.push(GtObject {
                    class_id,
                    color_id,
                    center,
                    radius,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InvalidData(format!(
                "could not place object {i} after 1000 attempts"
            )));
        }
    }
    Ok(GroundTruthScene { objects })
}

/// Rasterizes the analytic scene onto a voxel grid. Density is high
/// inside each primitive and at the floor elsewhere; every voxel's
/// color is the palette color of the nearest object so that surface
/// interpolation never mixes in a background tint.
pub fn scene_to_voxels(gt: &GroundTruthScene, grid_dim: usize) -> Result<VoxelScene> {
    if grid_dim < 8 {
        return Err(Error::invalid(format!("grid_dim {grid_dim} < 8")));
    }
    let mut scene = VoxelScene::new(grid_dim, DENSITY_RAW_FLOOR, 0.0, DEFAULT_DENSITY_SCALE);
    let centers: Vec<f64> = (0..grid_dim).map(|i| scene.center_coord(i)).collect();
    for ix in 0..grid_dim {
        for iy in 0..grid_dim {
            for iz in 0..grid_dim {
                let p = [centers[ix], centers[iy], centers[iz]];
                let idx = scene.voxel_index(ix, iy, iz);
                let mut nearest: Option<(f64, u8)> = None;
                for o in &gt.objects {
                    let d2: f64 = (0..3).map(|k| (p[k] - o.center[k]).powi(2)).sum();
                    let surf = d2.sqrt() - o.radius;
                    if nearest.map_or(true, |(best, _)| surf < best) {
                        nearest = Some((surf, o.color_id));
                    }
                    if o.contains(p) {
                        scene.density_raw.data_mut()[idx] = DENSITY_RAW_INSIDE;
                    }
                }
                if let Some((_, color_id)) = nearest {
                    let rgb = palette(color_id);
                    for ch in 0..3 {
                        scene.color_raw.data_mut()[idx * 3 + ch] =
                            if rgb[ch] > 0.5 { COLOR_RAW_ON } else { -COLOR_RAW_ON };
                    }
                }
            }
        }
    }
    Ok(scene)
}

/// Tight screen-space box of each object's bounding sphere (inflated
/// by `pad` in world units), clamped to [0,1]. `None` for objects that
/// are not entirely in front of the camera or that leave the frame
/// completely. `pad` exists because voxelized objects render up to a
/// voxel pitch wider than their analytic surface; dataset labels pass
/// the pitch, geometric tests pass zero.
pub fn project_boxes(
    gt: &GroundTruthScene,
    camera: &Camera,
    pad: f64,
) -> Vec<Option<BoundingBox2D>> {
    let (right, up, forward) = camera.basis();
    let pos = camera.position();
    let tan_f = (camera.fov_deg.to_radians() / 2.0).tan();
    gt.objects
        .iter()
        .map(|o| {
            let q = [
                o.center[0] - pos[0],
                o.center[1] - pos[1],
                o.center[2] - pos[2],
            ];
            let cx = q[0] * right[0] + q[1] * right[1] + q[2] * right[2];
            let cy = q[0] * up[0] + q[1] * up[1] + q[2] * up[2];
            let cz = q[0] * forward[0] + q[1] * forward[1] + q[2] * forward[2];
            let r = o.radius + pad;
            if cz <= 0.0 {
                return None;
            }
            if cz <= r {
                // Sphere pokes through the image plane; cover everything.
                return BoundingBox2D::new(0.0, 0.0, 1.0, 1.0).ok();
            }
            // Extremes of the projected sphere along each image axis:
            // tangent lines x = u z to the circle of radius r centered
            // (c_axis, cz) give u = (c*cz +- r*sqrt(c^2 + cz^2 - r^2))
            // / (cz^2 - r^2).
            let extent = |c: f64| -> (f64, f64) {
                let disc = (c * c + cz * cz - r * r).sqrt();
                let denom = cz * cz - r * r;
                let lo = (c * cz - r * disc) / denom;
                let hi = (c * cz + r * disc) / denom;
                (lo / tan_f, hi / tan_f)
            };
            let (u_lo, u_hi) = extent(cx);
            let (v_lo, v_hi) = extent(cy);
            let x0 = ((u_lo + 1.0) / 2.0).clamp(0.0, 1.0);
            let x1 = ((u_hi + 1.0) / 2.0).clamp(0.0, 1.0);
            let y0 = ((1.0 - v_hi) / 2.0).clamp(0.0, 1.0);
            let y1 = ((1.0 - v_lo) / 2.0).clamp(0.0, 1.0);
            if x0 < x1 && y0 < y1 {
                Some(BoundingBox2D { x0, y0, x1, y1 })
            } else {
                None
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{render_alpha, DEFAULT_CAMERA_RADIUS, DEFAULT_FOV_DEG};

    #[test]
    fn single_object_scene_is_inside_cube() {
        let mut rng = Rng::new(1);
        let scene = sample_scene(&mut rng, 1).unwrap();
        assert_eq!(scene.objects.len(), 1);
        scene.validate().unwrap();
    }

    #[test]
    fn hundred_scenes_have_no_interpenetration() {
        // Brute-force pairwise distance oracle, separate from the
        // sampler's own acceptance check.
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let scene = sample_scene(&mut rng, 4).unwrap();
            for i in 0..scene.objects.len() {
                for j in i + 1..scene.objects.len() {
                    let a = &scene.objects[i];
                    let b = &scene.objects[j];
                    let d: f64 = (0..3)
                        .map(|k| (a.center[k] - b.center[k]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    assert!(d > a.radius + b.radius, "objects {i},{j} at distance {d}");
                }
                for k in 0..3 {
                    assert!(scene.objects[i].center[k].abs() + scene.objects[i].radius <= 1.0);
                }
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_scenes() {
        let a = sample_scene(&mut Rng::new(5), 4).unwrap();
        let b = sample_scene(&mut Rng::new(5), 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn voxelized_sphere_volume_matches_analytic() {
        let gt = GroundTruthScene {
            objects: vec![GtObject {
                class_id: 0,
                color_id: 0,
                center: [0.0, 0.0, 0.0],
                radius: 0.3,
            }],
        };
        let scene = scene_to_voxels(&gt, 32).unwrap();
        let occupied = scene
            .density_raw
            .data()
            .iter()
            .filter(|&&v| v == DENSITY_RAW_INSIDE)
            .count();
        let voxel_vol = (2.0f64 / 32.0).powi(3);
        let expect = (4.0 / 3.0) * std::f64::consts::PI * 0.3f64.powi(3) / voxel_vol;
        let rel = (occupied as f64 - expect).abs() / expect;
        assert!(rel < 0.10, "occupied {occupied} vs {expect:.1} (rel {rel:.3})");
        // Density inside is high after activation: softplus(8)*10 >= 50.
        let sigma = scene.sigma_grid();
        assert!(sigma.iter().cloned().fold(0.0, f64::max) >= 50.0);
    }

    #[test]
    fn empty_scene_voxels_sit_at_the_floor() {
        let scene = scene_to_voxels(&GroundTruthScene { objects: vec![] }, 16).unwrap();
        assert!(scene
            .density_raw
            .data()
            .iter()
            .all(|&v| v == DENSITY_RAW_FLOOR));
    }

    /// Test-local 6-connected flood fill, independent of the metrics
    /// module implementation.
    fn count_components(scene: &VoxelScene, tau: f64) -> usize {
        let d = scene.dim;
        let sigma = scene.sigma_grid();
        let mut seen = vec![false; d * d * d];
        let mut count = 0;
        for start in 0..d * d * d {
            if seen[start] || sigma[start] <= tau {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
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
                    if !seen[j] && sigma[j] > tau {
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
        }
        count
    }

    #[test]
    fn two_disjoint_spheres_make_two_components() {
        let gt = GroundTruthScene {
            objects: vec![
                GtObject {
                    class_id: 0,
                    color_id: 0,
                    center: [-0.5, 0.0, 0.0],
                    radius: 0.25,
                },
                GtObject {
                    class_id: 0,
                    color_id: 2,
                    center: [0.5, 0.0, 0.0],
                    radius: 0.25,
                },
            ],
        };
        let scene = scene_to_voxels(&gt, 32).unwrap();
        assert_eq!(count_components(&scene, 5.0), 2);
    }

    #[test]
    fn centered_sphere_projects_to_centered_box() {
        let gt = GroundTruthScene {
            objects: vec![GtObject {
                class_id: 0,
                color_id: 0,
                center: [0.0, 0.0, 0.0],
                radius: 0.3,
            }],
        };
        let cam = Camera::front(DEFAULT_CAMERA_RADIUS, DEFAULT_FOV_DEG);
        let boxes = project_boxes(&gt, &cam, 0.0);
        let b = boxes[0].unwrap();
        let (cx, cy) = b.center();
        assert!((cx - 0.5).abs() < 1e-9 && (cy - 0.5).abs() < 1e-9, "{b:?}");
    }

    #[test]
    fn left_offset_sphere_projects_left_of_center() {
        let gt = GroundTruthScene {
            objects: vec![GtObject {
                class_id: 0,
                color_id: 0,
                center: [-0.5, 0.0, 0.0],
                radius: 0.2,
            }],
        };
        let cam = Camera::front(DEFAULT_CAMERA_RADIUS, DEFAULT_FOV_DEG);
        let b = project_boxes(&gt, &cam, 0.0)[0].unwrap();
        assert!(b.center().0 < 0.5, "{b:?}");
    }

    #[test]
    fn silhouette_pixels_stay_inside_projected_boxes() {
        // Per-pixel containment oracle: isolated renders of every
        // object in random scenes, alpha > 0.5 pixels against the
        // dataset-label box (bounding sphere + one voxel pitch).
        let mut rng = Rng::new(17);
        let cam = Camera::front(DEFAULT_CAMERA_RADIUS, DEFAULT_FOV_DEG);
        let grid_dim = 32;
        let res = 32;
        for _ in 0..5 {
            let gt = sample_scene(&mut rng, 3).unwrap();
            let boxes = project_boxes(&gt, &cam, 2.0 / grid_dim as f64);
            for (obj_idx, o) in gt.objects.iter().enumerate() {
                let solo = GroundTruthScene { objects: vec![*o] };
                let vox = scene_to_voxels(&solo, grid_dim as usize).unwrap();
                let alpha = render_alpha(&vox, &cam, res, 48);
                let b = boxes[obj_idx].expect("front camera sees everything");
                for py in 0..res {
                    for px in 0..res {
                        if alpha.data()[py * res + px] > 0.5 {
                            // Pixel center in normalized coords.
                            let x = (px as f64 + 0.5) / res as f64;
                            let y = (py as f64 + 0.5) / res as f64;
                            assert!(
                                x >= b.x0 && x <= b.x1 && y >= b.y0 && y <= b.y1,
                                "pixel ({px},{py}) outside box {b:?} for object {obj_idx}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn prompt_groups_round_trip() {
        let boxes = vec![
            BoundingBox2D::new(0.1, 0.3, 0.4, 0.7).unwrap(),
            BoundingBox2D::new(0.5, 0.3, 0.8, 0.7).unwrap(),
            BoundingBox2D::new(0.2, 0.1, 0.5, 0.4).unwrap(),
        ];
        let prompt =
            ScenePrompt::from_groups(&[(2, 0, 0), (1, 1, 2)], &boxes).unwrap();
        assert_eq!(prompt.entities.len(), 3);
        assert_eq!(
            prompt.caption,
            vec![
                count_token(2),
                class_token(0),
                color_token(0),
                count_token(1),
                class_token(1),
                color_token(2)
            ]
        );
        prompt.validate().unwrap();
    }

    #[test]
    fn inconsistent_count_words_are_rejected() {
        let boxes = vec![BoundingBox2D::new(0.1, 0.3, 0.4, 0.7).unwrap()];
        let mut prompt = ScenePrompt::from_groups(&[(1, 0, 0)], &boxes).unwrap();
        prompt.caption[0] = count_token(3);
        assert!(prompt.validate().is_err());
    }

    #[test]
    fn scene_groups_aggregate_matching_objects() {
        let gt = GroundTruthScene {
            objects: vec![
                GtObject { class_id: 2, color_id: 1, center: [0.5, 0.0, 0.0], radius: 0.2 },
                GtObject { class_id: 2, color_id: 1, center: [-0.5, 0.0, 0.0], radius: 0.2 },
                GtObject { class_id: 0, color_id: 3, center: [0.0, 0.0, 0.6], radius: 0.2 },
            ],
        };
        assert_eq!(gt.groups(), vec![(2, 2, 1), (1, 0, 3)]);
    }
}
