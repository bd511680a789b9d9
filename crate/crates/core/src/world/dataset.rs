//! The `.ds` dataset format and the two dataset builders.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic        "CDS1" (4 bytes)
//! record_count u32
//! image_res    u32
//! record_kind  u8    0 = layout, 1 = multi-view
//! records      record_count fixed-size records
//! ```
//!
//! Layout record (kind 0):
//!
//! ```text
//! image      res*res*3 f64   row-major H, W, C in [0,1]
//! n_tokens   u8
//! tokens     12 x u8         0xFF padding past n_tokens
//! n_entities u8
//! entities   4 x (class u8, color u8, x0 y0 x1 y1 f64)  zero padding
//! ```
//!
//! Multi-view record (kind 1):
//!
//! ```text
//! ref_image    res*res*3 f64   front camera
//! target_image res*res*3 f64   camera below
//! azimuth_deg  f64             target camera; the reference camera is
//! elevation_deg f64            the front camera at the same radius,
//! radius       f64             so these are also the relative pose
//! ```

use std::io::Read;
use std::path::Path;

use super::{
    project_boxes, sample_scene, scene_to_voxels, BoundingBox2D, GroundedEntity, ScenePrompt,
};
use crate::numcore::{Rng, Tensor};
use crate::render::{render, Camera, DEFAULT_CAMERA_RADIUS, DEFAULT_FOV_DEG};
use crate::{Error, Result};

pub const DS_MAGIC: &[u8; 4] = b"CDS1";
const MAX_TOKENS: usize = 12;
const TOKEN_PAD: u8 = 0xFF;

/// Target cameras for the multi-view set.
pub const MV_AZIMUTH_RANGE: (f64, f64) = (0.0, 360.0);
pub const MV_ELEVATION_RANGE: (f64, f64) = (-10.0, 40.0);

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutRecord {
    /// `[res, res, 3]` in [0,1].
    pub image: Tensor,
    pub caption: Vec<u8>,
    pub entities: Vec<GroundedEntity>,
}

impl LayoutRecord {
    pub fn prompt(&self) -> ScenePrompt {
        ScenePrompt {
            caption: self.caption.clone(),
            entities: self.entities.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MvRecord {
    pub ref_image: Tensor,
    pub target_image: Tensor,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
}

impl MvRecord {
    pub fn target_camera(&self) -> Camera {
        Camera {
            azimuth_deg: self.azimuth_deg,
            elevation_deg: self.elevation_deg,
            radius: self.radius,
            fov_deg: DEFAULT_FOV_DEG,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Dataset {
    Layout(Vec<LayoutRecord>),
    Multiview(Vec<MvRecord>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Layout(r) => r.len(),
            Dataset::Multiview(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------------------
// Encoding.

fn push_f64s(buf: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s(r: &mut &[u8], n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("dataset truncated".into()))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_u8(r: &mut &[u8]) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("dataset truncated".into()))?;
    Ok(b[0])
}

fn encode_layout(buf: &mut Vec<u8>, rec: &LayoutRecord) {
    push_f64s(buf, rec.image.data());
    buf.push(rec.caption.len() as u8);
    for i in 0..MAX_TOKENS {
        buf.push(*rec.caption.get(i).unwrap_or(&TOKEN_PAD));
    }
    buf.push(rec.entities.len() as u8);
    for i in 0..4 {
        match rec.entities.get(i) {
            Some(e) => {
                buf.push(e.class_id);
                buf.push(e.color_id);
                push_f64s(buf, &[e.box2d.x0, e.box2d.y0, e.box2d.x1, e.box2d.y1]);
            }
            None => {
                buf.push(0);
                buf.push(0);
                push_f64s(buf, &[0.0; 4]);
            }
        }
    }
}

fn decode_layout(r: &mut &[u8], res: usize) -> Result<LayoutRecord> {
    let image = Tensor::from_vec(&[res, res, 3], read_f64s(r, res * res * 3)?)
        .map_err(|e| Error::Format(format!("bad image payload: {e}")))?;
    let n_tokens = read_u8(r)? as usize;
    let mut caption = Vec::with_capacity(n_tokens);
    for i in 0..MAX_TOKENS {
        let t = read_u8(r)?;
        if i < n_tokens {
            caption.push(t);
        }
    }
    let n_entities = read_u8(r)? as usize;
    let mut entities = Vec::with_capacity(n_entities);
    for i in 0..4 {
        let class_id = read_u8(r)?;
        let color_id = read_u8(r)?;
        let b = read_f64s(r, 4)?;
        if i < n_entities {
            entities.push(GroundedEntity {
                class_id,
                color_id,
                box2d: BoundingBox2D {
                    x0: b[0],
                    y0: b[1],
                    x1: b[2],
                    y1: b[3],
                },
            });
        }
    }
    Ok(LayoutRecord {
        image,
        caption,
        entities,
    })
}

fn encode_mv(buf: &mut Vec<u8>, rec: &MvRecord) {
    push_f64s(buf, rec.ref_image.data());
    push_f64s(buf, rec.target_image.data());
    push_f64s(buf, &[rec.azimuth_deg, rec.elevation_deg, rec.radius]);
}

fn decode_mv(r: &mut &[u8], res: usize) -> Result<MvRecord> {
    let ref_image = Tensor::from_vec(&[res, res, 3], read_f64s(r, res * res * 3)?)
        .map_err(|e| Error::Format(format!("bad image payload: {e}")))?;
    let target_image = Tensor::from_vec(&[res, res, 3], read_f64s(r, res * res * 3)?)
        .map_err(|e| Error::Format(format!("bad image payload: {e}")))?;
    let cam = read_f64s(r, 3)?;
    Ok(MvRecord {
        ref_image,
        target_image,
        azimuth_deg: cam[0],
        elevation_deg: cam[1],
        radius: cam[2],
    })
}

pub fn write_dataset(path: &Path, res: usize, data: &Dataset) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DS_MAGIC);
    buf.extend_from_slice(&(data.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(res as u32).to_le_bytes());
    match data {
        Dataset::Layout(records) => {
            buf.push(0);
            for r in records {
                encode_layout(&mut buf, r);
            }
        }
        Dataset::Multiview(records) => {
            buf.push(1);
            for r in records {
                encode_mv(&mut buf, r);
            }
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("dataset truncated".into()))?;
    if &magic != DS_MAGIC {
        return Err(Error::Format("bad dataset magic (expected CDS1)".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|_| Error::Format("dataset truncated".into()))?;
    let count = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf).map_err(|_| Error::Format("dataset truncated".into()))?;
    let res = u32::from_le_bytes(u32buf) as usize;
    let kind = read_u8(&mut r)?;
    match kind {
        0 => {
            let records = (0..count)
                .map(|_| decode_layout(&mut r, res))
                .collect::<Result<Vec<_>>>()?;
            Ok(Dataset::Layout(records))
        }
        1 => {
            let records = (0..count)
                .map(|_| decode_mv(&mut r, res))
                .collect::<Result<Vec<_>>>()?;
            Ok(Dataset::Multiview(records))
        }
        other => Err(Error::Format(format!("unknown record kind {other}"))),
    }
}

// ---------------------------------------------------------------------------
// Builders.

fn front_camera() -> Camera {
    Camera::front(DEFAULT_CAMERA_RADIUS, DEFAULT_FOV_DEG)
}

pub const DATASET_SAMPLES_PER_RAY: usize = 48;

/// n records of (front render, caption, projected boxes), written to
/// `path` and returned.
pub fn make_layout_dataset(
    path: &Path,
    n: usize,
    rng: &mut Rng,
    image_res: usize,
    grid_dim: usize,
) -> Result<Vec<LayoutRecord>> {
    if n == 0 {
        return Err(Error::invalid("dataset needs at least one record"));
    }
    let cam = front_camera();
    let pad = 2.0 / grid_dim as f64;
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let gt = sample_scene(rng, 4)?;
        let vox = scene_to_voxels(&gt, grid_dim)?;
        let image = render(&vox, &cam, image_res, DATASET_SAMPLES_PER_RAY);
        let boxes = project_boxes(&gt, &cam, pad);
        let mut entities = Vec::with_capacity(gt.objects.len());
        for (o, b) in gt.objects.iter().zip(&boxes) {
            let box2d = b.ok_or_else(|| {
                Error::InvalidData("front camera lost an object during labeling".into())
            })?;
            entities.push(GroundedEntity {
                class_id: o.class_id,
                color_id: o.color_id,
                box2d,
            });
        }
        let caption = ScenePrompt::from_groups(
            &gt.groups(),
            &entities.iter().map(|e| e.box2d).collect::<Vec<_>>(),
        )?
        .caption;
        records.push(LayoutRecord {
            image: image.pixels,
            caption,
            entities,
        });
    }
    write_dataset(path, image_res, &Dataset::Layout(records.clone()))?;
    Ok(records)
}

/// n records of (front reference render, target render, target
/// camera), grouped so consecutive `views_per_scene` records share one
/// scene and reference image.
pub fn make_mv_dataset(
    path: &Path,
    n: usize,
    rng: &mut Rng,
    image_res: usize,
    grid_dim: usize,
    views_per_scene: usize,
) -> Result<Vec<MvRecord>> {
    if views_per_scene < 2 {
        return Err(Error::invalid("views_per_scene must be >= 2"));
    }
    if n == 0 {
        return Err(Error::invalid("dataset needs at least one record"));
    }
    let cam_front = front_camera();
    let mut records = Vec::with_capacity(n);
    'outer: loop {
        let gt = sample_scene(rng, 4)?;
        let vox = scene_to_voxels(&gt, grid_dim)?;
        let ref_image = render(&vox, &cam_front, image_res, DATASET_SAMPLES_PER_RAY);
        for _ in 0..views_per_scene {
            let azimuth_deg = rng.uniform_in(MV_AZIMUTH_RANGE.0, MV_AZIMUTH_RANGE.1);
            let elevation_deg = rng.uniform_in(MV_ELEVATION_RANGE.0, MV_ELEVATION_RANGE.1);
            let cam = Camera {
                azimuth_deg,
                elevation_deg,
                radius: DEFAULT_CAMERA_RADIUS,
                fov_deg: DEFAULT_FOV_DEG,
            };
            let target = render(&vox, &cam, image_res, DATASET_SAMPLES_PER_RAY);
            records.push(MvRecord {
                ref_image: ref_image.pixels.clone(),
                target_image: target.pixels,
                azimuth_deg,
                elevation_deg,
                radius: DEFAULT_CAMERA_RADIUS,
            });
            if records.len() == n {
                break 'outer;
            }
        }
    }
    write_dataset(path, image_res, &Dataset::Multiview(records.clone()))?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{class_token, NUM_CLASSES};

    #[test]
    fn minimal_layout_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("layout.ds");
        let mut rng = Rng::new(11);
        let records = make_layout_dataset(&path, 1, &mut rng, 16, 16).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].image.shape(), &[16, 16, 3]);
        assert!(records[0].image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for e in &records[0].entities {
            e.validate().unwrap();
        }

        let loaded = read_dataset(&path).unwrap();
        let Dataset::Layout(loaded) = loaded else {
            panic!("wrong kind")
        };
        assert_eq!(loaded, records);

        // Writing again is byte-identical.
        let path2 = dir.path().join("layout2.ds");
        write_dataset(&path2, 16, &Dataset::Layout(records)).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn mv_dataset_round_trips_and_identity_view_matches_reference() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mv.ds");
        let mut rng = Rng::new(4);
        let records = make_mv_dataset(&path, 6, &mut rng, 16, 16, 3).unwrap();
        assert_eq!(records.len(), 6);
        let Dataset::Multiview(loaded) = read_dataset(&path).unwrap() else {
            panic!("wrong kind")
        };
        assert_eq!(loaded, records);

        // Identity view: rendering the target at the reference camera
        // reproduces the reference image exactly.
        let mut rng = Rng::new(5);
        let gt = sample_scene(&mut rng, 2).unwrap();
        let vox = scene_to_voxels(&gt, 16).unwrap();
        let cam = front_camera();
        let a = render(&vox, &cam, 16, DATASET_SAMPLES_PER_RAY);
        let b = render(&vox, &cam, 16, DATASET_SAMPLES_PER_RAY);
        assert_eq!(a.pixels, b.pixels);
    }

    #[test]
    fn class_histogram_is_uniform_within_three_sigma() {
        // Counting oracle on the scene sampler that feeds the dataset:
        // every object's class is an independent uniform draw over 3.
        let mut rng = Rng::new(11);
        let mut counts = [0usize; NUM_CLASSES];
        let mut total = 0usize;
        for _ in 0..2000 {
            let gt = sample_scene(&mut rng, 4).unwrap();
            for o in &gt.objects {
                counts[o.class_id as usize] += 1;
                total += 1;
            }
        }
        let p = 1.0 / NUM_CLASSES as f64;
        let sigma = (total as f64 * p * (1.0 - p)).sqrt();
        for (c, &count) in counts.iter().enumerate() {
            let dev = (count as f64 - total as f64 * p).abs();
            assert!(
                dev < 3.0 * sigma,
                "class {c}: {count} of {total} deviates {dev:.1} (3 sigma {:.1})",
                3.0 * sigma
            );
        }
        // Tokens corresponding to classes appear in captions.
        assert!(class_token(0) == 0);
    }

    #[test]
    fn mv_azimuths_are_uniform_within_three_sigma() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mv.ds");
        let mut rng = Rng::new(42);
        // Small images keep this cheap; the azimuth distribution is
        // independent of resolution.
        let records = make_mv_dataset(&path, 500, &mut rng, 8, 8, 2).unwrap();
        let bins = 8;
        let mut counts = vec![0usize; bins];
        for r in &records {
            let b = (r.azimuth_deg / 360.0 * bins as f64).floor() as usize;
            counts[b.min(bins - 1)] += 1;
        }
        let n = records.len() as f64;
        let p = 1.0 / bins as f64;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for (b, &count) in counts.iter().enumerate() {
            let dev = (count as f64 - n * p).abs();
            assert!(dev < 3.0 * sigma, "bin {b}: {count} (dev {dev:.1})");
        }
    }

    #[test]
    fn layout_boxes_capture_silhouette_mass() {
        // Quantified label-quality invariant: each entity's box holds
        // at least 60% of that object's isolated silhouette mass. The
        // silhouette is the alpha > 0.5 region (sub-threshold pixels
        // are interpolation fuzz, not object).
        let cam = front_camera();
        let mut rng = Rng::new(8);
        for _ in 0..10 {
            let gt = sample_scene(&mut rng, 4).unwrap();
            let boxes = project_boxes(&gt, &cam, 2.0 / 32.0);
            for (i, o) in gt.objects.iter().enumerate() {
                let solo = crate::world::GroundTruthScene { objects: vec![*o] };
                let vox = scene_to_voxels(&solo, 32).unwrap();
                let alpha = crate::render::render_alpha(&vox, &cam, 32, 48);
                let b = boxes[i].unwrap();
                let mut inside = 0.0;
                let mut total = 0.0;
                for py in 0..32 {
                    for px in 0..32 {
                        let a = alpha.data()[py * 32 + px];
                        if a <= 0.5 {
                            continue;
                        }
                        total += a;
                        let x = (px as f64 + 0.5) / 32.0;
                        let y = (py as f64 + 0.5) / 32.0;
                        if x >= b.x0 && x <= b.x1 && y >= b.y0 && y <= b.y1 {
                            inside += a;
                        }
                    }
                }
                assert!(total > 0.0, "object {i} rendered nothing");
                assert!(
                    inside / total >= 0.6,
                    "object {i}: only {:.2} of silhouette mass in box",
                    inside / total
                );
            }
        }
    }
}
