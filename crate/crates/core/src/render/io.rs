//! Scene and frame file formats.
//!
//! `.cvox` layout (little-endian):
//!
//! ```text
//! magic         "CVX1" (4 bytes)
//! dim           u32
//! density_raw   dim^3 f64
//! color_raw     dim^3 * 3 f64
//! density_scale f64
//! ```
//!
//! Frames are binary PPM (P6, 8-bit, max 255). Floats map to bytes by
//! clamping to [0,1], scaling by 255, and rounding half up.

use std::io::Read;
use std::path::Path;

use super::{Image, VoxelScene};
use crate::numcore::Tensor;
use crate::{Error, Result};

pub const CVOX_MAGIC: &[u8; 4] = b"CVX1";

pub fn save_scene(path: &Path, scene: &VoxelScene) -> Result<()> {
    let n = scene.dim * scene.dim * scene.dim;
    let mut buf = Vec::with_capacity(4 + 4 + (n * 4 + 1) * 8);
    buf.extend_from_slice(CVOX_MAGIC);
    buf.extend_from_slice(&(scene.dim as u32).to_le_bytes());
    for v in scene.density_raw.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in scene.color_raw.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&scene.density_scale.to_le_bytes());
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<VoxelScene> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("bad scene file: truncated header".into()))?;
    if &magic != CVOX_MAGIC {
        return Err(Error::Format("bad scene file: wrong magic".into()));
    }
    let mut dim_buf = [0u8; 4];
    r.read_exact(&mut dim_buf)
        .map_err(|_| Error::Format("bad scene file: truncated header".into()))?;
    let dim = u32::from_le_bytes(dim_buf) as usize;
    let n = dim * dim * dim;
    let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; count * 8];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format("bad scene file: truncated payload".into()))?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let density = read_f64s(n)?;
    let color = read_f64s(n * 3)?;
    let scale = read_f64s(1)?[0];
    let scene = VoxelScene {
        dim,
        density_raw: Tensor::from_vec(&[dim, dim, dim], density)
            .map_err(|e| Error::Format(format!("bad scene file: {e}")))?,
        color_raw: Tensor::from_vec(&[dim, dim, dim, 3], color)
            .map_err(|e| Error::Format(format!("bad scene file: {e}")))?,
        density_scale: scale,
    };
    scene
        .validate()
        .map_err(|e| Error::Format(format!("bad scene file: {e}")))?;
    Ok(scene)
}

/// Encodes an image as binary PPM bytes.
pub fn ppm_bytes(image: &Image) -> Vec<u8> {
    let res = image.res();
    let mut buf = format!("P6\n{res} {res}\n255\n").into_bytes();
    for v in image.pixels.data() {
        buf.push((v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8);
    }
    buf
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    std::fs::write(path, ppm_bytes(image))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    #[test]
    fn scene_round_trip_is_bit_exact() {
        let mut rng = Rng::new(13);
        let mut scene = VoxelScene::new(6, -1.0, 0.0, 9.5);
        for v in scene.density_raw.data_mut() {
            *v = rng.normal();
        }
        for v in scene.color_raw.data_mut() {
            *v = rng.normal();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.cvox");
        save_scene(&path, &scene).unwrap();
        let loaded = load_scene(&path).unwrap();
        assert_eq!(loaded.dim, scene.dim);
        assert_eq!(loaded.density_raw, scene.density_raw);
        assert_eq!(loaded.color_raw, scene.color_raw);
        assert_eq!(loaded.density_scale, scene.density_scale);
    }

    #[test]
    fn corrupt_magic_reports_bad_scene_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.cvox");
        std::fs::write(&path, b"XXXX12345678").unwrap();
        let err = load_scene(&path).unwrap_err();
        assert!(err.to_string().contains("bad scene file"), "{err}");
    }

    #[test]
    fn ppm_rounds_half_up_after_clamping() {
        let mut img = Image::new(1);
        img.pixels.data_mut().copy_from_slice(&[0.5, 1.5, -0.25]);
        let bytes = ppm_bytes(&img);
        let header = b"P6\n1 1\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        // 0.5*255+0.5 = 128.0 -> 128; clamp(1.5)=1 -> 255; clamp(-0.25)=0 -> 0
        assert_eq!(&bytes[header.len()..], &[128, 255, 0]);
    }
}
