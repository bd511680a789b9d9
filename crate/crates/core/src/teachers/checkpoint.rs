//! Teacher and critic checkpoints: the `.wts` record encoding behind
//! a role byte.
//!
//! ```text
//! magic      "WTS1"
//! role       u8    1=layout 2=multiview 3=cola_base 4=critic
//! aux        u32   denoisers: diffusion step count; critic: pool factor
//! n_sections u8
//! sections   n_sections x (u32 layer count, layer records)
//! ```
//!
//! Grounded denoisers store six sections (backbone, caption table,
//! class table, color table, grounding MLP, projection); the
//! multi-view denoiser three (backbone, reference encoder,
//! projection); the critic two (conv trunk, head).

use std::io::Read;
use std::path::Path;

use super::{CondEncoder, CriticNet, DenoiserNet, GroundedEncoder, Role, ViewRefEncoder};
use crate::numcore::{read_layer, write_layer, LayerSpec, WTS_MAGIC};
use crate::{Error, Result};

fn role_byte(role: Role) -> u8 {
    match role {
        Role::Layout => 1,
        Role::Multiview => 2,
        Role::ColaBase => 3,
    }
}

fn write_section(buf: &mut Vec<u8>, net: &[LayerSpec]) -> Result<()> {
    buf.extend_from_slice(&(net.len() as u32).to_le_bytes());
    for layer in net {
        write_layer(buf, layer)?;
    }
    Ok(())
}

fn read_section(r: &mut &[u8]) -> Result<Vec<LayerSpec>> {
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| Error::Format("checkpoint truncated".into()))?;
    let count = u32::from_le_bytes(u32buf) as usize;
    (0..count).map(|_| read_layer(r)).collect()
}

pub fn save_denoiser(path: &Path, net: &DenoiserNet) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WTS_MAGIC);
    buf.push(role_byte(net.role));
    buf.extend_from_slice(&(net.t_steps as u32).to_le_bytes());
    match &net.cond {
        CondEncoder::Grounded(g) => {
            buf.push(6);
            write_section(&mut buf, &net.backbone)?;
            write_section(&mut buf, std::slice::from_ref(&g.caption_table))?;
            write_section(&mut buf, std::slice::from_ref(&g.class_table))?;
            write_section(&mut buf, std::slice::from_ref(&g.color_table))?;
            write_section(&mut buf, &g.ground_mlp)?;
            write_section(&mut buf, &g.proj)?;
        }
        CondEncoder::ViewRef(v) => {
            buf.push(3);
            write_section(&mut buf, &net.backbone)?;
            write_section(&mut buf, &v.ref_conv)?;
            write_section(&mut buf, &v.proj)?;
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn read_header(bytes: &[u8]) -> Result<(u8, usize, usize, &[u8])> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint truncated".into()))?;
    if &magic != WTS_MAGIC {
        return Err(Error::Format("bad checkpoint magic (expected WTS1)".into()));
    }
    let mut role = [0u8; 1];
    r.read_exact(&mut role)
        .map_err(|_| Error::Format("checkpoint truncated".into()))?;
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| Error::Format("checkpoint truncated".into()))?;
    let t_steps = u32::from_le_bytes(u32buf) as usize;
    let mut n_sections = [0u8; 1];
    r.read_exact(&mut n_sections)
        .map_err(|_| Error::Format("checkpoint truncated".into()))?;
    Ok((role[0], t_steps, n_sections[0] as usize, r))
}

fn one_layer(mut section: Vec<LayerSpec>) -> Result<LayerSpec> {
    if section.len() != 1 {
        return Err(Error::Format("expected single-layer section".into()));
    }
    Ok(section.pop().unwrap())
}

pub fn load_denoiser(path: &Path) -> Result<DenoiserNet> {
    let bytes = std::fs::read(path)?;
    let (role, t_steps, n_sections, mut r) = read_header(&bytes)?;
    let role = match role {
        1 => Role::Layout,
        2 => Role::Multiview,
        3 => Role::ColaBase,
        other => return Err(Error::Format(format!("role byte {other} is not a denoiser"))),
    };
    match role {
        Role::Layout | Role::ColaBase => {
            if n_sections != 6 {
                return Err(Error::Format(format!(
                    "grounded denoiser wants 6 sections, file has {n_sections}"
                )));
            }
            let backbone = read_section(&mut r)?;
            let caption_table = one_layer(read_section(&mut r)?)?;
            let class_table = one_layer(read_section(&mut r)?)?;
            let color_table = one_layer(read_section(&mut r)?)?;
            let ground_mlp = read_section(&mut r)?;
            let proj = read_section(&mut r)?;
            Ok(DenoiserNet {
                role,
                t_steps,
                backbone,
                cond: CondEncoder::Grounded(GroundedEncoder {
                    caption_table,
                    class_table,
                    color_table,
                    ground_mlp,
                    proj,
                }),
            })
        }
        Role::Multiview => {
            if n_sections != 3 {
                return Err(Error::Format(format!(
                    "multiview denoiser wants 3 sections, file has {n_sections}"
                )));
            }
            let backbone = read_section(&mut r)?;
            let ref_conv = read_section(&mut r)?;
            let proj = read_section(&mut r)?;
            Ok(DenoiserNet {
                role,
                t_steps,
                backbone,
                cond: CondEncoder::ViewRef(ViewRefEncoder { ref_conv, proj }),
            })
        }
    }
}

pub fn save_critic(path: &Path, net: &CriticNet) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WTS_MAGIC);
    buf.push(4);
    buf.extend_from_slice(&(net.pool as u32).to_le_bytes());
    buf.push(2);
    write_section(&mut buf, &net.conv)?;
    write_section(&mut buf, &net.head)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_critic(path: &Path) -> Result<CriticNet> {
    let bytes = std::fs::read(path)?;
    let (role, pool, n_sections, mut r) = read_header(&bytes)?;
    if role != 4 || n_sections != 2 {
        return Err(Error::Format("file is not a critic checkpoint".into()));
    }
    if pool == 0 {
        return Err(Error::Format("critic checkpoint has no pool factor".into()));
    }
    Ok(CriticNet {
        conv: read_section(&mut r)?,
        head: read_section(&mut r)?,
        pool,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    #[test]
    fn denoiser_checkpoints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(3);

        let layout = DenoiserNet::new_layout(64, &mut rng);
        let p = dir.path().join("layout.wts");
        save_denoiser(&p, &layout).unwrap();
        let loaded = load_denoiser(&p).unwrap();
        assert_eq!(loaded.role, Role::Layout);
        assert_eq!(loaded.t_steps, 64);
        assert_eq!(loaded.param_checksum(), layout.param_checksum());

        let mv = DenoiserNet::new_multiview(64, 8, &mut rng);
        let p = dir.path().join("mv.wts");
        save_denoiser(&p, &mv).unwrap();
        let loaded = load_denoiser(&p).unwrap();
        assert_eq!(loaded.role, Role::Multiview);
        assert_eq!(loaded.param_checksum(), mv.param_checksum());

        // Critic loader refuses denoiser files and vice versa.
        assert!(load_critic(&p).is_err());
    }

    #[test]
    fn critic_checkpoints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(4);
        let critic = CriticNet::new(8, &mut rng);
        let p = dir.path().join("critic.wts");
        save_critic(&p, &critic).unwrap();
        let loaded = load_critic(&p).unwrap();
        assert_eq!(loaded.param_checksum(), critic.param_checksum());
        assert!(load_denoiser(&p).is_err());
    }
}
