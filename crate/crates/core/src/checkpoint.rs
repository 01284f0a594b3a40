//! Binary checkpoints.
//!
//! Layout: the magic `ERNFCKPT`, a little-endian `u32` version, then
//! sections of `tag[4] | u32 length | payload`. `META` (JSON) comes first
//! and describes the shapes of the float sections that follow. Parameters
//! are stored as little-endian `f32` in the models' visitation order.
//!
//! | tag    | payload                                  |
//! |--------|------------------------------------------|
//! | `META` | JSON [`Meta`]                            |
//! | `HEAD` | head field parameters                    |
//! | `OCCG` | occupancy density cache, `resolution^3`  |
//! | `TORS` | torso field parameters (incl. key points)|

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldrepr::{Backbone, OccupancyGrid};
use crate::geom::{Aabb, Vec3};
use crate::nets::{HeadField, HeadFieldConfig, TorsoField, TorsoFieldConfig};
use crate::params::Parameters;
use crate::scene::AabbRecord;

pub const MAGIC: &[u8; 8] = b"ERNFCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OccupancyMeta {
    pub resolution: usize,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub aabb: AabbRecord,
    pub head: Option<HeadFieldConfig>,
    pub occupancy: Option<OccupancyMeta>,
    pub torso: Option<TorsoFieldConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub aabb: Aabb,
    pub head: Option<HeadField>,
    pub occupancy: Option<OccupancyGrid>,
    pub torso: Option<TorsoField>,
}

fn bad(m: impl Into<String>) -> Error {
    Error::Checkpoint(m.into())
}

fn push_section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
}

fn floats(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(|v| (v as f32).to_le_bytes()).collect()
}

fn params_bytes(p: &impl Parameters) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * p.param_count());
    p.visit(&mut |_, s| out.extend(s.iter().flat_map(|&v| (v as f32).to_le_bytes())));
    out
}

fn read_floats(payload: &[u8], expected: usize, what: &str) -> Result<Vec<f64>> {
    if payload.len() != 4 * expected {
        return Err(bad(format!("{what}: expected {expected} values, found {} bytes", payload.len())));
    }
    let v: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if !v.iter().all(|x| x.is_finite()) {
        return Err(bad(format!("{what}: non-finite value")));
    }
    Ok(v)
}

/// Encoder parameter count implied by a head config, without allocating.
fn head_encoder_len(c: &HeadFieldConfig) -> u128 {
    let per = c.grid.levels as u128 * c.grid.table_size as u128 * c.grid.features as u128;
    match c.backbone {
        Backbone::Trihash => 3 * per,
        Backbone::Hash3d => per,
    }
}

impl Checkpoint {
    pub fn meta(&self) -> Meta {
        Meta {
            aabb: AabbRecord {
                min: [self.aabb.min.x, self.aabb.min.y, self.aabb.min.z],
                max: [self.aabb.max.x, self.aabb.max.y, self.aabb.max.z],
            },
            head: self.head.as_ref().map(HeadField::config),
            occupancy: self.occupancy.as_ref().map(|o| OccupancyMeta {
                resolution: o.resolution,
                threshold: o.threshold,
            }),
            torso: self.torso.as_ref().map(TorsoField::config),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta()).expect("meta serializes");
        push_section(&mut out, b"META", &meta);
        if let Some(h) = &self.head {
            push_section(&mut out, b"HEAD", &params_bytes(h));
        }
        if let Some(o) = &self.occupancy {
            push_section(&mut out, b"OCCG", &floats(o.density_cache.iter().copied()));
        }
        if let Some(t) = &self.torso {
            push_section(&mut out, b"TORS", &params_bytes(t));
        }
        out
    }

    pub fn decode(data: &[u8]) -> Result<Self> {
        if data.len() < 12 || &data[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(data[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut sections: Vec<([u8; 4], &[u8])> = Vec::new();
        let mut pos = 12;
        while pos < data.len() {
            if data.len() - pos < 8 {
                return Err(bad("truncated section header"));
            }
            let tag: [u8; 4] = data[pos..pos + 4].try_into().expect("4 bytes");
            let len = u32::from_le_bytes(data[pos + 4..pos + 8].try_into().expect("4 bytes")) as usize;
            pos += 8;
            if data.len() - pos < len {
                return Err(bad(format!("section {} truncated", String::from_utf8_lossy(&tag))));
            }
            if sections.iter().any(|s| s.0 == tag) {
                return Err(bad(format!("duplicate section {}", String::from_utf8_lossy(&tag))));
            }
            sections.push((tag, &data[pos..pos + len]));
            pos += len;
        }
        let find = |tag: &[u8; 4]| sections.iter().find(|s| &s.0 == tag).map(|s| s.1);
        if let Some(s) = sections.iter().find(|s| !matches!(&s.0, b"META" | b"HEAD" | b"OCCG" | b"TORS")) {
            return Err(bad(format!("unknown section {:?}", String::from_utf8_lossy(&s.0))));
        }
        if sections.first().map(|s| &s.0) != Some(b"META") {
            return Err(bad("META must be the first section"));
        }
        let meta: Meta = serde_json::from_slice(find(b"META").expect("checked")).map_err(|e| bad(format!("META: {e}")))?;
        let aabb = Aabb::new(Vec3::from(meta.aabb.min), Vec3::from(meta.aabb.max)).map_err(|e| bad(format!("aabb: {e}")))?;
        // Any fixed seed will do: every parameter is overwritten.
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        let head = match (&meta.head, find(b"HEAD")) {
            (None, None) => None,
            (Some(cfg), Some(payload)) => {
                cfg.grid.validate().map_err(|e| bad(format!("head grid: {e}")))?;
                if head_encoder_len(cfg) > payload.len() as u128 / 4 {
                    return Err(bad("HEAD section smaller than its configuration"));
                }
                let mut field = HeadField::new(cfg, &mut rng).map_err(|e| bad(format!("head: {e}")))?;
                field.load_flat(&read_floats(payload, field.param_count(), "HEAD")?);
                field.validate()?;
                Some(field)
            }
            _ => return Err(bad("head configuration and HEAD section must appear together")),
        };

        let occupancy = match (&meta.occupancy, find(b"OCCG")) {
            (None, None) => None,
            (Some(m), Some(payload)) => {
                let cells = (m.resolution as u128).pow(3);
                if m.resolution == 0 || cells != payload.len() as u128 / 4 {
                    return Err(bad("OCCG size does not match its resolution"));
                }
                let mut grid = OccupancyGrid::new(m.resolution, m.threshold, aabb).map_err(|e| bad(format!("occupancy: {e}")))?;
                grid.density_cache = read_floats(payload, cells as usize, "OCCG")?;
                Some(grid)
            }
            _ => return Err(bad("occupancy metadata and OCCG section must appear together")),
        };

        let torso = match (&meta.torso, find(b"TORS")) {
            (None, None) => None,
            (Some(cfg), Some(payload)) => {
                cfg.grid.validate().map_err(|e| bad(format!("torso grid: {e}")))?;
                let n = cfg.grid.levels as u128 * cfg.grid.table_size as u128 * cfg.grid.features as u128;
                if n > payload.len() as u128 / 4 {
                    return Err(bad("TORS section smaller than its configuration"));
                }
                let mut field = TorsoField::new(cfg, &mut rng).map_err(|e| bad(format!("torso: {e}")))?;
                field.load_flat(&read_floats(payload, field.param_count(), "TORS")?);
                field.validate()?;
                Some(field)
            }
            _ => return Err(bad("torso configuration and TORS section must appear together")),
        };

        if head.is_none() && torso.is_none() {
            return Err(bad("checkpoint holds no model"));
        }
        Ok(Checkpoint {
            aabb,
            head,
            occupancy,
            torso,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&data).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Rounds every stored value to `f32`, as a save/load cycle would.
    pub fn quantized(&self) -> Checkpoint {
        Checkpoint::decode(&self.encode()).expect("own encoding decodes")
    }
}
