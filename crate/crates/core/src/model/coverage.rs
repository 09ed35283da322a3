//! Coverage-map files: `RPNM0001`, u32 LE header length, JSON header, then
//! row-major little-endian f32 values. Optional PGM preview.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};

pub const MAP_MAGIC: &[u8; 8] = b"RPNM0001";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapHeader {
    pub bounds: Aabb,
    pub height: f64,
    pub resolution: usize,
    #[serde(rename = "P_min_db")]
    pub p_min_db: f64,
    #[serde(rename = "P_max_db")]
    pub p_max_db: f64,
}

/// Normalized received power over a `resolution × resolution` grid of cell
/// centers; row `i` is the `i`-th y cell, column `j` the `j`-th x cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageMap {
    pub header: MapHeader,
    pub values: Vec<f32>,
}

impl CoverageMap {
    /// Cell-center receiver positions in row-major order.
    pub fn receivers(bounds: &Aabb, height: f64, resolution: usize) -> Vec<Vec3> {
        let step = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * (i as f64 + 0.5) / resolution as f64;
        let mut out = Vec::with_capacity(resolution * resolution);
        for i in 0..resolution {
            let y = step(bounds.min.y, bounds.max.y, i);
            for j in 0..resolution {
                out.push(Vec3::new(step(bounds.min.x, bounds.max.x, j), y, height));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let r = self.header.resolution;
        if self.values.len() != r * r {
            return Err(Error::validation(format!("{} map values for resolution {r}", self.values.len())));
        }
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::format(e.to_string()))?;
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.values.len());
        out.extend_from_slice(MAP_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAP_MAGIC {
            return Err(Error::format("not a coverage map (bad magic)"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes
            .get(12..12 + len)
            .ok_or_else(|| Error::format("truncated map header"))?;
        let header: MapHeader =
            serde_json::from_slice(body).map_err(|e| Error::format(format!("map header: {e}")))?;
        let payload = &bytes[12 + len..];
        if payload.len() != 4 * header.resolution * header.resolution {
            return Err(Error::format(format!(
                "map payload of {} bytes for resolution {}",
                payload.len(),
                header.resolution
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { header, values })
    }

    /// Binary grayscale PGM; the first image row is the largest y.
    pub fn to_pgm(&self) -> Vec<u8> {
        let r = self.header.resolution;
        let mut out = format!("P5\n{r} {r}\n255\n").into_bytes();
        for i in (0..r).rev() {
            for v in &self.values[i * r..(i + 1) * r] {
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_map(map: &CoverageMap, path: &Path) -> Result<()> {
    write_all(path, &map.to_bytes()?)
}

pub fn read_map(path: &Path) -> Result<CoverageMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    CoverageMap::from_bytes(&bytes)
}

pub fn write_pgm(map: &CoverageMap, path: &Path) -> Result<()> {
    write_all(path, &map.to_pgm())
}
