use std::f64::consts::FRAC_PI_2;

use nalgebra::Rotation3;

use super::Vec3;
use crate::error::{Error, Result};

pub const GAIN_FLOOR_DBI: f64 = -40.0;

/// The four transmit patterns a dataset may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatternKind {
    Isotropic = 0,
    /// Broad single-lobe element, 8 dBi boresight, 65° half-power width.
    Patch = 1,
    /// Vertical half-wave dipole.
    Dipole = 2,
    /// Narrow sector beam, 14 dBi boresight, 30° half-power width.
    Sector = 3,
}

impl PatternKind {
    pub const COUNT: usize = 4;

    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(Self::Isotropic),
            1 => Ok(Self::Patch),
            2 => Ok(Self::Dipole),
            3 => Ok(Self::Sector),
            _ => Err(Error::validation(format!("pattern_id {id} outside 0..=3"))),
        }
    }

    pub fn id(self) -> u32 {
        self as u32
    }
}

/// Parabolic main lobe clipped at a side-lobe level.
fn beam_gain(cos_off_boresight: f64, peak_dbi: f64, half_power_deg: f64, sidelobe_db: f64) -> f64 {
    let psi = cos_off_boresight.clamp(-1.0, 1.0).acos().to_degrees();
    peak_dbi - (12.0 * (psi / half_power_deg).powi(2)).min(sidelobe_db)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AntennaPattern {
    pub kind: PatternKind,
    /// Antenna frame → world frame. Boresight is the frame's +x, the dipole
    /// axis its +z.
    pub orientation: Rotation3<f64>,
}

impl AntennaPattern {
    pub fn new(kind: PatternKind) -> Self {
        Self {
            kind,
            orientation: Rotation3::identity(),
        }
    }

    pub fn from_id(id: u32) -> Result<Self> {
        PatternKind::from_id(id).map(Self::new)
    }

    pub fn with_orientation(mut self, orientation: Rotation3<f64>) -> Self {
        self.orientation = orientation;
        self
    }

    /// Gain in dBi for a unit direction expressed in the antenna frame.
    pub fn gain_dbi_local(&self, dir: &Vec3) -> f64 {
        let g = match self.kind {
            PatternKind::Isotropic => return 0.0,
            PatternKind::Patch => beam_gain(dir.x, 8.0, 65.0, 30.0),
            PatternKind::Dipole => {
                let cos_t = dir.z.clamp(-1.0, 1.0);
                let sin_t = (1.0 - cos_t * cos_t).sqrt();
                if sin_t < 1e-12 {
                    GAIN_FLOOR_DBI
                } else {
                    let field = (FRAC_PI_2 * cos_t).cos() / sin_t;
                    2.15 + 20.0 * field.abs().max(1e-300).log10()
                }
            }
            PatternKind::Sector => beam_gain(dir.x, 14.0, 30.0, 30.0),
        };
        g.max(GAIN_FLOOR_DBI)
    }

    /// Gain in dBi toward a world-frame direction (need not be unit length).
    pub fn gain_dbi(&self, world_dir: &Vec3) -> f64 {
        let norm = world_dir.norm();
        if norm == 0.0 {
            return self.gain_dbi_local(&Vec3::x());
        }
        let local = self.orientation.inverse() * (world_dir / norm);
        self.gain_dbi_local(&local)
    }

    pub fn gain_linear(&self, world_dir: &Vec3) -> f64 {
        10f64.powf(self.gain_dbi(world_dir) / 10.0)
    }
}
