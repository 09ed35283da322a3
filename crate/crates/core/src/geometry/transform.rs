use serde::{Deserialize, Serialize};

use super::{Aabb, Scene, Vec3};
use crate::error::{Error, Result};

/// Uniform scale plus translation between meters and the unit cube.
///
/// The longest bounds axis maps to `[-1, 1]`; the bounds center maps to the
/// origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldTransform {
    pub center: Vec3,
    /// Meters per normalized unit (half of the longest bounds axis).
    pub half_extent: f64,
}

impl WorldTransform {
    pub fn from_bounds(bounds: &Aabb) -> Result<Self> {
        let longest = bounds.longest_axis();
        if !(longest > 0.0) || !longest.is_finite() {
            return Err(Error::validation(format!(
                "degenerate bounds {:?}..{:?}",
                bounds.min.as_slice(),
                bounds.max.as_slice()
            )));
        }
        Ok(Self {
            center: bounds.center(),
            half_extent: 0.5 * longest,
        })
    }

    /// Multiplicative factor applied to meters.
    pub fn scale(&self) -> f64 {
        1.0 / self.half_extent
    }

    pub fn to_normalized(&self, p: &Vec3) -> Vec3 {
        (p - self.center) / self.half_extent
    }

    pub fn to_world(&self, q: &Vec3) -> Vec3 {
        q * self.half_extent + self.center
    }

    pub fn length_to_normalized(&self, meters: f64) -> f64 {
        meters / self.half_extent
    }
}

/// Maps the sampled points into `[-1, 1]^3` and records the inverse map.
pub fn normalize_scene(mut scene: Scene) -> Result<Scene> {
    if scene.is_normalized() {
        return Ok(scene);
    }
    if scene.points.is_empty() {
        return Err(Error::validation("normalize_scene: no points sampled"));
    }
    let transform = WorldTransform::from_bounds(&scene.bounds)?;
    for p in &mut scene.points {
        // Clamp absorbs the last-ulp overshoot at the bounds faces.
        *p = transform.to_normalized(p).map(|c| c.clamp(-1.0, 1.0));
    }
    scene.world_transform = Some(transform);
    Ok(scene)
}
