use super::{Scene, Vec3, WorldTransform};
use crate::error::{Error, Result};

/// Probe grid spacing used when none is configured: one eighth of the longest
/// bounds axis.
pub fn default_probe_spacing(scene: &Scene) -> f64 {
    scene.bounds.longest_axis() / 8.0
}

/// Places light probes on a regular grid (spacing in meters) anchored at the
/// bounds minimum and including the boundary planes. Probes strictly inside a
/// solid box are dropped. Returned positions are normalized.
pub fn place_probes(scene: &Scene, spacing: f64) -> Result<Vec<Vec3>> {
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(Error::validation(format!(
            "probe spacing must be positive, got {spacing}"
        )));
    }
    let transform = match scene.world_transform {
        Some(t) => t,
        None => WorldTransform::from_bounds(&scene.bounds)?,
    };
    let extent = scene.bounds.extent();
    if (0..3).all(|i| extent[i] < spacing) {
        log::warn!(
            "probe spacing {spacing} m exceeds every bounds extent; placing a single probe at the center"
        );
        return Ok(vec![transform.to_normalized(&scene.bounds.center())]);
    }
    // The epsilon keeps exact multiples (60 / 7.5) from losing a plane to rounding.
    let counts: Vec<usize> = (0..3)
        .map(|i| (extent[i] / spacing + 1e-9).floor() as usize + 1)
        .collect();
    let min = scene.bounds.min;
    let mut probes = Vec::with_capacity(counts.iter().product());
    for iz in 0..counts[2] {
        for iy in 0..counts[1] {
            for ix in 0..counts[0] {
                let p = Vec3::new(
                    min.x + ix as f64 * spacing,
                    min.y + iy as f64 * spacing,
                    min.z + iz as f64 * spacing,
                );
                if !scene.inside_solid(&p) {
                    probes.push(transform.to_normalized(&p));
                }
            }
        }
    }
    if probes.is_empty() {
        return Err(Error::validation("every probe candidate lies inside a solid"));
    }
    Ok(probes)
}
