//! Scene ingestion, point-cloud sampling, normalization, light-probe placement
//! and the nearest-neighbor link structure consumed by the network.

mod antenna;
mod knn;
mod links;
mod probes;
mod sampling;
mod scene;
mod transform;

pub use antenna::{AntennaPattern, PatternKind, GAIN_FLOOR_DBI};
pub use knn::KdTree;
pub use links::{build_links, direction_geometry, Link, LinkSet, LinkOptions, ProbeGraph};
pub use probes::{default_probe_spacing, place_probes};
pub use sampling::sample_point_cloud;
pub(crate) use sampling::box_faces;
pub use scene::{load_scene, Material, Primitive, Scene, SceneFile, DEFAULT_REFLECTION_AMPLITUDE};
pub use transform::{normalize_scene, WorldTransform};

use serde::{Deserialize, Serialize};

pub type Vec3 = nalgebra::Vector3<f64>;

/// Axis-aligned bounding box in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn point(p: Vec3) -> Self {
        Self { min: p, max: p }
    }

    pub fn include(&mut self, p: Vec3) {
        self.min = self.min.inf(&p);
        self.max = self.max.sup(&p);
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn longest_axis(&self) -> f64 {
        self.extent().max()
    }

    /// Closed containment test.
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}
