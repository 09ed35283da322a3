//! Scene description: boxes and triangles with a reflection material, loaded
//! from the scene JSON format.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Aabb, Vec3, WorldTransform};
use crate::error::{Error, Result};

pub const DEFAULT_REFLECTION_AMPLITUDE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub reflection_amplitude: f64,
}

impl Default for Material {
    fn default() -> Self {
        Self {
            reflection_amplitude: DEFAULT_REFLECTION_AMPLITUDE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Primitive {
    /// Axis-aligned solid box.
    Box {
        min: [f64; 3],
        max: [f64; 3],
        #[serde(default)]
        material: Material,
    },
    /// Thin two-sided triangle.
    Triangle {
        v: [[f64; 3]; 3],
        #[serde(default)]
        material: Material,
    },
}

impl Primitive {
    pub fn material(&self) -> Material {
        match self {
            Primitive::Box { material, .. } | Primitive::Triangle { material, .. } => *material,
        }
    }

    pub fn aabb(&self) -> Aabb {
        match self {
            Primitive::Box { min, max, .. } => Aabb::new(Vec3::from(*min), Vec3::from(*max)),
            Primitive::Triangle { v, .. } => {
                let mut b = Aabb::point(Vec3::from(v[0]));
                b.include(Vec3::from(v[1]));
                b.include(Vec3::from(v[2]));
                b
            }
        }
    }

    pub fn surface_area(&self) -> f64 {
        match self {
            Primitive::Box { min, max, .. } => {
                let e = Vec3::from(*max) - Vec3::from(*min);
                2.0 * (e.x * e.y + e.y * e.z + e.z * e.x)
            }
            Primitive::Triangle { v, .. } => {
                let [a, b, c] = v.map(Vec3::from);
                0.5 * (b - a).cross(&(c - a)).norm()
            }
        }
    }

    /// Strict interior test. Triangles have no interior.
    pub fn contains_strictly(&self, p: &Vec3) -> bool {
        match self {
            Primitive::Box { min, max, .. } => {
                (0..3).all(|i| p[i] > min[i] && p[i] < max[i])
            }
            Primitive::Triangle { .. } => false,
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        let gamma = self.material().reflection_amplitude;
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::validation(format!(
                "primitive {index}: reflection_amplitude {gamma} outside [0, 1]"
            )));
        }
        match self {
            Primitive::Box { min, max, .. } => {
                if !finite(min) || !finite(max) {
                    return Err(Error::validation(format!("primitive {index}: non-finite box")));
                }
                if (0..3).any(|i| min[i] > max[i]) {
                    return Err(Error::validation(format!(
                        "primitive {index}: box min {min:?} exceeds max {max:?}"
                    )));
                }
            }
            Primitive::Triangle { v, .. } => {
                if !v.iter().all(|p| finite(p)) {
                    return Err(Error::validation(format!(
                        "primitive {index}: non-finite triangle"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// On-disk scene document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    #[serde(default = "default_units")]
    pub units: String,
    pub primitives: Vec<Primitive>,
    /// Optional simulation volume; the scene bounds are the union of this box
    /// and the primitives' bounding box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extent: Option<Aabb>,
}

fn default_units() -> String {
    "m".to_string()
}

/// Scene geometry plus (after sampling) its point cloud.
///
/// `points` are in meters until [`normalize_scene`](super::normalize_scene)
/// runs, after which they live in the unit cube and `world_transform` maps
/// them back to meters.
#[derive(Debug, Clone)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub extent: Option<Aabb>,
    pub bounds: Aabb,
    pub points: Vec<Vec3>,
    /// Index of the primitive each point was sampled from.
    pub point_sources: Vec<usize>,
    pub world_transform: Option<WorldTransform>,
}

impl Scene {
    pub fn new(primitives: Vec<Primitive>, extent: Option<Aabb>) -> Result<Self> {
        for (i, p) in primitives.iter().enumerate() {
            p.validate(i)?;
        }
        let mut bounds = match (primitives.first(), extent) {
            (Some(p), _) => p.aabb(),
            (None, Some(e)) => e,
            (None, None) => return Err(Error::validation("scene has no primitives")),
        };
        for p in &primitives {
            bounds = bounds.union(&p.aabb());
        }
        if let Some(e) = extent {
            bounds = bounds.union(&e);
        }
        Ok(Self {
            primitives,
            extent,
            bounds,
            points: Vec::new(),
            point_sources: Vec::new(),
            world_transform: None,
        })
    }

    pub fn from_file(file: SceneFile) -> Result<Self> {
        if file.units != "m" {
            return Err(Error::validation(format!(
                "unsupported units {:?}, expected \"m\"",
                file.units
            )));
        }
        Self::new(file.primitives, file.extent)
    }

    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        let file: SceneFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Self::from_file(file)
    }

    pub fn to_file(&self) -> SceneFile {
        SceneFile {
            units: default_units(),
            primitives: self.primitives.clone(),
            extent: self.extent,
        }
    }

    /// SHA-256 of the canonical JSON serialization of the geometry.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_file()).expect("scene serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn is_normalized(&self) -> bool {
        self.world_transform.is_some()
    }

    /// True if `p` (meters) lies strictly inside any solid box.
    pub fn inside_solid(&self, p: &Vec3) -> bool {
        self.primitives.iter().any(|prim| prim.contains_strictly(p))
    }
}

/// Reads and validates a scene JSON file. No points are sampled.
pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Scene::from_json_str(&text, path)
}
