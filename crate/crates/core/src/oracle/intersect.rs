//! Segment occlusion tests and planar reflector faces.

use crate::geometry::{Primitive, Vec3};

/// End clipping applied to every occlusion test, in meters.
pub const SEGMENT_EPS: f64 = 1e-9;

/// Does the segment `a → b` pass through `prim` strictly between its
/// end-clipped parameters `lo..hi`?
fn primitive_hits(prim: &Primitive, a: &Vec3, dir: &Vec3, lo: f64, hi: f64) -> bool {
    match prim {
        Primitive::Triangle { v, .. } => {
            let [p0, p1, p2] = v.map(Vec3::from);
            let e1 = p1 - p0;
            let e2 = p2 - p0;
            let h = dir.cross(&e2);
            let det = e1.dot(&h);
            if det.abs() < 1e-300 {
                return false;
            }
            let inv = 1.0 / det;
            let s = a - p0;
            let u = inv * s.dot(&h);
            if !(0.0..=1.0).contains(&u) {
                return false;
            }
            let q = s.cross(&e1);
            let w = inv * dir.dot(&q);
            if w < 0.0 || u + w > 1.0 {
                return false;
            }
            let t = inv * e2.dot(&q);
            t > lo && t < hi
        }
        Primitive::Box { min, max, .. } => {
            let mut t0 = f64::NEG_INFINITY;
            let mut t1 = f64::INFINITY;
            for i in 0..3 {
                if dir[i] == 0.0 {
                    if a[i] < min[i] || a[i] > max[i] {
                        return false;
                    }
                } else {
                    let inv = 1.0 / dir[i];
                    let (ta, tb) = ((min[i] - a[i]) * inv, (max[i] - a[i]) * inv);
                    t0 = t0.max(ta.min(tb));
                    t1 = t1.min(ta.max(tb));
                }
            }
            t0 <= t1 && t1 > lo && t0 < hi
        }
    }
}

/// True if the open segment between `a` and `b` intersects any primitive.
pub fn segment_blocked(prims: &[Primitive], a: &Vec3, b: &Vec3) -> bool {
    let dir = b - a;
    let len = dir.norm();
    if len <= 2.0 * SEGMENT_EPS {
        return false;
    }
    let lo = SEGMENT_EPS / len;
    let hi = 1.0 - lo;
    prims.iter().any(|p| primitive_hits(p, a, &dir, lo, hi))
}

/// Convex planar reflector derived from a primitive.
#[derive(Debug, Clone)]
pub struct Face {
    pub vertices: Vec<Vec3>,
    pub normal: Vec3,
    pub offset: f64,
    /// Normal of the vertex winding, for the containment test.
    winding: Vec3,
    pub gamma: f64,
    pub primitive: usize,
    /// Box faces reflect only on their outward side.
    pub two_sided: bool,
}

impl Face {
    fn new(vertices: Vec<Vec3>, outward: Option<Vec3>, gamma: f64, primitive: usize) -> Option<Self> {
        let winding = (vertices[1] - vertices[0]).cross(&(vertices[2] - vertices[0]));
        let norm = winding.norm();
        if norm < 1e-12 {
            return None;
        }
        let normal = outward.unwrap_or(winding / norm);
        Some(Self {
            offset: normal.dot(&vertices[0]),
            two_sided: outward.is_none(),
            vertices,
            normal,
            winding,
            gamma,
            primitive,
        })
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }

    pub fn mirror(&self, p: &Vec3) -> Vec3 {
        p - self.normal * (2.0 * self.signed_distance(p))
    }

    /// Inclusive containment of a point already on the face plane.
    pub fn contains(&self, p: &Vec3) -> bool {
        let n = self.vertices.len();
        let scale = self.winding.norm();
        (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            (b - a).cross(&(p - a)).dot(&self.winding) >= -1e-9 * scale
        })
    }

    /// Can a ray arrive from / leave toward a point at signed distance `s`?
    pub fn reflects_from(&self, s: f64) -> bool {
        if self.two_sided {
            s != 0.0
        } else {
            s > 0.0
        }
    }

    pub fn coplanar_with(&self, other: &Face) -> bool {
        let dot = self.normal.dot(&other.normal);
        (dot.abs() > 1.0 - 1e-12) && (self.offset * dot.signum() - other.offset).abs() < 1e-9
    }
}

pub fn scene_faces(prims: &[Primitive]) -> Vec<Face> {
    let mut faces = Vec::new();
    for (index, prim) in prims.iter().enumerate() {
        let gamma = prim.material().reflection_amplitude;
        match prim {
            Primitive::Triangle { v, .. } => {
                faces.extend(Face::new(v.map(Vec3::from).to_vec(), None, gamma, index));
            }
            Primitive::Box { min, max, .. } => {
                let rects = crate::geometry::box_faces(&Vec3::from(*min), &Vec3::from(*max));
                for (k, (o, u, v)) in rects.iter().enumerate() {
                    let axis = k / 2;
                    let mut outward = Vec3::zeros();
                    outward[axis] = if k % 2 == 0 { -1.0 } else { 1.0 };
                    let verts = vec![*o, o + u, o + u + v, o + v];
                    faces.extend(Face::new(verts, Some(outward), gamma, index));
                }
            }
        }
    }
    faces
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Material;

    fn boxp(min: [f64; 3], max: [f64; 3]) -> Primitive {
        Primitive::Box { min, max, material: Material::default() }
    }

    #[test]
    fn box_on_axis_blocks() {
        let prims = vec![boxp([4.0, -1.0, 0.0], [6.0, 1.0, 2.0])];
        assert!(segment_blocked(&prims, &Vec3::new(0., 0., 1.), &Vec3::new(10., 0., 1.)));
    }

    #[test]
    fn segment_passes_above_box() {
        let prims = vec![boxp([4.0, -1.0, 0.0], [6.0, 1.0, 0.5])];
        assert!(!segment_blocked(&prims, &Vec3::new(0., 0., 1.), &Vec3::new(10., 0., 1.)));
    }

    #[test]
    fn endpoints_on_surface_are_clipped() {
        let prims = vec![boxp([0.0; 3], [1.0; 3])];
        // leaves the +x face outward
        assert!(!segment_blocked(&prims, &Vec3::new(1.0, 0.5, 0.5), &Vec3::new(3.0, 0.7, 0.5)));
        // enters the box
        assert!(segment_blocked(&prims, &Vec3::new(1.0, 0.5, 0.5), &Vec3::new(0.5, 0.5, 0.5)));
    }

    #[test]
    fn triangle_hit_and_miss() {
        let tri = vec![Primitive::Triangle {
            v: [[0., -1., -1.], [0., 1., -1.], [0., 0., 1.]],
            material: Material::default(),
        }];
        assert!(segment_blocked(&tri, &Vec3::new(-1., 0., 0.), &Vec3::new(1., 0., 0.)));
        assert!(!segment_blocked(&tri, &Vec3::new(-1., 0., 2.), &Vec3::new(1., 0., 2.)));
        assert!(!segment_blocked(&tri, &Vec3::new(-1., 0., 0.), &Vec3::new(-0.5, 0., 0.)));
    }

    #[test]
    fn box_faces_point_outward() {
        let faces = scene_faces(&[boxp([0.0; 3], [1.0, 2.0, 3.0])]);
        assert_eq!(faces.len(), 6);
        let center = Vec3::new(0.5, 1.0, 1.5);
        for f in &faces {
            assert!(f.signed_distance(&center) < 0.0);
            let on_face = f.vertices.iter().sum::<Vec3>() / 4.0;
            assert!(f.contains(&on_face));
        }
    }
}
