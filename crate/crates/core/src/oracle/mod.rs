//! Deterministic ground-truth generator: line of sight, image-method
//! reflections up to second order, and an optional single knife edge.
//! Path powers add incoherently.

mod dataset;
mod intersect;

pub use dataset::{
    generate_dataset, parse_dataset, read_dataset, sample_transmitters, write_dataset, Dataset, DatasetHeader,
    Record, RxGrid, Split, DATASET_MAGIC,
};
pub use intersect::{scene_faces, segment_blocked, Face, SEGMENT_EPS};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AntennaPattern, Primitive, Scene, Vec3};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub frequency_hz: f64,
    pub max_reflection_order: u32,
    pub diffraction_enabled: bool,
    pub p_min_db: f64,
    pub p_max_db: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            frequency_hz: 2.14e9,
            max_reflection_order: 2,
            diffraction_enabled: false,
            p_min_db: -160.0,
            p_max_db: -50.0,
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frequency_hz > 0.0) || !self.frequency_hz.is_finite() {
            return Err(Error::validation(format!("frequency {} Hz must be positive", self.frequency_hz)));
        }
        if self.max_reflection_order > 2 {
            return Err(Error::validation(format!(
                "max_reflection_order {} unsupported (0..=2)",
                self.max_reflection_order
            )));
        }
        if !(self.p_min_db < self.p_max_db) {
            return Err(Error::validation(format!(
                "normalization bounds inverted: P_min {} dB, P_max {} dB",
                self.p_min_db, self.p_max_db
            )));
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.frequency_hz
    }

    /// Maps path gain in dB onto `[0, 1]`; `-inf` maps to 0.
    pub fn normalize_db(&self, p_db: f64) -> f64 {
        if p_db == f64::NEG_INFINITY {
            return 0.0;
        }
        ((p_db - self.p_min_db) / (self.p_max_db - self.p_min_db)).clamp(0.0, 1.0)
    }

    pub fn denormalize(&self, p_norm: f64) -> f64 {
        self.p_min_db + p_norm * (self.p_max_db - self.p_min_db)
    }

    /// Free-space gain `(λ / 4πd)^2`, linear.
    pub fn free_space_gain(&self, distance: f64) -> f64 {
        let r = self.wavelength() / (4.0 * PI * distance);
        r * r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LosPath {
    pub length: f64,
    pub blocked: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReflectionPath {
    /// Unfolded length (distance from the last image to the receiver).
    pub length: f64,
    /// Product of the per-bounce reflection amplitudes.
    pub gamma_product: f64,
    pub points: Vec<Vec3>,
    pub faces: Vec<usize>,
}

impl ReflectionPath {
    pub fn order(&self) -> usize {
        self.points.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffractionPath {
    pub nu: f64,
    pub loss_db: f64,
    pub edge_point: Vec3,
    pub direct_length: f64,
}

/// Received power for one (tx, pattern, rx) triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub tx: Vec3,
    pub pattern_id: u32,
    pub rx: Vec3,
    pub p_db: f64,
    pub p_norm: f64,
}

/// Knife-edge diffraction loss `J(ν)` in dB (ITU-R P.526 approximation).
pub fn knife_edge_loss(nu: f64) -> f64 {
    if nu <= -0.78 {
        return 0.0;
    }
    let a = nu - 0.1;
    6.9 + 20.0 * ((a * a + 1.0).sqrt() + a).log10()
}

/// Scene geometry prepared for repeated tracing.
#[derive(Debug, Clone)]
pub struct Tracer {
    prims: Vec<Primitive>,
    faces: Vec<Face>,
    cfg: TraceConfig,
}

fn check_endpoints(tx: &Vec3, rx: &Vec3) -> Result<()> {
    if tx == rx {
        return Err(Error::validation("transmitter and receiver coincide"));
    }
    if !(tx.iter().chain(rx.iter()).all(|c| c.is_finite())) {
        return Err(Error::validation("non-finite transmitter/receiver position"));
    }
    Ok(())
}

/// Point where the segment `from → to` crosses the plane of `face`, if the
/// endpoints lie strictly on opposite sides.
fn plane_crossing(face: &Face, from: &Vec3, to: &Vec3) -> Option<Vec3> {
    let a = face.signed_distance(from);
    let b = face.signed_distance(to);
    if !(a * b < 0.0) {
        return None;
    }
    let t = a / (a - b);
    Some(from + (to - from) * t)
}

impl Tracer {
    pub fn new(scene: &Scene, cfg: TraceConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            prims: scene.primitives.clone(),
            faces: scene_faces(&scene.primitives),
            cfg,
        })
    }

    pub fn config(&self) -> &TraceConfig {
        &self.cfg
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    fn blocked(&self, a: &Vec3, b: &Vec3) -> bool {
        segment_blocked(&self.prims, a, b)
    }

    pub fn los(&self, tx: &Vec3, rx: &Vec3) -> Result<LosPath> {
        check_endpoints(tx, rx)?;
        Ok(LosPath {
            length: (rx - tx).norm(),
            blocked: self.blocked(tx, rx),
        })
    }

    fn first_order(&self, tx: &Vec3, rx: &Vec3, out: &mut Vec<ReflectionPath>) {
        for (fi, f) in self.faces.iter().enumerate() {
            let s_tx = f.signed_distance(tx);
            let s_rx = f.signed_distance(rx);
            if !f.reflects_from(s_tx) || s_tx * s_rx <= 0.0 {
                continue;
            }
            let image = f.mirror(tx);
            let Some(hit) = plane_crossing(f, &image, rx) else { continue };
            if !f.contains(&hit) || self.blocked(tx, &hit) || self.blocked(&hit, rx) {
                continue;
            }
            out.push(ReflectionPath {
                length: (rx - image).norm(),
                gamma_product: f.gamma,
                points: vec![hit],
                faces: vec![fi],
            });
        }
    }

    fn second_order(&self, tx: &Vec3, rx: &Vec3, out: &mut Vec<ReflectionPath>) {
        for (i1, f1) in self.faces.iter().enumerate() {
            let s_tx = f1.signed_distance(tx);
            if !f1.reflects_from(s_tx) {
                continue;
            }
            let image1 = f1.mirror(tx);
            for (i2, f2) in self.faces.iter().enumerate() {
                if i1 == i2 || f1.coplanar_with(f2) {
                    continue;
                }
                let s_rx = f2.signed_distance(rx);
                if !f2.reflects_from(s_rx) {
                    continue;
                }
                let image2 = f2.mirror(&image1);
                let Some(hit2) = plane_crossing(f2, &image2, rx) else { continue };
                if !f2.contains(&hit2) {
                    continue;
                }
                let Some(hit1) = plane_crossing(f1, &image1, &hit2) else { continue };
                if !f1.contains(&hit1) {
                    continue;
                }
                // the middle leg must leave f1 and arrive at f2 on their reflecting sides
                let s_mid1 = f1.signed_distance(&hit2);
                let s_mid2 = f2.signed_distance(&hit1);
                if s_mid1 * s_tx <= 0.0 || s_mid2 * s_rx <= 0.0 || !f2.reflects_from(s_mid2) {
                    continue;
                }
                if self.blocked(tx, &hit1) || self.blocked(&hit1, &hit2) || self.blocked(&hit2, rx) {
                    continue;
                }
                out.push(ReflectionPath {
                    length: (rx - image2).norm(),
                    gamma_product: f1.gamma * f2.gamma,
                    points: vec![hit1, hit2],
                    faces: vec![i1, i2],
                });
            }
        }
    }

    pub fn reflections(&self, tx: &Vec3, rx: &Vec3) -> Result<Vec<ReflectionPath>> {
        check_endpoints(tx, rx)?;
        let mut paths = Vec::new();
        if self.cfg.max_reflection_order >= 1 {
            self.first_order(tx, rx, &mut paths);
        }
        if self.cfg.max_reflection_order >= 2 {
            self.second_order(tx, rx, &mut paths);
        }
        // A hit on an edge shared by coplanar faces is found once per face.
        let mut unique: Vec<ReflectionPath> = Vec::with_capacity(paths.len());
        for p in paths {
            let dup = unique.iter().any(|q| {
                q.order() == p.order()
                    && q.points.iter().zip(&p.points).all(|(a, b)| (a - b).norm() < 1e-9)
            });
            if !dup {
                unique.push(p);
            }
        }
        Ok(unique)
    }

    /// Dominant knife edge for a blocked LOS: the box top edge, among boxes
    /// that obstruct the segment, with the largest Fresnel parameter where it
    /// crosses the vertical tx–rx plane.
    pub fn diffraction(&self, tx: &Vec3, rx: &Vec3) -> Result<Option<DiffractionPath>> {
        let los = self.los(tx, rx)?;
        if !los.blocked {
            return Ok(None);
        }
        let inside = |p: &Vec3| self.prims.iter().any(|prim| prim.contains_strictly(p));
        if inside(tx) || inside(rx) {
            return Ok(None);
        }
        let lambda = self.cfg.wavelength();
        let length = los.length;
        let d = rx - tx;
        let mut best: Option<DiffractionPath> = None;
        for prim in &self.prims {
            let Primitive::Box { min, max, .. } = prim else { continue };
            if !segment_blocked(std::slice::from_ref(prim), tx, rx) {
                continue;
            }
            // horizontal slab interval of the projected path over the footprint
            let mut s0 = f64::NEG_INFINITY;
            let mut s1 = f64::INFINITY;
            let mut empty = false;
            for i in 0..2 {
                if d[i] == 0.0 {
                    if tx[i] < min[i] || tx[i] > max[i] {
                        empty = true;
                    }
                } else {
                    let (a, b) = ((min[i] - tx[i]) / d[i], (max[i] - tx[i]) / d[i]);
                    s0 = s0.max(a.min(b));
                    s1 = s1.min(a.max(b));
                }
            }
            if empty || !(s0 <= s1) {
                continue;
            }
            for s in [s0, s1] {
                if !(s > 0.0 && s < 1.0) {
                    continue;
                }
                let (d1, d2) = (s * length, (1.0 - s) * length);
                let h = max[2] - (tx.z + s * d.z);
                let nu = h * (2.0 * (d1 + d2) / (lambda * d1 * d2)).sqrt();
                if best.is_none_or(|b| nu > b.nu) {
                    let mut edge_point = tx + d * s;
                    edge_point.z = max[2];
                    best = Some(DiffractionPath {
                        nu,
                        loss_db: knife_edge_loss(nu),
                        edge_point,
                        direct_length: length,
                    });
                }
            }
        }
        Ok(best)
    }

    /// Every valid path as (departure direction, gain excluding the
    /// transmit antenna).
    pub fn path_terms(&self, tx: &Vec3, rx: &Vec3) -> Result<Vec<(Vec3, f64)>> {
        let los = self.los(tx, rx)?;
        let mut terms = Vec::new();
        if !los.blocked {
            terms.push((rx - tx, self.cfg.free_space_gain(los.length)));
        }
        for path in self.reflections(tx, rx)? {
            let g = path.gamma_product;
            terms.push((path.points[0] - tx, g * g * self.cfg.free_space_gain(path.length)));
        }
        if self.cfg.diffraction_enabled {
            if let Some(diff) = self.diffraction(tx, rx)? {
                terms.push((
                    diff.edge_point - tx,
                    self.cfg.free_space_gain(diff.direct_length) * 10f64.powf(-diff.loss_db / 10.0),
                ));
            }
        }
        Ok(terms)
    }

    fn combine(&self, terms: &[(Vec3, f64)], pattern: &AntennaPattern) -> (f64, f64) {
        let p_lin: f64 = terms.iter().map(|(dir, g)| pattern.gain_linear(dir) * g).sum();
        let p_db = if p_lin > 0.0 { 10.0 * p_lin.log10() } else { f64::NEG_INFINITY };
        (p_db, self.cfg.normalize_db(p_db))
    }

    /// Incoherent sum over every valid path; returns `(p_db, p_norm)`.
    pub fn received_power(&self, tx: &Vec3, rx: &Vec3, pattern: &AntennaPattern) -> Result<(f64, f64)> {
        Ok(self.combine(&self.path_terms(tx, rx)?, pattern))
    }

    /// Same as [`Tracer::received_power`] for several patterns, tracing once.
    pub fn received_power_patterns(
        &self,
        tx: &Vec3,
        rx: &Vec3,
        patterns: &[AntennaPattern],
    ) -> Result<Vec<(f64, f64)>> {
        let terms = self.path_terms(tx, rx)?;
        Ok(patterns.iter().map(|p| self.combine(&terms, p)).collect())
    }

    pub fn sample(&self, tx: &Vec3, pattern_id: u32, rx: &Vec3) -> Result<Sample> {
        let pattern = AntennaPattern::from_id(pattern_id)?;
        let (p_db, p_norm) = self.received_power(tx, rx, &pattern)?;
        Ok(Sample { tx: *tx, pattern_id, rx: *rx, p_db, p_norm })
    }
}

pub fn trace_los(scene: &Scene, tx: &Vec3, rx: &Vec3, cfg: &TraceConfig) -> Result<LosPath> {
    Tracer::new(scene, *cfg)?.los(tx, rx)
}

pub fn trace_reflections(
    scene: &Scene,
    tx: &Vec3,
    rx: &Vec3,
    cfg: &TraceConfig,
) -> Result<Vec<ReflectionPath>> {
    Tracer::new(scene, *cfg)?.reflections(tx, rx)
}

pub fn received_power(
    scene: &Scene,
    tx: &Vec3,
    rx: &Vec3,
    pattern: &AntennaPattern,
    cfg: &TraceConfig,
) -> Result<(f64, f64)> {
    Tracer::new(scene, *cfg)?.received_power(tx, rx, pattern)
}
