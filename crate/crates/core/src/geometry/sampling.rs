use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Primitive, Scene, Vec3};
use crate::error::{Error, Result};

/// Per-primitive stream seed; independent of sampling order.
fn primitive_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer over (seed, index)
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Splits `total` across `weights` proportionally with the largest-remainder
/// rule; ties go to the lower index.
fn allocate(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        let mut out = vec![0; weights.len()];
        out[0] = total;
        return out;
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// The six faces of a box as (origin, edge_u, edge_v).
pub(crate) fn box_faces(min: &Vec3, max: &Vec3) -> [(Vec3, Vec3, Vec3); 6] {
    let e = max - min;
    let ex = Vec3::new(e.x, 0.0, 0.0);
    let ey = Vec3::new(0.0, e.y, 0.0);
    let ez = Vec3::new(0.0, 0.0, e.z);
    [
        (*min, ey, ez),
        (min + ex, ey, ez),
        (*min, ex, ez),
        (min + ey, ex, ez),
        (*min, ex, ey),
        (min + ez, ex, ey),
    ]
}

fn sample_triangle(rng: &mut ChaCha8Rng, v: &[[f64; 3]; 3], count: usize, out: &mut Vec<Vec3>) {
    let [a, b, c] = v.map(Vec3::from);
    for _ in 0..count {
        let r1: f64 = rng.gen::<f64>().sqrt();
        let r2: f64 = rng.gen();
        out.push(a + (b - a) * (r1 * (1.0 - r2)) + (c - a) * (r1 * r2));
    }
}

fn sample_box(rng: &mut ChaCha8Rng, min: &Vec3, max: &Vec3, count: usize, out: &mut Vec<Vec3>) {
    let faces = box_faces(min, max);
    let areas: Vec<f64> = faces.iter().map(|(_, u, v)| u.cross(v).norm()).collect();
    for ((origin, u, v), n) in faces.iter().zip(allocate(count, &areas)) {
        for _ in 0..n {
            let s: f64 = rng.gen();
            let t: f64 = rng.gen();
            out.push(origin + u * s + v * t);
        }
    }
}

/// Samples `round(area * density)` points (at least one) uniformly over the
/// surface of every primitive. Points are in meters.
pub fn sample_point_cloud(mut scene: Scene, density: f64, seed: u64) -> Result<Scene> {
    if !(density > 0.0) || !density.is_finite() {
        return Err(Error::validation(format!(
            "point density must be positive, got {density}"
        )));
    }
    let mut points = Vec::new();
    let mut sources = Vec::new();
    for (index, prim) in scene.primitives.iter().enumerate() {
        let count = ((prim.surface_area() * density).round() as usize).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(primitive_seed(seed, index));
        let before = points.len();
        match prim {
            Primitive::Box { min, max, .. } => {
                sample_box(&mut rng, &Vec3::from(*min), &Vec3::from(*max), count, &mut points)
            }
            Primitive::Triangle { v, .. } => sample_triangle(&mut rng, v, count, &mut points),
        }
        sources.extend(std::iter::repeat(index).take(points.len() - before));
    }
    scene.points = points;
    scene.point_sources = sources;
    scene.world_transform = None;
    Ok(scene)
}
