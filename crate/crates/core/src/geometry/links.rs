//! Probe graph: probe→K nearest points, receiver→n nearest probes, and the
//! transmitter geometry each of them sees.

use std::f64::consts::PI;

use super::{KdTree, Scene, Vec3};
use crate::error::{Error, Result};

/// One directed link with its `(distance, elevation, azimuth)` triplet, all in
/// normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub index: usize,
    pub distance: f64,
    /// Angle from +z, in `[0, π]`.
    pub elevation: f64,
    /// `atan2(y, x)`, in `[-π, π)`.
    pub azimuth: f64,
    /// Unit direction from source to target.
    pub direction: Vec3,
}

impl Link {
    pub fn triplet(&self) -> [f64; 3] {
        [self.distance, self.elevation, self.azimuth]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkSet {
    pub links: Vec<Link>,
    /// Set when fewer candidates than requested existed and the nearest was
    /// repeated to fill the slots.
    pub padded: bool,
}

/// Geometry of the vector `to - from`. A zero vector maps to +z with zero
/// distance.
pub fn direction_geometry(from: &Vec3, to: &Vec3, index: usize) -> Link {
    let v = to - from;
    let distance = v.norm();
    if distance == 0.0 {
        return Link {
            index,
            distance: 0.0,
            elevation: 0.0,
            azimuth: 0.0,
            direction: Vec3::z(),
        };
    }
    let direction = v / distance;
    let elevation = direction.z.clamp(-1.0, 1.0).acos();
    let mut azimuth = direction.y.atan2(direction.x);
    if azimuth >= PI {
        azimuth = -PI;
    }
    Link {
        index,
        distance,
        elevation,
        azimuth,
        direction,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinkOptions {
    /// Probes per receiver.
    pub n: usize,
    /// Points per probe.
    pub k: usize,
    /// Also link every receiver to its `k` nearest points (probe-free variant).
    pub receiver_points: bool,
}

#[derive(Debug, Clone)]
pub struct ProbeGraph {
    pub n: usize,
    pub k: usize,
    pub probe_positions: Vec<Vec3>,
    pub transmitter_positions: Vec<Vec3>,
    pub receiver_positions: Vec<Vec3>,
    pub probe_point_links: Vec<LinkSet>,
    /// `[tx][probe]`: probe→transmitter.
    pub probe_tx_links: Vec<Vec<Link>>,
    pub receiver_probe_links: Vec<LinkSet>,
    /// `[tx][rx]`: receiver→transmitter (the LoS direction).
    pub receiver_tx_links: Vec<Vec<Link>>,
    pub receiver_point_links: Option<Vec<LinkSet>>,
}

fn knn_links(tree: &KdTree, targets: &[Vec3], from: &Vec3, k: usize) -> LinkSet {
    let found = tree.nearest(from, k);
    let padded = found.len() < k;
    let mut links: Vec<Link> = found
        .iter()
        .map(|&(i, _)| direction_geometry(from, &targets[i], i))
        .collect();
    while links.len() < k {
        links.push(links[0]);
    }
    LinkSet { links, padded }
}

/// Builds every link the network consumes. Transmitter and receiver
/// positions are in meters; the scene must be normalized.
pub fn build_links(
    scene: &Scene,
    probes: &[Vec3],
    transmitters: &[Vec3],
    receivers: &[Vec3],
    options: LinkOptions,
) -> Result<ProbeGraph> {
    let LinkOptions { n, k, receiver_points } = options;
    if n == 0 || k == 0 {
        return Err(Error::validation(format!("link fan-ins must be >= 1 (n={n}, K={k})")));
    }
    if probes.is_empty() {
        return Err(Error::validation("no light probes"));
    }
    if scene.points.is_empty() {
        return Err(Error::validation("scene has no sampled points"));
    }
    let transform = scene
        .world_transform
        .ok_or_else(|| Error::validation("scene must be normalized before linking"))?;
    if n > probes.len() {
        log::warn!("n={n} exceeds the {} probes; receiver links will be padded", probes.len());
    }

    let point_tree = KdTree::new(&scene.points);
    let probe_tree = KdTree::new(probes);
    let tx: Vec<Vec3> = transmitters.iter().map(|p| transform.to_normalized(p)).collect();
    let rx: Vec<Vec3> = receivers.iter().map(|p| transform.to_normalized(p)).collect();

    let probe_point_links = probes
        .iter()
        .map(|p| knn_links(&point_tree, &scene.points, p, k))
        .collect();
    let probe_tx_links = tx
        .iter()
        .enumerate()
        .map(|(ti, t)| probes.iter().map(|p| direction_geometry(p, t, ti)).collect())
        .collect();
    let receiver_probe_links = rx.iter().map(|r| knn_links(&probe_tree, probes, r, n)).collect();
    let receiver_tx_links = tx
        .iter()
        .enumerate()
        .map(|(ti, t)| rx.iter().map(|r| direction_geometry(r, t, ti)).collect())
        .collect();
    let receiver_point_links = receiver_points.then(|| {
        rx.iter()
            .map(|r| knn_links(&point_tree, &scene.points, r, k))
            .collect()
    });

    Ok(ProbeGraph {
        n,
        k,
        probe_positions: probes.to_vec(),
        transmitter_positions: tx,
        receiver_positions: rx,
        probe_point_links,
        probe_tx_links,
        receiver_probe_links,
        receiver_tx_links,
        receiver_point_links,
    })
}
