use super::ModelConfig;
use crate::error::Result;
use crate::geometry::{
    default_probe_spacing, direction_geometry, normalize_scene, place_probes, sample_point_cloud, KdTree,
    Link, Scene, Vec3, WorldTransform,
};

/// Everything about a scene the network reads that does not depend on the
/// weights: normalized point cloud, probes, and their neighbor structure.
#[derive(Debug, Clone)]
pub struct SceneContext {
    /// Normalized scene with sampled points.
    pub scene: Scene,
    pub transform: WorldTransform,
    pub probes: Vec<Vec3>,
    pub probe_spacing: f64,
    /// Per probe: its `K` nearest points (padded by repeating the nearest).
    pub probe_point_links: Vec<Vec<Link>>,
    pub point_tree: KdTree,
    pub probe_tree: KdTree,
    pub scene_hash: String,
}

/// Nearest-`k` links from `from` into `targets`, padded to exactly `k`.
pub(crate) fn knn_links(tree: &KdTree, targets: &[Vec3], from: &Vec3, k: usize) -> Vec<Link> {
    let found = tree.nearest(from, k);
    let mut links: Vec<Link> = found
        .iter()
        .map(|&(i, _)| direction_geometry(from, &targets[i], i))
        .collect();
    while links.len() < k {
        links.push(links[0]);
    }
    links
}

impl SceneContext {
    pub fn new(scene: &Scene, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let scene_hash = scene.hash();
        let sampled = sample_point_cloud(scene.clone(), config.point_density, config.sample_seed)?;
        let scene = normalize_scene(sampled)?;
        let transform = scene.world_transform.expect("normalized");
        let spacing = config.probe_spacing.unwrap_or_else(|| default_probe_spacing(&scene));
        let probes = place_probes(&scene, spacing)?;
        let point_tree = KdTree::new(&scene.points);
        let probe_tree = KdTree::new(&probes);
        let probe_point_links = probes
            .iter()
            .map(|p| knn_links(&point_tree, &scene.points, p, config.k))
            .collect();
        Ok(Self {
            scene,
            transform,
            probes,
            probe_spacing: spacing,
            probe_point_links,
            point_tree,
            probe_tree,
            scene_hash,
        })
    }

    pub fn n_points(&self) -> usize {
        self.scene.points.len()
    }

    pub fn to_normalized(&self, p: &Vec3) -> Vec3 {
        self.transform.to_normalized(p)
    }

    /// Receiver→probe links (normalized receiver position).
    pub fn receiver_probe_links(&self, rx: &Vec3, n: usize) -> Vec<Link> {
        knn_links(&self.probe_tree, &self.probes, rx, n)
    }

    /// Receiver→point links (normalized receiver position).
    pub fn receiver_point_links(&self, rx: &Vec3, k: usize) -> Vec<Link> {
        knn_links(&self.point_tree, &self.scene.points, rx, k)
    }
}
