//! The point-field network: point encoder, probe attention, receiver
//! attention, and spherical-harmonic decoding.

mod context;
mod coverage;
mod encoding;

pub use context::SceneContext;
pub use coverage::{read_map, write_map, write_pgm, CoverageMap, MapHeader, MAP_MAGIC};
pub use encoding::positional_features;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{direction_geometry, Link, PatternKind, Vec3};
use crate::sh::sh_count;
use crate::tensor::{gradcheck, GradCheckEntry, Graph, ParamId, ParamStore, Tensor, Var};
use encoding::{positional_matrix, sh_matrix};

/// Receivers per inference graph.
const INFERENCE_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Receivers read from light probes.
    Full,
    /// Receivers attend directly over their `K` nearest points plus a
    /// transmitter row; no probe attention.
    NoProbes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Probes per receiver.
    pub n: usize,
    /// Points per probe (and per receiver in the probe-free variant).
    pub k: usize,
    /// Hidden widths of the shared point MLP before its final layer.
    pub encoder_widths: Vec<usize>,
    pub point_feature_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub pe_frequencies: usize,
    pub decoder_layers: usize,
    pub decoder_width: usize,
    pub sh_degree: usize,
    /// Surface sampling density, points per m².
    pub point_density: f64,
    pub sample_seed: u64,
    /// Probe grid spacing in meters; `None` uses the longest bounds axis / 8.
    pub probe_spacing: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            n: 8,
            k: 8,
            encoder_widths: vec![64, 128],
            point_feature_dim: 128,
            d_model: 64,
            heads: 4,
            pe_frequencies: 4,
            decoder_layers: 8,
            decoder_width: 256,
            sh_degree: 3,
            point_density: 0.5,
            sample_seed: 0,
            probe_spacing: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::validation(m));
        if self.n == 0 || self.k == 0 {
            return fail(format!("n and K must be >= 1 (n={}, K={})", self.n, self.k));
        }
        if self.point_feature_dim == 0 || self.point_feature_dim % 2 != 0 {
            return fail(format!("point_feature_dim {} must be even", self.point_feature_dim));
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return fail(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.pe_frequencies == 0 {
            return fail("pe_frequencies must be >= 1".into());
        }
        if self.decoder_layers == 0 || self.decoder_width == 0 {
            return fail("decoder needs at least one hidden layer".into());
        }
        if self.encoder_widths.iter().any(|&w| w == 0) {
            return fail("encoder widths must be positive".into());
        }
        if self.sh_degree > crate::sh::MAX_DEGREE {
            return fail(format!("sh_degree {} too large", self.sh_degree));
        }
        if !(self.point_density > 0.0) || !self.point_density.is_finite() {
            return fail(format!("point_density {} must be positive", self.point_density));
        }
        if let Some(s) = self.probe_spacing {
            if !(s > 0.0) || !s.is_finite() {
                return fail(format!("probe_spacing {s} must be positive"));
            }
        }
        Ok(())
    }

    pub fn n_c(&self) -> usize {
        sh_count(self.sh_degree)
    }

    pub fn half(&self) -> usize {
        self.point_feature_dim / 2
    }

    /// Rays per receiver: probe (or point) rays plus the LoS ray.
    pub fn rays(&self) -> usize {
        match self.variant {
            Variant::Full => self.n + 1,
            Variant::NoProbes => self.k + 1,
        }
    }
}

/// One prediction request; positions in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Query {
    pub tx: Vec3,
    pub pattern_id: u32,
    pub rx: Vec3,
}

/// Inputs of one light probe's attention: its `K` point links, its link
/// to the transmitter, and the transmitter pattern.
#[derive(Debug, Clone)]
pub struct ProbeInput {
    pub links: Vec<Link>,
    pub tx_link: Link,
    pub pattern_id: u32,
}

/// Inputs of one receiver's attention. `rows` index the key/value source
/// tables, `key_geometry` is the receiver→source triplet per row, and
/// `query_dirs` holds one direction per output ray (the LoS ray last).
#[derive(Debug, Clone)]
pub struct RxInput {
    pub rows: Vec<usize>,
    pub key_geometry: Vec<[f64; 3]>,
    pub tx_link: Link,
    pub query_dirs: Vec<Vec3>,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct AttentionIds {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone)]
struct Ids {
    encoder: Vec<Linear>,
    encoder_proj: Linear,
    query: Linear,
    tx_embedding: ParamId,
    probe: Option<AttentionIds>,
    receiver: AttentionIds,
    decoder: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: Ids,
}

fn add_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<Linear> {
    Ok(Linear {
        w: store.add_uniform(format!("{name}.w"), &[fan_in, fan_out], fan_in, rng)?,
        b: store.add_uniform(format!("{name}.b"), &[fan_out], fan_in, rng)?,
    })
}

fn add_attention(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    kv_in: usize,
    d: usize,
    out: usize,
) -> Result<AttentionIds> {
    Ok(AttentionIds {
        q: add_linear(store, rng, &format!("{name}.q"), d, d)?,
        k: add_linear(store, rng, &format!("{name}.k"), kv_in, d)?,
        v: add_linear(store, rng, &format!("{name}.v"), kv_in, d)?,
        o: add_linear(store, rng, &format!("{name}.o"), d, out)?,
    })
}

/// Weight-free grouping of a query batch by (transmitter, pattern).
struct Group {
    tx: Vec3,
    pattern_id: u32,
    members: Vec<usize>,
    /// Sorted active probe indices (full variant).
    probes: Vec<usize>,
    /// Receiver→probe links per member (full variant).
    links: Vec<Vec<Link>>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let r = &mut rng;
        let f = config.point_feature_dim;
        let h = config.half();
        let d = config.d_model;

        let mut encoder = Vec::new();
        let mut width = 3;
        for (i, &w) in config.encoder_widths.iter().chain(std::iter::once(&f)).enumerate() {
            encoder.push(add_linear(&mut s, r, &format!("encoder.mlp{i}"), width, w)?);
            width = w;
        }
        let encoder_proj = add_linear(&mut s, r, "encoder.proj", 2 * f, f)?;
        let query = add_linear(&mut s, r, "query_encoder", 6 * config.pe_frequencies, d)?;
        let tx_embedding = s.add_uniform("tx_embedding", &[PatternKind::COUNT, h], 1, r)?;
        let probe = match config.variant {
            Variant::Full => Some(add_attention(&mut s, r, "probe_attention", h + 3, d, f)?),
            Variant::NoProbes => None,
        };
        let receiver = add_attention(&mut s, r, "receiver_attention", h + 3, d, 1)?;
        let mut decoder = Vec::new();
        let mut width = config.rays();
        for i in 0..config.decoder_layers {
            decoder.push(add_linear(&mut s, r, &format!("decoder.mlp{i}"), width, config.decoder_width)?);
            width = config.decoder_width;
        }
        decoder.push(add_linear(&mut s, r, "decoder.out", width, config.rays() * config.n_c())?);

        let ids = Ids { encoder, encoder_proj, query, tx_embedding, probe, receiver, decoder };
        Ok(Self { config, params: s, ids })
    }

    /// Rebuilds a model around stored weights; names and shapes must match
    /// what `config` would create.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let template = Self::new(config, 0)?;
        if template.params.len() != params.len() {
            return Err(Error::format(format!(
                "expected {} parameter arrays, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((_, tn, tt), (_, pn, pt)) in template.params.iter().zip(params.iter()) {
            if tn != pn || tt.shape() != pt.shape() {
                return Err(Error::format(format!(
                    "parameter {pn} {:?} does not match expected {tn} {:?}",
                    pt.shape(),
                    tt.shape()
                )));
            }
        }
        Ok(Self { params, ..template })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn block_param_count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.len())
            .sum()
    }

    fn p(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(&self.params, id)
    }

    fn linear(&self, g: &mut Graph, x: Var, l: Linear) -> Result<Var> {
        let w = self.p(g, l.w);
        let b = self.p(g, l.b);
        g.linear(x, w, b)
    }

    /// Shared point MLP, symmetric max-pool, and projection of
    /// `[per-point ⊕ global]`: `[n_p, point_feature_dim]`.
    pub fn embed_points(&self, g: &mut Graph, points: &[Vec3]) -> Result<Var> {
        if points.is_empty() {
            return Err(Error::validation("cannot embed an empty point cloud"));
        }
        let data = points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        let mut h = g.constant(Tensor::matrix(points.len(), 3, data)?);
        for &l in &self.ids.encoder {
            h = self.linear(g, h, l)?;
            h = g.relu(h);
        }
        let global = g.max_pool(h, 0)?;
        let f = self.config.point_feature_dim;
        let global = g.reshape(global, &[1, f])?;
        let global = g.repeat_rows(global, points.len())?;
        let cat = g.concat_cols(&[h, global])?;
        self.linear(g, cat, self.ids.encoder_proj)
    }

    /// `F_Q`: positional encoding of unit directions followed by the shared
    /// learned projection, `[len, d_model]`.
    pub fn encode_queries(&self, g: &mut Graph, dirs: &[Vec3]) -> Result<Var> {
        let pe = g.constant(positional_matrix(dirs, self.config.pe_frequencies));
        self.linear(g, pe, self.ids.query)
    }

    /// Splits `W` of a `[h + 3, d]` key/value projection into its feature
    /// and geometry blocks.
    fn split_kv(&self, g: &mut Graph, l: Linear) -> Result<(Var, Var, Var)> {
        let h = self.config.half();
        let w = self.p(g, l.w);
        let wa = g.slice_rows(w, 0, h)?;
        let wb = g.slice_rows(w, h, h + 3)?;
        let b = self.p(g, l.b);
        Ok((wa, wb, b))
    }

    /// `gather(table, rows) + geometry · W_b + b`.
    fn kv_rows(g: &mut Graph, table: Var, rows: &[usize], geometry: Vec<f64>, wb: Var, b: Var) -> Result<Var> {
        let gathered = g.gather_rows(table, rows)?;
        let geo = g.constant(Tensor::matrix(rows.len(), 3, geometry)?);
        let geo = g.matmul(geo, wb)?;
        let sum = g.add(gathered, geo)?;
        g.add_row(sum, b)
    }

    /// Probe attention over `K` point rows plus one transmitter row per
    /// probe, mean-pooled over the `K + 1` queries and projected:
    /// `[probes, point_feature_dim]`.
    pub fn probe_attention(&self, g: &mut Graph, point_features: Var, probes: &[ProbeInput]) -> Result<Var> {
        let ids = self
            .ids
            .probe
            .ok_or_else(|| Error::validation("this model variant has no probe attention"))?;
        let k = self.config.k;
        let h = self.config.half();
        let f = self.config.point_feature_dim;
        let n_p = g.shape(point_features)[0];
        if probes.is_empty() {
            return Err(Error::validation("probe attention needs at least one probe"));
        }
        let l1 = g.slice_cols(point_features, 0, h)?;
        let l2 = g.slice_cols(point_features, h, f)?;
        let emb = self.p(g, self.ids.tx_embedding);
        let (wka, wkb, bk) = self.split_kv(g, ids.k)?;
        let (wva, wvb, bv) = self.split_kv(g, ids.v)?;
        let pk = g.matmul(l1, wka)?;
        let ek = g.matmul(emb, wka)?;
        let table_k = g.concat_rows(&[pk, ek])?;
        let pv = g.matmul(l2, wva)?;
        let ev = g.matmul(emb, wva)?;
        let table_v = g.concat_rows(&[pv, ev])?;

        let rows_total = probes.len() * (k + 1);
        let mut rows = Vec::with_capacity(rows_total);
        let mut geo_k = Vec::with_capacity(rows_total * 3);
        let mut geo_v = Vec::with_capacity(rows_total * 3);
        let mut dirs = Vec::with_capacity(rows_total);
        for p in probes {
            if p.links.len() != k {
                return Err(Error::validation(format!("probe has {} point links, expected K={k}", p.links.len())));
            }
            PatternKind::from_id(p.pattern_id)?;
            let t = p.tx_link.triplet();
            for l in &p.links {
                if l.index >= n_p {
                    return Err(Error::validation(format!("point link {} out of {n_p}", l.index)));
                }
                rows.push(l.index);
                geo_k.extend(l.triplet());
                geo_v.extend(t);
                dirs.push(l.direction);
            }
            rows.push(n_p + p.pattern_id as usize);
            geo_k.extend(t);
            geo_v.extend(t);
            dirs.push(p.tx_link.direction);
        }
        let keys = Self::kv_rows(g, table_k, &rows, geo_k, wkb, bk)?;
        let values = Self::kv_rows(g, table_v, &rows, geo_v, wvb, bv)?;
        let q = self.encode_queries(g, &dirs)?;
        let q = self.linear(g, q, ids.q)?;
        let att = g.attention(q, keys, values, probes.len(), k + 1, k + 1, self.config.heads)?;
        let att = g.reshape(att, &[probes.len(), k + 1, self.config.d_model])?;
        let pooled = g.mean_pool(att, 1)?;
        self.linear(g, pooled, ids.o)
    }

    /// Key/value source tables for receiver attention: projected probe
    /// features (full variant) or projected point features followed by one
    /// row per antenna pattern (probe-free variant).
    pub fn receiver_tables(&self, g: &mut Graph, features: Var) -> Result<(Var, Var)> {
        let h = self.config.half();
        let f = self.config.point_feature_dim;
        let l1 = g.slice_cols(features, 0, h)?;
        let l2 = g.slice_cols(features, h, f)?;
        let (wka, _, _) = self.split_kv(g, self.ids.receiver.k)?;
        let (wva, _, _) = self.split_kv(g, self.ids.receiver.v)?;
        let tk = g.matmul(l1, wka)?;
        let tv = g.matmul(l2, wva)?;
        match self.config.variant {
            Variant::Full => Ok((tk, tv)),
            Variant::NoProbes => {
                let emb = self.p(g, self.ids.tx_embedding);
                let ek = g.matmul(emb, wka)?;
                let ev = g.matmul(emb, wva)?;
                Ok((g.concat_rows(&[tk, ek])?, g.concat_rows(&[tv, ev])?))
            }
        }
    }

    /// Receiver attention: every query ray attends over the receiver's
    /// key/value rows and is projected to one scalar, giving the ray
    /// features `[receivers, rays]`.
    pub fn receiver_attention(&self, g: &mut Graph, tables: (Var, Var), inputs: &[RxInput]) -> Result<Var> {
        let ids = self.ids.receiver;
        let (tq, tk) = match self.config.variant {
            Variant::Full => (self.config.n + 1, self.config.n),
            Variant::NoProbes => (self.config.k + 1, self.config.k + 1),
        };
        if inputs.is_empty() {
            return Err(Error::validation("receiver attention needs at least one receiver"));
        }
        let mut rows = Vec::with_capacity(inputs.len() * tk);
        let mut geo_k = Vec::with_capacity(inputs.len() * tk * 3);
        let mut geo_v = Vec::with_capacity(inputs.len() * tk * 3);
        let mut dirs = Vec::with_capacity(inputs.len() * tq);
        for r in inputs {
            if r.rows.len() != tk || r.key_geometry.len() != tk || r.query_dirs.len() != tq {
                return Err(Error::validation(format!(
                    "receiver input has {} rows / {} queries, expected {tk} / {tq}",
                    r.rows.len(),
                    r.query_dirs.len()
                )));
            }
            rows.extend_from_slice(&r.rows);
            for kg in &r.key_geometry {
                geo_k.extend(kg);
                geo_v.extend(r.tx_link.triplet());
            }
            dirs.extend_from_slice(&r.query_dirs);
        }
        let (_, wkb, bk) = self.split_kv(g, ids.k)?;
        let (_, wvb, bv) = self.split_kv(g, ids.v)?;
        let keys = Self::kv_rows(g, tables.0, &rows, geo_k, wkb, bk)?;
        let values = Self::kv_rows(g, tables.1, &rows, geo_v, wvb, bv)?;
        let q = self.encode_queries(g, &dirs)?;
        let q = self.linear(g, q, ids.q)?;
        let att = g.attention(q, keys, values, inputs.len(), tq, tk, self.config.heads)?;
        let out = self.linear(g, att, ids.o)?;
        g.reshape(out, &[inputs.len(), tq])
    }

    /// Decoder MLP to per-ray SH coefficients, projection onto each ray's
    /// direction (LoS last), sum, and logistic squashing: `[receivers, 1]`.
    pub fn decode(&self, g: &mut Graph, ray_features: Var, dirs: &[Vec3]) -> Result<Var> {
        let coeffs = self.sh_coefficients(g, ray_features)?;
        let rays = self.config.rays();
        let r = g.shape(ray_features)[0];
        if dirs.len() != r * rays {
            return Err(Error::validation(format!(
                "decode: {} directions for {r} receivers × {rays} rays",
                dirs.len()
            )));
        }
        let basis = g.constant(sh_matrix(dirs, self.config.sh_degree)?);
        let prod = g.mul(coeffs, basis)?;
        let per_ray = g.sum_last(prod);
        let per_ray = g.reshape(per_ray, &[r, rays])?;
        let raw = g.sum_last(per_ray);
        Ok(g.sigmoid(raw))
    }

    /// `c_i` reshaped to `[receivers · rays, n_c]`.
    pub fn sh_coefficients(&self, g: &mut Graph, ray_features: Var) -> Result<Var> {
        let rays = self.config.rays();
        let s = g.shape(ray_features).to_vec();
        if s.len() != 2 || s[1] != rays {
            return Err(Error::validation(format!("ray features {s:?}, expected [_, {rays}]")));
        }
        let mut h = ray_features;
        let last = self.ids.decoder.len() - 1;
        for (i, &l) in self.ids.decoder.iter().enumerate() {
            h = self.linear(g, h, l)?;
            if i < last {
                h = g.relu(h);
            }
        }
        g.reshape(h, &[s[0] * rays, self.config.n_c()])
    }

    fn group_queries(&self, ctx: &SceneContext, queries: &[Query]) -> Result<Vec<Group>> {
        let mut by_key: BTreeMap<(usize, u32), usize> = BTreeMap::new();
        let mut keys: Vec<[u64; 3]> = Vec::new();
        let mut groups: Vec<Group> = Vec::new();
        for (qi, q) in queries.iter().enumerate() {
            PatternKind::from_id(q.pattern_id)?;
            if q.tx == q.rx {
                return Err(Error::validation("transmitter and receiver coincide"));
            }
            let bits = [q.tx.x.to_bits(), q.tx.y.to_bits(), q.tx.z.to_bits()];
            let tx_slot = match keys.iter().position(|k| *k == bits) {
                Some(i) => i,
                None => {
                    keys.push(bits);
                    keys.len() - 1
                }
            };
            let gi = *by_key.entry((tx_slot, q.pattern_id)).or_insert_with(|| {
                groups.push(Group {
                    tx: ctx.to_normalized(&q.tx),
                    pattern_id: q.pattern_id,
                    members: vec![],
                    probes: vec![],
                    links: vec![],
                });
                groups.len() - 1
            });
            groups[gi].members.push(qi);
        }
        if self.config.variant == Variant::Full {
            for grp in &mut groups {
                for &qi in &grp.members {
                    let rx = ctx.to_normalized(&queries[qi].rx);
                    grp.links.push(ctx.receiver_probe_links(&rx, self.config.n));
                }
                let mut active: Vec<usize> = grp.links.iter().flatten().map(|l| l.index).collect();
                active.sort_unstable();
                active.dedup();
                grp.probes = active;
            }
        }
        Ok(groups)
    }

    fn probe_inputs(&self, ctx: &SceneContext, grp: &Group) -> Vec<ProbeInput> {
        grp.probes
            .iter()
            .map(|&p| ProbeInput {
                links: ctx.probe_point_links[p].clone(),
                tx_link: direction_geometry(&ctx.probes[p], &grp.tx, 0),
                pattern_id: grp.pattern_id,
            })
            .collect()
    }

    /// Receiver inputs for the members `range` of a group. `offset` is the
    /// row of the group's first active probe in the probe table.
    fn rx_inputs(
        &self,
        ctx: &SceneContext,
        queries: &[Query],
        grp: &Group,
        range: std::ops::Range<usize>,
        offset: usize,
    ) -> Vec<RxInput> {
        let n_p = ctx.n_points();
        range
            .map(|m| {
                let rx = ctx.to_normalized(&queries[grp.members[m]].rx);
                let tx_link = direction_geometry(&rx, &grp.tx, 0);
                let links = match self.config.variant {
                    Variant::Full => grp.links[m].clone(),
                    Variant::NoProbes => ctx.receiver_point_links(&rx, self.config.k),
                };
                let mut rows: Vec<usize> = links
                    .iter()
                    .map(|l| match self.config.variant {
                        Variant::Full => offset + grp.probes.binary_search(&l.index).expect("active probe"),
                        Variant::NoProbes => l.index,
                    })
                    .collect();
                let mut key_geometry: Vec<[f64; 3]> = links.iter().map(Link::triplet).collect();
                let mut query_dirs: Vec<Vec3> = links.iter().map(|l| l.direction).collect();
                if self.config.variant == Variant::NoProbes {
                    rows.push(n_p + grp.pattern_id as usize);
                    key_geometry.push(tx_link.triplet());
                }
                query_dirs.push(tx_link.direction);
                RxInput { rows, key_geometry, tx_link, query_dirs }
            })
            .collect()
    }

    fn rx_tail(&self, g: &mut Graph, tables: (Var, Var), inputs: &[RxInput]) -> Result<Var> {
        let rays = self.receiver_attention(g, tables, inputs)?;
        let dirs: Vec<Vec3> = inputs.iter().flat_map(|r| r.query_dirs.iter().copied()).collect();
        self.decode(g, rays, &dirs)
    }

    /// Differentiable forward pass over a batch: `[queries, 1]` predictions
    /// in query order.
    pub fn forward(&self, g: &mut Graph, ctx: &SceneContext, queries: &[Query]) -> Result<Var> {
        if queries.is_empty() {
            return Err(Error::validation("empty query batch"));
        }
        let groups = self.group_queries(ctx, queries)?;
        let points = self.embed_points(g, &ctx.scene.points)?;
        let mut inputs = Vec::with_capacity(queries.len());
        let mut order = Vec::with_capacity(queries.len());
        let tables = match self.config.variant {
            Variant::Full => {
                let mut probe_inputs = Vec::new();
                for grp in &groups {
                    let offset = probe_inputs.len();
                    inputs.extend(self.rx_inputs(ctx, queries, grp, 0..grp.members.len(), offset));
                    probe_inputs.extend(self.probe_inputs(ctx, grp));
                }
                let pf = self.probe_attention(g, points, &probe_inputs)?;
                self.receiver_tables(g, pf)?
            }
            Variant::NoProbes => {
                for grp in &groups {
                    inputs.extend(self.rx_inputs(ctx, queries, grp, 0..grp.members.len(), 0));
                }
                self.receiver_tables(g, points)?
            }
        };
        for grp in &groups {
            order.extend_from_slice(&grp.members);
        }
        let out = self.rx_tail(g, tables, &inputs)?;
        if order.iter().enumerate().all(|(i, &q)| i == q) {
            return Ok(out);
        }
        let mut inverse = vec![0; order.len()];
        for (pos, &q) in order.iter().enumerate() {
            inverse[q] = pos;
        }
        g.gather_rows(out, &inverse)
    }

    /// Gradient-free predictions in query order. Point and probe features
    /// are computed once per (transmitter, pattern) and shared by all of its
    /// receivers.
    pub fn predict(&self, ctx: &SceneContext, queries: &[Query]) -> Result<Vec<f64>> {
        let groups = self.group_queries(ctx, queries)?;
        let mut out = vec![0.0; queries.len()];
        let point_features = {
            let mut g = Graph::new();
            let v = self.embed_points(&mut g, &ctx.scene.points)?;
            g.value(v).clone()
        };
        let shared_tables = match self.config.variant {
            Variant::NoProbes => {
                let mut g = Graph::new();
                let pf = g.constant(point_features.clone());
                let (a, b) = self.receiver_tables(&mut g, pf)?;
                Some((g.value(a).clone(), g.value(b).clone()))
            }
            Variant::Full => None,
        };
        for grp in &groups {
            let tables = match &shared_tables {
                Some(t) => t.clone(),
                None => {
                    let mut g = Graph::new();
                    let pf = g.constant(point_features.clone());
                    let probe = self.probe_attention(&mut g, pf, &self.probe_inputs(ctx, grp))?;
                    let (a, b) = self.receiver_tables(&mut g, probe)?;
                    (g.value(a).clone(), g.value(b).clone())
                }
            };
            let mut start = 0;
            while start < grp.members.len() {
                let end = (start + INFERENCE_CHUNK).min(grp.members.len());
                let inputs = self.rx_inputs(ctx, queries, grp, start..end, 0);
                let mut g = Graph::new();
                let ta = g.constant(tables.0.clone());
                let tb = g.constant(tables.1.clone());
                let y = self.rx_tail(&mut g, (ta, tb), &inputs)?;
                for (m, v) in (start..end).zip(g.value(y).data()) {
                    out[grp.members[m]] = *v;
                }
                start = end;
            }
        }
        Ok(out)
    }

    /// Coverage map over the scene footprint at `height` meters, cell
    /// centers, row-major (y rows, x columns).
    pub fn predict_map(
        &self,
        ctx: &SceneContext,
        tx: &Vec3,
        pattern_id: u32,
        height: f64,
        resolution: usize,
        p_bounds_db: (f64, f64),
    ) -> Result<CoverageMap> {
        let b = ctx.scene.bounds;
        if !(height >= b.min.z && height <= b.max.z) {
            return Err(Error::validation(format!(
                "height {height} m outside scene bounds {}..{} m",
                b.min.z, b.max.z
            )));
        }
        if resolution == 0 {
            return Err(Error::validation("resolution must be >= 1"));
        }
        let queries = CoverageMap::receivers(&b, height, resolution)
            .into_iter()
            .map(|rx| Query { tx: *tx, pattern_id, rx })
            .collect::<Vec<_>>();
        let values = self.predict(ctx, &queries)?;
        Ok(CoverageMap {
            header: MapHeader {
                bounds: b,
                height,
                resolution,
                p_min_db: p_bounds_db.0,
                p_max_db: p_bounds_db.1,
            },
            values: values.iter().map(|v| *v as f32).collect(),
        })
    }
}

/// Finite-difference check of the full forward pass: MSE of `model` on
/// `queries` against `targets`, differentiated by central differences with
/// step `h` for every parameter scalar.
pub fn gradcheck_model(
    model: &Model,
    ctx: &SceneContext,
    queries: &[Query],
    targets: &[f64],
    h: f64,
) -> Result<Vec<GradCheckEntry>> {
    if queries.len() != targets.len() || queries.is_empty() {
        return Err(Error::validation(format!(
            "{} queries vs {} targets",
            queries.len(),
            targets.len()
        )));
    }
    gradcheck(&model.params, h, |g, store| {
        let m = Model::from_params(model.config.clone(), store.clone())?;
        let y = m.forward(g, ctx, queries)?;
        let t = g.constant(Tensor::matrix(targets.len(), 1, targets.to_vec())?);
        g.mse(y, t)
    })
}
