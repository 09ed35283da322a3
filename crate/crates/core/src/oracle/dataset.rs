//! Dataset generation and the `RPND0001` binary format.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TraceConfig, Tracer};
use crate::error::{Error, Result};
use crate::geometry::{AntennaPattern, PatternKind, Scene, SceneFile, Vec3};

pub const DATASET_MAGIC: &[u8; 8] = b"RPND0001";

const RECORD_BYTES: usize = 8 * 4;

/// Receivers on a regular horizontal grid at one or more heights. Positions
/// are cell centers over `[min_xy, max_xy]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RxGrid {
    pub nx: usize,
    pub ny: usize,
    pub heights: Vec<f64>,
    pub min_xy: [f64; 2],
    pub max_xy: [f64; 2],
}

impl RxGrid {
    /// Grid spanning the horizontal footprint of the scene bounds.
    pub fn over_scene(scene: &Scene, nx: usize, ny: usize, heights: Vec<f64>) -> Self {
        let b = &scene.bounds;
        Self {
            nx,
            ny,
            heights,
            min_xy: [b.min.x, b.min.y],
            max_xy: [b.max.x, b.max.y],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.heights.len()]
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.heights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::validation(format!("receiver grid {:?} is empty", self.dims())));
        }
        if !(self.min_xy[0] < self.max_xy[0] && self.min_xy[1] < self.max_xy[1]) {
            return Err(Error::validation("receiver grid has an empty footprint"));
        }
        Ok(())
    }

    /// Cell-center coordinate along x (`axis` 0) or y (`axis` 1).
    pub fn coordinate(&self, axis: usize, i: usize) -> f64 {
        let n = if axis == 0 { self.nx } else { self.ny };
        let step = (self.max_xy[axis] - self.min_xy[axis]) / n as f64;
        self.min_xy[axis] + (i as f64 + 0.5) * step
    }

    /// Row-major positions: height, then y rows, then x.
    pub fn positions(&self) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.len());
        for &z in &self.heights {
            for j in 0..self.ny {
                let y = self.coordinate(1, j);
                for i in 0..self.nx {
                    out.push(Vec3::new(self.coordinate(0, i), y, z));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train_tx_indices: Vec<usize>,
    pub val_tx_indices: Vec<usize>,
}

impl Split {
    /// Holds out `ceil(0.15 n)` transmitters spread evenly over the index range.
    pub fn by_transmitter(n_tx: usize) -> Self {
        if n_tx < 2 {
            return Self { train_tx_indices: (0..n_tx).collect(), val_tx_indices: vec![] };
        }
        let n_val = ((0.15 * n_tx as f64).ceil() as usize).clamp(1, n_tx - 1);
        let val: Vec<usize> = (0..n_val)
            .map(|i| ((i as f64 + 0.5) * n_tx as f64 / n_val as f64).floor() as usize)
            .collect();
        let train = (0..n_tx).filter(|i| !val.contains(i)).collect();
        Self { train_tx_indices: train, val_tx_indices: val }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub scene_hash: String,
    pub frequency_hz: f64,
    #[serde(rename = "P_min_db")]
    pub p_min_db: f64,
    #[serde(rename = "P_max_db")]
    pub p_max_db: f64,
    pub n_tx: usize,
    pub n_patterns: usize,
    pub rx_dims: [usize; 3],
    pub split: Split,
    pub pattern_ids: Vec<u32>,
    pub max_reflection_order: u32,
    pub diffraction_enabled: bool,
    pub n_records: usize,
    pub rx_grid: RxGrid,
    pub scene: SceneFile,
}

impl DatasetHeader {
    pub fn trace_config(&self) -> TraceConfig {
        TraceConfig {
            frequency_hz: self.frequency_hz,
            max_reflection_order: self.max_reflection_order,
            diffraction_enabled: self.diffraction_enabled,
            p_min_db: self.p_min_db,
            p_max_db: self.p_max_db,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub tx: [f32; 3],
    pub pattern_id: u32,
    pub rx: [f32; 3],
    pub p_norm: f32,
}

impl Record {
    pub fn tx_vec(&self) -> Vec3 {
        Vec3::new(self.tx[0] as f64, self.tx[1] as f64, self.tx[2] as f64)
    }

    pub fn rx_vec(&self) -> Vec3 {
        Vec3::new(self.rx[0] as f64, self.rx[1] as f64, self.rx[2] as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<Record>,
}

impl Dataset {
    /// Records belonging to one transmitter index, in file order.
    pub fn tx_records(&self, tx_index: usize) -> &[Record] {
        let per_tx = self.header.n_patterns * self.header.rx_grid.len();
        &self.records[tx_index * per_tx..(tx_index + 1) * per_tx]
    }

    pub fn tx_index_of(&self, record_index: usize) -> usize {
        record_index / (self.header.n_patterns * self.header.rx_grid.len())
    }

    pub fn transmitters(&self) -> Vec<Vec3> {
        (0..self.header.n_tx).map(|t| self.tx_records(t)[0].tx_vec()).collect()
    }
}

/// Seeded uniform transmitter positions over the free horizontal footprint
/// of the scene, at heights drawn from `height_range`.
pub fn sample_transmitters(
    scene: &Scene,
    count: usize,
    height_range: (f64, f64),
    seed: u64,
) -> Result<Vec<Vec3>> {
    let (lo, hi) = height_range;
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::validation(format!("invalid transmitter height range {lo}..{hi}")));
    }
    let b = &scene.bounds;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 1000 * (count + 1) {
            return Err(Error::validation("could not place transmitters in free space"));
        }
        let p = Vec3::new(
            rng.gen_range(b.min.x..=b.max.x),
            rng.gen_range(b.min.y..=b.max.y),
            if lo == hi { lo } else { rng.gen_range(lo..=hi) },
        );
        if !scene.inside_solid(&p) && b.contains(&p) {
            out.push(p);
        }
    }
    Ok(out)
}

fn build_dataset(
    scene: &Scene,
    tx_list: &[Vec3],
    pattern_ids: &[u32],
    rx_grid: &RxGrid,
    cfg: &TraceConfig,
) -> Result<Dataset> {
    if tx_list.is_empty() {
        return Err(Error::validation("transmitter list is empty"));
    }
    if pattern_ids.is_empty() {
        return Err(Error::validation("pattern list is empty"));
    }
    rx_grid.validate()?;
    let patterns = pattern_ids
        .iter()
        .map(|&id| AntennaPattern::from_id(id))
        .collect::<Result<Vec<_>>>()?;
    let tracer = Tracer::new(scene, *cfg)?;
    let receivers = rx_grid.positions();
    let mut records = Vec::with_capacity(tx_list.len() * patterns.len() * receivers.len());
    let f32s = |v: &Vec3| [v.x as f32, v.y as f32, v.z as f32];
    for tx in tx_list {
        // p_norm[pattern][rx]
        let mut values = vec![vec![0f32; receivers.len()]; patterns.len()];
        for (ri, rx) in receivers.iter().enumerate() {
            if rx == tx {
                return Err(Error::validation(format!("transmitter {tx:?} coincides with a receiver")));
            }
            for (pi, (_, p_norm)) in tracer.received_power_patterns(tx, rx, &patterns)?.into_iter().enumerate() {
                values[pi][ri] = p_norm as f32;
            }
        }
        for (pi, &id) in pattern_ids.iter().enumerate() {
            for (ri, rx) in receivers.iter().enumerate() {
                records.push(Record { tx: f32s(tx), pattern_id: id, rx: f32s(rx), p_norm: values[pi][ri] });
            }
        }
    }
    let header = DatasetHeader {
        scene_hash: scene.hash(),
        frequency_hz: cfg.frequency_hz,
        p_min_db: cfg.p_min_db,
        p_max_db: cfg.p_max_db,
        n_tx: tx_list.len(),
        n_patterns: pattern_ids.len(),
        rx_dims: rx_grid.dims(),
        split: Split::by_transmitter(tx_list.len()),
        pattern_ids: pattern_ids.to_vec(),
        max_reflection_order: cfg.max_reflection_order,
        diffraction_enabled: cfg.diffraction_enabled,
        n_records: records.len(),
        rx_grid: rx_grid.clone(),
        scene: scene.to_file(),
    };
    Ok(Dataset { header, records })
}

/// Traces every (tx, pattern, rx) triple and writes the dataset to
/// `out_path`. Ordering is tx-major, then pattern, then receiver.
pub fn generate_dataset(
    scene: &Scene,
    tx_list: &[Vec3],
    pattern_ids: &[u32],
    rx_grid: &RxGrid,
    cfg: &TraceConfig,
    out_path: Option<&Path>,
) -> Result<Dataset> {
    let ds = build_dataset(scene, tx_list, pattern_ids, rx_grid, cfg)?;
    if let Some(path) = out_path {
        write_dataset(&ds, path)?;
    }
    Ok(ds)
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = serde_json::to_vec(&ds.header).map_err(|e| Error::format(e.to_string()))?;
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(DATASET_MAGIC)?;
    write(&(header.len() as u32).to_le_bytes())?;
    write(&header)?;
    let mut buf = Vec::with_capacity(ds.records.len() * RECORD_BYTES);
    for r in &ds.records {
        let fields = [r.tx[0], r.tx[1], r.tx[2], r.pattern_id as f32, r.rx[0], r.rx[1], r.rx[2], r.p_norm];
        for f in fields {
            buf.extend_from_slice(&f.to_le_bytes());
        }
    }
    write(&buf)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    parse_dataset(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 12 || &bytes[..8] != DATASET_MAGIC {
        return Err(Error::format("not a dataset file (bad magic)"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::format("truncated dataset header"))?;
    let header: DatasetHeader =
        serde_json::from_slice(body).map_err(|e| Error::format(format!("dataset header: {e}")))?;
    let payload = &bytes[12 + len..];
    if payload.len() != header.n_records * RECORD_BYTES {
        return Err(Error::format(format!(
            "dataset payload holds {} bytes, header promises {} records",
            payload.len(),
            header.n_records
        )));
    }
    let expected = header.n_tx * header.n_patterns * header.rx_grid.len();
    if header.n_records != expected || header.rx_grid.dims() != header.rx_dims {
        return Err(Error::format("dataset header counts are inconsistent"));
    }
    let records = payload
        .chunks_exact(RECORD_BYTES)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().unwrap());
            Record {
                tx: [f(0), f(1), f(2)],
                pattern_id: f(3) as u32,
                rx: [f(4), f(5), f(6)],
                p_norm: f(7),
            }
        })
        .collect::<Vec<_>>();
    if records.iter().any(|r| r.pattern_id as usize >= PatternKind::COUNT) {
        return Err(Error::format("record with unknown pattern id"));
    }
    Ok(Dataset { header, records })
}
