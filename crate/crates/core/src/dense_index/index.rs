use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::kmeans::kmeans;
use crate::error::{Error, Result};
use crate::sparse::{topk_truncate, SparseVector};

const MAGIC: &[u8; 4] = b"VKBI";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum IndexMode {
    Exact,
    Clustered { n_clusters: usize, n_probe: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexConfig {
    pub mode: IndexMode,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            mode: IndexMode::Exact,
            kmeans_iters: 20,
            seed: 7,
        }
    }
}

/// `f(M)` stored row-major as f32; scores are accumulated in f64.
///
/// In clustered mode the vectors are grouped by k-means over
/// norm-augmented copies `[x; sqrt(R² − ‖x‖²)]`, which makes every
/// augmented vector lie on one sphere so nearest-centroid assignment agrees
/// with inner-product ranking. A query probes the `n_probe` centroids with
/// the largest `q · c[..dim]`.
#[derive(Debug)]
pub struct DenseMentionIndex {
    dim: usize,
    n: usize,
    mode: IndexMode,
    encoder_hash: u64,
    vectors: Vec<f32>,
    /// `n_clusters × (dim + 1)`; empty in exact mode.
    centroids: Vec<f32>,
    list_offsets: Vec<u64>,
    list_ids: Vec<u32>,
    touched: AtomicU64,
}

impl PartialEq for DenseMentionIndex {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.n == other.n
            && self.mode == other.mode
            && self.encoder_hash == other.encoder_hash
            && self.vectors == other.vectors
            && self.centroids == other.centroids
            && self.list_offsets == other.list_offsets
            && self.list_ids == other.list_ids
    }
}

/// Builds an index over `vectors` (one row per mention). `encoder_hash`
/// identifies the parameters that produced the rows and is checked on load.
pub fn build_index(
    vectors: &[Vec<f64>],
    config: &IndexConfig,
    encoder_hash: u64,
) -> Result<DenseMentionIndex> {
    let n = vectors.len();
    if n == 0 {
        return Err(Error::Contract("cannot index zero vectors".into()));
    }
    let dim = vectors[0].len();
    if dim == 0 {
        return Err(Error::Contract("embedding dimension must be >= 1".into()));
    }
    let mut flat = Vec::with_capacity(n * dim);
    for (m, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::Contract(format!(
                "embedding {m} has dimension {} but expected {dim}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Contract(format!("embedding {m} is not finite")));
        }
        flat.extend(v.iter().map(|&x| x as f32));
    }
    let mut index = DenseMentionIndex {
        dim,
        n,
        mode: config.mode,
        encoder_hash,
        vectors: flat,
        centroids: Vec::new(),
        list_offsets: Vec::new(),
        list_ids: Vec::new(),
        touched: AtomicU64::new(0),
    };
    if let IndexMode::Clustered { n_clusters, n_probe } = config.mode {
        if n_clusters == 0 || n_clusters > n {
            return Err(Error::Config(format!(
                "n_clusters must be in 1..={n}, got {n_clusters}"
            )));
        }
        if n_probe == 0 || n_probe > n_clusters {
            return Err(Error::Config(format!(
                "n_probe must be in 1..={n_clusters}, got {n_probe}"
            )));
        }
        index.cluster(n_clusters, config.kmeans_iters, config.seed);
    }
    Ok(index)
}

impl DenseMentionIndex {
    fn cluster(&mut self, k: usize, iters: usize, seed: u64) {
        let (dim, n) = (self.dim, self.n);
        let norms: Vec<f64> = (0..n)
            .map(|m| self.row(m).iter().map(|&x| f64::from(x).powi(2)).sum())
            .collect();
        let max_norm = norms.iter().copied().fold(0.0, f64::max);
        let mut augmented = Vec::with_capacity(n * (dim + 1));
        for (m, norm) in norms.iter().enumerate() {
            augmented.extend(self.row(m).iter().map(|&x| f64::from(x)));
            augmented.push((max_norm - norm).max(0.0).sqrt());
        }
        let (centroids, assign) = kmeans(&augmented, dim + 1, k, iters, seed);
        self.centroids = centroids.iter().map(|&x| x as f32).collect();
        let mut offsets = vec![0u64; k + 1];
        for &c in &assign {
            offsets[c as usize + 1] += 1;
        }
        for c in 0..k {
            offsets[c + 1] += offsets[c];
        }
        let mut cursor: Vec<u64> = offsets[..k].to_vec();
        let mut ids = vec![0u32; n];
        for (m, &c) in assign.iter().enumerate() {
            ids[cursor[c as usize] as usize] = m as u32;
            cursor[c as usize] += 1;
        }
        self.list_offsets = offsets;
        self.list_ids = ids;
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    pub fn encoder_hash(&self) -> u64 {
        self.encoder_hash
    }

    pub fn row(&self, m: usize) -> &[f32] {
        &self.vectors[m * self.dim..(m + 1) * self.dim]
    }

    pub fn n_clusters(&self) -> usize {
        self.list_offsets.len().saturating_sub(1)
    }

    /// Members of inverted list `c`, ascending.
    pub fn list(&self, c: usize) -> &[u32] {
        &self.list_ids[self.list_offsets[c] as usize..self.list_offsets[c + 1] as usize]
    }

    pub fn score(&self, m: usize, query: &[f64]) -> f64 {
        self.row(m)
            .iter()
            .zip(query)
            .map(|(&x, q)| f64::from(x) * q)
            .sum()
    }

    /// Total vectors scored by `mips_topk` since the last reset.
    pub fn touched_vectors(&self) -> u64 {
        self.touched.load(Ordering::Relaxed)
    }

    pub fn reset_touched(&self) {
        self.touched.store(0, Ordering::Relaxed);
    }

    pub fn memory_bytes(&self) -> usize {
        self.vectors.len() * 4 + self.centroids.len() * 4 + self.list_offsets.len() * 8
            + self.list_ids.len() * 4
    }

    /// Clusters in probe order: largest `query · c[..dim]` first, ties to the
    /// lower cluster id.
    pub fn probe_order(&self, query: &[f64]) -> Vec<usize> {
        let stride = self.dim + 1;
        let mut scored: Vec<(usize, f64)> = (0..self.n_clusters())
            .map(|c| {
                let s = self.centroids[c * stride..c * stride + self.dim]
                    .iter()
                    .zip(query)
                    .map(|(&x, q)| f64::from(x) * q)
                    .sum();
                (c, s)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.into_iter().map(|(c, _)| c).collect()
    }

    /// Top-`k` mentions by inner product with `query`, as raw scores over
    /// `0..len()`. Ties go to the lower mention id.
    pub fn mips_topk(&self, query: &[f64], k: usize) -> Result<SparseVector> {
        if query.len() != self.dim {
            return Err(Error::Contract(format!(
                "query dimension {} does not match index dimension {}",
                query.len(),
                self.dim
            )));
        }
        if k == 0 {
            return Err(Error::Contract("K must be >= 1".into()));
        }
        let candidates: Vec<u32> = match self.mode {
            IndexMode::Exact => (0..self.n as u32).collect(),
            IndexMode::Clustered { n_probe, .. } => {
                let mut ids: Vec<u32> = self
                    .probe_order(query)
                    .into_iter()
                    .take(n_probe)
                    .flat_map(|c| self.list(c).iter().copied())
                    .collect();
                ids.sort_unstable();
                ids
            }
        };
        self.touched
            .fetch_add(candidates.len() as u64, Ordering::Relaxed);
        let scores: Vec<f64> = candidates
            .iter()
            .map(|&m| self.score(m as usize, query))
            .collect();
        let all = SparseVector::from_parts_unchecked(self.n, candidates, scores);
        topk_truncate(&all, k)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u64::<LittleEndian>(self.n as u64)?;
        w.write_u64::<LittleEndian>(self.dim as u64)?;
        let (mode, n_clusters, n_probe) = match self.mode {
            IndexMode::Exact => (0u8, 0u64, 0u64),
            IndexMode::Clustered { n_clusters, n_probe } => {
                (1, n_clusters as u64, n_probe as u64)
            }
        };
        w.write_u8(mode)?;
        w.write_u64::<LittleEndian>(n_clusters)?;
        w.write_u64::<LittleEndian>(n_probe)?;
        w.write_u64::<LittleEndian>(self.encoder_hash)?;
        for &x in &self.centroids {
            w.write_f32::<LittleEndian>(x)?;
        }
        for &o in &self.list_offsets {
            w.write_u64::<LittleEndian>(o)?;
        }
        for &id in &self.list_ids {
            w.write_u32::<LittleEndian>(id)?;
        }
        for &x in &self.vectors {
            w.write_f32::<LittleEndian>(x)?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("dense index: {e}"));
        let bad = |m: &str| Error::Format(format!("dense index: {m}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(fmt)?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n = r.read_u64::<LittleEndian>().map_err(fmt)? as usize;
        let dim = r.read_u64::<LittleEndian>().map_err(fmt)? as usize;
        let mode_tag = r.read_u8().map_err(fmt)?;
        let n_clusters = r.read_u64::<LittleEndian>().map_err(fmt)? as usize;
        let n_probe = r.read_u64::<LittleEndian>().map_err(fmt)? as usize;
        let encoder_hash = r.read_u64::<LittleEndian>().map_err(fmt)?;
        if n == 0 || dim == 0 {
            return Err(bad("empty index"));
        }
        let mode = match mode_tag {
            0 => IndexMode::Exact,
            1 if n_clusters >= 1 && n_clusters <= n && (1..=n_clusters).contains(&n_probe) => {
                IndexMode::Clustered { n_clusters, n_probe }
            }
            _ => return Err(bad("bad mode header")),
        };
        let read_f32s = |r: &mut R, len: usize| -> Result<Vec<f32>> {
            let mut out = vec![0f32; len];
            r.read_f32_into::<LittleEndian>(&mut out).map_err(fmt)?;
            Ok(out)
        };
        let (centroids, list_offsets, list_ids) = if mode_tag == 1 {
            let centroids = read_f32s(&mut r, n_clusters * (dim + 1))?;
            let mut offsets = vec![0u64; n_clusters + 1];
            r.read_u64_into::<LittleEndian>(&mut offsets).map_err(fmt)?;
            let mut ids = vec![0u32; n];
            r.read_u32_into::<LittleEndian>(&mut ids).map_err(fmt)?;
            if offsets[0] != 0
                || offsets[n_clusters] != n as u64
                || offsets.windows(2).any(|w| w[0] > w[1])
            {
                return Err(bad("bad list offsets"));
            }
            let mut seen = vec![false; n];
            for &id in &ids {
                match seen.get_mut(id as usize) {
                    Some(s) if !*s => *s = true,
                    _ => return Err(bad("inverted lists do not partition the mentions")),
                }
            }
            (centroids, offsets, ids)
        } else {
            (Vec::new(), Vec::new(), Vec::new())
        };
        let vectors = read_f32s(&mut r, n * dim)?;
        if vectors.iter().any(|x| !x.is_finite()) {
            return Err(bad("non-finite vector entry"));
        }
        Ok(DenseMentionIndex {
            dim,
            n,
            mode,
            encoder_hash,
            vectors,
            centroids,
            list_offsets,
            list_ids,
            touched: AtomicU64::new(0),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }

    /// Loads and rejects an index built from different encoder parameters.
    pub fn load_checked(path: &Path, expected_hash: u64) -> Result<Self> {
        let index = Self::load(path)?;
        if index.encoder_hash != expected_hash {
            return Err(Error::Stale(format!(
                "index {} was built with encoder {:016x}, current encoder is {:016x}",
                path.display(),
                index.encoder_hash,
                expected_hash
            )));
        }
        Ok(index)
    }
}
