use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::features::EncoderConfig;
use crate::error::{Error, Result};
use crate::sparse::SparseVector;
use crate::text::Fingerprint;

const MAGIC: &[u8; 4] = b"VKBP";
const VERSION: u32 = 1;

/// Dense row-major matrix of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: &str, rows: usize, cols: usize) -> Self {
        Tensor {
            name: name.to_string(),
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `φᵀ T`: a weighted sum of the rows selected by the sparse input.
    pub fn project(&self, phi: &SparseVector) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (i, w) in phi.iter() {
            for (o, x) in out.iter_mut().zip(self.row(i as usize)) {
                *o += w * x;
            }
        }
        out
    }
}

/// Identifies one trainable tensor. Query heads are numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    MentionStart,
    MentionEnd,
    /// Context word table of the mention encoder.
    MentionContext,
    Word,
    MixerHops,
    MixerRescore,
    Query(usize),
}

impl ParamId {
    fn slot(self) -> usize {
        match self {
            ParamId::MentionStart => 0,
            ParamId::MentionEnd => 1,
            ParamId::MentionContext => 2,
            ParamId::Word => 3,
            ParamId::MixerHops => 4,
            ParamId::MixerRescore => 5,
            ParamId::Query(t) => 5 + t,
        }
    }

    /// Parameters updated in end-to-end training; the mention encoder is
    /// frozen once the index is built.
    pub fn query_side(n_hops: usize) -> Vec<ParamId> {
        let mut ids = vec![ParamId::Word, ParamId::MixerHops, ParamId::MixerRescore];
        ids.extend((1..=n_hops).map(ParamId::Query));
        ids
    }
}

/// All encoder tensors:
/// `W_start`, `W_end` (`feature_buckets × p/2`), the word table
/// (`word_buckets × p`), the hop mixer (`feature_buckets × 3`), the `Z₀`
/// rescoring projection (`feature_buckets × p`) and one query head `V_t`
/// (`feature_buckets × p`) per hop.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    config: EncoderConfig,
    tensors: Vec<Tensor>,
    /// Bumped on every mutable access; lets traces detect stale parameters.
    version: u64,
}

impl PartialEq for EncoderParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

fn tensor_shapes(c: &EncoderConfig) -> Vec<(String, usize, usize)> {
    let mut shapes = vec![
        ("mention_start".to_string(), c.feature_buckets, c.half()),
        ("mention_end".to_string(), c.feature_buckets, c.half()),
        ("mention_context".to_string(), c.word_buckets, c.p),
        ("word".to_string(), c.word_buckets, c.p),
        ("mixer_hops".to_string(), c.feature_buckets, 3),
        ("mixer_rescore".to_string(), c.feature_buckets, c.p),
    ];
    for t in 1..=c.n_hops {
        shapes.push((format!("query_{t}"), c.feature_buckets, c.p));
    }
    shapes
}

impl EncoderParams {
    /// Seeded `uniform(±1/√fan_in)` initialization of every tensor; the
    /// mention context table starts as a copy of the word table.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let scale = 1.0 / (config.feature_fan_in as f64).sqrt();
        let tensors = tensor_shapes(&config)
            .into_iter()
            .map(|(name, rows, cols)| {
                let mut t = Tensor::zeros(&name, rows, cols);
                for x in t.data.iter_mut() {
                    *x = rng.gen_range(-scale..scale);
                }
                t
            })
            .collect::<Vec<Tensor>>();
        let mut params = EncoderParams {
            config,
            tensors,
            version: 0,
        };
        let word = params.tensor(ParamId::Word).data.clone();
        params.tensor_mut(ParamId::MentionContext).data = word;
        params.version = 0;
        Ok(params)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.slot()]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.version += 1;
        &mut self.tensors[id.slot()]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn n_tensors(&self) -> usize {
        self.tensors.len()
    }

    /// Overwrites query head `to` with a copy of head `from`.
    pub fn copy_query_head(&mut self, from: usize, to: usize) {
        let src = self.tensor(ParamId::Query(from)).data.clone();
        self.tensor_mut(ParamId::Query(to)).data = src;
    }

    /// Rounds every parameter to f32, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        self.version += 1;
        for t in &mut self.tensors {
            for x in t.data.iter_mut() {
                *x = f64::from(*x as f32);
            }
        }
    }

    /// Identifies the mention encoder (config and its three tensors at f32
    /// precision), so an index can detect that it is stale.
    pub fn mention_fingerprint(&self) -> u64 {
        let c = &self.config;
        let mut fp = Fingerprint::default();
        for word in [
            c.p as u64,
            c.feature_buckets as u64,
            c.word_buckets as u64,
            c.context_window as u64,
            c.hash_seed,
        ] {
            fp.write_u64(word);
        }
        for id in [ParamId::MentionStart, ParamId::MentionEnd, ParamId::MentionContext] {
            for &x in &self.tensor(id).data {
                fp.write_u64(u64::from((x as f32).to_bits()));
            }
        }
        fp.finish()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let config = serde_json::to_vec(&self.config)?;
        w.write_u32::<LittleEndian>(config.len() as u32)?;
        w.write_all(&config)?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for t in &self.tensors {
            w.write_u16::<LittleEndian>(t.name.len() as u16)?;
            w.write_all(t.name.as_bytes())?;
            w.write_u64::<LittleEndian>(t.rows as u64)?;
            w.write_u64::<LittleEndian>(t.cols as u64)?;
            for &x in &t.data {
                w.write_f32::<LittleEndian>(x as f32)?;
            }
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("checkpoint: {e}"));
        let bad = |m: String| Error::Format(format!("checkpoint: {m}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(fmt)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(fmt)?;
        let config: EncoderConfig =
            serde_json::from_slice(&buf).map_err(|e| bad(format!("config: {e}")))?;
        config.validate()?;
        let shapes = tensor_shapes(&config);
        let n = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
        if n != shapes.len() {
            return Err(bad(format!("expected {} tensors, found {n}", shapes.len())));
        }
        let mut tensors = Vec::with_capacity(n);
        for (name, rows, cols) in shapes {
            let len = r.read_u16::<LittleEndian>().map_err(fmt)? as usize;
            let mut name_buf = vec![0u8; len];
            r.read_exact(&mut name_buf).map_err(fmt)?;
            let got_rows = r.read_u64::<LittleEndian>().map_err(fmt)? as usize;
            let got_cols = r.read_u64::<LittleEndian>().map_err(fmt)? as usize;
            if name_buf != name.as_bytes() || got_rows != rows || got_cols != cols {
                return Err(bad(format!("tensor block does not match {name} [{rows}x{cols}]")));
            }
            let mut data = vec![0f32; rows * cols];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(fmt)?;
            if data.iter().any(|x| !x.is_finite()) {
                return Err(bad(format!("{name} has non-finite values")));
            }
            tensors.push(Tensor {
                name,
                rows,
                cols,
                data: data.into_iter().map(f64::from).collect(),
            });
        }
        Ok(EncoderParams {
            config,
            tensors,
            version: 0,
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
}

/// Row-sparse gradient buffers, one map `row → values` per tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    rows: Vec<BTreeMap<u32, Vec<f64>>>,
    cols: Vec<usize>,
}

impl Gradients {
    pub fn new(params: &EncoderParams) -> Self {
        Gradients {
            rows: vec![BTreeMap::new(); params.n_tensors()],
            cols: params.tensors.iter().map(|t| t.cols).collect(),
        }
    }

    /// `grad[id][row] += scale * values`.
    pub fn add_row(&mut self, id: ParamId, row: u32, scale: f64, values: &[f64]) {
        let cols = self.cols[id.slot()];
        debug_assert_eq!(values.len(), cols);
        let dst = self.rows[id.slot()]
            .entry(row)
            .or_insert_with(|| vec![0.0; cols]);
        for (d, v) in dst.iter_mut().zip(values) {
            *d += scale * v;
        }
    }

    /// Gradient of `φᵀ T` for upstream `dy`: `grad[id] += φ ⊗ dy`.
    pub fn add_outer(&mut self, id: ParamId, phi: &SparseVector, dy: &[f64]) {
        for (i, w) in phi.iter() {
            self.add_row(id, i, w, dy);
        }
    }

    pub fn rows(&self, id: ParamId) -> &BTreeMap<u32, Vec<f64>> {
        &self.rows[id.slot()]
    }

    pub fn get(&self, id: ParamId, row: u32, col: usize) -> f64 {
        self.rows[id.slot()].get(&row).map_or(0.0, |r| r[col])
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (slot, map) in other.rows.iter().enumerate() {
            for (&row, values) in map {
                let cols = self.cols[slot];
                let dst = self.rows[slot].entry(row).or_insert_with(|| vec![0.0; cols]);
                for (d, v) in dst.iter_mut().zip(values) {
                    *d += v;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for map in &mut self.rows {
            for values in map.values_mut() {
                values.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|m| m.values())
            .flat_map(|r| r.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.rows
            .iter()
            .flat_map(|m| m.values())
            .all(|r| r.iter().all(|&v| v == 0.0))
    }

    pub(crate) fn slot_rows(&self, slot: usize) -> &BTreeMap<u32, Vec<f64>> {
        &self.rows[slot]
    }
}

pub(crate) fn slot_of(id: ParamId) -> usize {
    id.slot()
}
