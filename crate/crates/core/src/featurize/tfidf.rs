use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Entity, Mention};
use crate::error::{Error, Result};
use crate::sparse::SparseVector;
use crate::text::{bucket, hash_parts, tokenize, unigrams_and_bigrams, DEFAULT_HASH_SEED};

const MAGIC: &[u8; 4] = b"TFID";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TfidfConfig {
    /// Must be a power of two.
    pub n_buckets: usize,
    pub hash_seed: u64,
}

impl Default for TfidfConfig {
    fn default() -> Self {
        TfidfConfig {
            n_buckets: 1 << 20,
            hash_seed: DEFAULT_HASH_SEED,
        }
    }
}

/// Document frequencies over hashed unigrams and bigrams.
///
/// `idf(b) = ln((1 + N) / (1 + df(b))) + 1`; vectors use raw term counts
/// times idf and are L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct HashedTfidfModel {
    n_buckets: usize,
    seed: u64,
    n_docs: usize,
    df: Vec<u32>,
}

impl HashedTfidfModel {
    pub fn n_buckets(&self) -> usize {
        self.n_buckets
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn df(&self, b: u32) -> u32 {
        self.df[b as usize]
    }

    pub fn idf(&self, b: u32) -> f64 {
        ((1.0 + self.n_docs as f64) / (1.0 + f64::from(self.df[b as usize]))).ln() + 1.0
    }

    pub fn gram_bucket(&self, gram: &str) -> u32 {
        gram_bucket(gram, self.seed, self.n_buckets)
    }

    /// Hashed n-gram counts of a token sequence, sorted by bucket.
    pub fn counts(&self, tokens: &[String]) -> Vec<(u32, f64)> {
        let mut buckets: Vec<u32> = unigrams_and_bigrams(tokens)
            .map(|g| self.gram_bucket(&g))
            .collect();
        buckets.sort_unstable();
        let mut out: Vec<(u32, f64)> = Vec::new();
        for b in buckets {
            match out.last_mut() {
                Some((last, c)) if *last == b => *c += 1.0,
                _ => out.push((b, 1.0)),
            }
        }
        out
    }

    /// L2-normalized tf·idf vector; the zero vector for no tokens.
    pub fn vector(&self, tokens: &[String]) -> SparseVector {
        let mut counts = self.counts(tokens);
        for (b, c) in counts.iter_mut() {
            *c *= self.idf(*b);
        }
        let norm = counts.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        let (indices, values) = counts
            .into_iter()
            .map(|(b, v)| (b, if norm > 0.0 { v / norm } else { 0.0 }))
            .unzip();
        SparseVector::from_parts_unchecked(self.n_buckets, indices, values)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u64::<LittleEndian>(self.n_buckets as u64)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_u64::<LittleEndian>(self.n_docs as u64)?;
        let entries: Vec<(u32, u32)> = self
            .df
            .iter()
            .enumerate()
            .filter(|(_, &d)| d > 0)
            .map(|(b, &d)| (b as u32, d))
            .collect();
        w.write_u64::<LittleEndian>(entries.len() as u64)?;
        for (b, d) in entries {
            w.write_u32::<LittleEndian>(b)?;
            w.write_u32::<LittleEndian>(d)?;
            w.write_f64::<LittleEndian>(self.idf(b))?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("tfidf model: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(Error::Format("tfidf model: bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(fmt)?;
        if version != VERSION {
            return Err(Error::Format(format!("tfidf model: unsupported version {version}")));
        }
        let n_buckets = r.read_u64::<LittleEndian>().map_err(fmt)? as usize;
        if !n_buckets.is_power_of_two() || n_buckets < 2 {
            return Err(Error::Format(format!("tfidf model: bad bucket count {n_buckets}")));
        }
        let seed = r.read_u64::<LittleEndian>().map_err(fmt)?;
        let n_docs = r.read_u64::<LittleEndian>().map_err(fmt)? as usize;
        let n_entries = r.read_u64::<LittleEndian>().map_err(fmt)?;
        let mut df = vec![0u32; n_buckets];
        for _ in 0..n_entries {
            let b = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
            let d = r.read_u32::<LittleEndian>().map_err(fmt)?;
            let _idf = r.read_f64::<LittleEndian>().map_err(fmt)?;
            *df.get_mut(b)
                .ok_or_else(|| Error::Format("tfidf model: bucket out of range".into()))? = d;
        }
        Ok(HashedTfidfModel {
            n_buckets,
            seed,
            n_docs,
            df,
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

pub(crate) fn gram_bucket(gram: &str, seed: u64, n_buckets: usize) -> u32 {
    bucket(hash_parts(seed, "tfidf", &[gram]), n_buckets)
}

/// Counts, for every bucket, the passages containing at least one n-gram
/// hashed to it.
pub fn fit_tfidf(corpus: &Corpus, config: &TfidfConfig) -> Result<HashedTfidfModel> {
    if corpus.n_docs() == 0 {
        return Err(Error::Contract("cannot fit TFIDF on an empty corpus".into()));
    }
    if !config.n_buckets.is_power_of_two() || config.n_buckets < 2 {
        return Err(Error::Config(format!(
            "n_buckets must be a power of two >= 2, got {}",
            config.n_buckets
        )));
    }
    let mut model = HashedTfidfModel {
        n_buckets: config.n_buckets,
        seed: config.hash_seed,
        n_docs: corpus.n_docs(),
        df: vec![0; config.n_buckets],
    };
    for doc in corpus.documents() {
        for (b, _) in model.counts(&doc.tokens) {
            model.df[b as usize] += 1;
        }
    }
    Ok(model)
}

/// `F(m)`: the TFIDF vector of the passage containing the mention.
pub fn passage_vector(model: &HashedTfidfModel, corpus: &Corpus, mention: &Mention) -> SparseVector {
    model.vector(&corpus.doc(mention.doc_id).tokens)
}

/// `G(e)`: the TFIDF vector of the entity's surface form.
pub fn surface_vector(model: &HashedTfidfModel, entity: &Entity) -> SparseVector {
    model.vector(&tokenize(&entity.surface_form))
}
