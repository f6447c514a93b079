use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RAGM";
const VERSION: u32 = 1;

/// Row-sliceable sparse matrix: one variable-length list of column ids and
/// one of values per row, stored back to back with a row-offset array.
///
/// Slicing a row is O(1); nothing in the products below iterates over rows
/// that the input vector does not touch.
#[derive(Debug, Clone, PartialEq)]
pub struct RaggedMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<u64>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl RaggedMatrix {
    /// Builds from per-row `(col, value)` lists. Each row must have sorted,
    /// unique columns below `n_cols` and finite values.
    pub fn from_rows(n_cols: usize, rows: Vec<Vec<(u32, f64)>>) -> Result<Self> {
        let mut builder = RaggedBuilder::new(n_cols);
        for row in rows {
            builder.push_row(row)?;
        }
        Ok(builder.finish())
    }

    pub fn empty(n_rows: usize, n_cols: usize) -> Self {
        RaggedMatrix {
            n_rows,
            n_cols,
            row_offsets: vec![0; n_rows + 1],
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    #[inline]
    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let lo = self.row_offsets[r] as usize;
        let hi = self.row_offsets[r + 1] as usize;
        (&self.cols[lo..hi], &self.vals[lo..hi])
    }

    pub fn row_len(&self, r: usize) -> usize {
        (self.row_offsets[r + 1] - self.row_offsets[r]) as usize
    }

    pub fn max_row_len(&self) -> usize {
        (0..self.n_rows).map(|r| self.row_len(r)).max().unwrap_or(0)
    }

    pub fn get(&self, r: usize, c: u32) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n_cols]; self.n_rows];
        for (r, row) in out.iter_mut().enumerate() {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                row[c as usize] = v;
            }
        }
        out
    }

    /// Column sums (Bᵀ1 for the coreference matrix).
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        for (&c, &v) in self.cols.iter().zip(&self.vals) {
            out[c as usize] += v;
        }
        out
    }

    /// Approximate heap footprint in bytes.
    pub fn memory_bytes(&self) -> usize {
        self.row_offsets.len() * 8 + self.cols.len() * 4 + self.vals.len() * 8
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u64::<LittleEndian>(self.n_rows as u64)?;
        w.write_u64::<LittleEndian>(self.n_cols as u64)?;
        w.write_u64::<LittleEndian>(self.cols.len() as u64)?;
        for &o in &self.row_offsets {
            w.write_u64::<LittleEndian>(o)?;
        }
        for &c in &self.cols {
            w.write_u32::<LittleEndian>(c)?;
        }
        for &v in &self.vals {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("ragged matrix: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(Error::Format("ragged matrix: bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(fmt)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "ragged matrix: unsupported version {version}"
            )));
        }
        let n_rows = r.read_u64::<LittleEndian>().map_err(fmt)? as usize;
        let n_cols = r.read_u64::<LittleEndian>().map_err(fmt)? as usize;
        let nnz = r.read_u64::<LittleEndian>().map_err(fmt)? as usize;
        let mut row_offsets = vec![0u64; n_rows + 1];
        r.read_u64_into::<LittleEndian>(&mut row_offsets).map_err(fmt)?;
        let mut cols = vec![0u32; nnz];
        r.read_u32_into::<LittleEndian>(&mut cols).map_err(fmt)?;
        let mut vals = vec![0f64; nnz];
        r.read_f64_into::<LittleEndian>(&mut vals).map_err(fmt)?;

        if row_offsets[0] != 0 || row_offsets[n_rows] as usize != nnz {
            return Err(Error::Format("ragged matrix: inconsistent offsets".into()));
        }
        let mut builder = RaggedBuilder::new(n_cols);
        for row in 0..n_rows {
            let (lo, hi) = (row_offsets[row] as usize, row_offsets[row + 1] as usize);
            if lo > hi {
                return Err(Error::Format("ragged matrix: decreasing offsets".into()));
            }
            builder
                .push_row(cols[lo..hi].iter().copied().zip(vals[lo..hi].iter().copied()))
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(builder.finish())
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

/// Appends validated rows one at a time.
#[derive(Debug)]
pub struct RaggedBuilder {
    n_cols: usize,
    row_offsets: Vec<u64>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl RaggedBuilder {
    pub fn new(n_cols: usize) -> Self {
        RaggedBuilder {
            n_cols,
            row_offsets: vec![0],
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn push_row<I: IntoIterator<Item = (u32, f64)>>(&mut self, row: I) -> Result<()> {
        let start = self.cols.len();
        let row_id = self.row_offsets.len() - 1;
        for (c, v) in row {
            if c as usize >= self.n_cols {
                self.cols.truncate(start);
                self.vals.truncate(start);
                return Err(Error::Contract(format!(
                    "row {row_id}: column {c} out of {} columns",
                    self.n_cols
                )));
            }
            if !v.is_finite() {
                self.cols.truncate(start);
                self.vals.truncate(start);
                return Err(Error::Contract(format!("row {row_id}: non-finite value")));
            }
            if self.cols.len() > start && *self.cols.last().unwrap() >= c {
                self.cols.truncate(start);
                self.vals.truncate(start);
                return Err(Error::Contract(format!(
                    "row {row_id}: columns not strictly increasing"
                )));
            }
            self.cols.push(c);
            self.vals.push(v);
        }
        self.row_offsets.push(self.cols.len() as u64);
        Ok(())
    }

    pub fn finish(self) -> RaggedMatrix {
        RaggedMatrix {
            n_rows: self.row_offsets.len() - 1,
            n_cols: self.n_cols,
            row_offsets: self.row_offsets,
            cols: self.cols,
            vals: self.vals,
        }
    }
}
