//! Binary CSR export of pruned codebooks.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     b"CERP"
//! version   u16
//! rows      u64
//! cols      u64
//! nnz       u64
//! row_ptr   u64 × (rows + 1)
//! col       u32 × nnz
//! val       f32 × nnz
//! ```
//!
//! Values are stored at single precision; an entry whose f32 rounding is
//! zero is treated as pruned and not stored.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::codebook::SparseCodebook;
use crate::table::Table;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CERP";
pub const VERSION: u16 = 1;

/// Compressed sparse rows at f32 precision.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<u64>,
    pub col: Vec<u32>,
    pub val: Vec<f32>,
}

impl CsrMatrix {
    pub fn from_sparse(sparse: &SparseCodebook) -> Self {
        let table = sparse.values();
        let (rows, cols) = table.shape();
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col = Vec::new();
        let mut val = Vec::new();
        row_ptr.push(0);
        for r in 0..rows {
            for (c, &x) in table.row(r).iter().enumerate() {
                let x = x as f32;
                if x != 0.0 {
                    col.push(c as u32);
                    val.push(x);
                }
            }
            row_ptr.push(col.len() as u64);
        }
        Self {
            rows,
            cols,
            row_ptr,
            col,
            val,
        }
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }

    pub fn to_sparse(&self) -> SparseCodebook {
        let mut table = Table::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (lo, hi) = (self.row_ptr[r] as usize, self.row_ptr[r + 1] as usize);
            for k in lo..hi {
                table.set(r, self.col[k] as usize, self.val[k] as f64);
            }
        }
        SparseCodebook::from_dense(table)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for n in [self.rows, self.cols, self.nnz()] {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        for p in &self.row_ptr {
            w.write_all(&p.to_le_bytes())?;
        }
        for c in &self.col {
            w.write_all(&c.to_le_bytes())?;
        }
        for v in &self.val {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated CSR header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad CSR magic {magic:?}")));
        }
        let version = u16::from_le_bytes(read_array(r)?);
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let rows = read_u64(r)? as usize;
        let cols = read_u64(r)? as usize;
        let nnz = read_u64(r)? as usize;
        if rows.checked_mul(cols).is_none_or(|cap| nnz > cap) {
            return Err(Error::Format(format!(
                "nnz {nnz} exceeds a {rows}×{cols} table"
            )));
        }
        let row_ptr = (0..=rows).map(|_| read_u64(r)).collect::<Result<Vec<_>>>()?;
        let col = (0..nnz)
            .map(|_| read_array(r).map(u32::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        let val = (0..nnz)
            .map(|_| read_array(r).map(f32::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        let m = Self {
            rows,
            cols,
            row_ptr,
            col,
            val,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.row_ptr.first() != Some(&0) || self.row_ptr.last() != Some(&(self.nnz() as u64)) {
            return Err(Error::Format("row pointer bounds".into()));
        }
        for r in 0..self.rows {
            let (lo, hi) = (self.row_ptr[r] as usize, self.row_ptr[r + 1] as usize);
            if lo > hi {
                return Err(Error::Format(format!("row pointer decreases at row {r}")));
            }
            let cols = &self.col[lo..hi];
            if cols.iter().any(|&c| c as usize >= self.cols) || cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Format(format!("bad column indices in row {r}")));
            }
        }
        if self.val.iter().any(|v| !v.is_finite() || *v == 0.0) {
            return Err(Error::Format("stored values must be finite and nonzero".into()));
        }
        Ok(())
    }
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("unexpected end of file".into()))?;
    Ok(buf)
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    read_array(r).map(u64::from_le_bytes)
}

pub fn write_csr(path: &Path, sparse: &SparseCodebook) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    CsrMatrix::from_sparse(sparse).write_to(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csr(path: &Path) -> Result<SparseCodebook> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(CsrMatrix::read_from(&mut BufReader::new(file))?.to_sparse())
}
