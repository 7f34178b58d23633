//! Versioned binary tensor container used for checkpoints and for the
//! exported scorer.
//!
//! Layout, little-endian: magic `CERPCKPT`, `u16` version, `u64` length of
//! a JSON metadata blob and the blob, `u32` tensor count, then per tensor a
//! `u32` name length and UTF-8 name, a `u8` dtype tag (0 = f64, 1 = f32),
//! `u64` rows, `u64` cols and the row-major data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::codebook::{Codebook, PruneMask};
use crate::optim::{AdamState, Moments};
use crate::scorer::{Dense, Mlp, Scorer, ScorerKind};
use crate::table::Table;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CERPCKPT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            t => Err(Error::Format(format!("unknown dtype tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dtype: DType,
    pub table: Table,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    /// Stores `table`; with [`DType::F32`] the values are rounded now so the
    /// in-memory copy matches what a reader sees.
    pub fn push(&mut self, name: impl Into<String>, dtype: DType, table: Table) {
        let table = match dtype {
            DType::F64 => table,
            DType::F32 => table.map(|x| x as f32 as f64),
        };
        self.tensors.push(Tensor {
            name: name.into(),
            dtype,
            table,
        });
    }

    pub fn get(&self, name: &str) -> Result<&Table> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &t.table)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.iter().any(|t| t.name == name)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.name.len() as u32).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&[t.dtype.tag()])?;
            w.write_all(&(t.table.rows() as u64).to_le_bytes())?;
            w.write_all(&(t.table.cols() as u64).to_le_bytes())?;
            for &x in t.table.as_slice() {
                match t.dtype {
                    DType::F64 => w.write_all(&x.to_le_bytes())?,
                    DType::F32 => w.write_all(&(x as f32).to_le_bytes())?,
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = u16::from_le_bytes(read_array(r)?);
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let meta_len = read_len(u64::from_le_bytes(read_array(r)?))?;
        let mut meta = vec![0u8; meta_len];
        read_exact(r, &mut meta)?;
        let meta = serde_json::from_slice(&meta)?;
        let count = u32::from_le_bytes(read_array(r)?);
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = read_len(u32::from_le_bytes(read_array(r)?) as u64)?;
            let mut name = vec![0u8; name_len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let [tag] = read_array::<1>(r)?;
            let dtype = DType::from_tag(tag)?;
            let rows = read_len(u64::from_le_bytes(read_array(r)?))?;
            let cols = read_len(u64::from_le_bytes(read_array(r)?))?;
            let len = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Format(format!("tensor {name} shape overflows")))?;
            let mut data = Vec::with_capacity(len.min(1 << 24));
            for _ in 0..len {
                data.push(match dtype {
                    DType::F64 => f64::from_le_bytes(read_array(r)?),
                    DType::F32 => f32::from_le_bytes(read_array(r)?) as f64,
                });
            }
            tensors.push(Tensor {
                name,
                dtype,
                table: Table::from_vec(rows, cols, data),
            });
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| with_path(e, path))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file)).map_err(|e| with_path(e, path))
    }

    pub fn push_codebook(&mut self, prefix: &str, cb: &Codebook) {
        self.push(format!("{prefix}.values"), DType::F64, cb.values.clone());
        self.push(format!("{prefix}.thresholds"), DType::F64, cb.thresholds.clone());
    }

    pub fn codebook(&self, prefix: &str) -> Result<Codebook> {
        Codebook::new(
            self.get(&format!("{prefix}.values"))?.clone(),
            self.get(&format!("{prefix}.thresholds"))?.clone(),
        )
    }

    pub fn push_mask(&mut self, name: &str, mask: &PruneMask) {
        let (rows, cols) = mask.shape();
        let bits = mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        self.push(name, DType::F32, Table::from_vec(rows, cols, bits));
    }

    pub fn mask(&self, name: &str) -> Result<PruneMask> {
        let t = self.get(name)?;
        PruneMask::from_bits(t.rows(), t.cols(), t.as_slice().iter().map(|&x| x != 0.0).collect())
    }

    /// Stores MLP layers as `{prefix}.{i}.weights` / `{prefix}.{i}.bias`;
    /// the kind goes into the metadata under `"{prefix}_kind"`.
    pub fn push_scorer(&mut self, prefix: &str, scorer: &Scorer, dtype: DType) {
        if let Value::Object(map) = &mut self.meta {
            map.insert(format!("{prefix}_kind"), Value::from(kind_name(scorer.kind())));
        }
        if let Scorer::Mlp(mlp) = scorer {
            for (i, layer) in mlp.layers.iter().enumerate() {
                self.push(format!("{prefix}.{i}.weights"), dtype, layer.weights.clone());
                let bias = Table::from_vec(1, layer.bias.len(), layer.bias.clone());
                self.push(format!("{prefix}.{i}.bias"), dtype, bias);
            }
        }
    }

    pub fn scorer(&self, prefix: &str) -> Result<Scorer> {
        let kind = self
            .meta
            .get(format!("{prefix}_kind"))
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Format(format!("missing {prefix}_kind")))?;
        match kind {
            "dot" => Ok(Scorer::Dot),
            "mlp" => {
                let mut layers = Vec::new();
                while self.has(&format!("{prefix}.{}.weights", layers.len())) {
                    let i = layers.len();
                    layers.push(Dense {
                        weights: self.get(&format!("{prefix}.{i}.weights"))?.clone(),
                        bias: self.get(&format!("{prefix}.{i}.bias"))?.as_slice().to_vec(),
                    });
                }
                Ok(Scorer::Mlp(Mlp::from_layers(layers)?))
            }
            other => Err(Error::UnknownName {
                kind: "scorer",
                name: other.into(),
            }),
        }
    }

    pub fn push_adam(&mut self, prefix: &str, adam: &AdamState) {
        if let Value::Object(map) = &mut self.meta {
            map.insert(format!("{prefix}_step"), Value::from(adam.step));
        }
        for (i, mo) in adam.moments.iter().enumerate() {
            let m = Table::from_vec(1, mo.m.len(), mo.m.clone());
            let v = Table::from_vec(1, mo.v.len(), mo.v.clone());
            self.push(format!("{prefix}.{i}.m"), DType::F64, m);
            self.push(format!("{prefix}.{i}.v"), DType::F64, v);
        }
    }

    pub fn adam(&self, prefix: &str) -> Result<AdamState> {
        let step = self
            .meta
            .get(format!("{prefix}_step"))
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Format(format!("missing {prefix}_step")))?;
        let mut moments = Vec::new();
        while self.has(&format!("{prefix}.{}.m", moments.len())) {
            let i = moments.len();
            moments.push(Moments {
                m: self.get(&format!("{prefix}.{i}.m"))?.as_slice().to_vec(),
                v: self.get(&format!("{prefix}.{i}.v"))?.as_slice().to_vec(),
            });
        }
        Ok(AdamState { step, moments })
    }
}

fn kind_name(kind: ScorerKind) -> &'static str {
    match kind {
        ScorerKind::Dot => "dot",
        ScorerKind::Mlp => "mlp",
    }
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::RawIo(source) => Error::io(path, source),
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("checkpoint is truncated".into())
        } else {
            Error::RawIo(e)
        }
    })
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn read_len(n: u64) -> Result<usize> {
    usize::try_from(n).map_err(|_| Error::Format(format!("length {n} does not fit in memory")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn sample() -> Checkpoint {
        let mut rng = stream(1, Stream::Scorer);
        let scorer = Scorer::new(ScorerKind::Mlp, 3, &[4, 2], &mut rng).unwrap();
        let mut ck = Checkpoint::new(serde_json::json!({"epoch": 3}));
        ck.push("x", DType::F64, Table::from_vec(2, 2, vec![0.1, -2.0, 1e-300, 0.0]));
        ck.push_scorer("scorer", &scorer, DType::F64);
        ck.push_mask("mask", &PruneMask::from_bits(1, 3, vec![true, false, true]).unwrap());
        let mut adam = AdamState::new([2, 3]);
        adam.step = 7;
        adam.moments[1].v[2] = 0.5;
        ck.push_adam("adam", &adam);
        ck
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.scorer("scorer").unwrap(), ck.scorer("scorer").unwrap());
        assert_eq!(back.adam("adam").unwrap().step, 7);
        assert_eq!(back.mask("mask").unwrap().bits(), &[true, false, true]);
    }

    #[test]
    fn f32_tensors_are_rounded_on_push() {
        let mut ck = Checkpoint::new(Value::Null);
        ck.push("y", DType::F32, Table::from_vec(1, 1, vec![0.1]));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.get("y").unwrap().get(0, 0), 0.1f32 as f64);
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_bad_headers() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(matches!(
            Checkpoint::read_from(&mut bad.as_slice()),
            Err(Error::Version { found: 9, expected: 1 })
        ));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(Checkpoint::read_from(&mut &short[..]), Err(Error::Format(_))));
    }
}
