//! FDTK checkpoint format: a flat list of named, shaped tensor records.
//!
//! Layout (all integers little-endian):
//!   magic "FDTK" | version u32 | count u32 |
//!   count x { name_len u32 | name utf-8 | rank u32 | extents u32 x rank |
//!             payload (numel floats, LE) }
//!
//! Version 2 stores f64 payloads so that save/load round trips — and
//! therefore resumed training — are bit-exact. Version 1 (f32) is still
//! read and written for compactness when exactness is not required.
//!
//! Namespaces: `llm.*` frozen text stream, `dit.*` trainable image stream
//! and fusion extras, `opt.*` optimizer moments and step, `ema.*` shadows.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{FuseError, Result};
use crate::flow::TrainState;
use crate::fusion::FusedModel;

pub const MAGIC: &[u8; 4] = b"FDTK";
pub const VERSION_F64: u32 = 2;
pub const VERSION_F32: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Record {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Record {
        Record { name: name.into(), shape: shape.to_vec(), data }
    }
}

fn bad(msg: impl Into<String>) -> FuseError {
    FuseError::Checkpoint(msg.into())
}

pub fn write_records<W: Write>(w: &mut W, version: u32, records: &[Record]) -> Result<()> {
    if version != VERSION_F64 && version != VERSION_F32 {
        return Err(bad(format!("unsupported version {version}")));
    }
    w.write_all(MAGIC)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for r in records {
        let numel: usize = r.shape.iter().product();
        if numel != r.data.len() {
            return Err(bad(format!("record {}: shape/payload mismatch", r.name)));
        }
        w.write_all(&(r.name.len() as u32).to_le_bytes())?;
        w.write_all(r.name.as_bytes())?;
        w.write_all(&(r.shape.len() as u32).to_le_bytes())?;
        for &e in &r.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        match version {
            VERSION_F64 => {
                for &x in &r.data {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            _ => {
                for &x in &r.data {
                    w.write_all(&(x as f32).to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| bad(format!("truncated payload while reading {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_records<R: Read>(r: &mut R) -> Result<Vec<Record>> {
    let mut r = Reader { inner: r };
    let magic = r.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(bad(format!("magic mismatch: expected FDTK, got {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != VERSION_F64 && version != VERSION_F32 {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = r.u32("record count")?;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let name_len = r.u32(&format!("record {i} name length"))? as usize;
        let name = String::from_utf8(r.bytes(name_len, &format!("record {i} name"))?)
            .map_err(|_| bad(format!("record {i}: name is not utf-8")))?;
        let rank = r.u32(&format!("{name} rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&format!("{name} extents"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = match version {
            VERSION_F64 => {
                let raw = r.bytes(numel * 8, &name)?;
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
            _ => {
                let raw = r.bytes(numel * 4, &name)?;
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            }
        };
        out.push(Record { name, shape, data });
    }
    // trailing garbage is also a format violation
    let mut extra = [0u8; 1];
    if r.inner.read(&mut extra)? != 0 {
        return Err(bad("trailing bytes after final record"));
    }
    Ok(out)
}

fn model_records(model: &FusedModel, state: Option<&TrainState>) -> Vec<Record> {
    let mut records = Vec::new();
    for (name, t) in model.all_params() {
        records.push(Record::new(name, &t.shape(), t.to_vec()));
    }
    if let Some(state) = state {
        records.push(Record::new("opt.step", &[1], vec![state.step as f64]));
        for (i, name) in state.names.iter().enumerate() {
            records.push(Record::new(format!("opt.m.{name}"), &[state.m[i].len()], state.m[i].clone()));
            records.push(Record::new(format!("opt.v.{name}"), &[state.v[i].len()], state.v[i].clone()));
            records.push(Record::new(format!("ema.{name}"), &[state.ema[i].len()], state.ema[i].clone()));
        }
    }
    records
}

/// Write model parameters (and, if given, optimizer/EMA state) to `path`.
pub fn checkpoint_save(path: &Path, model: &FusedModel, state: Option<&TrainState>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_records(&mut w, VERSION_F64, &model_records(model, state))?;
    w.flush()?;
    Ok(())
}

/// Restore parameters into an already-constructed model (and state). Every
/// model parameter must be present with a matching shape; shape
/// disagreements name the offending tensor.
pub fn checkpoint_load(path: &Path, model: &FusedModel, state: Option<&mut TrainState>) -> Result<()> {
    let mut r = BufReader::new(File::open(path)?);
    let records = read_records(&mut r)?;
    let lookup = |name: &str| -> Result<&Record> {
        records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))
    };
    // validate everything before mutating anything
    for (name, t) in model.all_params() {
        let rec = lookup(&name)?;
        if rec.shape != t.shape() {
            return Err(bad(format!(
                "shape disagreement for {name}: checkpoint {:?}, model {:?}",
                rec.shape,
                t.shape()
            )));
        }
    }
    if let Some(state) = &state {
        let step = lookup("opt.step")?;
        if step.data.len() != 1 {
            return Err(bad("opt.step must hold a single value"));
        }
        for (i, name) in state.names.iter().enumerate() {
            for (prefix, vecs) in [("opt.m", &state.m), ("opt.v", &state.v), ("ema", &state.ema)] {
                let rec = lookup(&format!("{prefix}.{name}"))?;
                if rec.data.len() != vecs[i].len() {
                    return Err(bad(format!(
                        "shape disagreement for {prefix}.{name}: checkpoint {}, state {}",
                        rec.data.len(),
                        vecs[i].len()
                    )));
                }
            }
        }
    }
    for (name, t) in model.all_params() {
        t.set_data(&lookup(&name)?.data);
    }
    if let Some(state) = state {
        state.step = lookup("opt.step")?.data[0] as u64;
        for i in 0..state.names.len() {
            let name = state.names[i].clone();
            state.m[i] = lookup(&format!("opt.m.{name}"))?.data.clone();
            state.v[i] = lookup(&format!("opt.v.{name}"))?.data.clone();
            state.ema[i] = lookup(&format!("ema.{name}"))?.data.clone();
        }
    }
    Ok(())
}
