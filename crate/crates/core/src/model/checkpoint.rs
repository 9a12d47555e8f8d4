//! Binary checkpoint format.
//!
//! ```text
//! "EXPF1" | version u16 | header length u32 | header JSON (sorted keys)
//! | record count u32 | records…
//! record = name length u32 | UTF-8 name | rank u8 | dims u64×rank | f64×Πdims
//! ```
//!
//! All integers and floats are little-endian; floats round-trip bit-exactly.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gating::{Expert, GatingParams};
use crate::lifecycle::RoutingRecord;
use crate::numerics::Matrix;

use super::{FeedForward, Model, ModelConfig, MoeLayer};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"EXPF1";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    stage: u8,
    step: u64,
    opt_step: u64,
    /// Expert count per block; `None` for dense blocks.
    experts: Vec<Option<usize>>,
}

struct Record {
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn push_record(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn matrix_records(model: &Model) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut recs = Vec::new();
    for (name, _, p) in model.params() {
        for (suffix, m) in [("", &p.value), (".m", &p.m), (".v", &p.v)] {
            recs.push((format!("{name}{suffix}"), vec![m.rows(), m.cols()], m.data().to_vec()));
        }
    }
    for (i, b) in model.blocks.iter().enumerate() {
        if let FeedForward::Moe(layer) = &b.ffn {
            let r = &layer.record;
            let p = format!("blocks.{i}.record");
            recs.push((format!("{p}.a"), vec![r.a.rows(), r.a.cols()], r.a.data().to_vec()));
            recs.push((format!("{p}.a_e"), vec![r.a_e.len()], r.a_e.clone()));
            let last: Vec<f64> = r.last_active.iter().map(|s| s.map_or(-1.0, |v| v as f64)).collect();
            recs.push((format!("{p}.last_active"), vec![last.len()], last));
            recs.push((format!("{p}.unrouted_mean"), vec![r.unrouted_mean.len()], r.unrouted_mean.clone()));
            recs.push((format!("{p}.unrouted_count"), vec![], vec![r.unrouted_count as f64]));
            recs.push((format!("{p}.unrouted_frac"), vec![], vec![r.unrouted_frac]));
            recs.push((format!("{p}.step"), vec![], vec![r.step as f64]));
        }
    }
    recs
}

/// Serialises the full model state, including optimizer moments and
/// routing records.
pub fn save_checkpoint(model: &Model) -> Vec<u8> {
    let header = Header {
        config: model.config.clone(),
        stage: model.stage,
        step: model.step,
        opt_step: model.opt_step,
        experts: model
            .blocks
            .iter()
            .map(|b| match &b.ffn {
                FeedForward::Moe(m) => Some(m.experts.len()),
                FeedForward::Dense(_) => None,
            })
            .collect(),
    };
    // serde_json::Value objects are sorted maps, giving canonical key order
    let canonical = serde_json::to_value(&header).expect("header serializes");
    let json = serde_json::to_string(&canonical).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    let recs = matrix_records(model);
    out.extend_from_slice(&(recs.len() as u32).to_le_bytes());
    for (name, dims, data) in &recs {
        push_record(&mut out, name, dims, data);
    }
    out
}

pub fn checkpoint_digest(model: &Model) -> String {
    hex::encode(Sha256::digest(save_checkpoint(model)))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn take_matrix(recs: &mut BTreeMap<String, Record>, name: &str, shape: (usize, usize)) -> Result<Matrix> {
    let r = recs
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))?;
    if r.dims != [shape.0, shape.1] {
        return Err(Error::Checkpoint(format!("record {name} has dims {:?}, expected {shape:?}", r.dims)));
    }
    Matrix::from_vec(shape.0, shape.1, r.data)
}

fn take_vec(recs: &mut BTreeMap<String, Record>, name: &str, len: Option<usize>) -> Result<Vec<f64>> {
    let r = recs
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))?;
    let ok = match len {
        Some(n) => r.dims == [n],
        None => r.dims.is_empty(),
    };
    if !ok {
        return Err(Error::Checkpoint(format!("record {name} has unexpected dims {:?}", r.dims)));
    }
    Ok(r.data)
}

/// Inverse of [`save_checkpoint`].
pub fn load_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut rd = Reader { buf: bytes, pos: 0 };
    if rd.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic; not an expertflow checkpoint".into()));
    }
    let version = rd.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = rd.u32()? as usize;
    let header: Header = serde_json::from_slice(rd.take(hlen)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let count = rd.u32()? as usize;
    let mut recs = BTreeMap::new();
    for _ in 0..count {
        let nlen = rd.u32()? as usize;
        let name = std::str::from_utf8(rd.take(nlen)?)
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
            .to_string();
        let rank = rd.u8()? as usize;
        let dims = (0..rank).map(|_| rd.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?;
        if recs.insert(name.clone(), Record { dims, data }).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record {name}")));
        }
    }
    if rd.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after records".into()));
    }

    let mut model = Model::new(header.config.clone())?;
    if header.experts.len() != model.blocks.len() {
        return Err(Error::Checkpoint("block count differs from config".into()));
    }
    let cfg = header.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (b, k) in model.blocks.iter_mut().zip(&header.experts) {
        if let Some(k) = *k {
            let mut gating = GatingParams::new(cfg.d, k, cfg.gate_mode(), cfg.alpha, &mut rng);
            gating.task_rates = cfg.task_rates;
            b.ffn = FeedForward::Moe(MoeLayer {
                gating,
                experts: (0..k).map(|_| Expert::new(cfg.d, cfg.expert_hidden, &mut rng)).collect(),
                record: RoutingRecord::new(k, cfg.d),
            });
        }
    }
    model.stage = header.stage;
    model.step = header.step;
    model.opt_step = header.opt_step;
    for (name, _, p) in model.params_mut() {
        let shape = p.shape();
        p.value = take_matrix(&mut recs, &name, shape)?;
        p.m = take_matrix(&mut recs, &format!("{name}.m"), shape)?;
        p.v = take_matrix(&mut recs, &format!("{name}.v"), shape)?;
    }
    for (i, b) in model.blocks.iter_mut().enumerate() {
        if let FeedForward::Moe(layer) = &mut b.ffn {
            let k = layer.experts.len();
            let p = format!("blocks.{i}.record");
            let r = &mut layer.record;
            r.a = take_matrix(&mut recs, &format!("{p}.a"), r.a.shape())?;
            r.a_e = take_vec(&mut recs, &format!("{p}.a_e"), Some(k))?;
            r.last_active = take_vec(&mut recs, &format!("{p}.last_active"), Some(k))?
                .into_iter()
                .map(|v| (v >= 0.0).then_some(v as u64))
                .collect();
            r.unrouted_mean = take_vec(&mut recs, &format!("{p}.unrouted_mean"), Some(cfg.d))?;
            r.unrouted_count = take_vec(&mut recs, &format!("{p}.unrouted_count"), None)?[0] as u64;
            r.unrouted_frac = take_vec(&mut recs, &format!("{p}.unrouted_frac"), None)?[0];
            r.step = take_vec(&mut recs, &format!("{p}.step"), None)?[0] as u64;
        }
    }
    if let Some(extra) = recs.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected record {extra}")));
    }
    Ok(model)
}
