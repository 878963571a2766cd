//! Training checkpoints.
//!
//! A checkpoint holds the canonical run config, the loop counters, every
//! parameter at full precision, both SBN statistics tracks, the optimizer
//! state and the report so far. Minibatch order and augmentation derive from
//! `(seed, epoch)`, so no generator state needs saving.
//!
//! ```text
//! "SLBC" | version u16 | config (u32 length + utf-8)
//! epoch u64 | iteration u64 | last loss (u8 flag + f64)
//! params:  count u32, then id u32 | name | kind u8 | rank u8 | dims u32... | f64 values
//! sbn:     count u32, then name | channels u32 | momentum f64 | eps f64 | 2 x (init u8 | mean | var)
//! slots:   count u32, then id u32 | steps u64 | m (u32 length + f64s) | v (u32 length + f64s)
//! report:  count u32, then epoch u64 | iteration u64 | 5 x f64
//! CRC32 u32 of everything after the version field
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Network, build};
use crate::optim::{Optimizer, Slot};
use crate::param::ParamKind;
use crate::sbn::RunningStats;
use crate::tensor::Tensor;
use crate::train::{ReportRow, TrainReport, Trainer};

pub const MAGIC: [u8; 4] = *b"SLBC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SavedParam {
    pub id: usize,
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SavedSbn {
    pub name: String,
    pub momentum: f64,
    pub eps: f64,
    pub continuous: RunningStats,
    pub discrete: RunningStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub iteration: u64,
    pub last_loss: Option<f64>,
    pub params: Vec<SavedParam>,
    pub sbn: Vec<SavedSbn>,
    pub slots: BTreeMap<usize, Slot>,
    pub report: TrainReport,
}

fn kind_from_tag(tag: u8) -> Result<ParamKind> {
    match tag {
        0 => Ok(ParamKind::Full),
        1 => Ok(ParamKind::Logits),
        2 => Ok(ParamKind::Latent),
        t => Err(Error::Format(format!("unknown parameter kind {t}"))),
    }
}

fn write_stats(w: &mut Writer, s: &RunningStats) {
    w.u8(s.initialized as u8);
    w.f64s(&s.mean);
    w.f64s(&s.var);
}

fn read_stats(r: &mut Reader<'_>, c: usize) -> Result<RunningStats> {
    let initialized = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(Error::Format(format!("bad flag byte {b}"))),
    };
    Ok(RunningStats { initialized, mean: r.f64s(c)?, var: r.f64s(c)? })
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, trainer: &Trainer) -> Self {
        let params = trainer
            .net
            .params()
            .into_iter()
            .map(|p| SavedParam { id: p.id, name: p.name.to_string(), kind: p.kind, value: p.value.clone() })
            .collect();
        let sbn = trainer
            .net
            .sbn_layers()
            .into_iter()
            .map(|s| SavedSbn {
                name: s.name.clone(),
                momentum: s.momentum,
                eps: s.eps,
                continuous: s.continuous.clone(),
                discrete: s.discrete.clone(),
            })
            .collect();
        let mut config = config.clone();
        config.train = trainer.config.clone();
        Checkpoint {
            config,
            epoch: trainer.epoch,
            iteration: trainer.iteration,
            last_loss: trainer.last_loss,
            params,
            sbn,
            slots: trainer.optimizer.slots.clone(),
            report: trainer.report.clone(),
        }
    }

    /// Rebuilds the network from the stored config and loads every saved tensor.
    pub fn network(&self) -> Result<Network> {
        let c = &self.config;
        let mut net = build(c.arch, c.q_w, c.q_a, c.weight_mode, c.train.seed)?;
        {
            let current = net.params();
            if current.len() != self.params.len() {
                return Err(Error::Format(format!(
                    "checkpoint has {} parameters, network has {}",
                    self.params.len(),
                    current.len()
                )));
            }
            for (p, s) in current.iter().zip(&self.params) {
                if p.id != s.id || p.name != s.name || p.kind != s.kind || p.value.shape() != s.value.shape() {
                    return Err(Error::Format(format!(
                        "parameter mismatch: network has {} {:?}, checkpoint has {} {:?}",
                        p.name,
                        p.value.shape(),
                        s.name,
                        s.value.shape()
                    )));
                }
            }
        }
        net.set_param_values(&self.params.iter().map(|p| p.value.clone()).collect::<Vec<_>>())?;
        let mut saved = self.sbn.iter();
        let mut err = None;
        net.for_each_sbn_mut(|layer| {
            match saved.next() {
                Some(s) if s.name == layer.name && s.continuous.mean.len() == layer.channels() => {
                    layer.momentum = s.momentum;
                    layer.eps = s.eps;
                    layer.continuous = s.continuous.clone();
                    layer.discrete = s.discrete.clone();
                }
                _ => {
                    err.get_or_insert_with(|| Error::Format(format!("no matching statistics for {}", layer.name)));
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if saved.next().is_some() {
            return Err(Error::Format("checkpoint has more SBN layers than the network".into()));
        }
        Ok(net)
    }

    /// Resumes training where the checkpoint left off.
    pub fn trainer(&self, train_len: usize) -> Result<Trainer> {
        let mut optimizer = Optimizer::new(self.config.train.optim.clone())?;
        optimizer.slots = self.slots.clone();
        Trainer::restore(
            self.network()?,
            self.config.train.clone(),
            optimizer,
            self.epoch,
            self.iteration,
            self.report.clone(),
            self.last_loss,
            train_len,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.buf.extend_from_slice(&MAGIC);
        w.u16(VERSION);
        let text = self.config.to_text();
        w.len_u32(text.len());
        w.buf.extend_from_slice(text.as_bytes());
        w.u64(self.epoch as u64);
        w.u64(self.iteration);
        w.u8(self.last_loss.is_some() as u8);
        w.f64(self.last_loss.unwrap_or(0.0));
        w.len_u32(self.params.len());
        for p in &self.params {
            w.len_u32(p.id);
            w.str16(&p.name);
            w.u8(p.kind.tag());
            w.u8(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                w.len_u32(d);
            }
            w.f64s(p.value.data());
        }
        w.len_u32(self.sbn.len());
        for s in &self.sbn {
            w.str16(&s.name);
            w.len_u32(s.continuous.mean.len());
            w.f64(s.momentum);
            w.f64(s.eps);
            write_stats(&mut w, &s.continuous);
            write_stats(&mut w, &s.discrete);
        }
        w.len_u32(self.slots.len());
        for (&id, slot) in &self.slots {
            w.len_u32(id);
            w.u64(slot.steps);
            w.len_u32(slot.m.len());
            w.f64s(&slot.m);
            w.len_u32(slot.v.len());
            w.f64s(&slot.v);
        }
        w.len_u32(self.report.rows.len());
        for r in &self.report.rows {
            w.u64(r.epoch as u64);
            w.u64(r.iteration);
            w.f64s(&[r.tau, r.train_loss, r.continuous_acc, r.discrete_acc, r.fraction_frozen]);
        }
        let crc = crc32fast::hash(&w.buf[6..]);
        w.u32(crc);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let body = &bytes[6..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader::new(body, "checkpoint");
        let n = r.usize32()?;
        let text = std::str::from_utf8(r.bytes(n)?).map_err(|_| Error::Format("config is not utf-8".into()))?;
        let config = RunConfig::parse(text)?;
        let epoch = r.usize64()?;
        let iteration = r.u64()?;
        let has_loss = r.u8()? != 0;
        let loss = r.f64()?;
        let last_loss = has_loss.then_some(loss);
        let mut params = Vec::new();
        for _ in 0..r.usize32()? {
            let id = r.usize32()?;
            let name = r.str16()?;
            let kind = kind_from_tag(r.u8()?)?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.usize32()).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let values = r.f64s(len.ok_or_else(|| Error::Format("parameter too large".into()))?)?;
            params.push(SavedParam { id, name, kind, value: Tensor::new(shape, values)? });
        }
        let mut sbn = Vec::new();
        for _ in 0..r.usize32()? {
            let name = r.str16()?;
            let c = r.usize32()?;
            let momentum = r.f64()?;
            let eps = r.f64()?;
            let continuous = read_stats(&mut r, c)?;
            let discrete = read_stats(&mut r, c)?;
            sbn.push(SavedSbn { name, momentum, eps, continuous, discrete });
        }
        let mut slots = BTreeMap::new();
        for _ in 0..r.usize32()? {
            let id = r.usize32()?;
            let steps = r.u64()?;
            let m = r.usize32()?;
            let m = r.f64s(m)?;
            let v = r.usize32()?;
            let v = r.f64s(v)?;
            slots.insert(id, Slot { steps, m, v });
        }
        let mut report = TrainReport::default();
        for _ in 0..r.usize32()? {
            let epoch = r.usize64()?;
            let iteration = r.u64()?;
            let v = r.f64s(5)?;
            report.rows.push(ReportRow {
                epoch,
                iteration,
                tau: v[0],
                train_loss: v[1],
                continuous_acc: v[2],
                discrete_acc: v[3],
                fraction_frozen: v[4],
            });
        }
        r.finish()?;
        Ok(Checkpoint { config, epoch, iteration, last_loss, params, sbn, slots, report })
    }

    /// Writes to a temporary sibling, then renames it over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
