//! Binary checkpoints.
//!
//! Layout (little-endian): magic `DFSN`, version u32, entry count u32, then
//! per entry: name length u32, UTF-8 name, dtype u8, rank u32, dims u32×rank,
//! raw data. Dtype 0 is f32, 1 is raw bytes.
//!
//! Names without a reserved prefix are trainable parameters, so their total
//! size equals the model's parameter count. Reserved prefixes: `meta/`
//! (config echo, step counter), `stat/` (batch-norm running statistics) and
//! `opt/` (Adam moments and step count).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{ParamStore, Tensor};
use crate::train::Adam;

pub const MAGIC: &[u8; 4] = b"DFSN";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_BYTES: u8 = 1;

const META_CONFIG: &str = "meta/config";
const META_STEP: &str = "meta/step";
const STAT: &str = "stat/";
const OPT_STEP: &str = "opt/t";
const OPT_M: &str = "opt/m/";
const OPT_V: &str = "opt/v/";

#[derive(Clone, Debug, PartialEq)]
enum Payload {
    F32(Vec<f32>),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    dims: Vec<usize>,
    payload: Payload,
}

/// Parameters, buffers, optimiser state, step counter and config echo.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub store: ParamStore<f32>,
    pub adam: Option<Adam<f32>>,
}

impl Checkpoint {
    pub fn new(
        config: ModelConfig,
        step: u64,
        store: ParamStore<f32>,
        adam: Option<Adam<f32>>,
    ) -> Self {
        Checkpoint {
            config,
            step,
            store,
            adam,
        }
    }

    pub fn config_echo(&self) -> String {
        self.config.to_kv().to_text()
    }

    fn entries(&self) -> Vec<Entry> {
        let mut out = vec![
            bytes_entry(META_CONFIG, self.config_echo().into_bytes()),
            bytes_entry(META_STEP, self.step.to_le_bytes().to_vec()),
        ];
        for (name, p) in self.store.iter().filter(|(_, p)| p.trainable) {
            out.push(f32_entry(name.to_string(), &p.tensor));
        }
        for (name, p) in self.store.iter().filter(|(_, p)| !p.trainable) {
            out.push(f32_entry(format!("{}{}", STAT, name), &p.tensor));
        }
        if let Some(adam) = &self.adam {
            out.push(bytes_entry(OPT_STEP, adam.t.to_le_bytes().to_vec()));
            for (name, m) in &adam.m {
                out.push(Entry {
                    name: format!("{}{}", OPT_M, name),
                    dims: vec![m.len()],
                    payload: Payload::F32(m.clone()),
                });
            }
            for (name, v) in &adam.v {
                out.push(Entry {
                    name: format!("{}{}", OPT_V, name),
                    dims: vec![v.len()],
                    payload: Payload::F32(v.clone()),
                });
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self.entries();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for e in &entries {
            buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(e.name.as_bytes());
            buf.push(match e.payload {
                Payload::F32(_) => DTYPE_F32,
                Payload::Bytes(_) => DTYPE_BYTES,
            });
            buf.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &e.payload {
                Payload::F32(v) => v
                    .iter()
                    .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
                Payload::Bytes(b) => buf.extend_from_slice(b),
            }
        }
        buf
    }

    /// Decodes a checkpoint. The network layout is rebuilt from the embedded
    /// config and every stored tensor must match it by name and shape.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint(
                "bad magic (not a DFSN checkpoint)".into(),
            ));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {})",
                version, VERSION
            )));
        }
        let count = r.u32("entry count")? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let e = r.entry()?;
            if entries.insert(e.name.clone(), e).is_some() {
                return Err(Error::Checkpoint("duplicate entry name".into()));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }

        let config = match entries.remove(META_CONFIG) {
            Some(Entry {
                payload: Payload::Bytes(b),
                ..
            }) => {
                let text = String::from_utf8(b)
                    .map_err(|_| Error::Checkpoint("config echo is not UTF-8".into()))?;
                let mut kv = KvConfig::parse(&text)?;
                let cfg = ModelConfig::from_kv(&mut kv)?;
                kv.ensure_consumed()?;
                cfg
            }
            _ => return Err(Error::Checkpoint(format!("missing `{}`", META_CONFIG))),
        };
        let step = take_u64(&mut entries, META_STEP)?
            .ok_or_else(|| Error::Checkpoint(format!("missing `{}`", META_STEP)))?;

        let mut store = ParamStore::new();
        // Initial values are overwritten below; the seed is irrelevant.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        crate::model::Model::build(&config, &mut store, &mut rng)?;
        let names: Vec<(String, bool)> = store
            .iter()
            .map(|(n, p)| (n.to_string(), p.trainable))
            .collect();
        for (name, trainable) in &names {
            let key = if *trainable {
                name.clone()
            } else {
                format!("{}{}", STAT, name)
            };
            let e = entries
                .remove(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", key)))?;
            let t = store.tensor_mut(name)?;
            if e.dims != t.dims() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{}`: file {:?}, model {:?}",
                    key,
                    e.dims,
                    t.dims()
                )));
            }
            match e.payload {
                Payload::F32(v) => t.data_mut().copy_from_slice(&v),
                Payload::Bytes(_) => {
                    return Err(Error::Checkpoint(format!("`{}` has the wrong dtype", key)))
                }
            }
        }

        let adam = match take_u64(&mut entries, OPT_STEP)? {
            None => None,
            Some(t) => {
                let mut adam = Adam::new(Default::default());
                adam.t = t;
                for (name, _) in names.iter().filter(|(_, t)| *t) {
                    let numel = store.tensor(name)?.numel();
                    for (prefix, slot) in [(OPT_M, &mut adam.m), (OPT_V, &mut adam.v)] {
                        let key = format!("{}{}", prefix, name);
                        if let Some(e) = entries.remove(&key) {
                            match e.payload {
                                Payload::F32(v) if v.len() == numel => {
                                    slot.insert(name.clone(), v);
                                }
                                _ => {
                                    return Err(Error::Checkpoint(format!(
                                        "optimiser state `{}` does not match",
                                        key
                                    )))
                                }
                            }
                        }
                    }
                }
                Some(adam)
            }
        };
        if let Some(name) = entries.keys().next() {
            return Err(Error::Checkpoint(format!("unknown tensor `{}`", name)));
        }
        Ok(Checkpoint {
            config,
            step,
            store,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Errors (echoing both configs) unless the checkpoint was produced by a
    /// model with `expected` config.
    pub fn ensure_compatible(&self, expected: &ModelConfig) -> Result<()> {
        if &self.config == expected {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "config mismatch\n--- requested ---\n{}--- checkpoint ---\n{}",
                expected.to_kv().to_text(),
                self.config_echo()
            )))
        }
    }

    /// Trainable scalars stored in the file (entries without a reserved
    /// prefix).
    pub fn parameter_count_in(bytes: &[u8]) -> Result<usize> {
        let mut r = Reader { bytes, pos: 0 };
        r.take(8, "header")?;
        let count = r.u32("entry count")? as usize;
        let mut total = 0;
        for _ in 0..count {
            let e = r.entry()?;
            if !(e.name.starts_with("meta/")
                || e.name.starts_with(STAT)
                || e.name.starts_with("opt/"))
            {
                total += e.dims.iter().product::<usize>();
            }
        }
        Ok(total)
    }
}

fn bytes_entry(name: &str, b: Vec<u8>) -> Entry {
    Entry {
        name: name.to_string(),
        dims: vec![b.len()],
        payload: Payload::Bytes(b),
    }
}

fn f32_entry(name: String, t: &Tensor<f32>) -> Entry {
    Entry {
        name,
        dims: t.dims().to_vec(),
        payload: Payload::F32(t.data().to_vec()),
    }
}

fn take_u64(entries: &mut BTreeMap<String, Entry>, key: &str) -> Result<Option<u64>> {
    match entries.remove(key) {
        None => Ok(None),
        Some(Entry {
            payload: Payload::Bytes(b),
            ..
        }) if b.len() == 8 => Ok(Some(u64::from_le_bytes(b.try_into().expect("8 bytes")))),
        Some(_) => Err(Error::Checkpoint(format!("`{}` must be 8 raw bytes", key))),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {}",
                what
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn entry(&mut self) -> Result<Entry> {
        let len = self.u32("name length")? as usize;
        let name = String::from_utf8(self.take(len, "name")?.to_vec())
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        let dtype = self.take(1, "dtype")?[0];
        let rank = self.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!(
                "`{}` has implausible rank {}",
                name, rank
            )));
        }
        let dims = (0..rank)
            .map(|_| self.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Checkpoint(format!("`{}` dims overflow", name)))?;
        let payload = match dtype {
            DTYPE_F32 => {
                let n = numel
                    .checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint(format!("`{}` dims overflow", name)))?;
                let raw = self.take(n, &format!("data of `{}`", name))?;
                Payload::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                )
            }
            DTYPE_BYTES => {
                Payload::Bytes(self.take(numel, &format!("data of `{}`", name))?.to_vec())
            }
            other => {
                return Err(Error::Checkpoint(format!(
                    "`{}` has unknown dtype {}",
                    name, other
                )))
            }
        };
        Ok(Entry {
            name,
            dims,
            payload,
        })
    }
}
