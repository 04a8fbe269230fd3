//! Binary checkpoint, little-endian throughout:
//!
//! ```text
//! "FBST" | version: u16 | records: u32
//! per record: name_len: u32 | name (utf-8) | rank: u32 | dims: u32 × rank | f32 × numel
//! config_len: u32 | config (TOML) | config_sha256: [u8; 32] | seed: u64
//! templates: u32
//! per template: label: u32 | rows: u32 | cols: u32 | sample_count: u64 | f64 × rows·cols
//! ```
//!
//! Templates are stored as f64 so they survive the round trip bitwise.

use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::train::Artifacts;
use super::{Branch, Model};
use crate::error::{Error, Result};
use crate::fusion::DecisionTemplate;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FBST";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Metadata {
    pub config_toml: String,
    /// SHA-256 of `config_toml`.
    pub config_hash: [u8; 32],
    pub seed: u64,
    pub templates: Vec<DecisionTemplate>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: Metadata,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array(what)?) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)?;
        String::from_utf8(self.take(len, what)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not valid utf-8")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let m = &self.meta;
        put_u32(&mut out, m.config_toml.len())?;
        out.extend_from_slice(m.config_toml.as_bytes());
        out.extend_from_slice(&m.config_hash);
        out.extend_from_slice(&m.seed.to_le_bytes());
        put_u32(&mut out, m.templates.len())?;
        for t in &m.templates {
            put_u32(&mut out, t.label)?;
            put_u32(&mut out, t.classifiers)?;
            put_u32(&mut out, t.labels)?;
            out.extend_from_slice(&(t.sample_count as u64).to_le_bytes());
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("missing FBST magic".into()));
        }
        let version = u16::from_le_bytes(r.array("version")?);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32("record count")?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let rank = r.u32("rank")?;
            let shape = (0..rank).map(|_| r.u32("dimension")).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes = numel
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            let data = r
                .take(bytes, &name)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        let config_toml = r.string("config")?;
        let config_hash = r.array("config hash")?;
        let seed = r.u64("seed")?;
        let n_templates = r.u32("template count")?;
        let mut templates = Vec::new();
        for _ in 0..n_templates {
            let label = r.u32("template label")?;
            let classifiers = r.u32("template rows")?;
            let labels = r.u32("template cols")?;
            let sample_count = r.u64("template sample count")? as usize;
            let n = classifiers
                .checked_mul(labels)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Checkpoint("template is too large".into()))?;
            let values = r
                .take(n, "template values")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            templates.push(DecisionTemplate {
                label,
                classifiers,
                labels,
                values,
                sample_count,
            });
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            tensors,
            meta: Metadata {
                config_toml,
                config_hash,
                seed,
                templates,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The run config stored in the metadata, checked against its hash.
    pub fn config(&self) -> Result<RunConfig> {
        let cfg = RunConfig::from_toml(&self.meta.config_toml)?;
        if hex::decode(cfg.hash()?).ok().as_deref() != Some(&self.meta.config_hash[..]) {
            return Err(Error::Checkpoint("config hash does not match stored config".into()));
        }
        Ok(cfg)
    }
}

pub fn checkpoint_path(dir: &Path, branch: Branch) -> PathBuf {
    dir.join(format!("{}.fbst", branch.name()))
}

fn metadata(artifacts: &Artifacts) -> Result<Metadata> {
    let cfg = &artifacts.config;
    let hash = hex::decode(cfg.hash()?).expect("hash is hex");
    Ok(Metadata {
        config_toml: cfg.to_toml()?,
        config_hash: hash.try_into().expect("sha256 is 32 bytes"),
        seed: cfg.seed,
        templates: artifacts.templates.clone(),
    })
}

/// Writes one checkpoint per branch into `dir`; returns the paths.
pub fn save_artifacts(artifacts: &Artifacts, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = metadata(artifacts)?;
    let mut paths = Vec::new();
    for (branch, model) in &artifacts.models {
        let ckpt = Checkpoint {
            tensors: model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            meta: meta.clone(),
        };
        let path = checkpoint_path(dir, *branch);
        ckpt.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Loaded models, templates, and the config they were trained with.
pub struct Loaded {
    pub config: RunConfig,
    pub models: Vec<(Branch, Model)>,
    pub templates: Vec<crate::fusion::DecisionTemplate>,
}

/// Rebuilds every branch from the checkpoints in `dir`. All three must
/// carry the same metadata.
pub fn load_artifacts(dir: &Path) -> Result<Loaded> {
    let mut models = Vec::new();
    let mut meta: Option<Metadata> = None;
    let mut config = None;
    for branch in Branch::ALL {
        let ckpt = Checkpoint::load(&checkpoint_path(dir, branch))?;
        match &meta {
            None => {
                config = Some(ckpt.config()?);
                meta = Some(ckpt.meta.clone());
            }
            Some(m) if *m != ckpt.meta => {
                return Err(Error::Checkpoint(format!("{branch} checkpoint metadata differs from the others")));
            }
            Some(_) => {}
        }
        let cfg = config.as_ref().expect("set above");
        let mut model = branch.build(cfg, 0)?;
        let table: std::collections::HashMap<String, Tensor<f32>> = ckpt.tensors.into_iter().collect();
        if table.len() != model.params().len() {
            return Err(Error::Checkpoint(format!(
                "{branch} checkpoint has {} tensors, model has {}",
                table.len(),
                model.params().len()
            )));
        }
        model.params_mut().load_named(|name| table.get(name).cloned())?;
        models.push((branch, model));
    }
    Ok(Loaded {
        config: config.expect("three branches loaded"),
        models,
        templates: meta.expect("three branches loaded").templates,
    })
}
