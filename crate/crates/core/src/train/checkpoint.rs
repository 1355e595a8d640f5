//! Binary checkpoint archive.
//!
//! ```text
//! b"VQUNETCK"  u32 LE format version  u64 LE header length  JSON header
//! f32 LE blobs of every parameter and buffer, in header order
//! u64 LE codebook usage counts
//! f64 LE optimizer first and second moments, in header order
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NetworkConfig, VqUNet};
use crate::nn::{Adam, Moments, Parameters};

pub const MAGIC: &[u8; 8] = b"VQUNETCK";
pub const FORMAT_VERSION: u32 = 1;

/// Pixel mapping applied before the network: `v / scale + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelNormalization {
    pub scale: f64,
    pub offset: f64,
}

impl Default for PixelNormalization {
    fn default() -> Self {
        Self {
            scale: 127.5,
            offset: -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Kind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: Kind,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: Vec<(String, usize)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    network: NetworkConfig,
    epoch: usize,
    step: u64,
    image_size: Option<[usize; 2]>,
    pixels: PixelNormalization,
    tensors: Vec<Entry>,
    usage: usize,
    optimizer: Option<OptimizerHeader>,
    #[serde(default)]
    train_config: Option<serde_json::Value>,
}

/// Everything besides weights stored with a checkpoint.
#[derive(Clone, Debug, Default)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: u64,
    /// `[width, height]` the network was trained at.
    pub image_size: Option<[usize; 2]>,
    pub train_config: Option<serde_json::Value>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: VqUNet<f32>,
    pub meta: CheckpointMeta,
    pub pixels: PixelNormalization,
    pub optimizer: Option<Adam>,
}

fn bad(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes atomically: a temporary sibling is renamed over `path`.
pub fn save_checkpoint(
    path: &Path,
    model: &mut VqUNet<f32>,
    meta: &CheckpointMeta,
    optimizer: Option<&Adam>,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    model.visit_params("", &mut |name, p| {
        tensors.push(Entry {
            name: name.to_string(),
            kind: Kind::Param,
            len: p.len(),
        });
        p.value.iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes()));
    });
    model.visit_buffers("", &mut |name, b| {
        tensors.push(Entry {
            name: name.to_string(),
            kind: Kind::Buffer,
            len: b.len(),
        });
        b.iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes()));
    });
    let usage: Vec<u64> = model
        .codebook
        .as_ref()
        .map(|c| c.usage_counts().to_vec())
        .unwrap_or_default();
    usage.iter().for_each(|u| blob.extend_from_slice(&u.to_le_bytes()));
    let optimizer = optimizer.map(|opt| {
        let moments = opt.state.iter().map(|(k, m)| (k.clone(), m.m.len())).collect();
        for m in opt.state.values() {
            m.m.iter().chain(&m.v).for_each(|v| blob.extend_from_slice(&v.to_le_bytes()));
        }
        OptimizerHeader {
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            step: opt.step,
            moments,
        }
    });
    let header = Header {
        network: model.config().clone(),
        epoch: meta.epoch,
        step: meta.step,
        image_size: meta.image_size,
        pixels: PixelNormalization::default(),
        tensors,
        usage: usage.len(),
        optimizer,
        train_config: meta.train_config.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let tmp = tmp_path(path);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let write = || -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(&blob)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

struct Cursor<'a> {
    path: &'a Path,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| bad(self.path, "truncated file"))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn u64s(&mut self, n: usize) -> Result<Vec<u64>> {
        Ok(self.take(n * 8)?.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut data = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { path, data: &data, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(bad(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(path, format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let hlen = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
    let header: Header =
        serde_json::from_slice(cur.take(hlen)?).map_err(|e| bad(path, format!("header: {e}")))?;
    let mut model = VqUNet::<f32>::new(header.network.clone(), 0).map_err(|e| bad(path, e.to_string()))?;
    let mut params = std::collections::BTreeMap::new();
    let mut buffers = std::collections::BTreeMap::new();
    for e in &header.tensors {
        let v = cur.f32s(e.len)?;
        if !v.iter().all(|x| x.is_finite()) {
            return Err(bad(path, format!("non-finite values in {}", e.name)));
        }
        match e.kind {
            Kind::Param => params.insert(e.name.clone(), v),
            Kind::Buffer => buffers.insert(e.name.clone(), v),
        };
    }
    let mut problem = None;
    model.visit_params("", &mut |name, p| match params.remove(name) {
        Some(v) if v.len() == p.len() => p.value = v,
        Some(v) => problem = Some(format!("{name}: {} values, expected {}", v.len(), p.len())),
        None => problem = Some(format!("missing parameter {name}")),
    });
    model.visit_buffers("", &mut |name, b| match buffers.remove(name) {
        Some(v) if v.len() == b.len() => *b = v,
        Some(v) => problem = Some(format!("{name}: {} values, expected {}", v.len(), b.len())),
        None => problem = Some(format!("missing buffer {name}")),
    });
    if let Some(p) = problem {
        return Err(bad(path, p));
    }
    if let Some(extra) = params.keys().chain(buffers.keys()).next() {
        return Err(bad(path, format!("unexpected tensor {extra}")));
    }
    let usage = cur.u64s(header.usage)?;
    if let Some(cb) = model.codebook.as_mut() {
        cb.set_usage_counts(usage).map_err(|e| bad(path, e.to_string()))?;
    }
    let optimizer = match header.optimizer {
        Some(h) => {
            let mut opt = Adam::new(h.lr);
            (opt.beta1, opt.beta2, opt.eps, opt.step) = (h.beta1, h.beta2, h.eps, h.step);
            for (name, n) in h.moments {
                let m = cur.f64s(n)?;
                let v = cur.f64s(n)?;
                opt.state.insert(name, Moments { m, v });
            }
            Some(opt)
        }
        None => None,
    };
    if cur.pos != data.len() {
        return Err(bad(path, format!("{} trailing bytes", data.len() - cur.pos)));
    }
    Ok(Checkpoint {
        model,
        meta: CheckpointMeta {
            epoch: header.epoch,
            step: header.step,
            image_size: header.image_size,
            train_config: header.train_config,
        },
        pixels: header.pixels,
        optimizer,
    })
}
