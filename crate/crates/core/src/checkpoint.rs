//! Self-describing model bundle.
//!
//! Layout: the magic line `FBKWS1\n`, a little-endian `u64` header length,
//! a JSON header, then the raw little-endian array data the header indexes.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atomic::write_atomic;
use crate::error::{Error, Result};
use crate::frontend::{BatchNormLayer, DropoutMode, FilterbankLayer, FrontEnd};
use crate::model::{AcousticModel, KwsModel, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"FBKWS1\n";
const VERSION: u32 = 1;

/// Training context stored next to the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arm: String,
    pub seed: u64,
    pub epoch: usize,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum DType {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrontEndHeader {
    learnable: bool,
    dropout_rate: f32,
    dropout_mode: DropoutMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NormHeader {
    name: String,
    eps: f64,
    momentum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: CheckpointMeta,
    config: ModelConfig,
    frontend: FrontEndHeader,
    norms: Vec<NormHeader>,
    arrays: Vec<ArrayEntry>,
    data_len: usize,
    data_checksum: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn corrupt(section: &str, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        section: section.to_string(),
        detail: detail.into(),
    }
}

#[derive(Default)]
struct Writer {
    arrays: Vec<ArrayEntry>,
    data: Vec<u8>,
}

impl Writer {
    fn f32(&mut self, name: &str, t: &Tensor) {
        self.arrays.push(ArrayEntry {
            name: name.to_string(),
            dtype: DType::F32,
            shape: t.shape().to_vec(),
            offset: self.data.len(),
        });
        for v in t.data() {
            self.data.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn f64(&mut self, name: &str, v: &[f64]) {
        self.arrays.push(ArrayEntry {
            name: name.to_string(),
            dtype: DType::F64,
            shape: vec![v.len()],
            offset: self.data.len(),
        });
        for x in v {
            self.data.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn norm(&mut self, name: &str, n: &BatchNormLayer, norms: &mut Vec<NormHeader>) {
        self.f32(&format!("{name}.gamma"), &n.gamma);
        self.f32(&format!("{name}.beta"), &n.beta);
        self.f64(&format!("{name}.running_mean"), &n.running_mean);
        self.f64(&format!("{name}.running_var"), &n.running_var);
        norms.push(NormHeader {
            name: name.to_string(),
            eps: n.eps,
            momentum: n.momentum,
        });
    }
}

fn norm_names(config: &ModelConfig) -> Vec<String> {
    let mut out = vec!["norm_in".to_string()];
    for i in 0..config.blocks() {
        out.push(format!("block{i}.norm_a"));
        out.push(format!("block{i}.norm_b"));
    }
    out
}

pub fn to_bytes(model: &KwsModel, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    let mut norms = Vec::new();
    w.f32("frontend.w", model.frontend.filterbank.weights());
    w.norm("frontend.norm", &model.frontend.norm, &mut norms);
    let ac = &model.acoustic;
    for (name, t) in ac.params() {
        if !name.contains(".gamma") && !name.contains(".beta") {
            w.f32(&name, t);
        }
    }
    for (name, n) in norm_names(&ac.config).iter().zip(ac.norms()) {
        w.norm(name, n, &mut norms);
    }
    let fb = &model.frontend.filterbank;
    let header = Header {
        version: VERSION,
        meta: meta.clone(),
        config: ac.config.clone(),
        frontend: FrontEndHeader {
            learnable: model.frontend.learnable,
            dropout_rate: fb.dropout_rate(),
            dropout_mode: fb.dropout_mode(),
        },
        norms,
        arrays: w.arrays,
        data_len: w.data.len(),
        data_checksum: fnv1a(&w.data),
    };
    let json = serde_json::to_vec(&header).map_err(|e| corrupt("header", e.to_string()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + w.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.data);
    Ok(out)
}

struct Reader<'a> {
    header: &'a Header,
    data: &'a [u8],
}

impl Reader<'_> {
    fn find(&self, name: &str, dtype: DType) -> Result<&ArrayEntry> {
        let a = self
            .header
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| corrupt(&format!("array {name}"), "missing"))?;
        if a.dtype != dtype {
            return Err(corrupt(&format!("array {name}"), format!("dtype {:?}", a.dtype)));
        }
        Ok(a)
    }

    fn bytes(&self, a: &ArrayEntry, width: usize) -> Result<&[u8]> {
        let n: usize = a.shape.iter().product();
        let end = a.offset.checked_add(n * width);
        match end {
            Some(end) if end <= self.data.len() => Ok(&self.data[a.offset..end]),
            _ => Err(corrupt(&format!("array {}", a.name), "extends past the data section")),
        }
    }

    fn f32(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let a = self.find(name, DType::F32)?;
        if a.shape != shape {
            return Err(corrupt(
                &format!("array {name}"),
                format!("shape {:?}, expected {shape:?}", a.shape),
            ));
        }
        let data = self
            .bytes(a, 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape, data)
    }

    fn f64(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        let a = self.find(name, DType::F64)?;
        if a.shape != [len] {
            return Err(corrupt(&format!("array {name}"), format!("shape {:?}", a.shape)));
        }
        Ok(self
            .bytes(a, 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn norm(&self, name: &str, target: &mut BatchNormLayer) -> Result<()> {
        let c = target.channels();
        let h = self
            .header
            .norms
            .iter()
            .find(|n| n.name == name)
            .ok_or_else(|| corrupt(&format!("norm {name}"), "missing"))?;
        target.gamma = self.f32(&format!("{name}.gamma"), &[c])?;
        target.beta = self.f32(&format!("{name}.beta"), &[c])?;
        target.running_mean = self.f64(&format!("{name}.running_mean"), c)?;
        target.running_var = self.f64(&format!("{name}.running_var"), c)?;
        target.eps = h.eps;
        target.momentum = h.momentum;
        Ok(())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(KwsModel, CheckpointMeta)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("magic", "not an FBKWS1 checkpoint"));
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 8 {
        return Err(corrupt("header", "truncated length"));
    }
    let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if hlen > rest.len() {
        return Err(corrupt("header", "truncated"));
    }
    let header: Header =
        serde_json::from_slice(&rest[..hlen]).map_err(|e| corrupt("header", e.to_string()))?;
    if header.version != VERSION {
        return Err(corrupt("header", format!("unsupported version {}", header.version)));
    }
    let data = &rest[hlen..];
    if data.len() != header.data_len {
        return Err(corrupt(
            "data",
            format!("{} bytes, header declares {}", data.len(), header.data_len),
        ));
    }
    if fnv1a(data) != header.data_checksum {
        return Err(corrupt("data", "checksum mismatch"));
    }
    header
        .config
        .validate()
        .map_err(|e| corrupt("config", e.to_string()))?;
    let r = Reader {
        header: &header,
        data,
    };

    let w = r.find("frontend.w", DType::F32)?;
    if w.shape.len() != 2 || w.shape[1] != header.config.filters {
        return Err(corrupt("array frontend.w", format!("shape {:?}", w.shape)));
    }
    let w = r.f32("frontend.w", &w.shape.clone())?;
    let fb = FilterbankLayer::from_weights(w)?
        .with_dropout(header.frontend.dropout_rate, header.frontend.dropout_mode)
        .map_err(|e| corrupt("frontend", e.to_string()))?;
    let mut frontend = FrontEnd::new(fb, header.frontend.learnable);
    r.norm("frontend.norm", &mut frontend.norm)?;

    // weights are overwritten below; the seed only fills the shapes
    let mut acoustic = AcousticModel::build(header.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let names: Vec<(String, Vec<usize>)> = acoustic
        .params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    for ((name, shape), slot) in names.iter().zip(acoustic.params_mut()) {
        if !name.contains(".gamma") && !name.contains(".beta") {
            *slot = r.f32(name, shape)?;
        }
    }
    let norm_list = norm_names(&header.config);
    for (name, n) in norm_list.iter().zip(acoustic.norms_mut()) {
        r.norm(name, n)?;
    }
    Ok((KwsModel::new(frontend, acoustic)?, header.meta))
}

pub fn save(path: &Path, model: &KwsModel, meta: &CheckpointMeta) -> Result<()> {
    write_atomic(path, &to_bytes(model, meta)?)
}

pub fn load(path: &Path) -> Result<(KwsModel, CheckpointMeta)> {
    from_bytes(&std::fs::read(path)?)
}
