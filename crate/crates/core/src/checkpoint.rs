//! Single-file tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "ROBIACKP"
//! version   u32
//! meta_len  u64, then meta_len bytes of JSON metadata
//! count     u32, then `count` tensors:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, ndim × u64 dims
//!   data     product(dims) × f32, row-major
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{WarmStart, WarmupReport};
use crate::model::{ModelConfig, StereoNet};
use crate::moe::MoeConfig;
use crate::teacher::TeacherMode;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ROBIACKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn write_container(w: &mut impl Write, c: &Container) -> Result<()> {
    let meta = serde_json::to_vec(&c.metadata).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(&meta)?;
    w.write_all(&(c.tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &c.tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.numel());
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Guards allocations against corrupt length fields.
const MAX_ELEMENTS: u64 = 1 << 32;

pub fn read_container(r: &mut impl Read) -> Result<Container> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(
            "not a checkpoint file (bad magic)".into(),
        ));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = read_u64(r)?;
    if meta_len > MAX_ELEMENTS {
        return Err(Error::Checkpoint("metadata length is implausible".into()));
    }
    let mut meta = vec![0u8; meta_len as usize];
    r.read_exact(&mut meta)?;
    let metadata = serde_json::from_slice(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count = read_u32(r)?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut n = 1u64;
        for _ in 0..ndim {
            let d = read_u64(r)?;
            n = n.saturating_mul(d);
            shape.push(d as usize);
        }
        if n > MAX_ELEMENTS {
            return Err(Error::Checkpoint(format!(
                "tensor {name} is implausibly large"
            )));
        }
        let mut bytes = vec![0u8; 4 * n as usize];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.insert(name, Tensor::from_vec(&shape, data)?);
    }
    Ok(Container { metadata, tensors })
}

pub fn save_container(path: &Path, c: &Container) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_container(&mut w, c)?;
    w.flush()?;
    Ok(())
}

pub fn load_container(path: &Path) -> Result<Container> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_container(&mut r)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelMeta {
    model: ModelConfig,
    moe: Option<MoeConfig>,
}

fn model_meta(net: &StereoNet) -> ModelMeta {
    ModelMeta {
        model: net.config.clone(),
        moe: net.moe_config().cloned(),
    }
}

fn add_model_tensors(tensors: &mut BTreeMap<String, Tensor>, prefix: &str, net: &StereoNet) {
    for (name, p) in net.params() {
        tensors.insert(format!("{prefix}param/{name}"), p.value.clone());
    }
    for (name, b) in net.buffers() {
        tensors.insert(format!("{prefix}buffer/{name}"), b.clone());
    }
}

fn take_model(
    tensors: &BTreeMap<String, Tensor>,
    prefix: &str,
    meta: ModelMeta,
) -> Result<StereoNet> {
    let pick = |kind: &str| -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}{kind}/");
        tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|n| (n.to_string(), v.clone())))
            .collect()
    };
    StereoNet::from_parts(meta.model, meta.moe, pick("param"), pick("buffer"))
}

fn meta_field<T: serde::de::DeserializeOwned>(meta: &serde_json::Value, key: &str) -> Result<T> {
    let v = meta
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("metadata has no `{key}`")))?;
    serde_json::from_value(v.clone())
        .map_err(|e| Error::Checkpoint(format!("metadata `{key}`: {e}")))
}

fn expect_kind(meta: &serde_json::Value, kind: &str) -> Result<()> {
    let found: String = meta_field(meta, "kind")?;
    if found != kind {
        return Err(Error::Checkpoint(format!(
            "expected a {kind} checkpoint, found {found}"
        )));
    }
    Ok(())
}

pub fn save_model(net: &StereoNet, teacher_mode: Option<TeacherMode>, path: &Path) -> Result<()> {
    let mut tensors = BTreeMap::new();
    add_model_tensors(&mut tensors, "", net);
    let metadata = serde_json::json!({
        "kind": "model",
        "net": model_meta(net),
        "teacher_mode": teacher_mode,
    });
    save_container(path, &Container { metadata, tensors })
}

pub fn load_model(path: &Path) -> Result<(StereoNet, Option<TeacherMode>)> {
    let c = load_container(path)?;
    expect_kind(&c.metadata, "model")?;
    let net = take_model(&c.tensors, "", meta_field(&c.metadata, "net")?)?;
    let mode = meta_field(&c.metadata, "teacher_mode")?;
    Ok((net, mode))
}

pub fn save_warm_start(ws: &WarmStart, path: &Path) -> Result<()> {
    let mut tensors = BTreeMap::new();
    add_model_tensors(&mut tensors, "student/", &ws.student);
    add_model_tensors(&mut tensors, "source/", &ws.source);
    let metadata = serde_json::json!({
        "kind": "warm_start",
        "student": model_meta(&ws.student),
        "source": model_meta(&ws.source),
        "report": ws.report,
    });
    save_container(path, &Container { metadata, tensors })
}

pub fn load_warm_start(path: &Path) -> Result<WarmStart> {
    let c = load_container(path)?;
    expect_kind(&c.metadata, "warm_start")?;
    let student = take_model(&c.tensors, "student/", meta_field(&c.metadata, "student")?)?;
    let source = take_model(&c.tensors, "source/", meta_field(&c.metadata, "source")?)?;
    let report: WarmupReport = meta_field(&c.metadata, "report")?;
    Ok(WarmStart {
        source,
        student,
        report,
    })
}

/// Stores `[H, W]` maps (disparity, confidence, masks as 0/1) by name.
pub fn save_maps(path: &Path, maps: &[(&str, &Tensor)], metadata: serde_json::Value) -> Result<()> {
    let tensors = maps
        .iter()
        .map(|(n, t)| (n.to_string(), (*t).clone()))
        .collect();
    let mut meta = serde_json::json!({ "kind": "maps" });
    if let (Some(m), serde_json::Value::Object(extra)) = (meta.as_object_mut(), metadata) {
        m.extend(extra);
    }
    save_container(
        path,
        &Container {
            metadata: meta,
            tensors,
        },
    )
}
