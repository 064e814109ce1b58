//! Weight container: `FSHD` magic, `u32` format version, `u64` header length,
//! a JSON header, then every tensor as contiguous little-endian `f32`.
//!
//! The header records the model config, the topology (`training` or `fused`)
//! and, per tensor, its name, shape, kind and byte offset into the payload.
//! Loading rebuilds the expected layout from the config and rejects any
//! container whose tensor list differs from it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_model, FastShadeConfig, FastShadeModel, Topology};
use crate::nn::{Module, ParamKind};
use crate::reparam::fuse_model;

pub const MAGIC: &[u8; 4] = b"FSHD";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Trainable,
    Frozen,
    Buffer,
}

impl From<ParamKind> for TensorKind {
    fn from(k: ParamKind) -> Self {
        match k {
            ParamKind::Trainable => Self::Trainable,
            ParamKind::Frozen => Self::Frozen,
            ParamKind::Buffer => Self::Buffer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub kind: TensorKind,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: FastShadeConfig,
    pub topology: Topology,
    pub tensors: Vec<TensorEntry>,
}

fn layout(model: &FastShadeModel) -> Vec<TensorEntry> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    model.visit("", &mut |name, t, kind| {
        entries.push(TensorEntry {
            name: name.to_owned(),
            shape: t.dims(),
            kind: kind.into(),
            offset,
        });
        offset += 4 * t.numel() as u64;
    });
    entries
}

pub fn to_bytes(model: &FastShadeModel) -> Result<Vec<u8>> {
    let topology = model.topology();
    if topology == Topology::BranchesFused {
        return Err(Error::Ordering(
            "containers hold training or fully fused models; fold the I/O scalars first".into(),
        ));
    }
    let header = Header {
        config: model.config.clone(),
        topology,
        tensors: layout(model),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("cannot encode header: {e}")))?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + 4 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    model.visit("", &mut |_, t, _| {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    Ok(out)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<FastShadeModel> {
    if bytes.len() < PREAMBLE {
        return Err(bad(format!(
            "{} bytes is shorter than the {PREAMBLE}-byte preamble",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[PREAMBLE..];
    if hlen > body.len() as u64 {
        return Err(bad(format!(
            "header length {hlen} exceeds the {} bytes that follow",
            body.len()
        )));
    }
    let (hbytes, payload) = body.split_at(hlen as usize);
    let header: Header =
        serde_json::from_slice(hbytes).map_err(|e| bad(format!("malformed header: {e}")))?;
    header.config.validate()?;

    let template = build_model(&header.config, 0)?;
    let mut model = match header.topology {
        Topology::Training => template,
        Topology::Fused => fuse_model(&template)?,
        Topology::BranchesFused => {
            return Err(bad("topology branches_fused is not a storable state"))
        }
    };
    let expected = layout(&model);
    if expected.len() != header.tensors.len() {
        return Err(bad(format!(
            "container lists {} tensors, config implies {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for (want, got) in expected.iter().zip(&header.tensors) {
        if want.name != got.name || want.shape != got.shape {
            return Err(bad(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                got.name, got.shape, want.name, want.shape
            )));
        }
        if want.offset != got.offset {
            return Err(bad(format!(
                "tensor {} at offset {}, expected {}",
                got.name, got.offset, want.offset
            )));
        }
    }
    let need: u64 = expected
        .iter()
        .map(|e| 4 * e.shape.iter().product::<usize>() as u64)
        .sum();
    if payload.len() as u64 != need {
        return Err(bad(format!(
            "payload holds {} bytes, tensors need {need}",
            payload.len()
        )));
    }
    let mut pos = 0usize;
    model.visit_mut("", &mut |_, t, _| {
        for v in t.data_mut() {
            *v = f32::from_le_bytes(payload[pos..pos + 4].try_into().expect("4 bytes"));
            pos += 4;
        }
    });
    Ok(model)
}

/// Write atomically: the file appears complete or not at all.
pub fn save_model(model: &FastShadeModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let tmp = path.with_extension("fshd.partial");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<FastShadeModel> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
