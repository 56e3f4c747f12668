//! Checkpoint file format.
//!
//! Layout: magic "MKPT", u32 LE version, u32 LE header length, JSON header
//! (architecture tag, taxonomy, optional fusion config), u32 LE tensor
//! count, then per tensor: u32 LE name length, UTF-8 name, TSR block.
//! Reload is byte-exact: save(load(x)) == x.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::ClassTaxonomy;
use crate::error::{Error, Result};
use crate::models::{MfcConfig, MfcModel, MiniSeg};
use crate::tensor::optim::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MKPT";
const VERSION: u32 = 1;

pub const ARCH_SFC: &str = "sfc-miniseg";
pub const ARCH_MFC: &str = "mfc-fusion";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: String,
    pub taxonomy: ClassTaxonomy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mfc: Option<MfcConfig>,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    header: &CheckpointHeader,
    tensors: &[(&str, &Tensor)],
) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let header_json = serde_json::to_vec(header).expect("header serializes");
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        t.write_tsr_to(&mut out).expect("vec write cannot fail");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(f);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::parse(path, format!("bad magic {magic:?}, expected \"MKPT\"")));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::parse(path, format!("unsupported checkpoint version {version}")));
    }
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    let hlen = u32::from_le_bytes(u32buf) as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf).map_err(|_| Error::parse(path, "truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&hbuf).map_err(|e| Error::parse(path, e.to_string()))?;
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u32buf).map_err(|_| Error::parse(path, "truncated tensor table"))?;
        let nlen = u32::from_le_bytes(u32buf) as usize;
        let mut nbuf = vec![0u8; nlen];
        r.read_exact(&mut nbuf).map_err(|_| Error::parse(path, "truncated tensor name"))?;
        let name = String::from_utf8(nbuf)
            .map_err(|_| Error::parse(path, "tensor name is not UTF-8"))?;
        let t = match Tensor::read_tsr_from(&mut r) {
            Ok(Ok(t)) => t,
            Ok(Err(msg)) => return Err(Error::parse(path, format!("tensor {name}: {msg}"))),
            Err(e) => return Err(Error::io(path, e)),
        };
        tensors.push((name, t));
    }
    Ok((header, tensors))
}

fn param_refs(params: &ParamSet) -> Vec<(&str, &Tensor)> {
    params.iter().collect()
}

fn params_from_tensors(expected: &ParamSet, tensors: &[(String, Tensor)]) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for (name, proto) in expected.iter() {
        let found = tensors
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Validation(format!("checkpoint missing tensor {name}")))?;
        if found.1.shape() != proto.shape() {
            return Err(Error::Validation(format!(
                "checkpoint tensor {name} has shape {:?}, expected {:?}",
                found.1.shape(),
                proto.shape()
            )));
        }
        out.add(name, found.1.clone());
    }
    Ok(out)
}

pub fn save_sfc(path: impl AsRef<Path>, model: &MiniSeg, taxonomy: &ClassTaxonomy) -> Result<()> {
    let header = CheckpointHeader {
        arch: ARCH_SFC.to_string(),
        taxonomy: taxonomy.clone(),
        mfc: None,
    };
    save_checkpoint(path, &header, &param_refs(&model.params))
}

pub fn save_mfc(path: impl AsRef<Path>, model: &MfcModel, taxonomy: &ClassTaxonomy) -> Result<()> {
    let header = CheckpointHeader {
        arch: ARCH_MFC.to_string(),
        taxonomy: taxonomy.clone(),
        mfc: Some(model.cfg),
    };
    let mut tensors = param_refs(&model.sfc.params);
    tensors.extend(param_refs(&model.net.params));
    save_checkpoint(path, &header, &tensors)
}

/// A checkpoint restored to a runnable model.
pub enum LoadedModel {
    Sfc { model: MiniSeg, taxonomy: ClassTaxonomy },
    Mfc { model: MfcModel, taxonomy: ClassTaxonomy },
}

impl LoadedModel {
    pub fn taxonomy(&self) -> &ClassTaxonomy {
        match self {
            LoadedModel::Sfc { taxonomy, .. } => taxonomy,
            LoadedModel::Mfc { taxonomy, .. } => taxonomy,
        }
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LoadedModel> {
    let path = path.as_ref();
    let (header, tensors) = load_checkpoint(path)?;
    let c = header.taxonomy.num_classes();
    match header.arch.as_str() {
        ARCH_SFC => {
            let proto = MiniSeg::new(c, 0)?;
            let params = params_from_tensors(&proto.params, &tensors)?;
            Ok(LoadedModel::Sfc {
                model: MiniSeg { params, num_classes: c },
                taxonomy: header.taxonomy,
            })
        }
        ARCH_MFC => {
            let cfg = header
                .mfc
                .ok_or_else(|| Error::parse(path, "fusion checkpoint lacks its config"))?;
            if cfg.num_classes != c {
                return Err(Error::parse(
                    path,
                    format!("fusion config says {} classes, taxonomy {c}", cfg.num_classes),
                ));
            }
            let sfc_proto = MiniSeg::new(c, 0)?;
            let net_proto = crate::models::MfcNet::new(&cfg, 0)?;
            let sfc_params = params_from_tensors(&sfc_proto.params, &tensors)?;
            let net_params = params_from_tensors(&net_proto.params, &tensors)?;
            let model = MfcModel {
                sfc: MiniSeg { params: sfc_params, num_classes: c },
                net: crate::models::MfcNet {
                    params: net_params,
                    in_channels: cfg.in_channels(),
                    num_classes: c,
                },
                cfg,
            };
            Ok(LoadedModel::Mfc { model, taxonomy: header.taxonomy })
        }
        other => Err(Error::parse(path, format!("unknown architecture tag {other:?}"))),
    }
}
