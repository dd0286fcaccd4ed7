//! Versioned checkpoint container: named sections, each holding a JSON
//! manifest and named f64 arrays with explicit shapes, little-endian.
//! Round-trips are bitwise exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Standardization;
use crate::gravity::{GravityParams, InputNorm};
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

const MAGIC: &[u8; 4] = b"HURC";
const VERSION: u32 = 1;

pub const MODEL_SECTION: &str = "model";
pub const GRAVITY_SECTION: &str = "gravity";

#[derive(Debug, Clone)]
pub struct Section {
    pub name: String,
    pub manifest: serde_json::Value,
    pub arrays: Vec<(String, Tensor)>,
}

fn bad(message: impl Into<String>) -> Error {
    Error::Checkpoint(message.into())
}

pub fn save(path: &Path, sections: &[Section]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for section in sections {
        write_bytes(&mut buf, section.name.as_bytes());
        let manifest = serde_json::to_vec(&section.manifest)
            .map_err(|e| bad(format!("manifest encode: {e}")))?;
        write_bytes(&mut buf, &manifest);
        buf.extend_from_slice(&(section.arrays.len() as u32).to_le_bytes());
        for (name, tensor) in &section.arrays {
            write_bytes(&mut buf, name.as_bytes());
            buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &dim in tensor.shape() {
                buf.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(&buf).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Vec<Section>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > bytes.len() {
            return Err(bad("truncated checkpoint"));
        }
        let slice = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(slice)
    };
    let take_u32 = |cursor: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(cursor, 4)?.try_into().unwrap()))
    };
    if take(&mut cursor, 4)? != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = take_u32(&mut cursor)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let n_sections = take_u32(&mut cursor)? as usize;
    let mut sections = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let name_len = take_u32(&mut cursor)? as usize;
        let name = String::from_utf8(take(&mut cursor, name_len)?.to_vec())
            .map_err(|_| bad("section name is not utf-8"))?;
        let manifest_len = take_u32(&mut cursor)? as usize;
        let manifest: serde_json::Value = serde_json::from_slice(take(&mut cursor, manifest_len)?)
            .map_err(|e| bad(format!("manifest decode: {e}")))?;
        let n_arrays = take_u32(&mut cursor)? as usize;
        let mut arrays = Vec::with_capacity(n_arrays);
        for _ in 0..n_arrays {
            let len = take_u32(&mut cursor)? as usize;
            let array_name = String::from_utf8(take(&mut cursor, len)?.to_vec())
                .map_err(|_| bad("array name is not utf-8"))?;
            let ndim = take_u32(&mut cursor)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let dim = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap());
                shape.push(dim as usize);
            }
            let count: usize = shape.iter().product();
            let raw = take(&mut cursor, count * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((array_name, Tensor::new(shape, data)));
        }
        sections.push(Section {
            name,
            manifest,
            arrays,
        });
    }
    Ok(sections)
}

fn write_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(bytes);
}

/// Everything needed to rebuild and use the model besides the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelManifest {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub n_city: usize,
    pub feature_dim: usize,
    pub standardization: Standardization,
}

pub fn model_section(params: &ModelParams<Tensor>, manifest: &ModelManifest) -> Result<Section> {
    let mut arrays = Vec::new();
    params.for_each(&mut |name, t| arrays.push((name.to_string(), t.clone())));
    Ok(Section {
        name: MODEL_SECTION.into(),
        manifest: serde_json::to_value(manifest).map_err(|e| bad(e.to_string()))?,
        arrays,
    })
}

pub fn model_from_section(section: &Section) -> Result<(ModelParams<Tensor>, ModelManifest)> {
    let manifest: ModelManifest = serde_json::from_value(section.manifest.clone())
        .map_err(|e| bad(format!("model manifest: {e}")))?;
    let mut params = init_params(
        &manifest.model_config,
        manifest.n_city,
        manifest.feature_dim,
        manifest.train_config.seed,
    )?;
    let lookup: std::collections::HashMap<&str, &Tensor> = section
        .arrays
        .iter()
        .map(|(n, t)| (n.as_str(), t))
        .collect();
    let mut missing = Vec::new();
    let mut order = Vec::new();
    params.for_each(&mut |name, t| match lookup.get(name) {
        Some(stored) if stored.shape() == t.shape() => order.push((*stored).clone()),
        Some(stored) => {
            missing.push(format!(
                "{name}: shape {:?} != stored {:?}",
                t.shape(),
                stored.shape()
            ));
            order.push(t.clone());
        }
        None => {
            missing.push(format!("{name}: missing"));
            order.push(t.clone());
        }
    });
    if !missing.is_empty() {
        return Err(bad(format!(
            "checkpoint arrays do not match model: {}",
            missing.join("; ")
        )));
    }
    let mut iter = order.into_iter();
    params.for_each_mut(&mut |t| *t = iter.next().expect("one stored array per parameter"));
    Ok((params, manifest))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GravityManifest {
    pub train_config: TrainConfig,
    pub tied: bool,
    pub norm: InputNorm,
}

pub fn gravity_section(
    params: &GravityParams<Tensor>,
    manifest: &GravityManifest,
) -> Result<Section> {
    let mut arrays = Vec::new();
    params.for_each(&mut |name, t| arrays.push((name.to_string(), t.clone())));
    Ok(Section {
        name: GRAVITY_SECTION.into(),
        manifest: serde_json::to_value(manifest).map_err(|e| bad(e.to_string()))?,
        arrays,
    })
}

pub fn gravity_from_section(section: &Section) -> Result<(GravityParams<Tensor>, GravityManifest)> {
    use crate::model::LinearPair;
    let manifest: GravityManifest = serde_json::from_value(section.manifest.clone())
        .map_err(|e| bad(format!("gravity manifest: {e}")))?;
    let lookup: std::collections::HashMap<&str, &Tensor> = section
        .arrays
        .iter()
        .map(|(n, t)| (n.as_str(), t))
        .collect();
    let net = |prefix: &str| -> Result<crate::gravity::ScalarNet<Tensor>> {
        let get = |name: String| -> Result<Tensor> {
            lookup
                .get(name.as_str())
                .map(|t| (*t).clone())
                .ok_or_else(|| bad(format!("missing gravity array {name}")))
        };
        Ok(crate::gravity::ScalarNet {
            hidden: LinearPair {
                w: get(format!("{prefix}.hidden.w"))?,
                b: get(format!("{prefix}.hidden.b"))?,
            },
            out: LinearPair {
                w: get(format!("{prefix}.out.w"))?,
                b: get(format!("{prefix}.out.b"))?,
            },
        })
    };
    let params = GravityParams {
        origin_net: net("origin")?,
        dest_net: if manifest.tied {
            None
        } else {
            Some(net("dest")?)
        },
        distance_net: net("distance")?,
        norm: manifest.norm,
    };
    Ok((params, manifest))
}

pub fn find_section<'a>(sections: &'a [Section], name: &str) -> Result<&'a Section> {
    sections
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| bad(format!("checkpoint has no {name:?} section")))
}
