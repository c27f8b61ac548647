//! Checkpoints: a JSON manifest plus a flat binary tensor file.
//!
//! Each tensor record is `u32 name_len | name (UTF-8) | u8 dtype | u32 rank |
//! rank x u32 extents | numel x f32`, all little-endian.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::RunningStats;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::init::{init_model, InitPolicy};
use crate::model::{build_resnet, Model};
use crate::optim::Nag;
use crate::tensor::{DType, Tensor};
use crate::train::RunMetrics;

pub const FORMAT_VERSION: u32 = 1;
const PARAM: &str = "param/";
const BN_MEAN: &str = "bn_mean/";
const BN_VAR: &str = "bn_var/";
const MOMENTUM: &str = "momentum/";

pub fn encode_tensors(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in tensors {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.push(t.dtype().tag());
        out.extend((t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: format!("truncated {what}"),
            });
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
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let start = r.pos as u64;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: start + 4,
                reason: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let tag_at = r.pos as u64;
        let tag = r.take(1, "dtype tag")?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format {
            offset: tag_at,
            reason: format!("unknown dtype tag {tag}"),
        })?;
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("extent").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let payload = r.take(
            numel.checked_mul(4).ok_or_else(|| Error::Format {
                offset: start,
                reason: "tensor extent overflow".into(),
            })?,
            "payload",
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?.with_dtype(dtype)));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub epoch: usize,
    pub config: TrainConfig,
    pub metrics: RunMetrics,
    /// Tensor file name, relative to the manifest.
    pub tensors: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn manifest_name(epoch: usize) -> String {
    format!("checkpoint-{epoch:04}.json")
}

/// Writes the epoch-`epoch` checkpoint into `dir` and refreshes `latest.json`.
/// Returns the manifest path.
pub fn save(
    dir: &Path,
    epoch: usize,
    config: &TrainConfig,
    metrics: &RunMetrics,
    model: &Model,
    optimizer: &Nag,
) -> Result<PathBuf> {
    let mut tensors = Vec::new();
    for id in model.params.ids() {
        let p = model.params.get(id);
        tensors.push((format!("{PARAM}{}", p.name), p.update_target().clone()));
        if let Some(v) = optimizer.buffer(id) {
            tensors.push((format!("{MOMENTUM}{}", p.name), Tensor::from_slice(v)));
        }
    }
    for (layer, s) in &model.bn_stats {
        tensors.push((format!("{BN_MEAN}{layer}"), Tensor::from_slice(&s.mean)));
        tensors.push((format!("{BN_VAR}{layer}"), Tensor::from_slice(&s.var)));
    }
    let bin_name = format!("checkpoint-{epoch:04}.bin");
    let bin = dir.join(&bin_name);
    std::fs::write(&bin, encode_tensors(&tensors)).map_err(|e| Error::io(&bin, e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        epoch,
        config: config.clone(),
        metrics: metrics.clone(),
        tensors: bin_name,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    let path = dir.join(manifest_name(epoch));
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    let latest = dir.join("latest.json");
    std::fs::write(&latest, &text).map_err(|e| Error::io(&latest, e))?;
    Ok(path)
}

pub fn load(manifest_path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    let bin = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&manifest.tensors);
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut tensors = BTreeMap::new();
    for (name, t) in decode_tensors(&bytes)? {
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Config(format!(
                "duplicate tensor {name:?} in {}",
                bin.display()
            )));
        }
    }
    Ok(Checkpoint { manifest, tensors })
}

impl Checkpoint {
    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name:?}")))
    }

    /// Rebuilds the model described by the stored config with the stored
    /// parameters and running statistics, in the stored precision.
    pub fn restore_model(&self) -> Result<Model> {
        let m = &self.manifest.config.model;
        let graph = build_resnet(m.depth, m.variant, m.classes, m.input_size())?;
        let mut model = Model::new(graph)?;
        init_model(&mut model, &InitPolicy::new(0))?;
        model.bn = self.manifest.config.bn;
        model.set_precision(&self.manifest.config.precision);
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = format!("{PARAM}{}", model.params.get(id).name);
            let t = self.tensor(&name)?;
            if t.shape() != model.params.get(id).value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "restore parameter",
                    left: model.params.get(id).value.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            model.params.set_value(id, t.to_f32())?;
        }
        let layers: Vec<String> = model.bn_stats.keys().cloned().collect();
        for layer in layers {
            let mean = self.tensor(&format!("{BN_MEAN}{layer}"))?.data().to_vec();
            let var = self.tensor(&format!("{BN_VAR}{layer}"))?.data().to_vec();
            let s = model.bn_stats.get_mut(&layer).expect("layer listed");
            if mean.len() != s.channels() || var.len() != s.channels() {
                return Err(Error::ChannelMismatch {
                    op: "restore running stats",
                    expected: s.channels(),
                    actual: mean.len(),
                });
            }
            *s = RunningStats { mean, var };
        }
        Ok(model)
    }

    /// Momentum buffers keyed to the parameters of `model`.
    pub fn restore_optimizer(&self, model: &Model) -> Result<Nag> {
        let mut nag = Nag::new(self.manifest.config.optim.momentum);
        for id in model.params.ids() {
            if let Some(t) = self
                .tensors
                .get(&format!("{MOMENTUM}{}", model.params.get(id).name))
            {
                nag.set_buffer(id, t.data().to_vec());
            }
        }
        Ok(nag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_file_round_trip() {
        let ts = vec![
            (
                "a".to_string(),
                Tensor::new(vec![2, 3], (0..6).map(|v| v as f32 * 0.5).collect()).unwrap(),
            ),
            ("b/c".to_string(), Tensor::scalar(-1.25).to_f16()),
        ];
        let bytes = encode_tensors(&ts);
        // header of the first record
        assert_eq!(&bytes[..4], &1u32.to_le_bytes());
        assert_eq!(bytes[4], b'a');
        assert_eq!(bytes[5], 0);
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        let back = decode_tensors(&bytes).unwrap();
        assert_eq!(back, ts);
        assert_eq!(back[1].1.dtype(), DType::F16);
    }

    #[test]
    fn truncated_tensor_file_rejected() {
        let ts = vec![("w".to_string(), Tensor::from_slice(&[1.0, 2.0]))];
        let bytes = encode_tensors(&ts);
        assert!(matches!(
            decode_tensors(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[5] = 7;
        assert!(matches!(
            decode_tensors(&bad),
            Err(Error::Format { offset: 5, .. })
        ));
    }
}
