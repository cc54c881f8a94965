//! Checkpoint files.
//!
//! A checkpoint is a plain-text manifest terminated by a line `end`, followed
//! by the parameter blocks as little-endian floats in manifest order:
//!
//! ```text
//! xrid-checkpoint
//! version=1
//! dtype=f32
//! architecture=cnn
//! ...
//! param=conv0.weight shape=54x32 offset=0 count=1728
//! ...
//! end
//! <binary parameter blocks>
//! ```
//!
//! `dtype` is `f32` for ordinary training runs and `f64` for verification
//! runs, so reloading a verification model is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use super::graph::ParamStore;
use super::model::{Model, ModelConfig};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::sampling::NormStats;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "xrid-checkpoint";
const END: &[u8] = b"\nend\n";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainMeta {
    /// Epoch (1-based) whose parameters were kept.
    pub epoch: usize,
    pub val_min_accuracy: f64,
    pub seed: u64,
    pub epochs_run: usize,
    /// Class labels in index order.
    pub users: Vec<String>,
    pub window_frames: usize,
    pub rate_hz: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub model: Model<T>,
    pub norm: NormStats,
    pub meta: TrainMeta,
}

fn join<T: ToString>(v: &[T], sep: &str) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(sep)
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.model.config;
        let mut m = String::new();
        m.push_str(MAGIC);
        m.push('\n');
        m.push_str(&format!("version={CHECKPOINT_VERSION}\n"));
        m.push_str(&format!("dtype={}\n", T::DTYPE));
        m.push_str(&format!("architecture={}\n", c.architecture));
        m.push_str(&format!("encoding={}\n", c.encoding));
        m.push_str(&format!("class_count={}\n", c.class_count));
        m.push_str(&format!("input_features={}\n", c.input_features));
        m.push_str(&format!("hidden_size={}\n", c.hidden_size));
        m.push_str(&format!("num_layers={}\n", c.num_layers));
        m.push_str(&format!("kernel_size={}\n", c.kernel_size));
        m.push_str(&format!("channels={}\n", join(&c.channels, ";")));
        m.push_str(&format!("dropout={}\n", c.dropout));
        m.push_str(&format!("learning_rate={}\n", c.learning_rate));
        m.push_str(&format!("layer_norm={}\n", c.layer_norm));
        m.push_str(&format!("norm_mean={}\n", join(&self.norm.mean, ",")));
        m.push_str(&format!("norm_std={}\n", join(&self.norm.std, ",")));
        m.push_str(&format!("meta.epoch={}\n", self.meta.epoch));
        m.push_str(&format!("meta.val_min_accuracy={}\n", self.meta.val_min_accuracy));
        m.push_str(&format!("meta.seed={}\n", self.meta.seed));
        m.push_str(&format!("meta.epochs_run={}\n", self.meta.epochs_run));
        m.push_str(&format!("meta.users={}\n", self.meta.users.join(",")));
        m.push_str(&format!("meta.window_frames={}\n", self.meta.window_frames));
        m.push_str(&format!("meta.rate_hz={}\n", self.meta.rate_hz));
        let mut offset = 0;
        for (name, t) in self.model.params.iter() {
            m.push_str(&format!(
                "param={name} shape={} offset={offset} count={}\n",
                join(&t.shape, "x"),
                t.len()
            ));
            offset += t.len() * T::BYTES;
        }
        m.push_str("end\n");
        let mut out = m.into_bytes();
        out.reserve(offset);
        for (_, t) in self.model.params.iter() {
            for &v in &t.data {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt_err = |m: String| Error::CheckpointFormat(m);
        let end = bytes
            .windows(END.len())
            .position(|w| w == END)
            .ok_or_else(|| fmt_err("manifest terminator not found".into()))?;
        let text = std::str::from_utf8(&bytes[..end]).map_err(|_| fmt_err("manifest is not UTF-8".into()))?;
        let body = &bytes[end + END.len()..];
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(fmt_err("missing checkpoint header".into()));
        }
        let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
        let mut params: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
        for line in lines {
            let (k, v) = line.split_once('=').ok_or_else(|| fmt_err(format!("bad manifest line `{line}`")))?;
            if k == "param" {
                params.push(parse_param_line(v)?);
            } else {
                kv.insert(k, v);
            }
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| fmt_err(format!("missing `{k}`")));
        fn num<V: std::str::FromStr>(k: &str, v: &str) -> Result<V> {
            v.parse().map_err(|_| Error::CheckpointFormat(format!("bad value for `{k}`: `{v}`")))
        }
        let version: u32 = num("version", get("version")?)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion { found: version, supported: CHECKPOINT_VERSION });
        }
        let dtype = get("dtype")?;
        let width = match dtype {
            "f32" => 4,
            "f64" => 8,
            other => return Err(fmt_err(format!("unknown dtype `{other}`"))),
        };
        let channels = match get("channels")? {
            "" => Vec::new(),
            s => s.split(';').map(|c| num("channels", c)).collect::<Result<_>>()?,
        };
        let config = ModelConfig {
            architecture: get("architecture")?.parse()?,
            encoding: get("encoding")?.parse()?,
            class_count: num("class_count", get("class_count")?)?,
            input_features: num("input_features", get("input_features")?)?,
            hidden_size: num("hidden_size", get("hidden_size")?)?,
            num_layers: num("num_layers", get("num_layers")?)?,
            kernel_size: num("kernel_size", get("kernel_size")?)?,
            channels,
            dropout: num("dropout", get("dropout")?)?,
            learning_rate: num("learning_rate", get("learning_rate")?)?,
            layer_norm: num("layer_norm", get("layer_norm")?)?,
        };
        let stats = |k: &str| -> Result<[f64; 18]> {
            let v: Vec<f64> = get(k)?.split(',').map(|x| num(k, x)).collect::<Result<_>>()?;
            v.try_into().map_err(|_| fmt_err(format!("`{k}` must have 18 values")))
        };
        let norm = NormStats { mean: stats("norm_mean")?, std: stats("norm_std")? };
        let meta = TrainMeta {
            epoch: num("meta.epoch", get("meta.epoch")?)?,
            val_min_accuracy: num("meta.val_min_accuracy", get("meta.val_min_accuracy")?)?,
            seed: num("meta.seed", get("meta.seed")?)?,
            epochs_run: num("meta.epochs_run", get("meta.epochs_run")?)?,
            users: match get("meta.users")? {
                "" => Vec::new(),
                s => s.split(',').map(String::from).collect(),
            },
            window_frames: num("meta.window_frames", get("meta.window_frames")?)?,
            rate_hz: num("meta.rate_hz", get("meta.rate_hz")?)?,
        };

        let expected: usize = params.iter().map(|p| p.3 * width).sum();
        if body.len() != expected {
            return Err(fmt_err(format!(
                "parameter blocks hold {} bytes, manifest declares {expected}",
                body.len()
            )));
        }
        let mut store = ParamStore::<T>::default();
        let mut cursor = 0;
        for (name, shape, offset, count) in params {
            if offset != cursor || shape.iter().product::<usize>() != count {
                return Err(fmt_err(format!("inconsistent offset or shape for parameter `{name}`")));
            }
            let block = &body[offset..offset + count * width];
            let data: Vec<T> = block
                .chunks_exact(width)
                .map(|b| if width == 4 { T::from_f64(f32::read_le(b) as f64) } else { T::from_f64(f64::read_le(b)) })
                .collect();
            store
                .push(name, Tensor::new(shape, data))
                .map_err(|e| fmt_err(e.to_string()))?;
            cursor += count * width;
        }
        let model = Model::from_parts(config, store)?;
        Ok(Checkpoint { model, norm, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn cast<U: Real>(&self) -> Checkpoint<U> {
        Checkpoint { model: self.model.cast(), norm: self.norm.clone(), meta: self.meta.clone() }
    }
}

fn parse_param_line(v: &str) -> Result<(String, Vec<usize>, usize, usize)> {
    let err = || Error::CheckpointFormat(format!("bad parameter line `{v}`"));
    let mut parts = v.split(' ');
    let name = parts.next().ok_or_else(err)?.to_string();
    let mut shape = None;
    let mut offset = None;
    let mut count = None;
    for p in parts {
        let (k, val) = p.split_once('=').ok_or_else(err)?;
        match k {
            "shape" => {
                shape = Some(val.split('x').map(|d| d.parse().map_err(|_| err())).collect::<Result<Vec<usize>>>()?)
            }
            "offset" => offset = Some(val.parse().map_err(|_| err())?),
            "count" => count = Some(val.parse().map_err(|_| err())?),
            _ => return Err(err()),
        }
    }
    Ok((name, shape.ok_or_else(err)?, offset.ok_or_else(err)?, count.ok_or_else(err)?))
}

pub fn save_checkpoint<T: Real>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    Checkpoint::load(path)
}

/// The `dtype` a checkpoint file was written with.
pub fn checkpoint_dtype(path: impl AsRef<Path>) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let head = String::from_utf8_lossy(&bytes[..bytes.len().min(256)]).into_owned();
    head.lines()
        .find_map(|l| l.strip_prefix("dtype=").map(str::to_string))
        .ok_or_else(|| Error::CheckpointFormat("missing `dtype`".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::EncodingKind;

    fn sample() -> Checkpoint<f64> {
        let cfg = ModelConfig::cnn(EncodingKind::Bra, 4, 3, vec![5, 6], 0.2, 0.002);
        let mut norm = NormStats::identity();
        norm.mean[3] = 0.1 + 0.2;
        norm.std[7] = 1.0 / 3.0;
        Checkpoint {
            model: Model::new(cfg, 11).unwrap(),
            norm,
            meta: TrainMeta {
                epoch: 31,
                val_min_accuracy: 0.875,
                seed: 11,
                epochs_run: 37,
                users: vec!["a".into(), "b".into()],
                window_frames: 300,
                rate_hz: 15.0,
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::<f64>::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        let x = Tensor::new(vec![2, 9, 18], (0..324).map(|i| (i as f64 * 0.37).sin()).collect());
        let a = c.model.logits(&x).unwrap();
        let b = back.model.logits(&x).unwrap();
        assert!(a.data.iter().zip(&b.data).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn f32_round_trip() {
        let c = sample().cast::<f32>();
        let back = Checkpoint::<f32>::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn truncated_block_is_format_error() {
        let mut bytes = sample().to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes), Err(Error::CheckpointFormat(_))));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let bytes = sample().to_bytes();
        let text = String::from_utf8_lossy(&bytes).replacen("version=1", "version=7", 1);
        let mut patched = text.as_bytes()[..text.find("\nend\n").unwrap() + 5].to_vec();
        let end = bytes.windows(5).position(|w| w == b"\nend\n").unwrap() + 5;
        patched.extend_from_slice(&bytes[end..]);
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&patched),
            Err(Error::UnsupportedVersion { found: 7, .. })
        ));
    }

    #[test]
    fn corrupt_manifest() {
        assert!(matches!(Checkpoint::<f64>::from_bytes(b"garbage"), Err(Error::CheckpointFormat(_))));
    }
}
