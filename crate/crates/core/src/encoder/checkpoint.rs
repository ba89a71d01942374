//! Versioned binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "EBCKPT\0\0" | version u32 | config json (u32 len + bytes)
//! | param count u32 | per param: name (u32 len + bytes), ndim u32,
//! | dims u64 × ndim, values f64 × numel | trailer "END\0"
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::EncoderConfig;
use crate::diffcore::{ParamSet, Tensor};
use crate::error::{contract_err, Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"EBCKPT\0\0";
const TRAILER: &[u8; 4] = b"END\0";
const INIT_STD: f64 = 0.02;

/// Canonical parameter names and shapes for `config`, in storage order.
pub fn param_layout(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let (h, f) = (config.hidden, config.ffn);
    let mut out = vec![
        ("embeddings.token".to_owned(), vec![config.vocab, h]),
        ("embeddings.position".to_owned(), vec![config.max_len, h]),
        ("embeddings.norm.gamma".to_owned(), vec![h]),
        ("embeddings.norm.beta".to_owned(), vec![h]),
    ];
    for l in 0..config.layers {
        let p = |s: &str| format!("layer.{l}.{s}");
        for proj in ["query", "key", "value", "output"] {
            out.push((p(&format!("attn.{proj}.weight")), vec![h, h]));
            out.push((p(&format!("attn.{proj}.bias")), vec![h]));
        }
        out.push((p("attn_norm.gamma"), vec![h]));
        out.push((p("attn_norm.beta"), vec![h]));
        out.push((p("ffn.in.weight"), vec![h, f]));
        out.push((p("ffn.in.bias"), vec![f]));
        out.push((p("ffn.out.weight"), vec![f, h]));
        out.push((p("ffn.out.bias"), vec![h]));
        out.push((p("ffn_norm.gamma"), vec![h]));
        out.push((p("ffn_norm.beta"), vec![h]));
    }
    out
}

/// Encoder weights plus the config that determines their shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub params: ParamSet,
    pub format_version: u32,
}

impl Checkpoint {
    /// Fresh encoder: N(0, 0.02) weights and embeddings, zero biases, unit
    /// layer-norm gains.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in param_layout(config) {
            let t = if name.ends_with(".gamma") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                Tensor::zeros(&shape)
            } else {
                Tensor::randn(&shape, INIT_STD, &mut rng)
            };
            params.insert(name, t)?;
        }
        Ok(Self { config: config.clone(), params, format_version: FORMAT_VERSION })
    }

    /// Builds a checkpoint from `params`, keeping only the encoder entries.
    pub fn from_params(config: &EncoderConfig, params: &ParamSet) -> Result<Self> {
        config.validate()?;
        let mut out = ParamSet::new();
        for (name, shape) in param_layout(config) {
            let p = params.by_name(&name).ok_or_else(|| Error::Load(format!("missing parameter `{name}`")))?;
            if p.tensor.shape() != shape.as_slice() {
                return Err(Error::Load(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    p.tensor.shape()
                )));
            }
            let mut t = p.tensor.clone();
            t.zero_grad();
            out.insert(name, t)?;
        }
        Ok(Self { config: config.clone(), params: out, format_version: FORMAT_VERSION })
    }

    pub fn num_layers(&self) -> usize {
        self.config.layers
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Keeps the embeddings and the first `layers` blocks verbatim.
    pub fn prune(&self, layers: usize) -> Result<Self> {
        if layers == 0 || layers > self.config.layers {
            return Err(contract_err(format!(
                "cannot prune a {}-layer encoder to {layers} layers",
                self.config.layers
            )));
        }
        let config = EncoderConfig { layers, ..self.config.clone() };
        Self::from_params(&config, &self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.tensor.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(TRAILER);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Load("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Load(format!("format version {version} is not supported (expected {FORMAT_VERSION})")));
        }
        let cfg_len = r.u32("config length")? as usize;
        let config: EncoderConfig = serde_json::from_slice(r.take(cfg_len, "config")?)
            .map_err(|e| Error::Load(format!("invalid embedded config: {e}")))?;
        config.validate().map_err(|e| Error::Load(e.to_string()))?;
        let count = r.u32("parameter count")? as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u32("parameter name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "parameter name")?.to_vec())
                .map_err(|_| Error::Load("parameter name is not utf-8".into()))?;
            let ndim = r.u32(&name)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64(&name)? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Load(format!("`{name}` is too large")))?, &name)?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, values).map_err(|e| Error::Load(format!("`{name}`: {e}")))?;
            params.insert(name, t).map_err(|e| Error::Load(e.to_string()))?;
        }
        if r.take(4, "trailer")? != TRAILER || r.pos != bytes.len() {
            return Err(Error::Load("corrupt trailer".into()));
        }
        let expected = param_layout(&config);
        if params.len() != expected.len() {
            if let Some(extra) = params.iter().find(|p| !expected.iter().any(|(n, _)| *n == p.name)) {
                return Err(Error::Load(format!("unexpected parameter `{}`", extra.name)));
            }
        }
        let mut ck = Self::from_params(&config, &params)?;
        ck.format_version = version;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Load(format!("file truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
