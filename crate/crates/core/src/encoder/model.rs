//! Post-layer-norm encoder forward pass exposing every block's output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{param_layout, Checkpoint};
use super::config::EncoderConfig;
use crate::data::TokenizedSequence;
use crate::diffcore::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::error::{contract_err, Result};

const LN_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
struct BlockIds {
    query: (ParamId, ParamId),
    key: (ParamId, ParamId),
    value: (ParamId, ParamId),
    output: (ParamId, ParamId),
    attn_norm: (ParamId, ParamId),
    ffn_in: (ParamId, ParamId),
    ffn_out: (ParamId, ParamId),
    ffn_norm: (ParamId, ParamId),
}

/// Encoder parameter handles resolved by name inside a (possibly larger)
/// parameter set.
#[derive(Clone, Debug)]
pub struct EncoderLayout {
    config: EncoderConfig,
    token: ParamId,
    position: ParamId,
    norm: (ParamId, ParamId),
    blocks: Vec<BlockIds>,
}

impl EncoderLayout {
    pub fn resolve(config: &EncoderConfig, params: &ParamSet) -> Result<Self> {
        config.validate()?;
        for (name, shape) in param_layout(config) {
            let id = params.require(&name)?;
            if params.get(id).tensor.shape() != shape.as_slice() {
                return Err(contract_err(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    params.get(id).tensor.shape()
                )));
            }
        }
        let id = |n: &str| params.require(n).expect("checked above");
        let pair = |p: &str, w: &str, b: &str| (id(&format!("{p}.{w}")), id(&format!("{p}.{b}")));
        let blocks = (0..config.layers)
            .map(|l| {
                let p = |s: &str| format!("layer.{l}.{s}");
                BlockIds {
                    query: pair(&p("attn.query"), "weight", "bias"),
                    key: pair(&p("attn.key"), "weight", "bias"),
                    value: pair(&p("attn.value"), "weight", "bias"),
                    output: pair(&p("attn.output"), "weight", "bias"),
                    attn_norm: pair(&p("attn_norm"), "gamma", "beta"),
                    ffn_in: pair(&p("ffn.in"), "weight", "bias"),
                    ffn_out: pair(&p("ffn.out"), "weight", "bias"),
                    ffn_norm: pair(&p("ffn_norm"), "gamma", "beta"),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            token: id("embeddings.token"),
            position: id("embeddings.position"),
            norm: pair("embeddings.norm", "gamma", "beta"),
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }
}

/// Graph handles produced by one encoder pass over a batch.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Every block output, `[L, B, S, H]`.
    pub states: Var,
    /// Per-block outputs flattened to `[B·S, H]`.
    pub layers: Vec<Var>,
    pub batch: usize,
}

fn check_batch(config: &EncoderConfig, batch: &[&TokenizedSequence]) -> Result<()> {
    if batch.is_empty() {
        return Err(contract_err("empty batch"));
    }
    for (i, s) in batch.iter().enumerate() {
        if s.ids.len() != config.max_len || s.attention_mask.len() != config.max_len {
            return Err(contract_err(format!(
                "sequence {i} has {} positions, the encoder expects exactly {}",
                s.ids.len(),
                config.max_len
            )));
        }
    }
    Ok(())
}

fn linear(g: &mut Graph, params: &ParamSet, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
    let wv = g.param(params, w);
    let bv = g.param(params, b);
    let y = g.matmul(x, wv)?;
    g.add_bias(y, bv)
}

fn norm(g: &mut Graph, params: &ParamSet, x: Var, (gamma, beta): (ParamId, ParamId)) -> Result<Var> {
    let gv = g.param(params, gamma);
    let bv = g.param(params, beta);
    g.layer_norm(x, gv, bv, LN_EPS)
}

fn maybe_dropout(g: &mut Graph, x: Var, p: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
    match mode {
        Mode::Train => g.dropout(x, p, rng),
        Mode::Eval => Ok(x),
    }
}

/// Token plus position embedding, layer norm and (train mode) dropout for
/// a flattened batch, giving `[B·S, H]`.
pub fn embed_graph(
    g: &mut Graph,
    params: &ParamSet,
    layout: &EncoderLayout,
    batch: &[&TokenizedSequence],
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let cfg = &layout.config;
    check_batch(cfg, batch)?;
    let ids: Vec<usize> = batch.iter().flat_map(|s| s.ids.iter().copied()).collect();
    let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..cfg.max_len).collect();
    let tok_table = g.param(params, layout.token);
    let pos_table = g.param(params, layout.position);
    let tok = g.embedding(tok_table, &ids)?;
    let pos = g.embedding(pos_table, &positions)?;
    let x = g.add(tok, pos)?;
    let x = norm(g, params, x, layout.norm)?;
    maybe_dropout(g, x, cfg.dropout, mode, rng)
}

/// One post-LN block: self-attention and GELU feed-forward, each wrapped in
/// dropout, a residual connection and layer norm.
fn block(
    g: &mut Graph,
    params: &ParamSet,
    ids: &BlockIds,
    cfg: &EncoderConfig,
    x: Var,
    key_mask: &[bool],
    batch: usize,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let q = linear(g, params, x, ids.query)?;
    let k = linear(g, params, x, ids.key)?;
    let v = linear(g, params, x, ids.value)?;
    let a = g.attention(q, k, v, key_mask, batch, cfg.max_len, cfg.heads)?;
    let a = linear(g, params, a, ids.output)?;
    let a = maybe_dropout(g, a, cfg.dropout, mode, rng)?;
    let x = g.add(x, a)?;
    let x = norm(g, params, x, ids.attn_norm)?;
    let f = linear(g, params, x, ids.ffn_in)?;
    let f = g.gelu(f);
    let f = linear(g, params, f, ids.ffn_out)?;
    let f = maybe_dropout(g, f, cfg.dropout, mode, rng)?;
    let y = g.add(x, f)?;
    norm(g, params, y, ids.ffn_norm)
}

/// Runs the encoder over a batch and records every block output.
pub fn encoder_forward(
    g: &mut Graph,
    params: &ParamSet,
    layout: &EncoderLayout,
    batch: &[&TokenizedSequence],
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<EncoderOutput> {
    let cfg = &layout.config;
    let mut x = embed_graph(g, params, layout, batch, mode, rng)?;
    let key_mask: Vec<bool> = batch.iter().flat_map(|s| s.attention_mask.iter().copied()).collect();
    let mut layers = Vec::with_capacity(cfg.layers);
    for ids in &layout.blocks {
        x = block(g, params, ids, cfg, x, &key_mask, batch.len(), mode, rng)?;
        layers.push(x);
    }
    let stacked = g.stack(&layers)?;
    let states = g.reshape(stacked, &[cfg.layers, batch.len(), cfg.max_len, cfg.hidden])?;
    Ok(EncoderOutput { states, layers, batch: batch.len() })
}

/// All block outputs for one sequence, `[L, S, H]`, with its masks.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStates {
    pub states: Tensor,
    pub attention_mask: Vec<bool>,
    pub code_token_mask: Vec<bool>,
}

impl LayerStates {
    pub fn new(states: Tensor, attention_mask: Vec<bool>, code_token_mask: Vec<bool>) -> Result<Self> {
        let shape = states.shape();
        if shape.len() != 3 || attention_mask.len() != shape[1] || code_token_mask.len() != shape[1] {
            return Err(contract_err(format!(
                "layer states {shape:?} with masks of length {}/{}",
                attention_mask.len(),
                code_token_mask.len()
            )));
        }
        Ok(Self { states, attention_mask, code_token_mask })
    }

    pub fn num_layers(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.states.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.states.shape()[2]
    }

    /// Row `s` of block `layer` (1-based layer index).
    pub fn token(&self, layer: usize, s: usize) -> &[f64] {
        let (sl, h) = (self.seq_len(), self.hidden());
        let start = ((layer - 1) * sl + s) * h;
        &self.states.values()[start..start + h]
    }
}

/// Gradient-free encoding of a batch into per-sequence layer states.
/// Train mode draws dropout masks from `seed`.
pub fn encode(ckpt: &Checkpoint, batch: &[TokenizedSequence], mode: Mode, seed: u64) -> Result<Vec<LayerStates>> {
    let layout = EncoderLayout::resolve(&ckpt.config, &ckpt.params)?;
    let refs: Vec<&TokenizedSequence> = batch.iter().collect();
    let mut g = Graph::inference();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = encoder_forward(&mut g, &ckpt.params, &layout, &refs, mode, &mut rng)?;
    let (l, s, h) = (ckpt.config.layers, ckpt.config.max_len, ckpt.config.hidden);
    let all = g.value(out.states);
    batch
        .iter()
        .enumerate()
        .map(|(b, seq)| {
            let mut values = Vec::with_capacity(l * s * h);
            for layer in 0..l {
                let start = (layer * batch.len() + b) * s * h;
                values.extend_from_slice(&all[start..start + s * h]);
            }
            LayerStates::new(
                Tensor::new(vec![l, s, h], values)?,
                seq.attention_mask.clone(),
                seq.code_token_mask.clone(),
            )
        })
        .collect()
}

/// Embedding-layer output `[S, H]` for one id sequence in eval mode.
pub fn embed(ckpt: &Checkpoint, ids: &[usize]) -> Result<Tensor> {
    let layout = EncoderLayout::resolve(&ckpt.config, &ckpt.params)?;
    let seq = TokenizedSequence {
        ids: ids.to_vec(),
        attention_mask: ids.iter().map(|&i| i != crate::data::PAD).collect(),
        code_token_mask: ids.iter().map(|&i| i >= crate::data::BYTE_OFFSET).collect(),
        label: 0,
    };
    let mut g = Graph::inference();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = embed_graph(&mut g, &ckpt.params, &layout, &[&seq], Mode::Eval, &mut rng)?;
    Ok(g.to_tensor(x))
}
