use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::head::{head_logits, ClassifierHead};
use crate::combiner::{combine_graph, CombinationSpec, CombinerParams, CombinerVars, Strategy};
use crate::data::TokenizedSequence;
use crate::diffcore::{Graph, ParamId, ParamSet, Var};
use crate::encoder::{encoder_forward, Checkpoint, EncoderConfig, EncoderLayout, Mode};
use crate::error::{contract_err, Result};

pub const TOKEN_WEIGHTS: &str = "combiner.token_weights";
pub const LAYER_WEIGHTS: &str = "combiner.layer_weights";
pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// Batch size for gradient-free passes.
const EVAL_BATCH: usize = 64;

/// Checks that `spec` can run on an encoder with `layers` blocks. For
/// (xii) the encoder must already be pruned to `l` blocks.
pub fn check_spec(spec: &CombinationSpec, layers: usize) -> Result<()> {
    if spec.strategy == Strategy::Xii {
        if spec.layer != Some(layers) {
            return Err(contract_err(format!(
                "{spec} needs a checkpoint pruned to {} layers, got {layers}",
                spec.layer.unwrap_or(0)
            )));
        }
        return Ok(());
    }
    spec.validate(layers)
}

/// Encoder, combiner weights and classification head in one parameter set.
#[derive(Clone, Debug)]
pub struct Classifier {
    spec: CombinationSpec,
    num_classes: usize,
    p_drop: f64,
    params: ParamSet,
    layout: EncoderLayout,
    token_w: Option<ParamId>,
    layer_w: Option<ParamId>,
    head_w: ParamId,
    head_b: ParamId,
}

impl Classifier {
    /// Starts from the checkpoint's encoder; combiner weights start uniform
    /// and the head is drawn from `seed`.
    pub fn new(ckpt: &Checkpoint, spec: &CombinationSpec, num_classes: usize, p_drop: f64, seed: u64) -> Result<Self> {
        check_spec(spec, ckpt.num_layers())?;
        if num_classes < 2 {
            return Err(contract_err(format!("a classifier needs at least 2 classes, got {num_classes}")));
        }
        let config = EncoderConfig { dropout: p_drop, ..ckpt.config.clone() };
        let mut params = ckpt.params.clone();
        let init = CombinerParams::init(spec, config.max_len, config.layers);
        let token_w = init.token_weights.map(|t| params.insert(TOKEN_WEIGHTS, t)).transpose()?;
        let layer_w = init.layer_weights.map(|t| params.insert(LAYER_WEIGHTS, t)).transpose()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(10);
        let head = ClassifierHead::init(config.hidden, num_classes, p_drop, &mut rng)?;
        let head_w = params.insert(HEAD_WEIGHT, head.weight)?;
        let head_b = params.insert(HEAD_BIAS, head.bias)?;
        let layout = EncoderLayout::resolve(&config, &params)?;
        Ok(Self { spec: *spec, num_classes, p_drop, params, layout, token_w, layer_w, head_w, head_b })
    }

    pub fn spec(&self) -> &CombinationSpec {
        &self.spec
    }

    pub fn config(&self) -> &EncoderConfig {
        self.layout.config()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn combiner_params(&self) -> CombinerParams {
        CombinerParams {
            token_weights: self.token_w.map(|id| self.params.get(id).tensor.clone()),
            layer_weights: self.layer_w.map(|id| self.params.get(id).tensor.clone()),
        }
    }

    pub fn head(&self) -> ClassifierHead {
        ClassifierHead {
            p_drop: self.p_drop,
            weight: self.params.get(self.head_w).tensor.clone(),
            bias: self.params.get(self.head_b).tensor.clone(),
        }
    }

    /// The (possibly fine-tuned) encoder weights as a checkpoint.
    pub fn encoder_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_params(self.config(), &self.params)
    }

    /// Logits `[B, C]` for a batch.
    pub fn logits(&self, g: &mut Graph, batch: &[&TokenizedSequence], mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
        let out = encoder_forward(g, &self.params, &self.layout, batch, mode, rng)?;
        let vars = CombinerVars {
            token_weights: self.token_w.map(|id| g.param(&self.params, id)),
            layer_weights: self.layer_w.map(|id| g.param(&self.params, id)),
        };
        let mut reps = Vec::with_capacity(batch.len());
        for (b, seq) in batch.iter().enumerate() {
            let states = g.select(out.states, 1, b)?;
            reps.push(combine_graph(g, states, &seq.code_token_mask, &self.spec, vars)?);
        }
        let r = g.stack(&reps)?;
        let w = g.param(&self.params, self.head_w);
        let bias = g.param(&self.params, self.head_b);
        head_logits(g, r, w, bias, self.p_drop, mode, rng)
    }

    /// Eval-mode argmax predictions (lowest class index on ties).
    pub fn predict(&self, seqs: &[TokenizedSequence]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(seqs.len());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for chunk in seqs.chunks(EVAL_BATCH) {
            let refs: Vec<&TokenizedSequence> = chunk.iter().collect();
            let mut g = Graph::inference();
            let logits = self.logits(&mut g, &refs, Mode::Eval, &mut rng)?;
            for row in g.value(logits).chunks(self.num_classes) {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }
}
