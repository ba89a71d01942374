//! Reductions of an `L×S×H` layer-state tensor to one `H`-vector.
//!
//! | strategy | representation |
//! |---|---|
//! | i    | CLS of the last layer |
//! | ii   | CLS of layer `l` |
//! | iii  | max over layers of the CLS vectors |
//! | iv   | weighted layer sum of the CLS vectors |
//! | v    | token max within layer `l` |
//! | vi   | layer max, then token max |
//! | vii  | layer max, then weighted token sum |
//! | viii | token max per layer, then weighted layer sum |
//! | ix   | weighted token sum within layer `l` |
//! | x    | weighted token sum per layer (shared weights), then weighted layer sum |
//! | xi   | weighted layer sum per token (shared weights), then weighted token sum |
//! | xii  | CLS of the last layer of an `l`-layer (pruned) model |
//!
//! Strategies v–xi take a token scope: every position (CLS, code, EOS and
//! PAD) or code positions only. Excluded positions are skipped by max
//! pooling and contribute zero to weighted sums, without renormalizing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::diffcore::{Graph, Tensor, Var};
use crate::encoder::LayerStates;
use crate::error::{contract_err, Error, Result};

/// CLS sits at token position 0.
pub const CLS_POSITION: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    I,
    Ii,
    Iii,
    Iv,
    V,
    Vi,
    Vii,
    Viii,
    Ix,
    X,
    Xi,
    Xii,
}

impl Strategy {
    pub const ALL: [Strategy; 12] = [
        Strategy::I,
        Strategy::Ii,
        Strategy::Iii,
        Strategy::Iv,
        Strategy::V,
        Strategy::Vi,
        Strategy::Vii,
        Strategy::Viii,
        Strategy::Ix,
        Strategy::X,
        Strategy::Xi,
        Strategy::Xii,
    ];

    pub fn roman(self) -> &'static str {
        match self {
            Strategy::I => "i",
            Strategy::Ii => "ii",
            Strategy::Iii => "iii",
            Strategy::Iv => "iv",
            Strategy::V => "v",
            Strategy::Vi => "vi",
            Strategy::Vii => "vii",
            Strategy::Viii => "viii",
            Strategy::Ix => "ix",
            Strategy::X => "x",
            Strategy::Xi => "xi",
            Strategy::Xii => "xii",
        }
    }

    /// Short label for report rows.
    pub fn description(self) -> &'static str {
        match self {
            Strategy::I => "CLS, last layer",
            Strategy::Ii => "CLS, layer l",
            Strategy::Iii => "max of CLS over layers",
            Strategy::Iv => "weighted sum of CLS over layers",
            Strategy::V => "token max, layer l",
            Strategy::Vi => "layer max, token max",
            Strategy::Vii => "layer max, weighted token sum",
            Strategy::Viii => "token max, weighted layer sum",
            Strategy::Ix => "weighted token sum, layer l",
            Strategy::X => "weighted token sum, weighted layer sum",
            Strategy::Xi => "weighted layer sum, weighted token sum",
            Strategy::Xii => "CLS, last layer of l-layer model",
        }
    }

    pub fn takes_layer(self) -> bool {
        matches!(self, Strategy::Ii | Strategy::V | Strategy::Ix | Strategy::Xii)
    }

    pub fn uses_scope(self) -> bool {
        matches!(
            self,
            Strategy::V | Strategy::Vi | Strategy::Vii | Strategy::Viii | Strategy::Ix | Strategy::X | Strategy::Xi
        )
    }

    pub fn uses_token_weights(self) -> bool {
        matches!(self, Strategy::Vii | Strategy::Ix | Strategy::X | Strategy::Xi)
    }

    pub fn uses_layer_weights(self) -> bool {
        matches!(self, Strategy::Iv | Strategy::Viii | Strategy::X | Strategy::Xi)
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.roman() == s)
            .ok_or_else(|| Error::Config(format!("unknown combination strategy `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    All,
    Code,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::All => "all",
            Scope::Code => "code",
        }
    }
}

/// One strategy with its layer index (1-based) and token scope.
///
/// Text form: `<strategy>[:layer=<l>][:scope=<all|code>]`, e.g. `ii:layer=3`
/// or `v:layer=12:scope=code`. Strategies without a scope always carry
/// [`Scope::All`] and print none.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CombinationSpec {
    pub strategy: Strategy,
    pub layer: Option<usize>,
    pub scope: Scope,
}

impl CombinationSpec {
    pub fn new(strategy: Strategy, layer: Option<usize>, scope: Scope) -> Result<Self> {
        if strategy.takes_layer() != layer.is_some() {
            return Err(Error::Config(format!(
                "strategy {} {} a layer index",
                strategy.roman(),
                if strategy.takes_layer() { "requires" } else { "does not take" }
            )));
        }
        if layer == Some(0) {
            return Err(Error::Config("layer indices start at 1".into()));
        }
        if !strategy.uses_scope() && scope != Scope::All {
            return Err(Error::Config(format!("strategy {} does not take a token scope", strategy.roman())));
        }
        Ok(Self { strategy, layer, scope })
    }

    pub fn baseline() -> Self {
        Self { strategy: Strategy::I, layer: None, scope: Scope::All }
    }

    pub fn is_baseline(&self) -> bool {
        self.strategy == Strategy::I
    }

    /// Checks the layer index against a full model of `layers` blocks.
    pub fn validate(&self, layers: usize) -> Result<()> {
        let max = match self.strategy {
            Strategy::Ii | Strategy::Xii => layers.saturating_sub(1),
            Strategy::V | Strategy::Ix => layers,
            _ => return Ok(()),
        };
        match self.layer {
            Some(l) if (1..=max).contains(&l) => Ok(()),
            l => Err(contract_err(format!("{self}: layer {l:?} is outside 1..={max} for a {layers}-layer model"))),
        }
    }

    /// Learnable weights this spec adds: `S` for token sums (shared across
    /// layers), `L` for layer sums.
    pub fn added_param_count(&self, seq_len: usize, layers: usize) -> usize {
        let t = if self.strategy.uses_token_weights() { seq_len } else { 0 };
        let l = if self.strategy.uses_layer_weights() { layers } else { 0 };
        t + l
    }
}

impl fmt::Display for CombinationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.strategy.roman())?;
        if let Some(l) = self.layer {
            write!(f, ":layer={l}")?;
        }
        if self.strategy.uses_scope() {
            write!(f, ":scope={}", self.scope.name())?;
        }
        Ok(())
    }
}

impl FromStr for CombinationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let strategy: Strategy = parts.next().unwrap_or_default().parse()?;
        let (mut layer, mut scope) = (None, None);
        for part in parts {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("`{s}`: expected key=value, got `{part}`")))?;
            match key {
                "layer" if layer.is_none() => {
                    layer =
                        Some(value.parse::<usize>().map_err(|_| Error::Config(format!("`{s}`: bad layer `{value}`")))?)
                }
                "scope" if scope.is_none() => {
                    scope = Some(match value {
                        "all" => Scope::All,
                        "code" => Scope::Code,
                        _ => return Err(Error::Config(format!("`{s}`: scope must be all or code"))),
                    })
                }
                _ => return Err(Error::Config(format!("`{s}`: unexpected or repeated field `{key}`"))),
            }
        }
        if scope.is_some() && !strategy.uses_scope() {
            return Err(Error::Config(format!("`{s}`: strategy {} does not take a scope", strategy.roman())));
        }
        Self::new(strategy, layer, scope.unwrap_or(Scope::All))
    }
}

impl Serialize for CombinationSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CombinationSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Learnable token and layer weights for one spec. Each vector is present
/// only when the spec sums over that axis and starts uniform at `1/n`.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinerParams {
    pub token_weights: Option<Tensor>,
    pub layer_weights: Option<Tensor>,
}

impl CombinerParams {
    pub fn init(spec: &CombinationSpec, seq_len: usize, layers: usize) -> Self {
        let uniform = |n: usize| Tensor::full(&[n], 1.0 / n as f64);
        Self {
            token_weights: spec.strategy.uses_token_weights().then(|| uniform(seq_len)),
            layer_weights: spec.strategy.uses_layer_weights().then(|| uniform(layers)),
        }
    }

    pub fn none() -> Self {
        Self { token_weights: None, layer_weights: None }
    }

    pub fn count(&self) -> usize {
        self.token_weights.as_ref().map_or(0, Tensor::numel) + self.layer_weights.as_ref().map_or(0, Tensor::numel)
    }
}

/// Graph handles for the combiner weights.
#[derive(Clone, Copy, Debug, Default)]
pub struct CombinerVars {
    pub token_weights: Option<Var>,
    pub layer_weights: Option<Var>,
}

/// The `H`-vector fed to the classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedRepresentation {
    pub values: Vec<f64>,
}

fn weight(v: Option<Var>, needed: bool, what: &str, spec: &CombinationSpec) -> Result<Option<Var>> {
    match (v, needed) {
        (Some(v), true) => Ok(Some(v)),
        (None, false) => Ok(None),
        (None, true) => Err(contract_err(format!("{spec} needs {what} weights"))),
        (Some(_), false) => Err(contract_err(format!("{spec} does not use {what} weights"))),
    }
}

/// Applies `spec` to `states [L, S, H]` on the graph, returning `[H]`.
pub fn combine_graph(
    g: &mut Graph,
    states: Var,
    code_mask: &[bool],
    spec: &CombinationSpec,
    weights: CombinerVars,
) -> Result<Var> {
    let shape = g.shape(states).to_vec();
    if shape.len() != 3 || code_mask.len() != shape[1] {
        return Err(contract_err(format!("layer states {shape:?} with a mask of length {}", code_mask.len())));
    }
    let layers = shape[0];
    let st = spec.strategy;
    let tw = weight(weights.token_weights, st.uses_token_weights(), "token", spec)?;
    let lw = weight(weights.layer_weights, st.uses_layer_weights(), "layer", spec)?;
    let mask = (st.uses_scope() && spec.scope == Scope::Code).then_some(code_mask);
    if mask.is_some_and(|m| !m.iter().any(|&b| b)) {
        return Err(Error::InvalidMask(format!("{spec}: sequence has no code tokens")));
    }
    let layer_index = |l: Option<usize>| -> Result<usize> {
        match l {
            Some(l) if (1..=layers).contains(&l) => Ok(l - 1),
            l => Err(contract_err(format!("{spec}: layer {l:?} not available in {layers}-layer states"))),
        }
    };
    let cls_of = |g: &mut Graph, idx: usize| -> Result<Var> {
        let layer = g.select(states, 0, idx)?;
        g.select(layer, 0, CLS_POSITION)
    };
    match st {
        Strategy::I => cls_of(g, layers - 1),
        Strategy::Ii => {
            let idx = layer_index(spec.layer)?;
            cls_of(g, idx)
        }
        Strategy::Xii => {
            if spec.layer != Some(layers) {
                return Err(contract_err(format!(
                    "{spec} expects the states of a {:?}-layer model, got {layers} layers",
                    spec.layer
                )));
            }
            cls_of(g, layers - 1)
        }
        Strategy::Iii => {
            let cls = g.select(states, 1, CLS_POSITION)?;
            g.max_reduce(cls, 0, None)
        }
        Strategy::Iv => {
            let cls = g.select(states, 1, CLS_POSITION)?;
            g.weighted_reduce(cls, lw.unwrap(), 0, None)
        }
        Strategy::V => {
            let layer = g.select(states, 0, layer_index(spec.layer)?)?;
            g.max_reduce(layer, 0, mask)
        }
        Strategy::Vi => {
            let per_token = g.max_reduce(states, 0, None)?;
            g.max_reduce(per_token, 0, mask)
        }
        Strategy::Vii => {
            let per_token = g.max_reduce(states, 0, None)?;
            g.weighted_reduce(per_token, tw.unwrap(), 0, mask)
        }
        Strategy::Viii => {
            let per_layer = g.max_reduce(states, 1, mask)?;
            g.weighted_reduce(per_layer, lw.unwrap(), 0, None)
        }
        Strategy::Ix => {
            let layer = g.select(states, 0, layer_index(spec.layer)?)?;
            g.weighted_reduce(layer, tw.unwrap(), 0, mask)
        }
        Strategy::X => {
            let per_layer = g.weighted_reduce(states, tw.unwrap(), 1, mask)?;
            g.weighted_reduce(per_layer, lw.unwrap(), 0, None)
        }
        Strategy::Xi => {
            let per_token = g.weighted_reduce(states, lw.unwrap(), 0, None)?;
            g.weighted_reduce(per_token, tw.unwrap(), 0, mask)
        }
    }
}

/// Gradient-free [`combine_graph`] on one sequence's layer states.
pub fn combine(
    states: &LayerStates,
    spec: &CombinationSpec,
    params: &CombinerParams,
) -> Result<CombinedRepresentation> {
    let mut g = Graph::inference();
    let s = g.input(&states.states);
    let vars = CombinerVars {
        token_weights: params.token_weights.as_ref().map(|t| g.input(t)),
        layer_weights: params.layer_weights.as_ref().map(|t| g.input(t)),
    };
    let r = combine_graph(&mut g, s, &states.code_token_mask, spec, vars)?;
    Ok(CombinedRepresentation { values: g.value(r).to_vec() })
}

/// CLS row of layer `layer` (1-based).
pub fn slice_cls(states: &LayerStates, layer: usize) -> Result<Tensor> {
    if layer == 0 || layer > states.num_layers() {
        return Err(contract_err(format!("layer {layer} outside 1..={}", states.num_layers())));
    }
    let mut g = Graph::inference();
    let s = g.input(&states.states);
    let l = g.select(s, 0, layer - 1)?;
    let r = g.select(l, 0, CLS_POSITION)?;
    Ok(g.to_tensor(r))
}

/// Per-dimension max over the token rows of `layer_slice [S, H]` kept by
/// `scope_mask` (all rows when `None`).
pub fn pool_tokens_max(layer_slice: &Tensor, scope_mask: Option<&[bool]>) -> Result<Tensor> {
    crate::diffcore::ops::max_reduce(layer_slice, 0, scope_mask)
}

/// Per-token, per-dimension max across layers: `[L, S, H] -> [S, H]`.
pub fn pool_layers_max(states: &Tensor) -> Result<Tensor> {
    if states.shape().len() != 3 {
        return Err(Error::Dimension(format!("expected [L, S, H], got {:?}", states.shape())));
    }
    crate::diffcore::ops::max_reduce(states, 0, None)
}

pub fn sum_tokens_weighted(
    layer_slice: &Tensor,
    token_weights: &Tensor,
    scope_mask: Option<&[bool]>,
) -> Result<Tensor> {
    crate::diffcore::ops::weighted_reduce(layer_slice, token_weights, 0, scope_mask)
}

pub fn sum_layers_weighted(per_layer: &Tensor, layer_weights: &Tensor) -> Result<Tensor> {
    crate::diffcore::ops::weighted_reduce(per_layer, layer_weights, 0, None)
}

/// Every valid spec for an `layers`-layer model, in report order.
pub fn full_grid(layers: usize) -> Vec<CombinationSpec> {
    let spec = |st, l, sc| CombinationSpec::new(st, l, sc).expect("grid specs are well formed");
    let mut out = vec![CombinationSpec::baseline()];
    out.extend((1..layers).map(|l| spec(Strategy::Ii, Some(l), Scope::All)));
    for st in [Strategy::V, Strategy::Ix] {
        for sc in [Scope::All, Scope::Code] {
            out.extend((1..=layers).map(|l| spec(st, Some(l), sc)));
        }
    }
    out.push(spec(Strategy::Iii, None, Scope::All));
    out.push(spec(Strategy::Iv, None, Scope::All));
    for st in [Strategy::Vi, Strategy::Vii, Strategy::Viii, Strategy::X, Strategy::Xi] {
        for sc in [Scope::All, Scope::Code] {
            out.push(spec(st, None, sc));
        }
    }
    out.extend((1..layers).map(|l| spec(Strategy::Xii, Some(l), Scope::All)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn states_from(
        l: usize,
        s: usize,
        h: usize,
        f: impl Fn(usize, usize, usize) -> f64,
        code: Vec<bool>,
    ) -> LayerStates {
        let mut v = Vec::new();
        for a in 0..l {
            for b in 0..s {
                for c in 0..h {
                    v.push(f(a, b, c));
                }
            }
        }
        LayerStates::new(Tensor::new(vec![l, s, h], v).unwrap(), vec![true; s], code).unwrap()
    }

    #[test]
    fn spec_text_round_trip() {
        for text in ["i", "ii:layer=3", "v:layer=12:scope=code", "x:scope=all", "xii:layer=3", "iv"] {
            let spec: CombinationSpec = text.parse().unwrap();
            assert_eq!(spec.to_string(), text);
        }
        assert_eq!("vi".parse::<CombinationSpec>().unwrap().to_string(), "vi:scope=all");
        for bad in ["xiii", "ii", "i:layer=1", "iii:scope=code", "v:layer=0", "v:layer=2:layer=3", "v:foo=1"] {
            assert!(bad.parse::<CombinationSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn layer_ranges() {
        let p = |s: &str| s.parse::<CombinationSpec>().unwrap();
        assert!(p("ii:layer=3").validate(4).is_ok());
        assert!(p("ii:layer=4").validate(4).is_err());
        assert!(p("v:layer=4:scope=all").validate(4).is_ok());
        assert!(p("v:layer=5:scope=all").validate(4).is_err());
        assert!(p("xii:layer=4").validate(4).is_err());
    }

    #[test]
    fn added_params() {
        let p = |s: &str| s.parse::<CombinationSpec>().unwrap().added_param_count(512, 12);
        assert_eq!(p("v:layer=1"), 0);
        assert_eq!(p("x"), 524);
        assert_eq!(p("iv"), 12);
        assert_eq!(p("vii"), 512);
        assert_eq!(p("xii:layer=2"), 0);
    }

    #[test]
    fn cls_slice_on_constant_layers() {
        let st = states_from(3, 4, 2, |l, _, _| (l + 1) as f64, vec![false, true, true, false]);
        for l in 1..=3 {
            assert_eq!(slice_cls(&st, l).unwrap().values(), &[l as f64, l as f64]);
        }
        assert!(slice_cls(&st, 0).is_err());
        assert!(slice_cls(&st, 4).is_err());
    }

    #[test]
    fn token_max_examples() {
        let x = Tensor::from_rows(&[vec![1.0, -3.0], vec![0.0, 5.0]]).unwrap();
        assert_eq!(pool_tokens_max(&x, None).unwrap().values(), &[1.0, 5.0]);
        assert_eq!(pool_tokens_max(&x, Some(&[false, true])).unwrap().values(), &[0.0, 5.0]);
        assert!(matches!(pool_tokens_max(&x, Some(&[false, false])), Err(Error::InvalidMask(_))));
    }

    #[test]
    fn layer_max_examples() {
        let st = states_from(3, 2, 2, |l, _, _| (l + 1) as f64, vec![false, true]);
        assert_eq!(pool_layers_max(&st.states).unwrap().values(), &[3.0; 4]);
        let one = states_from(1, 2, 2, |_, s, h| (s * 2 + h) as f64, vec![false, true]);
        assert_eq!(pool_layers_max(&one.states).unwrap().values(), one.states.values());
    }

    #[test]
    fn weighted_sum_examples() {
        let x = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let w = Tensor::vector(vec![0.5, 0.5]);
        assert_eq!(sum_tokens_weighted(&x, &w, None).unwrap().values(), &[1.0, 1.0]);
        let one_hot = Tensor::vector(vec![0.0, 1.0]);
        assert_eq!(sum_layers_weighted(&x, &one_hot).unwrap().values(), &[0.0, 2.0]);
        assert!(sum_tokens_weighted(&x, &Tensor::vector(vec![1.0; 3]), None).is_err());
    }

    #[test]
    fn spec_params_must_match() {
        let st = states_from(2, 3, 2, |l, s, h| (l + s + h) as f64, vec![false, true, false]);
        let x: CombinationSpec = "x:scope=all".parse().unwrap();
        assert!(combine(&st, &x, &CombinerParams::none()).is_err());
        let i = CombinationSpec::baseline();
        assert!(combine(&st, &i, &CombinerParams::init(&x, 3, 2)).is_err());
        assert!(combine(&st, &x, &CombinerParams::init(&x, 3, 2)).is_ok());
    }

    #[test]
    fn code_scope_without_code_tokens_is_invalid() {
        let st = states_from(2, 3, 2, |l, s, h| (l + s + h) as f64, vec![false; 3]);
        let v: CombinationSpec = "v:layer=1:scope=code".parse().unwrap();
        assert!(matches!(combine(&st, &v, &CombinerParams::none()), Err(Error::InvalidMask(_))));
    }

    #[test]
    fn desk_grid_size() {
        // 1 + 3 + 16 + 2 + 10 + 3
        assert_eq!(full_grid(4).len(), 35);
        for spec in full_grid(4) {
            spec.validate(4).unwrap();
        }
    }
}
