use rand::Rng;

use crate::diffcore::{Graph, Tensor, Var};
use crate::encoder::Mode;
use crate::error::{contract_err, Result};

/// Dropout followed by a linear layer; softmax gives class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub p_drop: f64,
    /// `[H, C]`
    pub weight: Tensor,
    /// `[C]`
    pub bias: Tensor,
}

impl ClassifierHead {
    pub fn new(weight: Tensor, bias: Tensor, p_drop: f64) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 2 || ws[1] < 2 || bias.shape() != [ws[1]] {
            return Err(contract_err(format!(
                "head weight {ws:?} and bias {:?} do not describe ≥ 2 classes",
                bias.shape()
            )));
        }
        if !(0.0..1.0).contains(&p_drop) {
            return Err(contract_err(format!("dropout probability {p_drop} outside [0, 1)")));
        }
        Ok(Self { p_drop, weight, bias })
    }

    /// N(0, 0.02) weights and a zero bias.
    pub fn init<R: Rng + ?Sized>(hidden: usize, classes: usize, p_drop: f64, rng: &mut R) -> Result<Self> {
        if hidden == 0 {
            return Err(contract_err("head needs a positive hidden size"));
        }
        Self::new(Tensor::randn(&[hidden, classes.max(1)], 0.02, rng), Tensor::zeros(&[classes.max(1)]), p_drop)
    }

    pub fn hidden(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Logits `[B, C]` for representations `r [B, H]`.
pub(crate) fn head_logits<R: Rng + ?Sized>(
    g: &mut Graph,
    r: Var,
    weight: Var,
    bias: Var,
    p_drop: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let r = match mode {
        Mode::Train => g.dropout(r, p_drop, rng)?,
        Mode::Eval => r,
    };
    let logits = g.matmul(r, weight)?;
    g.add_bias(logits, bias)
}

/// Class probabilities for one representation vector.
pub fn head_forward<R: Rng + ?Sized>(r: &[f64], head: &ClassifierHead, mode: Mode, rng: &mut R) -> Result<Vec<f64>> {
    if r.len() != head.hidden() {
        return Err(contract_err(format!(
            "representation of length {} for a head of width {}",
            r.len(),
            head.hidden()
        )));
    }
    let mut g = Graph::inference();
    let x = g.constant(&[1, r.len()], r.to_vec())?;
    let w = g.input(&head.weight);
    let b = g.input(&head.bias);
    let logits = head_logits(&mut g, x, w, b, head.p_drop, mode, rng)?;
    let probs = g.softmax(logits, 1)?;
    Ok(g.value(probs).to_vec())
}
