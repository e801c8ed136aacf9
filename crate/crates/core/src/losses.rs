//! Alignment losses on the bidirectional-attention outputs and the weighted
//! multimodal objective.
//!
//! ```text
//! total = λ·asr_ctc + (1 − λ)·asr_attention + α·(cd·[cd enabled] + mlm + gctc)
//! ```

use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss, GraphemeSequence};
use crate::error::{Error, Result};
use crate::numerics::{dot, row_log_softmax, Matrix, SeededRng};
use crate::params::{Affine, Parameters};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            lambda: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub asr_ctc: f64,
    pub asr_attention: f64,
    pub cd: f64,
    pub mlm: f64,
    pub gctc: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.asr_ctc += other.asr_ctc;
        self.asr_attention += other.asr_attention;
        self.cd += other.cd;
        self.mlm += other.mlm;
        self.gctc += other.gctc;
        self.total += other.total;
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            asr_ctc: self.asr_ctc * s,
            asr_attention: self.asr_attention * s,
            cd: self.cd * s,
            mlm: self.mlm * s,
            gctc: self.gctc * s,
            total: self.total * s,
        }
    }
}

/// Raw per-term values fed to [`total_loss`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub asr_ctc: f64,
    pub asr_attention: f64,
    pub cd: f64,
    pub mlm: f64,
    pub gctc: f64,
}

pub fn total_loss(
    c: &LossComponents,
    weights: &LossWeights,
    cd_enabled: bool,
) -> Result<LossBreakdown> {
    let named = [
        ("asr_ctc", c.asr_ctc),
        ("asr_attention", c.asr_attention),
        ("cd", c.cd),
        ("mlm", c.mlm),
        ("gctc", c.gctc),
    ];
    if let Some((component, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            component,
            utterance: None,
        });
    }
    let cd_term = if cd_enabled { c.cd } else { 0.0 };
    let total = weights.lambda * c.asr_ctc
        + (1.0 - weights.lambda) * c.asr_attention
        + weights.alpha * (cd_term + c.mlm + c.gctc);
    Ok(LossBreakdown {
        asr_ctc: c.asr_ctc,
        asr_attention: c.asr_attention,
        cd: c.cd,
        mlm: c.mlm,
        gctc: c.gctc,
        total,
    })
}

#[derive(Clone, Debug)]
pub struct CosineOutput {
    pub loss: f64,
    pub grad_y_aligned: Matrix,
    pub grad_x: Matrix,
}

/// Frame-averaged cosine distance `(1/n)·Σₜ (1 − cos(y_alignedₜ, xₜ))`.
pub fn cosine_distance_loss(y_aligned: &Matrix, x: &Matrix) -> Result<CosineOutput> {
    if y_aligned.shape() != x.shape() {
        return Err(Error::shape(
            "cosine_distance_loss",
            y_aligned.shape(),
            x.shape(),
        ));
    }
    let n = x.rows();
    if n == 0 {
        return Err(Error::InvalidInput(
            "cosine distance of empty sequences".into(),
        ));
    }
    let mut loss = 0.0;
    let mut grad_y = Matrix::zeros(n, x.cols());
    let mut grad_x = Matrix::zeros(n, x.cols());
    let scale = 1.0 / n as f64;
    for t in 0..n {
        let (u, v) = (y_aligned.row(t), x.row(t));
        let nu = dot(u, u).sqrt();
        let nv = dot(v, v).sqrt();
        if nu == 0.0 || nv == 0.0 {
            return Err(Error::ZeroNorm { row: t });
        }
        let cos = dot(u, v) / (nu * nv);
        loss += 1.0 - cos;
        // d cos/du = v/(|u||v|) − cos·u/|u|².
        for (k, g) in grad_y.row_mut(t).iter_mut().enumerate() {
            *g = -scale * (v[k] / (nu * nv) - cos * u[k] / (nu * nu));
        }
        for (k, g) in grad_x.row_mut(t).iter_mut().enumerate() {
            *g = -scale * (u[k] / (nu * nv) - cos * v[k] / (nv * nv));
        }
    }
    Ok(CosineOutput {
        loss: loss * scale,
        grad_y_aligned: grad_y,
        grad_x,
    })
}

/// Positions of one utterance whose graphemes are hidden from the text encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    positions: Vec<usize>,
}

pub const DEFAULT_MASK_RATE: f64 = 0.20;

impl MaskPlan {
    pub fn new(mut positions: Vec<usize>, len: usize) -> Result<Self> {
        positions.sort_unstable();
        positions.dedup();
        if let Some(&p) = positions.iter().find(|&&p| p >= len) {
            return Err(Error::InvalidInput(format!(
                "mask position {p} out of range for length {len}"
            )));
        }
        Ok(MaskPlan { positions })
    }

    /// Samples `max(1, round(rate·len))` distinct positions for a nonempty
    /// sequence; an empty sequence gets an empty plan.
    pub fn sample(len: usize, rate: f64, rng: &mut SeededRng) -> Self {
        if len == 0 {
            return MaskPlan { positions: vec![] };
        }
        let count = ((rate * len as f64).round() as usize).clamp(1, len);
        let mut positions = rand::seq::index::sample(rng, len, count).into_vec();
        positions.sort_unstable();
        MaskPlan { positions }
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Token ids for the text encoder with masked positions replaced by MASK.
    pub fn apply(&self, graphemes: &GraphemeSequence) -> Vec<usize> {
        let mut tokens = graphemes.tokens().to_vec();
        for &p in &self.positions {
            tokens[p] = crate::encoders::MASK_TOKEN;
        }
        tokens
    }
}

#[derive(Clone, Debug)]
pub struct HeadLossOutput {
    pub loss: f64,
    /// Gradient with respect to the head's input sequence.
    pub grad_input: Matrix,
    pub grad_head: Affine,
}

/// Cross-entropy of `head(x_aligned[p])` against grapheme `p`, averaged over
/// the masked positions. Head class `c` predicts grapheme `c + 1`.
pub fn mlm_loss(
    x_aligned: &Matrix,
    graphemes: &GraphemeSequence,
    plan: &MaskPlan,
    head: &Affine,
) -> Result<HeadLossOutput> {
    if x_aligned.rows() != graphemes.len() {
        return Err(Error::InvalidInput(format!(
            "x_aligned has {} rows for {} graphemes",
            x_aligned.rows(),
            graphemes.len()
        )));
    }
    if plan.positions.is_empty() {
        return Err(Error::InvalidInput("empty mask plan".into()));
    }
    if let Some(&p) = plan.positions.iter().find(|&&p| p >= graphemes.len()) {
        return Err(Error::InvalidInput(format!(
            "mask position {p} out of range"
        )));
    }
    graphemes.check_vocab(head.outputs())?;

    let picked = x_aligned.select_rows(&plan.positions);
    let logits = head.forward(&picked)?;
    let log_probs = row_log_softmax(&logits);
    let count = plan.positions.len() as f64;
    let mut loss = 0.0;
    let mut g_logits = log_probs.map(f64::exp);
    for (k, &p) in plan.positions.iter().enumerate() {
        let class = graphemes.tokens()[p] - 1;
        loss -= log_probs[(k, class)];
        g_logits[(k, class)] -= 1.0;
    }
    let g_logits = g_logits.scale(1.0 / count);
    let mut grad_head = head.zeros_like();
    let g_picked = head.backward(&picked, &g_logits, &mut grad_head)?;
    let mut grad_input = Matrix::zeros(x_aligned.rows(), x_aligned.cols());
    for (k, &p) in plan.positions.iter().enumerate() {
        grad_input.row_mut(p).copy_from_slice(g_picked.row(k));
    }
    Ok(HeadLossOutput {
        loss: loss / count,
        grad_input,
        grad_head,
    })
}

/// Which input the sampler passed through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerChoice {
    Speech,
    AlignedText,
}

/// Per-utterance fair coin between `x` and `y_aligned`.
pub fn sampler(
    x: &Matrix,
    y_aligned: &Matrix,
    rate: f64,
    rng: &mut SeededRng,
) -> Result<(SamplerChoice, Matrix)> {
    if x.shape() != y_aligned.shape() {
        return Err(Error::shape("sampler", x.shape(), y_aligned.shape()));
    }
    if rng.coin(rate) {
        Ok((SamplerChoice::Speech, x.clone()))
    } else {
        Ok((SamplerChoice::AlignedText, y_aligned.clone()))
    }
}

/// Grapheme CTC: `ctc_loss(head(selected), graphemes)` with gradients to
/// both the selected sequence and the head.
pub fn gctc_loss(
    selected: &Matrix,
    graphemes: &GraphemeSequence,
    head: &Affine,
) -> Result<HeadLossOutput> {
    let logits = head.forward(selected)?;
    let ctc = ctc_loss(&logits, graphemes)?;
    let mut grad_head = head.zeros_like();
    let grad_input = head.backward(selected, &ctc.grad_logits, &mut grad_head)?;
    Ok(HeadLossOutput {
        loss: ctc.loss,
        grad_input,
        grad_head,
    })
}
