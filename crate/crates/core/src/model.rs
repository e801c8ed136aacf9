//! The full multimodal network and its per-utterance objective.

use serde::{Deserialize, Serialize};

use crate::biam::{biam_backward, biam_forward, monotonicity_score};
use crate::ctc::{ctc_loss, GraphemeSequence};
use crate::encoders::{Dropout, EncoderStack, TextEncoder, ToyDecoder};
use crate::error::{Error, Result};
use crate::losses::{
    cosine_distance_loss, gctc_loss, mlm_loss, sampler, total_loss, LossBreakdown, LossComponents,
    LossWeights, MaskPlan, SamplerChoice,
};
use crate::numerics::{Matrix, SeededRng};
use crate::params::{join, Affine, Parameters};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub feature_dim: usize,
    pub dim: usize,
    pub lower_layers: usize,
    pub upper_layers: usize,
    pub text_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 10,
            feature_dim: 8,
            dim: 32,
            lower_layers: 2,
            upper_layers: 2,
            text_layers: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub lower: EncoderStack,
    pub upper: EncoderStack,
    pub text: TextEncoder,
    pub decoder: ToyDecoder,
    /// ASR CTC head on the upper-stack output, d×(V+1).
    pub ctc_head: Affine,
    /// Grapheme CTC head on the sampled sequence, d×(V+1).
    pub gctc_head: Affine,
    /// Masked-LM head on the aligned speech, d×V.
    pub mlm_head: Affine,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = SeededRng::with_stream(seed, 0x1417);
        let (v, d) = (cfg.vocab, cfg.dim);
        Model {
            lower: EncoderStack::new(Some(cfg.feature_dim), d, cfg.lower_layers, true, &mut rng),
            upper: EncoderStack::new(None, d, cfg.upper_layers, false, &mut rng),
            text: TextEncoder::new(v, d, cfg.text_layers, &mut rng),
            decoder: ToyDecoder::new(v, d, &mut rng),
            ctc_head: Affine::xavier(d, v + 1, &mut rng),
            gctc_head: Affine::xavier(d, v + 1, &mut rng),
            mlm_head: Affine::xavier(d, v, &mut rng),
        }
    }

    pub fn vocab(&self) -> usize {
        self.text.vocab()
    }

    pub fn feature_dim(&self) -> usize {
        self.lower
            .input_proj
            .as_ref()
            .map_or(self.lower.dim(), Affine::inputs)
    }
}

impl Parameters for Model {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.lower.visit(&join(prefix, "lower"), f);
        self.upper.visit(&join(prefix, "upper"), f);
        self.text.visit(&join(prefix, "text"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
        self.ctc_head.visit(&join(prefix, "ctc_head"), f);
        self.gctc_head.visit(&join(prefix, "gctc_head"), f);
        self.mlm_head.visit(&join(prefix, "mlm_head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.lower.visit_mut(&join(prefix, "lower"), f);
        self.upper.visit_mut(&join(prefix, "upper"), f);
        self.text.visit_mut(&join(prefix, "text"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        self.ctc_head.visit_mut(&join(prefix, "ctc_head"), f);
        self.gctc_head.visit_mut(&join(prefix, "gctc_head"), f);
        self.mlm_head.visit_mut(&join(prefix, "mlm_head"), f);
    }
}

/// Which losses are wired into the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// ASR losses only; the text encoder and attention are never run.
    Baseline,
    /// ASR losses plus grapheme CTC directly on the lower-stack output.
    GraphemeCtcBaseline,
    /// Bidirectional attention with MLM and grapheme CTC, no cosine distance.
    BiamNoCd,
    /// Bidirectional attention with all alignment losses; cosine distance
    /// switched on late in training.
    BiamFull,
}

impl TrainMode {
    pub fn uses_biam(self) -> bool {
        matches!(self, TrainMode::BiamNoCd | TrainMode::BiamFull)
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::GraphemeCtcBaseline => "grapheme_ctc_baseline",
            TrainMode::BiamNoCd => "biam_no_cd",
            TrainMode::BiamFull => "biam_full",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(TrainMode::Baseline),
            "grapheme_ctc_baseline" => Ok(TrainMode::GraphemeCtcBaseline),
            "biam_no_cd" => Ok(TrainMode::BiamNoCd),
            "biam_full" => Ok(TrainMode::BiamFull),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Per-utterance objective settings.
#[derive(Clone, Copy, Debug)]
pub struct StepOptions {
    pub mode: TrainMode,
    pub weights: LossWeights,
    pub cd_enabled: bool,
    /// When false the cosine-distance gradient reaches only the text side.
    pub cd_grad_to_speech: bool,
    pub mask_rate: f64,
    /// Probability that the sampler picks the speech embedding.
    pub sampler_rate: f64,
    /// Dropout rate; 0 disables it (evaluation and gradient checks).
    pub dropout: f64,
}

impl StepOptions {
    pub fn deterministic(mode: TrainMode) -> Self {
        StepOptions {
            mode,
            weights: LossWeights::default(),
            cd_enabled: true,
            cd_grad_to_speech: true,
            mask_rate: crate::losses::DEFAULT_MASK_RATE,
            sampler_rate: 0.5,
            dropout: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub breakdown: LossBreakdown,
    pub sampler: Option<SamplerChoice>,
    pub w12: Option<Matrix>,
}

/// Forward pass of the weighted objective for one utterance, with the
/// backward pass accumulated into `grads` when given.
///
/// `CD_PATH = false` instantiates a variant with the cosine-distance code
/// compiled out; it is otherwise identical and consumes `rng` identically.
pub(crate) fn utterance_step<const CD_PATH: bool>(
    model: &Model,
    speech: &Matrix,
    graphemes: &GraphemeSequence,
    opts: &StepOptions,
    rng: &mut SeededRng,
    mut grads: Option<&mut Model>,
) -> Result<StepResult> {
    let weights = if opts.mode == TrainMode::Baseline {
        LossWeights {
            alpha: 0.0,
            ..opts.weights
        }
    } else {
        opts.weights
    };
    let alpha = weights.alpha;
    let dropping = opts.dropout > 0.0;

    // Validate reachability up front so a skipped utterance consumes no state.
    crate::ctc::check_reachable(speech.rows(), graphemes)?;
    graphemes.check_vocab(model.vocab())?;

    let (x, lower_cache) = if dropping {
        let mut d = Dropout {
            rng,
            rate: opts.dropout,
        };
        model.lower.forward(speech, Some(&mut d))?
    } else {
        model.lower.forward(speech, None)?
    };
    let mut grad_x = Matrix::zeros(x.rows(), x.cols());
    let mut components = LossComponents::default();
    let mut sampler_choice = None;
    let mut w12 = None;

    match opts.mode {
        TrainMode::Baseline => {}
        TrainMode::GraphemeCtcBaseline => {
            let g = gctc_loss(&x, graphemes, &model.gctc_head)?;
            components.gctc = g.loss;
            if let Some(gr) = grads.as_deref_mut() {
                grad_x.add_scaled(&g.grad_input, alpha);
                gr.gctc_head.add_scaled_from(&g.grad_head, alpha);
            }
        }
        TrainMode::BiamNoCd | TrainMode::BiamFull => {
            let plan = MaskPlan::sample(graphemes.len(), opts.mask_rate, rng);
            let masked = plan.apply(graphemes);
            let (y, text_cache) = if dropping {
                let mut d = Dropout {
                    rng,
                    rate: opts.dropout,
                };
                model.text.forward_tokens(&masked, Some(&mut d))?
            } else {
                model.text.forward_tokens(&masked, None)?
            };
            let attn = biam_forward(&x, &y)?;
            let mut grad_x_aligned = Matrix::zeros(attn.x_aligned.rows(), attn.x_aligned.cols());
            let mut grad_y_aligned = Matrix::zeros(attn.y_aligned.rows(), attn.y_aligned.cols());

            let cd_active = CD_PATH && opts.mode == TrainMode::BiamFull && opts.cd_enabled;
            if CD_PATH && opts.mode == TrainMode::BiamFull {
                let cd = cosine_distance_loss(&attn.y_aligned, &x)?;
                components.cd = cd.loss;
                if cd_active && grads.is_some() {
                    grad_y_aligned.add_scaled(&cd.grad_y_aligned, alpha);
                    if opts.cd_grad_to_speech {
                        grad_x.add_scaled(&cd.grad_x, alpha);
                    }
                }
            }

            let mlm = mlm_loss(&attn.x_aligned, graphemes, &plan, &model.mlm_head)?;
            components.mlm = mlm.loss;

            let (choice, selected) = sampler(&x, &attn.y_aligned, opts.sampler_rate, rng)?;
            sampler_choice = Some(choice);
            let g = gctc_loss(&selected, graphemes, &model.gctc_head)?;
            components.gctc = g.loss;

            if let Some(gr) = grads.as_deref_mut() {
                grad_x_aligned.add_scaled(&mlm.grad_input, alpha);
                gr.mlm_head.add_scaled_from(&mlm.grad_head, alpha);
                match choice {
                    SamplerChoice::Speech => grad_x.add_scaled(&g.grad_input, alpha),
                    SamplerChoice::AlignedText => grad_y_aligned.add_scaled(&g.grad_input, alpha),
                }
                gr.gctc_head.add_scaled_from(&g.grad_head, alpha);

                let (gx, gy) = biam_backward(&attn, &grad_x_aligned, &grad_y_aligned)?;
                grad_x.add_assign(&gx);
                model.text.backward(&text_cache, &gy, &mut gr.text)?;
            }
            w12 = Some(attn.w12);
        }
    }

    let (h, upper_cache) = if dropping {
        let mut d = Dropout {
            rng,
            rate: opts.dropout,
        };
        model.upper.forward(&x, Some(&mut d))?
    } else {
        model.upper.forward(&x, None)?
    };
    let logits = model.ctc_head.forward(&h)?;
    let asr = ctc_loss(&logits, graphemes)?;
    components.asr_ctc = asr.loss;
    let dec = model.decoder.forward(&h, graphemes)?;
    components.asr_attention = dec.loss;

    if let Some(gr) = grads {
        let lambda = weights.lambda;
        let mut grad_h =
            model
                .ctc_head
                .backward(&h, &asr.grad_logits.scale(lambda), &mut gr.ctc_head)?;
        grad_h.add_assign(
            &model
                .decoder
                .backward(&dec.cache, 1.0 - lambda, &mut gr.decoder)?,
        );
        grad_x.add_assign(&model.upper.backward(&upper_cache, &grad_h, &mut gr.upper)?);
        model.lower.backward(&lower_cache, &grad_x, &mut gr.lower)?;
    }

    let breakdown = total_loss(&components, &weights, CD_PATH && opts.cd_enabled)?;
    Ok(StepResult {
        breakdown,
        sampler: sampler_choice,
        w12,
    })
}

impl Model {
    /// Weighted objective for one utterance.
    pub fn loss(
        &self,
        speech: &Matrix,
        graphemes: &GraphemeSequence,
        opts: &StepOptions,
        rng: &mut SeededRng,
    ) -> Result<StepResult> {
        utterance_step::<true>(self, speech, graphemes, opts, rng, None)
    }

    /// Weighted objective and its gradient, accumulated into `grads`.
    pub fn loss_and_grad(
        &self,
        speech: &Matrix,
        graphemes: &GraphemeSequence,
        opts: &StepOptions,
        rng: &mut SeededRng,
        grads: &mut Model,
    ) -> Result<StepResult> {
        utterance_step::<true>(self, speech, graphemes, opts, rng, Some(grads))
    }

    /// Greedy transcript from the ASR CTC head.
    pub fn transcribe(&self, speech: &Matrix) -> Result<GraphemeSequence> {
        let x = self.lower.forward(speech, None)?.0;
        let h = self.upper.forward(&x, None)?.0;
        Ok(crate::ctc::ctc_greedy_decode(&self.ctc_head.forward(&h)?))
    }

    /// Speech-to-text attention weights `w12` on unmasked text.
    pub fn alignment(&self, speech: &Matrix, graphemes: &GraphemeSequence) -> Result<Matrix> {
        graphemes.check_vocab(self.vocab())?;
        let x = self.lower.forward(speech, None)?.0;
        let y = self.text.forward_tokens(graphemes.tokens(), None)?.0;
        Ok(biam_forward(&x, &y)?.w12)
    }

    pub fn monotonicity(
        &self,
        speech: &Matrix,
        graphemes: &GraphemeSequence,
        band: f64,
    ) -> Result<f64> {
        Ok(monotonicity_score(
            &self.alignment(speech, graphemes)?,
            band,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, xavier_init};

    fn small() -> (Model, Matrix, GraphemeSequence) {
        let cfg = ModelConfig {
            vocab: 4,
            feature_dim: 3,
            dim: 4,
            lower_layers: 1,
            upper_layers: 1,
            text_layers: 1,
        };
        let model = Model::new(&cfg, 3);
        let speech = xavier_init(6, 3, &mut SeededRng::new(9)).scale(2.0);
        (model, speech, GraphemeSequence::new(vec![2, 4, 1]).unwrap())
    }

    #[test]
    fn full_chain_gradient() {
        let (model, speech, g) = small();
        for mode in [
            TrainMode::BiamFull,
            TrainMode::GraphemeCtcBaseline,
            TrainMode::Baseline,
        ] {
            let opts = StepOptions {
                weights: LossWeights {
                    alpha: 0.7,
                    lambda: 0.3,
                },
                ..StepOptions::deterministic(mode)
            };
            let mut grads = model.zeros_like();
            model
                .loss_and_grad(&speech, &g, &opts, &mut SeededRng::new(1), &mut grads)
                .unwrap();
            let numeric = finite_diff_grad(
                |p| {
                    let mut m = model.clone();
                    m.load_flat(p);
                    m.loss(&speech, &g, &opts, &mut SeededRng::new(1))
                        .unwrap()
                        .breakdown
                        .total
                },
                &model.flatten(),
                1e-4,
            )
            .unwrap();
            let worst = grads
                .flatten()
                .iter()
                .zip(&numeric)
                .map(|(a, n)| relative_error(*a, *n, 1e-6))
                .fold(0.0, f64::max);
            assert!(worst < 1e-3, "{mode:?}: worst relative error {worst}");
        }
    }

    #[test]
    fn baseline_never_touches_text_side() {
        let (model, speech, g) = small();
        let mut grads = model.zeros_like();
        let res = model
            .loss_and_grad(
                &speech,
                &g,
                &StepOptions::deterministic(TrainMode::Baseline),
                &mut SeededRng::new(1),
                &mut grads,
            )
            .unwrap();
        assert!(res.w12.is_none());
        assert!(grads.text.flatten().iter().all(|&v| v == 0.0));
        assert!(grads.mlm_head.flatten().iter().all(|&v| v == 0.0));
        assert_eq!(res.breakdown.cd, 0.0);
    }

    #[test]
    fn unreachable_utterance_is_structured_error() {
        let (model, _, _) = small();
        let speech = Matrix::filled(2, 3, 0.1);
        let g = GraphemeSequence::new(vec![1, 1]).unwrap();
        let err = model
            .loss(
                &speech,
                &g,
                &StepOptions::deterministic(TrainMode::BiamFull),
                &mut SeededRng::new(1),
            )
            .unwrap_err();
        assert!(matches!(err, Error::Unreachable { .. }));
    }
}
