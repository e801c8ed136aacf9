//! Staged training: paired multimodal training with late cosine-distance
//! enablement, text-only pretraining of the decoder, paired fine-tuning,
//! and held-out evaluation.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ctc::GraphemeSequence;
use crate::data::{split_heldout, Utterance};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossWeights};
use crate::model::{utterance_step, Model, ModelConfig, StepOptions, TrainMode};
use crate::numerics::{Matrix, RngState, SeededRng};
use crate::params::Parameters;

/// Band half-width used for every reported monotonicity score.
pub const MONOTONICITY_BAND: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    /// Cosine distance is enabled from epoch `floor(fraction · epochs)` on.
    pub cd_start_fraction: f64,
    pub lr_paired: f64,
    pub lr_finetune: f64,
    pub lr_pretrain: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub mask_rate: f64,
    pub sampler_rate: f64,
    pub dropout: f64,
    /// Cosine-distance gradient also reaches the speech embedding.
    pub cd_grad_to_speech: bool,
    pub replication: usize,
    /// Replicate each text embedding 1–3 times at random instead of a fixed count.
    pub random_replication: bool,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Also train the upper speech stack during text-only pretraining.
    pub unfreeze_upper: bool,
    /// Gradient norm ceiling per batch; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::BiamFull,
            epochs: 80,
            cd_start_fraction: 0.875,
            lr_paired: 0.1,
            lr_finetune: 0.05,
            lr_pretrain: 0.05,
            batch_size: 4,
            weights: LossWeights::default(),
            mask_rate: 0.20,
            sampler_rate: 0.5,
            dropout: 0.1,
            cd_grad_to_speech: true,
            replication: 2,
            random_replication: false,
            pretrain_epochs: 10,
            finetune_epochs: 20,
            unfreeze_upper: false,
            clip_norm: 0.0,
            seed: 1,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.weights.validate()?;
        if self.epochs < 1 {
            return fail("epochs must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.cd_start_fraction) {
            return fail(format!(
                "cd_start_fraction must be in [0, 1], got {}",
                self.cd_start_fraction
            ));
        }
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1".into());
        }
        for (name, v) in [
            ("mask_rate", self.mask_rate),
            ("sampler_rate", self.sampler_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.replication < 1 {
            return fail("replication must be >= 1".into());
        }
        Ok(())
    }

    /// First epoch (0-based) with the cosine-distance loss switched on.
    pub fn cd_start_epoch(&self) -> usize {
        (self.cd_start_fraction * self.epochs as f64).floor() as usize
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    fn step_options(&self, cd_enabled: bool) -> StepOptions {
        StepOptions {
            mode: self.mode,
            weights: self.weights,
            cd_enabled,
            cd_grad_to_speech: self.cd_grad_to_speech,
            mask_rate: self.mask_rate,
            sampler_rate: self.sampler_rate,
            dropout: self.dropout,
        }
    }
}

/// Plain SGD carries no state; the type keeps the checkpoint format stable
/// if a stateful rule is added.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub stage: String,
    pub epoch: usize,
    pub model: Model,
    pub optimizer: OptimizerState,
    pub rng: RngState,
    pub config: TrainConfig,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        Ok(ckpt)
    }

    /// Checkpoint of a freshly initialized model (zero epochs trained).
    pub fn untrained(cfg: &TrainConfig) -> Self {
        Checkpoint {
            stage: "init".into(),
            epoch: 0,
            model: Model::new(&cfg.model, cfg.seed),
            optimizer: OptimizerState::default(),
            rng: SeededRng::with_stream(cfg.seed, TRAIN_STREAM).state(),
            config: cfg.clone(),
            config_hash: cfg.hash(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub cd_enabled: bool,
    pub skipped: usize,
    pub monotonicity: f64,
    pub cer: f64,
}

pub const METRICS_HEADER: &str = "epoch,asr_ctc,asr_attention,cd,mlm,gctc,total,monotonicity,cer";

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in history {
        let b = &m.train;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            m.epoch,
            b.asr_ctc,
            b.asr_attention,
            b.cd,
            b.mlm,
            b.gctc,
            b.total,
            m.monotonicity,
            m.cer
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cer: f64,
    pub mean_monotonicity: f64,
    pub breakdown: LossBreakdown,
    pub utterances: usize,
    pub skipped: usize,
}

const TRAIN_STREAM: u64 = 7;
const EVAL_STREAM: u64 = 0xE7A1;

/// Character error rate: total edit distance over total reference length.
pub fn character_error_rate(pairs: &[(GraphemeSequence, GraphemeSequence)]) -> f64 {
    let (mut edits, mut total) = (0usize, 0usize);
    for (hyp, reference) in pairs {
        edits += strsim::generic_levenshtein(&hyp.tokens().to_vec(), &reference.tokens().to_vec());
        total += reference.len();
    }
    if total == 0 {
        0.0
    } else {
        edits as f64 / total as f64
    }
}

/// Held-out evaluation: CER from greedy CTC decoding of the ASR head, mean
/// monotonicity of the attention on unmasked text, and the loss breakdown
/// under deterministic masking/sampling.
pub fn evaluate(corpus: &[Utterance], ckpt: &Checkpoint) -> Result<EvalReport> {
    evaluate_model(corpus, &ckpt.model, &ckpt.config)
}

pub fn evaluate_model(
    corpus: &[Utterance],
    model: &Model,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    let mut pairs = Vec::with_capacity(corpus.len());
    let mut mono = 0.0;
    let mut breakdown = LossBreakdown::default();
    let mut skipped = 0;
    let mut rng = SeededRng::with_stream(cfg.seed, EVAL_STREAM);
    let opts = StepOptions {
        dropout: 0.0,
        ..cfg.step_options(true)
    };
    for u in corpus {
        pairs.push((model.transcribe(&u.speech)?, u.graphemes.clone()));
        mono += model.monotonicity(&u.speech, &u.graphemes, MONOTONICITY_BAND)?;
        match model.loss(&u.speech, &u.graphemes, &opts, &mut rng) {
            Ok(r) => breakdown.accumulate(&r.breakdown),
            Err(Error::Unreachable { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let n = corpus.len();
    let scored = n - skipped;
    Ok(EvalReport {
        cer: character_error_rate(&pairs),
        mean_monotonicity: if n == 0 { 0.0 } else { mono / n as f64 },
        breakdown: if scored == 0 {
            breakdown
        } else {
            breakdown.scaled(1.0 / scored as f64)
        },
        utterances: n,
        skipped,
    })
}

fn clip_and_apply(model: &mut Model, grads: &mut Model, count: usize, lr: f64, clip_norm: f64) {
    let scale = 1.0 / count as f64;
    let norm = grads.flatten().iter().map(|g| g * g).sum::<f64>().sqrt() * scale;
    let clip = if clip_norm > 0.0 && norm > clip_norm {
        clip_norm / norm
    } else {
        1.0
    };
    model.add_scaled_from(grads, -lr * scale * clip);
}

/// One pass over `train` in a seeded random order with SGD updates.
#[allow(clippy::too_many_arguments)]
fn paired_epoch<const CD_PATH: bool>(
    model: &mut Model,
    train: &[Utterance],
    opts: &StepOptions,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut SeededRng,
    optimizer: &mut OptimizerState,
) -> Result<(LossBreakdown, usize)> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let mut sum = LossBreakdown::default();
    let mut used = 0;
    let mut skipped = 0;
    for batch in order.chunks(cfg.batch_size) {
        let mut grads = model.zeros_like();
        let mut in_batch = 0;
        for &i in batch {
            let u = &train[i];
            match utterance_step::<CD_PATH>(
                model,
                &u.speech,
                &u.graphemes,
                opts,
                rng,
                Some(&mut grads),
            ) {
                Ok(r) => {
                    sum.accumulate(&r.breakdown);
                    in_batch += 1;
                }
                Err(Error::Unreachable { .. }) => {
                    skipped += 1;
                    debug!("skipping unreachable utterance {}", u.id);
                }
                Err(Error::NonFiniteLoss { component, .. }) => {
                    return Err(Error::NonFiniteLoss {
                        component,
                        utterance: Some(u.id.clone()),
                    })
                }
                Err(e) => return Err(e),
            }
        }
        if in_batch > 0 {
            clip_and_apply(model, &mut grads, in_batch, lr, cfg.clip_norm);
            optimizer.steps += 1;
            used += in_batch;
        }
    }
    if !model.flatten().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            component: "parameters",
            utterance: None,
        });
    }
    let mean = if used == 0 {
        sum
    } else {
        sum.scaled(1.0 / used as f64)
    };
    Ok((mean, skipped))
}

/// Observer called after each epoch with the updated model.
pub type EpochObserver<'a> = dyn FnMut(usize, &Model) + 'a;

#[allow(clippy::too_many_arguments)]
fn paired_loop<const CD_PATH: bool>(
    corpus: &[Utterance],
    mut ckpt: Checkpoint,
    cfg: &TrainConfig,
    epochs: usize,
    lr: f64,
    stage: &str,
    cd_from_epoch: usize,
    observer: &mut EpochObserver<'_>,
) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty training corpus".into()));
    }
    let (train, heldout) = split_heldout(corpus);
    let mut rng = SeededRng::from_state(ckpt.rng);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let cd_enabled = cfg.mode == TrainMode::BiamFull && epoch >= cd_from_epoch;
        let opts = cfg.step_options(cd_enabled);
        let (train_loss, skipped) = paired_epoch::<CD_PATH>(
            &mut ckpt.model,
            train,
            &opts,
            cfg,
            lr,
            &mut rng,
            &mut ckpt.optimizer,
        )?;
        let eval = evaluate_model(heldout, &ckpt.model, cfg)?;
        info!(
            "{stage} epoch {epoch}: total {:.4} cer {:.4} monotonicity {:.4}",
            train_loss.total, eval.cer, eval.mean_monotonicity
        );
        history.push(EpochMetrics {
            epoch,
            train: train_loss,
            cd_enabled,
            skipped,
            monotonicity: eval.mean_monotonicity,
            cer: eval.cer,
        });
        ckpt.epoch += 1;
        observer(epoch, &ckpt.model);
    }
    ckpt.stage = stage.to_string();
    ckpt.rng = rng.state();
    ckpt.config = cfg.clone();
    ckpt.config_hash = cfg.hash();
    Ok((ckpt, history))
}

/// Paired multimodal training from a fresh initialization. The last 10% of
/// `corpus` is held out for per-epoch metrics and never trained on.
pub fn train_paired(
    corpus: &[Utterance],
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    train_paired_observed(corpus, cfg, &mut |_, _| {})
}

pub fn train_paired_observed(
    corpus: &[Utterance],
    cfg: &TrainConfig,
    observer: &mut EpochObserver<'_>,
) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    paired_loop::<true>(
        corpus,
        Checkpoint::untrained(cfg),
        cfg,
        cfg.epochs,
        cfg.lr_paired,
        "paired",
        cfg.cd_start_epoch(),
        observer,
    )
}

/// Reference build of [`train_paired_observed`] with the cosine-distance
/// code path compiled out. Used to verify that gated-off epochs are exact.
pub fn train_paired_cd_removed(
    corpus: &[Utterance],
    cfg: &TrainConfig,
    observer: &mut EpochObserver<'_>,
) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    paired_loop::<false>(
        corpus,
        Checkpoint::untrained(cfg),
        cfg,
        cfg.epochs,
        cfg.lr_paired,
        "paired",
        cfg.cd_start_epoch(),
        observer,
    )
}

/// Paired fine-tuning of an existing checkpoint at the fine-tuning rate with
/// every parameter trainable. The cosine distance stays on throughout.
pub fn finetune_paired(
    corpus: &[Utterance],
    ckpt: Checkpoint,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    paired_loop::<true>(
        corpus,
        ckpt,
        cfg,
        cfg.finetune_epochs,
        cfg.lr_finetune,
        "finetune",
        0,
        &mut |_, _| {},
    )
}

/// Duplicates each row `copies[i]` times.
pub fn replicate_rows(m: &Matrix, copies: &[usize]) -> Matrix {
    let indices: Vec<usize> = copies
        .iter()
        .enumerate()
        .flat_map(|(i, &c)| std::iter::repeat_n(i, c))
        .collect();
    m.select_rows(&indices)
}

/// Text-only pretraining: text embeddings, each row replicated, are fed to
/// the upper speech stack and only the decoder is trained on its
/// teacher-forced loss. Every other parameter is left bit-identical unless
/// `unfreeze_upper` is set.
pub fn pretrain_unpaired(
    texts: &[GraphemeSequence],
    mut ckpt: Checkpoint,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<f64>)> {
    cfg.validate()?;
    let mut rng = SeededRng::from_state(ckpt.rng);
    let mut losses = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        let mut order: Vec<usize> = (0..texts.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut used = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let model = &ckpt.model;
            let mut grads = model.zeros_like();
            let mut in_batch = 0;
            for &i in batch {
                let g = &texts[i];
                if g.is_empty() {
                    continue;
                }
                g.check_vocab(model.vocab())?;
                let y = model.text.forward_tokens(g.tokens(), None)?.0;
                let copies: Vec<usize> = if cfg.random_replication {
                    (0..y.rows()).map(|_| rng.random_range(1..=3)).collect()
                } else {
                    vec![cfg.replication; y.rows()]
                };
                let stretched = replicate_rows(&y, &copies);
                let (h, upper_cache) = model.upper.forward(&stretched, None)?;
                let dec = model.decoder.forward(&h, g)?;
                if !dec.loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        component: "asr_attention",
                        utterance: Some(format!("text #{i}")),
                    });
                }
                let grad_h = model
                    .decoder
                    .backward(&dec.cache, 1.0, &mut grads.decoder)?;
                if cfg.unfreeze_upper {
                    model
                        .upper
                        .backward(&upper_cache, &grad_h, &mut grads.upper)?;
                }
                total += dec.loss;
                in_batch += 1;
            }
            if in_batch == 0 {
                continue;
            }
            // Only the trainable sub-networks are touched, so frozen
            // parameters stay byte-identical.
            let scale = -cfg.lr_pretrain / in_batch as f64;
            ckpt.model.decoder.add_scaled_from(&grads.decoder, scale);
            if cfg.unfreeze_upper {
                ckpt.model.upper.add_scaled_from(&grads.upper, scale);
            }
            ckpt.optimizer.steps += 1;
            used += in_batch;
        }
        let mean = if used == 0 { 0.0 } else { total / used as f64 };
        info!("pretrain epoch {epoch}: decoder loss {mean:.4}");
        losses.push(mean);
        ckpt.epoch += 1;
    }
    ckpt.stage = "pretrain_text".into();
    ckpt.rng = rng.state();
    ckpt.config = cfg.clone();
    ckpt.config_hash = cfg.hash();
    Ok((ckpt, losses))
}
