//! Synthetic paired speech/text corpora and their JSONL representation.
//!
//! Each grapheme owns a fixed random prototype vector. An utterance samples
//! a grapheme sequence and a duration per grapheme, then emits the
//! prototype once per frame plus Gaussian noise. The segment boundaries are
//! kept as a gold alignment.
//!
//! JSONL schema, one record per line:
//! `{"id": str, "graphemes": [int], "speech": [[float]], "alignment": [[start, end]]}`
//! where `alignment` is optional and segments are half-open `[start, end)`
//! frame ranges. Grapheme ids are in `[1, V]`; 0 is reserved for the CTC blank.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ctc::GraphemeSequence;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speech: Matrix,
    pub graphemes: GraphemeSequence,
    pub alignment: Option<Vec<(usize, usize)>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab: 10,
            min_len: 3,
            max_len: 8,
            min_duration: 2,
            max_duration: 5,
            feature_dim: 8,
            noise: 0.3,
            size: 200,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab < 2 {
            return fail(format!("vocab must be >= 2, got {}", self.vocab));
        }
        if self.min_duration < 1 || self.min_duration > self.max_duration {
            return fail(format!(
                "invalid duration range [{}, {}]",
                self.min_duration, self.max_duration
            ));
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return fail(format!(
                "invalid length range [{}, {}]",
                self.min_len, self.max_len
            ));
        }
        if self.feature_dim < 1 {
            return fail("feature_dim must be >= 1".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("noise must be >= 0, got {}", self.noise));
        }
        Ok(())
    }
}

const PROTOTYPE_STREAM: u64 = 0;
const PAIRED_STREAM_BASE: u64 = 1;
const TEXT_STREAM_BASE: u64 = 1 << 40;

/// Prototype table, (V+1)×d_in; row 0 (blank) is unused and zero.
pub fn prototypes(cfg: &SynthConfig) -> Matrix {
    let mut rng = SeededRng::with_stream(cfg.seed, PROTOTYPE_STREAM);
    let mut table = Matrix::zeros(cfg.vocab + 1, cfg.feature_dim);
    for g in 1..=cfg.vocab {
        for v in table.row_mut(g) {
            *v = StandardNormal.sample(&mut rng);
        }
    }
    table
}

fn sample_graphemes(cfg: &SynthConfig, rng: &mut SeededRng) -> GraphemeSequence {
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    let tokens = (0..len).map(|_| rng.random_range(1..=cfg.vocab)).collect();
    GraphemeSequence::new(tokens).expect("sampled ids are never blank")
}

pub fn synth_corpus(cfg: &SynthConfig) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    let protos = prototypes(cfg);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let corpus = (0..cfg.size)
        .map(|i| {
            let mut rng = SeededRng::with_stream(cfg.seed, PAIRED_STREAM_BASE + i as u64);
            let graphemes = sample_graphemes(cfg, &mut rng);
            let durations: Vec<usize> = (0..graphemes.len())
                .map(|_| rng.random_range(cfg.min_duration..=cfg.max_duration))
                .collect();
            let frames: usize = durations.iter().sum();
            let mut speech = Matrix::zeros(frames, cfg.feature_dim);
            let mut alignment = Vec::with_capacity(graphemes.len());
            let mut start = 0;
            for (&g, &dur) in graphemes.tokens().iter().zip(&durations) {
                for f in start..start + dur {
                    for (v, p) in speech.row_mut(f).iter_mut().zip(protos.row(g)) {
                        *v = p + if cfg.noise > 0.0 {
                            noise.sample(&mut rng)
                        } else {
                            0.0
                        };
                    }
                }
                alignment.push((start, start + dur));
                start += dur;
            }
            Utterance {
                id: format!("utt-{i:05}"),
                speech,
                graphemes,
                alignment: Some(alignment),
            }
        })
        .collect();
    Ok(corpus)
}

/// Text-only sequences from the same distribution as [`synth_corpus`]
/// transcripts, on a disjoint generator stream.
pub fn unpaired_text_corpus(cfg: &SynthConfig) -> Result<Vec<GraphemeSequence>> {
    cfg.validate()?;
    Ok((0..cfg.size)
        .map(|i| {
            let mut rng = SeededRng::with_stream(cfg.seed, TEXT_STREAM_BASE + i as u64);
            sample_graphemes(cfg, &mut rng)
        })
        .collect())
}

/// First 90% of a corpus for training, last 10% held out (at least one
/// utterance when the corpus has two or more).
pub fn split_heldout<T>(corpus: &[T]) -> (&[T], &[T]) {
    let n = corpus.len();
    let mut held = n / 10;
    if held == 0 && n >= 2 {
        held = 1;
    }
    corpus.split_at(n - held)
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    graphemes: Vec<usize>,
    speech: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alignment: Option<Vec<(usize, usize)>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextRecord {
    id: String,
    graphemes: Vec<usize>,
}

fn check_alignment(
    segments: &[(usize, usize)],
    frames: usize,
    tokens: usize,
) -> std::result::Result<(), String> {
    if segments.len() != tokens {
        return Err(format!(
            "alignment has {} segments for {tokens} graphemes",
            segments.len()
        ));
    }
    let mut cursor = 0;
    for &(start, end) in segments {
        if start != cursor || end <= start {
            return Err(format!(
                "alignment segment [{start}, {end}) is not contiguous from frame {cursor}"
            ));
        }
        cursor = end;
    }
    if cursor != frames {
        return Err(format!("alignment covers {cursor} of {frames} frames"));
    }
    Ok(())
}

pub fn save_jsonl(corpus: &[Utterance], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for u in corpus {
        let rec = Record {
            id: u.id.clone(),
            graphemes: u.graphemes.tokens().to_vec(),
            speech: u.speech.to_rows(),
            alignment: u.alignment.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a paired corpus, validating every record against a vocabulary of
/// `vocab` graphemes. Errors carry the 1-based line number.
pub fn load_jsonl(path: &Path, vocab: usize) -> Result<Vec<Utterance>> {
    let reader = BufReader::new(File::open(path)?);
    let mut corpus = Vec::new();
    let mut feature_dim = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Data {
            line: line_no,
            message,
        };
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| err(format!("malformed record: {e}")))?;
        let graphemes =
            GraphemeSequence::with_vocab(rec.graphemes, vocab).map_err(|e| err(e.to_string()))?;
        if rec.speech.is_empty() {
            return Err(err("paired record has no speech frames".into()));
        }
        let dim = rec.speech[0].len();
        if let Some(r) = rec.speech.iter().position(|row| row.len() != dim) {
            return Err(err(format!(
                "speech row {r} has {} values, expected {dim}",
                rec.speech[r].len()
            )));
        }
        match feature_dim {
            Some(d) if d != dim => {
                return Err(err(format!(
                    "feature dimension {dim} differs from earlier records ({d})"
                )))
            }
            _ => feature_dim = Some(dim),
        }
        let speech = Matrix::from_rows(&rec.speech).map_err(|e| err(e.to_string()))?;
        if !speech.is_finite() {
            return Err(err("speech contains non-finite values".into()));
        }
        if let Some(segments) = &rec.alignment {
            check_alignment(segments, speech.rows(), graphemes.len()).map_err(err)?;
        }
        corpus.push(Utterance {
            id: rec.id,
            speech,
            graphemes,
            alignment: rec.alignment,
        });
    }
    Ok(corpus)
}

pub fn save_text_jsonl(texts: &[GraphemeSequence], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (i, g) in texts.iter().enumerate() {
        let rec = TextRecord {
            id: format!("text-{i:05}"),
            graphemes: g.tokens().to_vec(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_text_jsonl(path: &Path, vocab: usize) -> Result<Vec<GraphemeSequence>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Data {
            line: idx + 1,
            message,
        };
        let rec: TextRecord =
            serde_json::from_str(&line).map_err(|e| err(format!("malformed record: {e}")))?;
        out.push(
            GraphemeSequence::with_vocab(rec.graphemes, vocab).map_err(|e| err(e.to_string()))?,
        );
    }
    Ok(out)
}
