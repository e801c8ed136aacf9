//! Connectionist temporal classification: log-space forward/backward loss,
//! greedy decoding and an exhaustive path-enumeration oracle.
//!
//! Label 0 is the blank. Logit column `k` scores label `k`, so a logits
//! matrix for a vocabulary of `V` graphemes has `V + 1` columns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_add_exp, log_sum_exp, row_log_softmax, row_softmax, Matrix};

pub const BLANK: usize = 0;

/// Grapheme ids in `[1, V]`; never contains [`BLANK`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GraphemeSequence(Vec<usize>);

impl GraphemeSequence {
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        if let Some(pos) = tokens.iter().position(|&t| t == BLANK) {
            return Err(Error::InvalidInput(format!(
                "grapheme sequence contains the blank id at position {pos}"
            )));
        }
        Ok(GraphemeSequence(tokens))
    }

    /// Checks every id against a vocabulary of `vocab` graphemes.
    pub fn with_vocab(tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        let seq = Self::new(tokens)?;
        seq.check_vocab(vocab)?;
        Ok(seq)
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.0.iter().position(|&t| t > vocab) {
            Some(position) => Err(Error::OutOfVocabulary {
                id: self.0[position],
                position,
                vocab,
            }),
            None => Ok(()),
        }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of adjacent equal labels; each one forces an extra blank frame.
    pub fn adjacent_repeats(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Minimum number of frames a CTC path needs to emit this sequence.
    pub fn min_frames(&self) -> usize {
        self.len() + self.adjacent_repeats()
    }
}

/// Returns the structured unreachability error if `frames` cannot emit `target`.
pub fn check_reachable(frames: usize, target: &GraphemeSequence) -> Result<()> {
    if frames < target.min_frames() || frames == 0 {
        return Err(Error::Unreachable {
            frames,
            target_len: target.len(),
            repeats: target.adjacent_repeats(),
        });
    }
    Ok(())
}

/// Negative log-likelihood and its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct CtcOutput {
    pub loss: f64,
    pub grad_logits: Matrix,
}

/// CTC loss of `target` under `softmax(logits)` (T×(V+1)), with the exact
/// gradient from the forward–backward recursion.
pub fn ctc_loss(logits: &Matrix, target: &GraphemeSequence) -> Result<CtcOutput> {
    let frames = logits.rows();
    let classes = logits.cols();
    if !logits.is_finite() {
        return Err(Error::InvalidInput(
            "CTC logits contain non-finite values".into(),
        ));
    }
    target.check_vocab(classes.saturating_sub(1))?;
    check_reachable(frames, target)?;

    let log_probs = row_log_softmax(logits);

    // Blank-interleaved label sequence of length 2L + 1.
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &t in target.tokens() {
        ext.push(t);
        ext.push(BLANK);
    }
    let states = ext.len();
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    // alpha includes the emission at t, beta excludes it.
    let neg_inf = f64::NEG_INFINITY;
    let mut alpha = vec![neg_inf; frames * states];
    let mut beta = vec![neg_inf; frames * states];
    let at = |t: usize, s: usize| t * states + s;

    alpha[at(0, 0)] = log_probs[(0, ext[0])];
    if states > 1 {
        alpha[at(0, 1)] = log_probs[(0, ext[1])];
    }
    for t in 1..frames {
        for s in 0..states {
            let mut acc = alpha[at(t - 1, s)];
            if s >= 1 {
                acc = log_add_exp(acc, alpha[at(t - 1, s - 1)]);
            }
            if can_skip(s) {
                acc = log_add_exp(acc, alpha[at(t - 1, s - 2)]);
            }
            alpha[at(t, s)] = acc + log_probs[(t, ext[s])];
        }
    }

    let last = frames - 1;
    beta[at(last, states - 1)] = 0.0;
    if states > 1 {
        beta[at(last, states - 2)] = 0.0;
    }
    for t in (0..last).rev() {
        for s in 0..states {
            let mut acc = beta[at(t + 1, s)] + log_probs[(t + 1, ext[s])];
            if s + 1 < states {
                acc = log_add_exp(acc, beta[at(t + 1, s + 1)] + log_probs[(t + 1, ext[s + 1])]);
            }
            if s + 2 < states && can_skip(s + 2) {
                acc = log_add_exp(acc, beta[at(t + 1, s + 2)] + log_probs[(t + 1, ext[s + 2])]);
            }
            beta[at(t, s)] = acc;
        }
    }

    let mut log_likelihood = alpha[at(last, states - 1)];
    if states > 1 {
        log_likelihood = log_add_exp(log_likelihood, alpha[at(last, states - 2)]);
    }
    if !log_likelihood.is_finite() {
        return Err(Error::Unreachable {
            frames,
            target_len: target.len(),
            repeats: target.adjacent_repeats(),
        });
    }

    // d(-log P)/d logits[t, k] = softmax[t, k] - occupancy[t, k].
    let mut grad = row_softmax(logits);
    let mut per_class = vec![Vec::new(); classes];
    for t in 0..frames {
        for bucket in per_class.iter_mut() {
            bucket.clear();
        }
        for s in 0..states {
            per_class[ext[s]].push(alpha[at(t, s)] + beta[at(t, s)]);
        }
        for (k, bucket) in per_class.iter().enumerate() {
            if !bucket.is_empty() {
                grad[(t, k)] -= (log_sum_exp(bucket) - log_likelihood).exp();
            }
        }
    }

    Ok(CtcOutput {
        loss: -log_likelihood,
        grad_logits: grad,
    })
}

/// Collapses a frame-level label path: merge repeats, then drop blanks.
pub fn collapse_path(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &label in path {
        if Some(label) != prev && label != BLANK {
            out.push(label);
        }
        prev = Some(label);
    }
    out
}

/// Upper bound on paths [`ctc_bruteforce`] will enumerate.
pub const BRUTEFORCE_MAX_PATHS: u128 = 1_000_000;

/// Exhaustive CTC oracle: sums the probability of every frame path that
/// collapses to `target`. Fails with [`Error::Unreachable`] when no path does.
pub fn ctc_bruteforce(logits: &Matrix, target: &GraphemeSequence) -> Result<f64> {
    let frames = logits.rows();
    let classes = logits.cols();
    let paths = (classes as u128)
        .checked_pow(frames as u32)
        .unwrap_or(u128::MAX);
    if paths > BRUTEFORCE_MAX_PATHS {
        return Err(Error::TooLarge { paths });
    }
    target.check_vocab(classes.saturating_sub(1))?;
    let log_probs = row_log_softmax(logits);

    let mut path = vec![0usize; frames];
    let mut matching = Vec::new();
    for mut index in 0..paths {
        for slot in path.iter_mut() {
            *slot = (index % classes as u128) as usize;
            index /= classes as u128;
        }
        if collapse_path(&path) == target.tokens() {
            matching.push(
                path.iter()
                    .enumerate()
                    .map(|(t, &k)| log_probs[(t, k)])
                    .sum::<f64>(),
            );
        }
    }
    if matching.is_empty() || frames == 0 {
        return Err(Error::Unreachable {
            frames,
            target_len: target.len(),
            repeats: target.adjacent_repeats(),
        });
    }
    Ok(-log_sum_exp(&matching))
}

/// Per-frame argmax (first maximum on ties), then [`collapse_path`].
pub fn ctc_greedy_decode(logits: &Matrix) -> GraphemeSequence {
    let path: Vec<usize> = (0..logits.rows())
        .map(|t| {
            let row = logits.row(t);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    GraphemeSequence(collapse_path(&path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, xavier_init, SeededRng};

    fn seq(v: &[usize]) -> GraphemeSequence {
        GraphemeSequence::new(v.to_vec()).unwrap()
    }

    #[test]
    fn single_frame_uniform() {
        let logits = Matrix::zeros(1, 2);
        let out = ctc_loss(&logits, &seq(&[1])).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-12);
        assert!((ctc_bruteforce(&logits, &seq(&[1])).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_paths() {
        // (1,blank), (blank,1), (1,1): three of four equiprobable paths.
        let out = ctc_loss(&Matrix::zeros(2, 2), &seq(&[1])).unwrap();
        assert!((out.loss + 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn repeated_label_matches_bruteforce() {
        let logits = xavier_init(3, 3, &mut SeededRng::new(4)).scale(2.0);
        let target = seq(&[1, 1]);
        let fast = ctc_loss(&logits, &target).unwrap().loss;
        let slow = ctc_bruteforce(&logits, &target).unwrap();
        assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
    }

    #[test]
    fn unreachable_is_an_error_on_both_sides() {
        let logits = Matrix::zeros(2, 2);
        let target = seq(&[1, 1]);
        assert!(matches!(
            ctc_loss(&logits, &target),
            Err(Error::Unreachable { .. })
        ));
        assert!(matches!(
            ctc_bruteforce(&logits, &target),
            Err(Error::Unreachable { .. })
        ));
    }

    #[test]
    fn empty_target_is_all_blank() {
        let logits = Matrix::zeros(3, 3);
        let out = ctc_loss(&logits, &GraphemeSequence::default()).unwrap();
        assert!((out.loss - 3.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bruteforce_refuses_large_instances() {
        assert!(matches!(
            ctc_bruteforce(&Matrix::zeros(13, 4), &seq(&[1])),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn shift_invariance() {
        let logits = xavier_init(5, 4, &mut SeededRng::new(8));
        let shifted = logits.map(|v| v + 7.5);
        let target = seq(&[2, 3]);
        let a = ctc_loss(&logits, &target).unwrap().loss;
        let b = ctc_loss(&shifted, &target).unwrap().loss;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = xavier_init(4, 4, &mut SeededRng::new(21)).scale(2.0);
        let target = seq(&[1, 3]);
        let analytic = ctc_loss(&logits, &target).unwrap().grad_logits;
        let numeric = finite_diff_grad(
            |p| {
                let m = Matrix::from_vec(4, 4, p.to_vec()).unwrap();
                ctc_loss(&m, &target).unwrap().loss
            },
            logits.data(),
            1e-4,
        )
        .unwrap();
        for (a, n) in analytic.data().iter().zip(&numeric) {
            assert!(relative_error(*a, *n, 1e-6) < 1e-3, "{a} vs {n}");
        }
    }

    #[test]
    fn greedy_decode_rules() {
        let one_hot = |path: &[usize], classes: usize| {
            let mut m = Matrix::zeros(path.len(), classes);
            for (t, &k) in path.iter().enumerate() {
                m[(t, k)] = 1.0;
            }
            m
        };
        assert_eq!(
            ctc_greedy_decode(&one_hot(&[1, 1, 0, 2], 3)).tokens(),
            &[1, 2]
        );
        assert!(ctc_greedy_decode(&one_hot(&[0, 0, 0], 3)).is_empty());
        assert_eq!(ctc_greedy_decode(&one_hot(&[1, 0, 1], 3)).tokens(), &[1, 1]);
    }

    #[test]
    fn blank_rejected_in_sequences() {
        assert!(GraphemeSequence::new(vec![1, 0, 2]).is_err());
        assert!(matches!(
            GraphemeSequence::with_vocab(vec![1, 5], 4),
            Err(Error::OutOfVocabulary {
                id: 5,
                position: 1,
                ..
            })
        ));
    }
}
