//! Finite-difference verification of every analytic gradient in the crate.
//!
//! Each operation is checked on a fixed small instance (d ≤ 8, n ≤ 8) by
//! comparing its analytic gradient with a central difference over every
//! scalar it depends on (parameters and continuous inputs).

use serde::Serialize;

use crate::biam::{biam_backward, biam_forward};
use crate::ctc::{ctc_loss, GraphemeSequence};
use crate::encoders::{EncoderStack, TextEncoder, ToyDecoder};
use crate::error::{Error, Result};
use crate::losses::{cosine_distance_loss, gctc_loss, mlm_loss, LossWeights, MaskPlan};
use crate::model::{Model, ModelConfig, StepOptions, TrainMode};
use crate::numerics::{
    finite_diff_grad, relative_error, row_softmax, row_softmax_backward, xavier_init, Matrix,
    SeededRng,
};
use crate::params::{Affine, Parameters};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
/// Denominator floor of the relative error.
pub const FLOOR: f64 = 1e-6;

/// Module names accepted as a scope, in report order.
pub const MODULES: [&str; 5] = ["numerics", "encoders", "biam", "ctc", "losses"];

#[derive(Clone, Debug, Default)]
pub struct GradcheckOptions {
    /// `None` checks every module.
    pub scope: Option<String>,
    /// Seed of the random instances.
    pub seed: u64,
    /// Name of an operation whose analytic gradient is deliberately
    /// perturbed (negative control).
    pub corrupt: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct OpReport {
    pub module: &'static str,
    pub op: &'static str,
    pub scalars: usize,
    pub worst_relative_error: f64,
    pub worst_coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub ops: Vec<OpReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &OpReport> {
        self.ops.iter().filter(|o| !o.passed)
    }

    /// One human-readable line per operation.
    pub fn lines(&self) -> Vec<String> {
        self.ops
            .iter()
            .map(|o| {
                format!(
                    "{} {}::{} scalars={} worst_rel={:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
                    if o.passed { "PASS" } else { "FAIL" },
                    o.module,
                    o.op,
                    o.scalars,
                    o.worst_relative_error,
                    o.worst_coordinate,
                    o.analytic,
                    o.numeric
                )
            })
            .collect()
    }
}

type ScalarFn = Box<dyn Fn(&[f64]) -> Result<f64>>;
type GradFn = Box<dyn Fn(&[f64]) -> Result<Vec<f64>>>;

/// A scalar function of a flat point together with its analytic gradient.
struct Case {
    module: &'static str,
    op: &'static str,
    point: Vec<f64>,
    f: ScalarFn,
    grad: GradFn,
}

pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if let Some(scope) = &opts.scope {
        if scope != "all" && !MODULES.contains(&scope.as_str()) {
            return Err(Error::InvalidInput(format!(
                "unknown gradcheck scope `{scope}` (expected all or one of {})",
                MODULES.join(", ")
            )));
        }
    }
    let cases = build_cases(opts.seed)?;
    if let Some(c) = &opts.corrupt {
        if !cases.iter().any(|k| k.op == c) {
            return Err(Error::InvalidInput(format!("unknown operation `{c}`")));
        }
    }
    let mut ops = Vec::new();
    for case in cases {
        let in_scope = match opts.scope.as_deref() {
            None | Some("all") => true,
            Some(m) => m == case.module,
        };
        if in_scope {
            let corrupt = opts.corrupt.as_deref() == Some(case.op);
            ops.push(check(&case, corrupt)?);
        }
    }
    Ok(GradcheckReport {
        tolerance: TOLERANCE,
        ops,
    })
}

/// Names of all checked operations as `module::op`.
pub fn operations() -> Vec<String> {
    build_cases(1)
        .map(|cs| {
            cs.iter()
                .map(|c| format!("{}::{}", c.module, c.op))
                .collect()
        })
        .unwrap_or_default()
}

fn check(case: &Case, corrupt: bool) -> Result<OpReport> {
    let mut analytic = (case.grad)(&case.point)?;
    if corrupt {
        for g in &mut analytic {
            *g = *g * 1.05 + 1e-3;
        }
    }
    let mut failure = None;
    let numeric = finite_diff_grad(
        |p| match (case.f)(p) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        &case.point,
        STEP,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let numeric = numeric?;
    let mut worst = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = relative_error(*a, *n, FLOOR);
        // A NaN error always becomes the worst offender.
        if rel.is_nan() || rel > worst.0 {
            worst = (rel, i);
        }
    }
    let (rel, at) = worst;
    Ok(OpReport {
        module: case.module,
        op: case.op,
        scalars: case.point.len(),
        worst_relative_error: rel,
        worst_coordinate: at,
        analytic: analytic.get(at).copied().unwrap_or(0.0),
        numeric: numeric.get(at).copied().unwrap_or(0.0),
        passed: rel <= TOLERANCE && analytic.len() == numeric.len(),
    })
}

fn weighted(m: &Matrix, upstream: &Matrix) -> Result<f64> {
    Ok(m.hadamard(upstream)?.sum())
}

fn split(p: &[f64], at: usize) -> (&[f64], &[f64]) {
    p.split_at(at)
}

fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|s| s.iter().copied()).collect()
}

fn with_flat<P: Parameters>(template: &P, flat: &[f64]) -> P {
    let mut p = template.clone();
    p.load_flat(flat);
    p
}

fn build_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = SeededRng::with_stream(seed, 0x67c);
    let mut cases = Vec::new();
    let seq = |v: &[usize]| GraphemeSequence::new(v.to_vec());

    // numerics: row softmax.
    {
        let m = xavier_init(5, 6, &mut rng).scale(3.0);
        let u = xavier_init(5, 6, &mut rng);
        let (u1, u2) = (u.clone(), u);
        cases.push(Case {
            module: "numerics",
            op: "row_softmax",
            point: m.data().to_vec(),
            f: Box::new(move |p| weighted(&row_softmax(&Matrix::from_vec(5, 6, p.to_vec())?), &u1)),
            grad: Box::new(move |p| {
                let s = row_softmax(&Matrix::from_vec(5, 6, p.to_vec())?);
                Ok(row_softmax_backward(&s, &u2).into_vec())
            }),
        });
    }

    // numerics: affine map.
    {
        let mut aff = Affine::xavier(6, 5, &mut rng);
        aff.bias = xavier_init(1, 5, &mut rng);
        let x = xavier_init(4, 6, &mut rng);
        let u = xavier_init(4, 5, &mut rng);
        let n = aff.num_scalars();
        let point = concat(&[&aff.flatten(), x.data()]);
        let (a1, a2, u1, u2) = (aff.clone(), aff, u.clone(), u);
        cases.push(Case {
            module: "numerics",
            op: "affine",
            point,
            f: Box::new(move |p| {
                let (w, x) = split(p, n);
                weighted(
                    &with_flat(&a1, w).forward(&Matrix::from_vec(4, 6, x.to_vec())?)?,
                    &u1,
                )
            }),
            grad: Box::new(move |p| {
                let (w, x) = split(p, n);
                let aff = with_flat(&a2, w);
                let x = Matrix::from_vec(4, 6, x.to_vec())?;
                let mut g = aff.zeros_like();
                let gx = aff.backward(&x, &u2, &mut g)?;
                Ok(concat(&[&g.flatten(), gx.data()]))
            }),
        });
    }

    // encoders: lower-style stack with projection and positions.
    {
        let stack = EncoderStack::new(Some(5), 6, 2, true, &mut rng);
        let feats = xavier_init(6, 5, &mut rng).scale(2.0);
        let u = xavier_init(6, 6, &mut rng);
        let n = stack.num_scalars();
        let point = concat(&[&stack.flatten(), feats.data()]);
        let (s1, s2, u1, u2) = (stack.clone(), stack, u.clone(), u);
        cases.push(Case {
            module: "encoders",
            op: "encoder_stack",
            point,
            f: Box::new(move |p| {
                let (w, x) = split(p, n);
                weighted(
                    &with_flat(&s1, w)
                        .forward(&Matrix::from_vec(6, 5, x.to_vec())?, None)?
                        .0,
                    &u1,
                )
            }),
            grad: Box::new(move |p| {
                let (w, x) = split(p, n);
                let s = with_flat(&s2, w);
                let (_, cache) = s.forward(&Matrix::from_vec(6, 5, x.to_vec())?, None)?;
                let mut g = s.zeros_like();
                let gx = s.backward(&cache, &u2, &mut g)?;
                Ok(concat(&[&g.flatten(), gx.data()]))
            }),
        });
    }

    // encoders: text encoder with one masked token.
    {
        let enc = TextEncoder::new(5, 6, 2, &mut rng);
        let tokens = vec![3, 0, 5, 1, 3];
        let u = xavier_init(5, 6, &mut rng);
        let (e1, e2, t1, t2, u1, u2) = (
            enc.clone(),
            enc.clone(),
            tokens.clone(),
            tokens,
            u.clone(),
            u,
        );
        cases.push(Case {
            module: "encoders",
            op: "text_encoder",
            point: enc.flatten(),
            f: Box::new(move |p| weighted(&with_flat(&e1, p).forward_tokens(&t1, None)?.0, &u1)),
            grad: Box::new(move |p| {
                let e = with_flat(&e2, p);
                let (_, cache) = e.forward_tokens(&t2, None)?;
                let mut g = e.zeros_like();
                e.backward(&cache, &u2, &mut g)?;
                Ok(g.flatten())
            }),
        });
    }

    // encoders: attention decoder cross-entropy.
    {
        let mut dec = ToyDecoder::new(5, 6, &mut rng);
        dec.query.bias = xavier_init(1, 6, &mut rng);
        dec.output.bias = xavier_init(1, 6, &mut rng);
        let h = xavier_init(6, 6, &mut rng).scale(2.0);
        let targets = seq(&[2, 5, 5, 1])?;
        let n = dec.num_scalars();
        let point = concat(&[&dec.flatten(), h.data()]);
        let (d1, d2, t1, t2) = (dec.clone(), dec, targets.clone(), targets);
        cases.push(Case {
            module: "encoders",
            op: "attention_decoder",
            point,
            f: Box::new(move |p| {
                let (w, h) = split(p, n);
                Ok(with_flat(&d1, w)
                    .forward(&Matrix::from_vec(6, 6, h.to_vec())?, &t1)?
                    .loss)
            }),
            grad: Box::new(move |p| {
                let (w, h) = split(p, n);
                let d = with_flat(&d2, w);
                let out = d.forward(&Matrix::from_vec(6, 6, h.to_vec())?, &t2)?;
                let mut g = d.zeros_like();
                let gh = d.backward(&out.cache, 1.0, &mut g)?;
                Ok(concat(&[&g.flatten(), gh.data()]))
            }),
        });
    }

    // biam: both aligned outputs against both inputs.
    {
        let x = xavier_init(7, 6, &mut rng).scale(2.0);
        let y = xavier_init(4, 6, &mut rng).scale(2.0);
        let ux = xavier_init(4, 6, &mut rng);
        let uy = xavier_init(7, 6, &mut rng);
        let point = concat(&[x.data(), y.data()]);
        let (ux1, uy1, ux2, uy2) = (ux.clone(), uy.clone(), ux, uy);
        let unpack = |p: &[f64]| -> Result<(Matrix, Matrix)> {
            let (a, b) = p.split_at(42);
            Ok((
                Matrix::from_vec(7, 6, a.to_vec())?,
                Matrix::from_vec(4, 6, b.to_vec())?,
            ))
        };
        cases.push(Case {
            module: "biam",
            op: "biam",
            point,
            f: Box::new(move |p| {
                let (x, y) = unpack(p)?;
                let out = biam_forward(&x, &y)?;
                Ok(weighted(&out.x_aligned, &ux1)? + weighted(&out.y_aligned, &uy1)?)
            }),
            grad: Box::new(move |p| {
                let (x, y) = unpack(p)?;
                let out = biam_forward(&x, &y)?;
                let (gx, gy) = biam_backward(&out, &ux2, &uy2)?;
                Ok(concat(&[gx.data(), gy.data()]))
            }),
        });
    }

    // ctc: loss against logits, with a repeated label.
    {
        let logits = xavier_init(7, 5, &mut rng).scale(3.0);
        let target = seq(&[2, 2, 4])?;
        let (t1, t2) = (target.clone(), target);
        cases.push(Case {
            module: "ctc",
            op: "ctc_loss",
            point: logits.data().to_vec(),
            f: Box::new(move |p| Ok(ctc_loss(&Matrix::from_vec(7, 5, p.to_vec())?, &t1)?.loss)),
            grad: Box::new(move |p| {
                Ok(ctc_loss(&Matrix::from_vec(7, 5, p.to_vec())?, &t2)?
                    .grad_logits
                    .into_vec())
            }),
        });
    }

    // losses: cosine distance against both arguments.
    {
        let ya = xavier_init(6, 5, &mut rng);
        let x = xavier_init(6, 5, &mut rng);
        let point = concat(&[ya.data(), x.data()]);
        let unpack = |p: &[f64]| -> Result<(Matrix, Matrix)> {
            let (a, b) = p.split_at(30);
            Ok((
                Matrix::from_vec(6, 5, a.to_vec())?,
                Matrix::from_vec(6, 5, b.to_vec())?,
            ))
        };
        cases.push(Case {
            module: "losses",
            op: "cosine_distance",
            point,
            f: Box::new(move |p| {
                let (ya, x) = unpack(p)?;
                Ok(cosine_distance_loss(&ya, &x)?.loss)
            }),
            grad: Box::new(move |p| {
                let (ya, x) = unpack(p)?;
                let out = cosine_distance_loss(&ya, &x)?;
                Ok(concat(&[out.grad_y_aligned.data(), out.grad_x.data()]))
            }),
        });
    }

    // losses: masked-grapheme prediction and grapheme CTC through a head.
    // The MLM head predicts V graphemes; the gCTC head adds a blank class.
    let heads = [("mlm", 5usize, 5usize), ("gctc", 7, 6)];
    for (op, rows, classes) in heads {
        let mut head = Affine::xavier(6, classes, &mut rng);
        head.bias = xavier_init(1, classes, &mut rng);
        let input = xavier_init(rows, 6, &mut rng).scale(2.0);
        let g = seq(&[1, 4, 4, 2, 5])?;
        let plan = MaskPlan::new(vec![1, 3, 4], 5)?;
        let n = head.num_scalars();
        let point = concat(&[&head.flatten(), input.data()]);
        let eval = move |p: &[f64]| -> Result<crate::losses::HeadLossOutput> {
            let (w, x) = split(p, n);
            let h = with_flat(&head, w);
            let x = Matrix::from_vec(rows, 6, x.to_vec())?;
            if op == "mlm" {
                mlm_loss(&x, &g, &plan, &h)
            } else {
                gctc_loss(&x, &g, &h)
            }
        };
        let eval = std::rc::Rc::new(eval);
        let e2 = eval.clone();
        cases.push(Case {
            module: "losses",
            op,
            point,
            f: Box::new(move |p| Ok(eval(p)?.loss)),
            grad: Box::new(move |p| {
                let out = e2(p)?;
                Ok(concat(&[&out.grad_head.flatten(), out.grad_input.data()]))
            }),
        });
    }

    // losses: the complete weighted objective through the whole network,
    // summed over several sampler draws so both sampler branches are hit.
    {
        let cfg = ModelConfig {
            vocab: 4,
            feature_dim: 4,
            dim: 5,
            lower_layers: 1,
            upper_layers: 1,
            text_layers: 1,
        };
        let model = Model::new(&cfg, seed);
        let speech = xavier_init(7, 4, &mut rng).scale(2.0);
        let g = seq(&[2, 4, 1, 1])?;
        let opts = StepOptions {
            weights: LossWeights {
                alpha: 0.7,
                lambda: 0.3,
            },
            ..StepOptions::deterministic(TrainMode::BiamFull)
        };
        let draws = [1u64, 2, 3, 4];
        let (m1, m2, s1, s2, g1, g2) = (
            model.clone(),
            model.clone(),
            speech.clone(),
            speech,
            g.clone(),
            g,
        );
        cases.push(Case {
            module: "losses",
            op: "full_chain",
            point: model.flatten(),
            f: Box::new(move |p| {
                let m = with_flat(&m1, p);
                draws.iter().try_fold(0.0, |acc, &d| {
                    Ok(acc
                        + m.loss(&s1, &g1, &opts, &mut SeededRng::new(d))?
                            .breakdown
                            .total)
                })
            }),
            grad: Box::new(move |p| {
                let m = with_flat(&m2, p);
                let mut grads = m.zeros_like();
                for &d in &draws {
                    m.loss_and_grad(&s2, &g2, &opts, &mut SeededRng::new(d), &mut grads)?;
                }
                Ok(grads.flatten())
            }),
        });
    }

    Ok(cases)
}
