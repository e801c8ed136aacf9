//! Toy sequence encoders and a teacher-forced attention decoder.
//!
//! A stack layer is `h ← h + dropout(tanh(h·W + b))`. The speech encoder is
//! split into a lower stack (with input projection and positions) whose
//! output is the speech embedding, and an upper stack feeding the ASR heads.

use serde::{Deserialize, Serialize};

use crate::ctc::GraphemeSequence;
use crate::error::{Error, Result};
use crate::numerics::{
    matmul, matmul_nt, matmul_tn, row_log_softmax, row_softmax, row_softmax_backward, xavier_init,
    Matrix, SeededRng,
};
use crate::params::{join, Affine, Parameters};

/// Sinusoidal position table: `sin(pos/10000^(2k/d))` in even columns,
/// `cos` of the same angle in odd columns.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Matrix {
    let mut pe = Matrix::zeros(len, dim);
    for pos in 0..len {
        for k in 0..dim {
            let pair = (k / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            pe[(pos, k)] = if k % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Inverted dropout driven by an explicit generator.
pub struct Dropout<'a> {
    pub rng: &'a mut SeededRng,
    pub rate: f64,
}

impl Dropout<'_> {
    /// Keep-mask scaled by `1/(1-rate)`.
    fn mask(&mut self, rows: usize, cols: usize) -> Matrix {
        let keep = 1.0 - self.rate;
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            if self.rng.uniform() < keep {
                *v = 1.0 / keep;
            }
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderStack {
    pub input_proj: Option<Affine>,
    pub layers: Vec<Affine>,
    pub positional: bool,
}

#[derive(Clone, Debug)]
pub struct StackCache {
    input: Matrix,
    /// Input to each layer.
    hidden: Vec<Matrix>,
    /// `tanh` output of each layer, before dropout.
    activations: Vec<Matrix>,
    masks: Vec<Option<Matrix>>,
}

impl EncoderStack {
    pub fn new(
        input_dim: Option<usize>,
        dim: usize,
        layers: usize,
        positional: bool,
        rng: &mut SeededRng,
    ) -> Self {
        let input_proj = input_dim.map(|d_in| Affine::xavier(d_in, dim, rng));
        let layers = (0..layers).map(|_| Affine::xavier(dim, dim, rng)).collect();
        EncoderStack {
            input_proj,
            layers,
            positional,
        }
    }

    pub fn dim(&self) -> usize {
        match (&self.input_proj, self.layers.first()) {
            (Some(p), _) => p.outputs(),
            (None, Some(l)) => l.inputs(),
            (None, None) => 0,
        }
    }

    pub fn forward(
        &self,
        input: &Matrix,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<(Matrix, StackCache)> {
        let mut h = match &self.input_proj {
            Some(proj) => {
                if input.cols() != proj.inputs() {
                    return Err(Error::shape(
                        "encoder input projection",
                        input.shape(),
                        proj.weight.shape(),
                    ));
                }
                proj.forward(input)?
            }
            None => input.clone(),
        };
        if let Some(first) = self.layers.first() {
            if h.cols() != first.inputs() {
                return Err(Error::shape(
                    "encoder layer",
                    h.shape(),
                    first.weight.shape(),
                ));
            }
        }
        if self.positional {
            h.add_assign(&sinusoidal_positions(h.rows(), h.cols()));
        }
        let mut cache = StackCache {
            input: input.clone(),
            hidden: Vec::with_capacity(self.layers.len()),
            activations: Vec::with_capacity(self.layers.len()),
            masks: Vec::with_capacity(self.layers.len()),
        };
        for layer in &self.layers {
            let act = layer.forward(&h)?.map(f64::tanh);
            let mask = dropout
                .as_deref_mut()
                .map(|d| d.mask(act.rows(), act.cols()));
            let mut next = h.clone();
            match &mask {
                Some(m) => next.add_assign(&act.hadamard(m)?),
                None => next.add_assign(&act),
            }
            cache.hidden.push(h);
            cache.activations.push(act);
            cache.masks.push(mask);
            h = next;
        }
        Ok((h, cache))
    }

    /// Accumulates into `grads`; returns the gradient of the raw input.
    pub fn backward(
        &self,
        cache: &StackCache,
        grad_out: &Matrix,
        grads: &mut EncoderStack,
    ) -> Result<Matrix> {
        let mut g = grad_out.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let mut g_act = g.clone();
            if let Some(mask) = &cache.masks[l] {
                g_act = g_act.hadamard(mask)?;
            }
            let act = &cache.activations[l];
            let g_pre = Matrix::from_vec(
                act.rows(),
                act.cols(),
                g_act
                    .data()
                    .iter()
                    .zip(act.data())
                    .map(|(gv, a)| gv * (1.0 - a * a))
                    .collect(),
            )?;
            let g_h = layer.backward(&cache.hidden[l], &g_pre, &mut grads.layers[l])?;
            g.add_assign(&g_h);
        }
        match (&self.input_proj, grads.input_proj.as_mut()) {
            (Some(proj), Some(gproj)) => proj.backward(&cache.input, &g, gproj),
            _ => Ok(g),
        }
    }
}

impl Parameters for EncoderStack {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        if let Some(p) = &self.input_proj {
            p.visit(&join(prefix, "input_proj"), f);
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        if let Some(p) = &mut self.input_proj {
            p.visit_mut(&join(prefix, "input_proj"), f);
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

/// Lower speech stack: projection, positions, layers. Output is the
/// speech embedding sequence.
pub fn encode_speech_lower(features: &Matrix, stack: &EncoderStack) -> Result<Matrix> {
    Ok(stack.forward(features, None)?.0)
}

/// Upper speech stack: layers only.
pub fn encode_speech_upper(x: &Matrix, stack: &EncoderStack) -> Result<Matrix> {
    Ok(stack.forward(x, None)?.0)
}

/// Grapheme embedding table plus a position-wise stack.
///
/// Row `k` of the table embeds grapheme id `k` for `k` in `[1, V]`. Row 0,
/// the slot of the CTC blank which never occurs in text, embeds the MASK
/// token used for masked-LM training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub table: Matrix,
    pub stack: EncoderStack,
}

pub const MASK_TOKEN: usize = 0;

#[derive(Clone, Debug)]
pub struct TextCache {
    tokens: Vec<usize>,
    stack: StackCache,
}

impl TextEncoder {
    pub fn new(vocab: usize, dim: usize, layers: usize, rng: &mut SeededRng) -> Self {
        TextEncoder {
            table: xavier_init(vocab + 1, dim, rng),
            stack: EncoderStack::new(None, dim, layers, true, rng),
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.rows() - 1
    }

    /// Encodes raw token ids; id 0 is the MASK token.
    pub fn forward_tokens(
        &self,
        tokens: &[usize],
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<(Matrix, TextCache)> {
        if let Some(position) = tokens.iter().position(|&t| t >= self.table.rows()) {
            return Err(Error::OutOfVocabulary {
                id: tokens[position],
                position,
                vocab: self.vocab(),
            });
        }
        let embedded = self.table.select_rows(tokens);
        let (out, stack) = self.stack.forward(&embedded, dropout)?;
        Ok((
            out,
            TextCache {
                tokens: tokens.to_vec(),
                stack,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &TextCache,
        grad_out: &Matrix,
        grads: &mut TextEncoder,
    ) -> Result<()> {
        let g_embedded = self
            .stack
            .backward(&cache.stack, grad_out, &mut grads.stack)?;
        for (pos, &tok) in cache.tokens.iter().enumerate() {
            for (dst, src) in grads.table.row_mut(tok).iter_mut().zip(g_embedded.row(pos)) {
                *dst += src;
            }
        }
        Ok(())
    }
}

impl Parameters for TextEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        f(join(prefix, "table"), &self.table);
        self.stack.visit(&join(prefix, "stack"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        f(join(prefix, "table"), &mut self.table);
        self.stack.visit_mut(&join(prefix, "stack"), f);
    }
}

pub fn encode_text(graphemes: &GraphemeSequence, enc: &TextEncoder) -> Result<Matrix> {
    graphemes.check_vocab(enc.vocab())?;
    Ok(enc.forward_tokens(graphemes.tokens(), None)?.0)
}

/// Single-block, single-head attention decoder trained with teacher forcing.
///
/// Output class 0 is EOS and class `k` is grapheme `k`. The target
/// embedding table has `V + 2` rows: 0 (EOS, unused as input), graphemes
/// `1..=V`, and BOS at `V + 1`.
///
/// Per step: `q = emb(prev)·Wq + bq`, `α = softmax(H·q)`, `c = αᵀH`,
/// `h = tanh(c·Wo + bo) + q`, `logits = h·Wp + bp`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDecoder {
    pub embed: Matrix,
    pub query: Affine,
    pub output: Affine,
    pub proj: Affine,
}

#[derive(Clone, Debug)]
pub struct DecoderCache {
    enc_out: Matrix,
    inputs: Vec<usize>,
    targets: Vec<usize>,
    embedded: Matrix,
    queries: Matrix,
    attention: Matrix,
    context: Matrix,
    gate: Matrix,
    hidden: Matrix,
    probs: Matrix,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub loss: f64,
    pub logits: Matrix,
    pub cache: DecoderCache,
}

impl ToyDecoder {
    pub fn new(vocab: usize, dim: usize, rng: &mut SeededRng) -> Self {
        ToyDecoder {
            embed: xavier_init(vocab + 2, dim, rng),
            query: Affine::xavier(dim, dim, rng),
            output: Affine::xavier(dim, dim, rng),
            proj: Affine::xavier(dim, vocab + 1, rng),
        }
    }

    pub fn vocab(&self) -> usize {
        self.embed.rows() - 2
    }

    pub fn bos(&self) -> usize {
        self.vocab() + 1
    }

    pub fn forward(&self, enc_out: &Matrix, targets: &GraphemeSequence) -> Result<DecoderOutput> {
        if enc_out.rows() == 0 {
            return Err(Error::InvalidInput(
                "decoder needs a nonempty encoder output".into(),
            ));
        }
        if targets.is_empty() {
            return Err(Error::InvalidInput(
                "decoder needs a nonempty target sequence".into(),
            ));
        }
        if enc_out.cols() != self.embed.cols() {
            return Err(Error::shape("decoder", enc_out.shape(), self.embed.shape()));
        }
        targets.check_vocab(self.vocab())?;

        let mut inputs = vec![self.bos()];
        inputs.extend_from_slice(targets.tokens());
        let mut outputs = targets.tokens().to_vec();
        outputs.push(0);

        let embedded = self.embed.select_rows(&inputs);
        let queries = self.query.forward(&embedded)?;
        let attention = row_softmax(&matmul_nt(&queries, enc_out)?);
        let context = matmul(&attention, enc_out)?;
        let gate = self.output.forward(&context)?.map(f64::tanh);
        let hidden = gate.add(&queries)?;
        let logits = self.proj.forward(&hidden)?;

        let log_probs = row_log_softmax(&logits);
        let steps = outputs.len();
        let loss = -outputs
            .iter()
            .enumerate()
            .map(|(t, &k)| log_probs[(t, k)])
            .sum::<f64>()
            / steps as f64;
        let probs = log_probs.map(f64::exp);

        Ok(DecoderOutput {
            loss,
            logits,
            cache: DecoderCache {
                enc_out: enc_out.clone(),
                inputs,
                targets: outputs,
                embedded,
                queries,
                attention,
                context,
                gate,
                hidden,
                probs,
            },
        })
    }

    /// Backward of `scale · loss`. Accumulates into `grads`, returns `∂/∂enc_out`.
    pub fn backward(
        &self,
        cache: &DecoderCache,
        scale: f64,
        grads: &mut ToyDecoder,
    ) -> Result<Matrix> {
        let steps = cache.targets.len() as f64;
        let mut g_logits = cache.probs.clone();
        for (t, &k) in cache.targets.iter().enumerate() {
            g_logits[(t, k)] -= 1.0;
        }
        let g_logits = g_logits.scale(scale / steps);

        let g_hidden = self
            .proj
            .backward(&cache.hidden, &g_logits, &mut grads.proj)?;
        let g_pre = Matrix::from_vec(
            g_hidden.rows(),
            g_hidden.cols(),
            g_hidden
                .data()
                .iter()
                .zip(cache.gate.data())
                .map(|(g, a)| g * (1.0 - a * a))
                .collect(),
        )?;
        let g_context = self
            .output
            .backward(&cache.context, &g_pre, &mut grads.output)?;

        let mut g_enc = matmul_tn(&cache.attention, &g_context)?;
        let g_attention = matmul_nt(&g_context, &cache.enc_out)?;
        let g_scores = row_softmax_backward(&cache.attention, &g_attention);
        g_enc.add_assign(&matmul_tn(&g_scores, &cache.queries)?);

        let mut g_queries = g_hidden;
        g_queries.add_assign(&matmul(&g_scores, &cache.enc_out)?);
        let g_embedded = self
            .query
            .backward(&cache.embedded, &g_queries, &mut grads.query)?;
        for (pos, &tok) in cache.inputs.iter().enumerate() {
            for (dst, src) in grads.embed.row_mut(tok).iter_mut().zip(g_embedded.row(pos)) {
                *dst += src;
            }
        }
        Ok(g_enc)
    }
}

impl Parameters for ToyDecoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        f(join(prefix, "embed"), &self.embed);
        self.query.visit(&join(prefix, "query"), f);
        self.output.visit(&join(prefix, "output"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        f(join(prefix, "embed"), &mut self.embed);
        self.query.visit_mut(&join(prefix, "query"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Teacher-forced cross-entropy of the decoder: `(loss, logits)`.
pub fn decode_teacher_forced(
    enc_out: &Matrix,
    targets: &GraphemeSequence,
    dec: &ToyDecoder,
) -> Result<(f64, Matrix)> {
    let out = dec.forward(enc_out, targets)?;
    Ok((out.loss, out.logits))
}
