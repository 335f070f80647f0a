//! Encoder-decoder transformer over packed (unpadded) batches.
//!
//! Each attention head computes `softmax(X A Bᵀ Xᵀ) X C` and the heads are
//! concatenated without a further output projection. Encoder layers are
//! `H' = LN(H) + X`, `out = FFN(H') + H'`. Decoder layers are `H' = H + Y`,
//! cross attention `Z` with queries from `H'`, then `out = FFN(LN(H' + Z))`.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{AttentionBlock, ModelConfig, ParamSet};

use rand::{Rng, RngCore};

use crate::bpe::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::numerics::{AttentionSegment, AttentionSpec, Graph, NodeId, Scalar, Tensor};
use params::{AttnIdx, FfnIdx};

/// One training example in vocabulary ids.
///
/// `source` ends with `</s>`; `target` holds only the content tokens. The
/// decoder reads `<s> target` and is trained to emit `target </s>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingPair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

impl TrainingPair {
    /// Truncates both sides to fit `max_length` positions, reporting
    /// whether anything was cut.
    pub fn new(source: &[u32], target: &[u32], max_length: usize) -> (Self, bool) {
        let (source, cut_src) = encode_source(source, max_length);
        let keep = target.len().min(max_length - 1);
        let pair = Self {
            source,
            target: target[..keep].to_vec(),
        };
        (pair, cut_src || keep < target.len())
    }

    /// Number of predicted target positions (content plus `</s>`).
    pub fn target_positions(&self) -> usize {
        self.target.len() + 1
    }
}

/// Content tokens followed by `</s>`, truncated to `max_length` in total.
pub fn encode_source(tokens: &[u32], max_length: usize) -> (Vec<u32>, bool) {
    let keep = tokens.len().min(max_length - 1);
    let mut ids = tokens[..keep].to_vec();
    ids.push(EOS);
    (ids, keep < tokens.len())
}

/// Whether a forward pass is for training (dropout active) or inference.
pub enum Mode<'r> {
    Eval,
    Train {
        dropout: f64,
        rng: &'r mut dyn RngCore,
    },
}

/// A recorded forward pass ending in the mean label-smoothed loss.
pub struct LossGraph<T> {
    pub graph: Graph<T>,
    pub loss: NodeId,
    /// Graph node of every parameter tensor, in [`ParamSet`] order.
    pub params: Vec<NodeId>,
    pub target_tokens: usize,
}

impl<T: Scalar> LossGraph<T> {
    pub fn loss_value(&self) -> f64 {
        self.graph.value(self.loss).item().to_f64()
    }

    /// Gradients for every parameter, in [`ParamSet`] order.
    pub fn gradients(&self) -> Vec<Tensor<T>> {
        let mut grads = self.graph.backward(self.loss);
        self.params.iter().map(|&id| grads.take(id)).collect()
    }
}

/// Encoder outputs for a batch of sources, reused across decoding steps.
#[derive(Debug, Clone)]
pub struct EncoderOutput<T> {
    states: Tensor<T>,
    spans: Vec<(usize, usize)>,
}

impl<T: Scalar> EncoderOutput<T> {
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Rows of the encoder output belonging to source `i`.
    pub fn states(&self, i: usize) -> Tensor<T> {
        let (start, len) = self.spans[i];
        let d = self.states.cols();
        Tensor::matrix(len, d, self.states.data()[start * d..(start + len) * d].to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<T> {
    config: ModelConfig,
    params: ParamSet<T>,
}

struct Packed {
    ids: Vec<usize>,
    spans: Vec<(usize, usize)>,
    positions: Vec<usize>,
}

impl Packed {
    fn new<'a>(seqs: impl IntoIterator<Item = &'a [u32]>) -> Self {
        let mut p = Packed {
            ids: Vec::new(),
            spans: Vec::new(),
            positions: Vec::new(),
        };
        for s in seqs {
            p.spans.push((p.ids.len(), s.len()));
            p.ids.extend(s.iter().map(|&t| t as usize));
            p.positions.extend(0..s.len());
        }
        p
    }
}

fn self_segments(spans: &[(usize, usize)]) -> Vec<AttentionSegment> {
    spans
        .iter()
        .map(|&(start, len)| AttentionSegment {
            q_start: start,
            q_len: len,
            kv_start: start,
            kv_len: len,
        })
        .collect()
}

fn cross_segments(queries: &[(usize, usize)], keys: &[(usize, usize)]) -> Vec<AttentionSegment> {
    queries
        .iter()
        .zip(keys)
        .map(|(&(qs, ql), &(ks, kl))| AttentionSegment {
            q_start: qs,
            q_len: ql,
            kv_start: ks,
            kv_len: kl,
        })
        .collect()
}

/// Sinusoidal position encoding rows for the given positions.
pub fn positional_encoding<T: Scalar>(positions: &[usize], d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(positions.len() * d);
    for &pos in positions {
        for c in 0..d {
            let pair = (c / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(pair / d as f64);
            data.push(T::from_f64(if c % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::matrix(positions.len(), d, data)
}

struct Builder<'m, 'r, T> {
    model: &'m Transformer<T>,
    g: Graph<T>,
    bound: Vec<Option<NodeId>>,
    trainable: bool,
    dropout: f64,
    rng: Option<&'r mut dyn RngCore>,
}

impl<'m, 'r, T: Scalar> Builder<'m, 'r, T> {
    fn new(model: &'m Transformer<T>, mode: Mode<'r>, trainable: bool) -> Self {
        let (dropout, rng) = match mode {
            Mode::Eval => (0.0, None),
            Mode::Train { dropout, rng } => (dropout, Some(rng)),
        };
        Self {
            model,
            g: Graph::new(),
            bound: vec![None; model.params.len()],
            trainable,
            dropout,
            rng,
        }
    }

    fn p(&mut self, idx: usize) -> NodeId {
        if let Some(id) = self.bound[idx] {
            return id;
        }
        let value = self.model.params.tensors()[idx].clone();
        let id = if self.trainable {
            self.g.param(value)
        } else {
            self.g.constant(value)
        };
        self.bound[idx] = Some(id);
        id
    }

    fn bind_all(&mut self) -> Vec<NodeId> {
        (0..self.bound.len()).map(|i| self.p(i)).collect()
    }

    fn drop(&mut self, x: NodeId) -> NodeId {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => self.g.dropout(x, self.dropout, rng),
            _ => x,
        }
    }

    fn embed(&mut self, table: usize, packed: &Packed) -> NodeId {
        let cfg = self.model.config;
        let t = self.p(table);
        let e = self.g.embedding(t, &packed.ids);
        let mut e = self.g.scale(e, (cfg.d_model as f64).sqrt());
        if cfg.positional_encoding {
            let pe = self.g.constant(positional_encoding(&packed.positions, cfg.d_model));
            e = self.g.add(e, pe);
        }
        self.drop(e)
    }

    fn attention(
        &mut self,
        queries: NodeId,
        keys: NodeId,
        idx: AttnIdx,
        segments: Vec<AttentionSegment>,
        causal: bool,
    ) -> NodeId {
        let cfg = self.model.config;
        let (a, b, c) = (self.p(idx.a), self.p(idx.b), self.p(idx.c));
        let q = self.g.matmul(queries, a);
        let k = self.g.matmul(keys, b);
        let v = self.g.matmul(keys, c);
        let scale = if cfg.scale_attention {
            1.0 / (cfg.head_width() as f64).sqrt()
        } else {
            1.0
        };
        let spec = AttentionSpec {
            heads: cfg.heads,
            scale,
            causal,
            dropout: if self.rng.is_some() { self.dropout } else { 0.0 },
            segments,
        };
        let rng = self.rng.as_mut().map(|r| &mut **r as &mut dyn RngCore);
        self.g.attention(q, k, v, spec, rng)
    }

    fn ffn(&mut self, x: NodeId, idx: FfnIdx) -> NodeId {
        let (w1, b1, w2, b2) = (self.p(idx.w1), self.p(idx.b1), self.p(idx.w2), self.p(idx.b2));
        let h = self.g.matmul(x, w1);
        let h = self.g.add_row(h, b1);
        let h = self.g.relu(h);
        let h = self.drop(h);
        let o = self.g.matmul(h, w2);
        self.g.add_row(o, b2)
    }

    fn encoder(&mut self, src: &Packed) -> NodeId {
        let model = self.model;
        let layout = &model.params.layout;
        let layers = layout.enc.clone();
        let mut x = self.embed(layout.src_embed, src);
        for layer in layers {
            let h = self.attention(x, x, layer.attn, self_segments(&src.spans), false);
            let (gamma, beta) = (self.p(layer.gamma), self.p(layer.beta));
            let n = self.g.layer_norm(h, gamma, beta);
            let h1 = self.g.add(n, x);
            let f = self.ffn(h1, layer.ffn);
            x = self.g.add(f, h1);
        }
        x
    }

    fn decoder(&mut self, enc: NodeId, enc_spans: &[(usize, usize)], trg: &Packed) -> NodeId {
        let model = self.model;
        let layout = &model.params.layout;
        let layers = layout.dec.clone();
        let mut y = self.embed(layout.trg_embed, trg);
        for layer in layers {
            let h = self.attention(y, y, layer.self_attn, self_segments(&trg.spans), true);
            let h1 = self.g.add(h, y);
            let z = self.attention(
                h1,
                enc,
                layer.cross_attn,
                cross_segments(&trg.spans, enc_spans),
                false,
            );
            let s = self.g.add(h1, z);
            let (gamma, beta) = (self.p(layer.gamma), self.p(layer.beta));
            let n = self.g.layer_norm(s, gamma, beta);
            y = self.ffn(n, layer.ffn);
        }
        y
    }

    fn logits(&mut self, h: NodeId) -> NodeId {
        let model = self.model;
        let layout = &model.params.layout;
        match layout.out_proj {
            Some(i) => {
                let w = self.p(i);
                self.g.matmul(h, w)
            }
            None => {
                let e = self.p(layout.trg_embed);
                self.g.matmul_t(h, e, false, true)
            }
        }
    }
}

fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|&x| Scalar::to_f64(x)).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (Scalar::to_f64(x) - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| Scalar::to_f64(x) - lse).collect()
}

impl<T: Scalar> Transformer<T> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            params: ParamSet::init(&config, rng),
        })
    }

    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let expected = params::Layout::new(&config);
        if expected != params.layout {
            return Err(Error::ShapeMismatch(
                "parameter layout does not match the configuration".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        Transformer {
            config: self.config,
            params: self.params.cast(),
        }
    }

    fn check_ids(&self, ids: &[u32], vocab: usize, side: &str) -> Result<()> {
        match ids.iter().find(|&&t| t as usize >= vocab) {
            Some(t) => Err(Error::Invalid(format!(
                "{side} token id {t} outside vocabulary of {vocab}"
            ))),
            None => Ok(()),
        }
    }

    fn check_pair(&self, p: &TrainingPair) -> Result<()> {
        let max = self.config.max_length;
        if p.source.is_empty() || p.source.len() > max {
            return Err(Error::Invalid(format!(
                "source of {} tokens does not fit 1..={max}",
                p.source.len()
            )));
        }
        if p.target_positions() > max {
            return Err(Error::PrefixTooLong {
                len: p.target_positions(),
                max,
            });
        }
        self.check_ids(&p.source, self.config.src_vocab, "source")?;
        self.check_ids(&p.target, self.config.trg_vocab, "target")
    }

    /// Records the teacher-forced forward pass over `batch` and the mean
    /// label-smoothed cross entropy of every target position.
    pub fn loss_graph(&self, batch: &[TrainingPair], smoothing: f64, mode: Mode<'_>) -> Result<LossGraph<T>> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for p in batch {
            self.check_pair(p)?;
        }
        let inputs: Vec<Vec<u32>> = batch
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.target.iter().copied()).collect())
            .collect();
        let labels: Vec<usize> = batch
            .iter()
            .flat_map(|p| p.target.iter().map(|&t| t as usize).chain([EOS as usize]))
            .collect();
        let src = Packed::new(batch.iter().map(|p| p.source.as_slice()));
        let trg = Packed::new(inputs.iter().map(Vec::as_slice));
        let mut b = Builder::new(self, mode, true);
        let params = b.bind_all();
        let enc = b.encoder(&src);
        let h = b.decoder(enc, &src.spans, &trg);
        let logits = b.logits(h);
        let loss = b.g.smoothed_cross_entropy(logits, &labels, PAD as usize, smoothing);
        Ok(LossGraph {
            graph: b.g,
            loss,
            params,
            target_tokens: labels.len(),
        })
    }

    /// Mean label-smoothed loss without recording gradients.
    pub fn loss(&self, batch: &[TrainingPair], smoothing: f64) -> Result<f64> {
        Ok(self.loss_graph(batch, smoothing, Mode::Eval)?.loss_value())
    }

    /// Natural-log probability of every gold target token (content plus
    /// `</s>`) under teacher forcing.
    pub fn gold_log_probs(&self, batch: &[TrainingPair]) -> Result<Vec<Vec<f64>>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        for p in batch {
            self.check_pair(p)?;
        }
        let sources: Vec<&[u32]> = batch.iter().map(|p| p.source.as_slice()).collect();
        let enc = self.encode(&sources)?;
        let inputs: Vec<Vec<u32>> = batch
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.target.iter().copied()).collect())
            .collect();
        let queries: Vec<(usize, &[u32])> = inputs.iter().enumerate().map(|(i, v)| (i, v.as_slice())).collect();
        let all = self.all_log_probs(&enc, &queries)?;
        Ok(all
            .into_iter()
            .zip(batch)
            .map(|(rows, p)| {
                rows.iter()
                    .zip(p.target.iter().copied().chain([EOS]))
                    .map(|(row, t)| row[t as usize])
                    .collect()
            })
            .collect())
    }

    /// Runs the encoder over sources that already end with `</s>`.
    pub fn encode(&self, sources: &[&[u32]]) -> Result<EncoderOutput<T>> {
        for s in sources {
            if s.is_empty() || s.len() > self.config.max_length {
                return Err(Error::Invalid(format!(
                    "source of {} tokens does not fit 1..={}",
                    s.len(),
                    self.config.max_length
                )));
            }
            self.check_ids(s, self.config.src_vocab, "source")?;
        }
        let src = Packed::new(sources.iter().copied());
        if src.ids.is_empty() {
            return Ok(EncoderOutput {
                states: Tensor::matrix(0, self.config.d_model, Vec::new()),
                spans: Vec::new(),
            });
        }
        let mut b = Builder::new(self, Mode::Eval, false);
        let enc = b.encoder(&src);
        Ok(EncoderOutput {
            states: b.g.value(enc).clone(),
            spans: src.spans,
        })
    }

    fn check_prefix(&self, prefix: &[u32]) -> Result<()> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::Invalid("decoder prefix must start with <s>".into()));
        }
        if prefix.len() > self.config.max_length {
            return Err(Error::PrefixTooLong {
                len: prefix.len(),
                max: self.config.max_length,
            });
        }
        self.check_ids(prefix, self.config.trg_vocab, "target")
    }

    fn decoder_states(
        &self,
        enc: &EncoderOutput<T>,
        queries: &[(usize, &[u32])],
    ) -> Result<(Builder<'_, '_, T>, NodeId, Packed)> {
        for &(src, prefix) in queries {
            if src >= enc.len() {
                return Err(Error::Invalid(format!("no encoded source {src}")));
            }
            self.check_prefix(prefix)?;
        }
        let trg = Packed::new(queries.iter().map(|q| q.1));
        let enc_spans: Vec<(usize, usize)> = queries.iter().map(|&(s, _)| enc.spans[s]).collect();
        let mut b = Builder::new(self, Mode::Eval, false);
        let states = b.g.constant(enc.states.clone());
        let h = b.decoder(states, &enc_spans, &trg);
        Ok((b, h, trg))
    }

    /// Log-probabilities of the next token after each `(source, prefix)`;
    /// prefixes start with `<s>`.
    pub fn next_log_probs(&self, enc: &EncoderOutput<T>, queries: &[(usize, &[u32])]) -> Result<Vec<Vec<f64>>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let (mut b, h, trg) = self.decoder_states(enc, queries)?;
        let last: Vec<usize> = trg.spans.iter().map(|&(s, l)| s + l - 1).collect();
        let rows = b.g.embedding(h, &last);
        let logits = b.logits(rows);
        let value = b.g.value(logits);
        Ok((0..value.rows()).map(|r| log_softmax_row(value.row(r))).collect())
    }

    /// Log-probabilities at every position of each prefix.
    pub fn all_log_probs(&self, enc: &EncoderOutput<T>, queries: &[(usize, &[u32])]) -> Result<Vec<Vec<Vec<f64>>>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let (mut b, h, trg) = self.decoder_states(enc, queries)?;
        let logits = b.logits(h);
        let value = b.g.value(logits);
        Ok(trg
            .spans
            .iter()
            .map(|&(s, l)| (s..s + l).map(|r| log_softmax_row(value.row(r))).collect())
            .collect())
    }

    /// Next-token distribution for one source (ending in `</s>`) and a
    /// prefix starting with `<s>`.
    pub fn decode_step(&self, source: &[u32], prefix: &[u32]) -> Result<Vec<f64>> {
        let enc = self.encode(&[source])?;
        let lp = self.next_log_probs(&enc, &[(0, prefix)])?;
        Ok(lp[0].iter().map(|x| x.exp()).collect())
    }
}

#[cfg(test)]
mod tests;
