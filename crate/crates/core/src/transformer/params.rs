use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Shape of the encoder-decoder.
///
/// Every head gets `d_model / heads` attention and output dimensions, so
/// the concatenated heads are `d_model` wide again.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_width: usize,
    pub src_vocab: usize,
    pub trg_vocab: usize,
    pub max_length: usize,
    /// Output projection reuses the target embedding matrix.
    pub tie_weights: bool,
    /// Divide attention logits by `sqrt(d_model / heads)`.
    pub scale_attention: bool,
    /// Add sinusoidal position encodings to the embeddings.
    pub positional_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            heads: 4,
            layers: 6,
            ffn_width: 1024,
            src_vocab: 0,
            trg_vocab: 0,
            max_length: 60,
            tie_weights: true,
            scale_attention: true,
            positional_encoding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ffn_width", self.ffn_width),
            ("src_vocab", self.src_vocab),
            ("trg_vocab", self.trg_vocab),
            ("max_length", self.max_length),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by model.heads ({})",
                self.d_model, self.heads
            )));
        }
        if self.max_length < 2 {
            return Err(Error::Config("model.max_length must be at least 2".into()));
        }
        Ok(())
    }

    /// Per-head attention width `d_a` (equal to the output width `d_o`).
    pub fn head_width(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct AttnIdx {
    pub a: usize,
    pub b: usize,
    pub c: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct FfnIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct EncIdx {
    pub attn: AttnIdx,
    pub gamma: usize,
    pub beta: usize,
    pub ffn: FfnIdx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct DecIdx {
    pub self_attn: AttnIdx,
    pub cross_attn: AttnIdx,
    pub gamma: usize,
    pub beta: usize,
    pub ffn: FfnIdx,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub src_embed: usize,
    pub trg_embed: usize,
    pub out_proj: Option<usize>,
    pub enc: Vec<EncIdx>,
    pub dec: Vec<DecIdx>,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
}

struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.names.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        AttnIdx {
            a: self.add(format!("{prefix}.A"), vec![d, d]),
            b: self.add(format!("{prefix}.B"), vec![d, d]),
            c: self.add(format!("{prefix}.C"), vec![d, d]),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FfnIdx {
        FfnIdx {
            w1: self.add(format!("{prefix}.w1"), vec![d, f]),
            b1: self.add(format!("{prefix}.b1"), vec![f]),
            w2: self.add(format!("{prefix}.w2"), vec![f, d]),
            b2: self.add(format!("{prefix}.b2"), vec![d]),
        }
    }
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let f = config.ffn_width;
        let mut b = LayoutBuilder {
            names: Vec::new(),
            shapes: Vec::new(),
        };
        let src_embed = b.add("src_embed".into(), vec![config.src_vocab, d]);
        let trg_embed = b.add("trg_embed".into(), vec![config.trg_vocab, d]);
        let out_proj = (!config.tie_weights).then(|| b.add("out_proj".into(), vec![d, config.trg_vocab]));
        let enc = (0..config.layers)
            .map(|l| EncIdx {
                attn: b.attn(&format!("enc.{l}.self_attn"), d),
                gamma: b.add(format!("enc.{l}.norm.gamma"), vec![d]),
                beta: b.add(format!("enc.{l}.norm.beta"), vec![d]),
                ffn: b.ffn(&format!("enc.{l}.ffn"), d, f),
            })
            .collect();
        let dec = (0..config.layers)
            .map(|l| DecIdx {
                self_attn: b.attn(&format!("dec.{l}.self_attn"), d),
                cross_attn: b.attn(&format!("dec.{l}.cross_attn"), d),
                gamma: b.add(format!("dec.{l}.norm.gamma"), vec![d]),
                beta: b.add(format!("dec.{l}.norm.beta"), vec![d]),
                ffn: b.ffn(&format!("dec.{l}.ffn"), d, f),
            })
            .collect();
        Self {
            src_embed,
            trg_embed,
            out_proj,
            enc,
            dec,
            names: b.names,
            shapes: b.shapes,
        }
    }
}

/// Which attention block of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionBlock {
    EncoderSelf,
    DecoderSelf,
    DecoderCross,
}

/// All learnable tensors, in a fixed order derived from the config.
///
/// Attention matrices are stored per layer as `d×d` tensors named
/// `….A`, `….B`, `….C`; head `h` owns columns `h·d_a .. (h+1)·d_a`.
/// With weight tying there is no `out_proj` tensor and the output
/// projection is the transposed target embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub(crate) layout: Layout,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    /// Xavier-uniform matrices, unit norm scales, zero biases.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let layout = Layout::new(config);
        let tensors = layout
            .names
            .iter()
            .zip(&layout.shapes)
            .map(|(name, shape)| {
                if name.ends_with("gamma") {
                    Tensor::filled(shape.clone(), T::one())
                } else if shape.len() == 1 {
                    Tensor::zeros(shape.clone())
                } else {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let data = (0..shape[0] * shape[1])
                        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                        .collect();
                    Tensor::new(shape.clone(), data)
                }
            })
            .collect();
        Self { layout, tensors }
    }

    /// Builds from named tensors, which must match the layout exactly.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let layout = Layout::new(config);
        if named.len() != layout.names.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} tensors, found {}",
                layout.names.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), (want_name, want_shape)) in
            named.into_iter().zip(layout.names.iter().zip(&layout.shapes))
        {
            if &name != want_name || t.shape() != want_shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "expected {want_name} {want_shape:?}, found {name} {:?}",
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        Ok(Self { layout, tensors })
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.layout.names
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.layout
            .names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.layout.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn source_embedding(&self) -> &Tensor<T> {
        &self.tensors[self.layout.src_embed]
    }

    pub fn target_embedding(&self) -> &Tensor<T> {
        &self.tensors[self.layout.trg_embed]
    }

    pub fn target_embedding_mut(&mut self) -> &mut Tensor<T> {
        &mut self.tensors[self.layout.trg_embed]
    }

    pub fn is_tied(&self) -> bool {
        self.layout.out_proj.is_none()
    }

    /// `W_out` as a `d×|V|` matrix; a transposed view of the target
    /// embedding when tied.
    pub fn output_projection(&self) -> Tensor<T> {
        match self.layout.out_proj {
            Some(i) => self.tensors[i].clone(),
            None => self.tensors[self.layout.trg_embed].transpose(),
        }
    }

    /// The `(A, B, C)` matrices of one head.
    pub fn head(&self, block: AttentionBlock, layer: usize, head: usize, heads: usize) -> [Tensor<T>; 3] {
        let idx = match block {
            AttentionBlock::EncoderSelf => self.layout.enc[layer].attn,
            AttentionBlock::DecoderSelf => self.layout.dec[layer].self_attn,
            AttentionBlock::DecoderCross => self.layout.dec[layer].cross_attn,
        };
        [idx.a, idx.b, idx.c].map(|i| {
            let t = &self.tensors[i];
            let w = t.cols() / heads;
            let mut data = Vec::with_capacity(t.rows() * w);
            for r in 0..t.rows() {
                data.extend_from_slice(&t.row(r)[head * w..(head + 1) * w]);
            }
            Tensor::matrix(t.rows(), w, data)
        })
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            layout: self.layout.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}
