use std::fmt;
use std::str::FromStr;

use super::{ModelConfig, ModelParams};
use crate::diffmath::{Activation, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<BoundLinear>,
}

/// Model parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub config: ModelConfig,
    pub sketch_encoder: BoundMlp,
    pub image_encoder: BoundMlp,
    pub attention: BoundMlp,
    pub semantic_encoder: BoundMlp,
    pub decoder_xy: BoundLinear,
    pub decoder_yx: BoundLinear,
    pub hash: Var,
    pub classifier: BoundLinear,
    pub gcn: Var,
    pub semantic_decoder: Option<BoundMlp>,
    /// Handles in canonical flattening order.
    pub vars: Vec<Var>,
}

/// Gate applied to image embeddings.
#[derive(Clone, Copy, Debug)]
pub enum ImageGate {
    /// Unconditioned: the gate is identically one.
    Ones,
    /// Raw sketch features, one row per image row.
    Sketch(Var),
    /// A gate already computed by [`BoundModel::attention_gate`].
    Precomputed(Var),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrossDirection {
    SketchToImage,
    ImageToSketch,
}

impl FromStr for CrossDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sketch_to_image" => Ok(Self::SketchToImage),
            "image_to_sketch" => Ok(Self::ImageToSketch),
            other => Err(Error::Config(format!("unknown decoder direction {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingKind {
    Sketch,
    Image,
    Semantic,
}

/// A vector in the shared space.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub kind: EmbeddingKind,
}

/// Vector of trits in {-1, 0, +1}.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TernaryCode(Vec<i8>);

impl TernaryCode {
    pub fn new(trits: Vec<i8>) -> Result<Self> {
        if let Some(bad) = trits.iter().find(|t| !(-1..=1).contains(*t)) {
            return Err(Error::Contract(format!("{bad} is not a trit")));
        }
        Ok(Self(trits))
    }

    pub fn trits(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&t| t as f64).collect()
    }
}

impl fmt::Display for TernaryCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Signum with `sgn(0) = 0`.
pub fn hard_sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

impl BoundModel {
    fn leaky(&self) -> Activation {
        Activation::LeakyRelu(self.config.leaky_slope)
    }

    fn check_width(&self, tape: &Tape, x: Var, width: usize, what: &str) -> Result<()> {
        let t = tape.value(x);
        if t.rank() != 2 || t.cols() != width {
            return Err(Error::Dimension(format!(
                "{what} expects rows of width {width}, got shape {:?}",
                t.shape()
            )));
        }
        Ok(())
    }

    pub fn mlp(&self, tape: &mut Tape, mlp: &BoundMlp, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in mlp.layers.iter().enumerate() {
            h = tape.affine(h, layer.weight, layer.bias)?;
            if i + 1 < mlp.layers.len() {
                h = tape.activation(h, self.leaky())?;
            }
        }
        Ok(h)
    }

    /// `f_x`: sketch features to the shared space.
    pub fn encode_sketch(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_width(tape, x, self.config.d_in, "sketch encoder")?;
        self.mlp(tape, &self.sketch_encoder, x)
    }

    /// Ungated `f_y`.
    pub fn image_features(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        self.check_width(tape, y, self.config.d_in, "image encoder")?;
        self.mlp(tape, &self.image_encoder, y)
    }

    /// `sigmoid(FC2(leaky(FC1(gap(sketch)))))`, entries in (0,1).
    pub fn attention_gate(&self, tape: &mut Tape, sketch: Var) -> Result<Var> {
        self.check_width(tape, sketch, self.config.d_in, "attention gate")?;
        let pooled = tape.global_average_pool(sketch, self.config.att_pool)?;
        let h = self.mlp(tape, &self.attention, pooled)?;
        tape.sigmoid(h)
    }

    /// `gate ⊙ f_y(y)`; with [`ImageGate::Ones`] this is exactly `f_y(y)`.
    pub fn encode_image(&self, tape: &mut Tape, y: Var, gate: ImageGate) -> Result<Var> {
        let fy = self.image_features(tape, y)?;
        let gate = match gate {
            ImageGate::Ones => return Ok(fy),
            ImageGate::Sketch(s) => {
                let (ny, ns) = (tape.value(y).rows(), tape.value(s).rows());
                if ny != ns {
                    return Err(Error::Pairing(format!(
                        "{ny} images paired with {ns} gating sketches"
                    )));
                }
                self.attention_gate(tape, s)?
            }
            ImageGate::Precomputed(g) => g,
        };
        if tape.value(gate).shape() != tape.value(fy).shape() {
            return Err(Error::Pairing(format!(
                "gate shape {:?} does not match image embeddings {:?}",
                tape.value(gate).shape(),
                tape.value(fy).shape()
            )));
        }
        tape.mul(gate, fy)
    }

    /// `f_w`: composed prototypes (`2·d_w` wide) to the shared space.
    pub fn encode_semantic(&self, tape: &mut Tape, composed: Var) -> Result<Var> {
        self.check_width(tape, composed, 2 * self.config.d_w, "semantic encoder")?;
        self.mlp(tape, &self.semantic_encoder, composed)
    }

    /// Single fully-connected cross-modal decoder.
    pub fn decode_cross(&self, tape: &mut Tape, e: Var, direction: CrossDirection) -> Result<Var> {
        self.check_width(tape, e, self.config.d_shared, "decoder")?;
        let l = match direction {
            CrossDirection::SketchToImage => self.decoder_xy,
            CrossDirection::ImageToSketch => self.decoder_yx,
        };
        tape.affine(e, l.weight, l.bias)
    }

    /// `e · W_t`, the pre-activation of the hash.
    pub fn hash_preactivation(&self, tape: &mut Tape, e: Var) -> Result<Var> {
        self.check_width(tape, e, self.config.d_shared, "hash")?;
        tape.matmul(e, self.hash)
    }

    /// Differentiable surrogate `tanh(beta · e · W_t)`.
    pub fn hash_relaxed(&self, tape: &mut Tape, e: Var, beta: f64) -> Result<Var> {
        let z = self.hash_preactivation(tape, e)?;
        let z = tape.scale(z, beta)?;
        tape.tanh(z)
    }

    pub fn classify_logits(&self, tape: &mut Tape, codes: Var) -> Result<Var> {
        self.check_width(tape, codes, self.config.d_shared, "classifier")?;
        tape.affine(codes, self.classifier.weight, self.classifier.bias)
    }

    /// Reconstructs composed prototypes from semantic embeddings, when enabled.
    pub fn decode_semantic(&self, tape: &mut Tape, e: Var) -> Result<Option<Var>> {
        match &self.semantic_decoder {
            Some(dec) => Ok(Some(self.mlp(tape, dec, e)?)),
            None => Ok(None),
        }
    }
}

fn rows_tensor(rows: &[&[f64]], width: usize) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::Dimension("empty batch".into()));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != width) {
        return Err(Error::Dimension(format!(
            "input row of width {} where {width} is expected",
            r.len()
        )));
    }
    Tensor::from_rows(rows)
}

fn to_embeddings(t: &Tensor, kind: EmbeddingKind) -> Vec<Embedding> {
    (0..t.rows())
        .map(|i| Embedding {
            vector: t.row(i).to_vec(),
            kind,
        })
        .collect()
}

/// Tape-free inference on a frozen model.
impl ModelParams {
    pub fn encode_sketches(&self, features: &[&[f64]]) -> Result<Vec<Embedding>> {
        let mut tape = Tape::new();
        let m = self.bind_frozen(&mut tape);
        let x = tape.constant(rows_tensor(features, self.config.d_in)?);
        let e = m.encode_sketch(&mut tape, x)?;
        Ok(to_embeddings(tape.value(e), EmbeddingKind::Sketch))
    }

    /// Image embeddings; `gating_sketches`, when given, pairs 1:1 with `features`.
    pub fn encode_images(
        &self,
        features: &[&[f64]],
        gating_sketches: Option<&[&[f64]]>,
    ) -> Result<Vec<Embedding>> {
        let mut tape = Tape::new();
        let m = self.bind_frozen(&mut tape);
        let y = tape.constant(rows_tensor(features, self.config.d_in)?);
        let gate = match gating_sketches {
            None => ImageGate::Ones,
            Some(s) => {
                if s.len() != features.len() {
                    return Err(Error::Pairing(format!(
                        "{} images paired with {} gating sketches",
                        features.len(),
                        s.len()
                    )));
                }
                ImageGate::Sketch(tape.constant(rows_tensor(s, self.config.d_in)?))
            }
        };
        let e = m.encode_image(&mut tape, y, gate)?;
        Ok(to_embeddings(tape.value(e), EmbeddingKind::Image))
    }

    pub fn attention_gates(&self, sketches: &[&[f64]]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let m = self.bind_frozen(&mut tape);
        let s = tape.constant(rows_tensor(sketches, self.config.d_in)?);
        let g = m.attention_gate(&mut tape, s)?;
        Ok(tape.value(g).clone())
    }

    pub fn encode_semantic(&self, composed: &[&[f64]]) -> Result<Vec<Embedding>> {
        let mut tape = Tape::new();
        let m = self.bind_frozen(&mut tape);
        let c = tape.constant(rows_tensor(composed, 2 * self.config.d_w)?);
        let e = m.encode_semantic(&mut tape, c)?;
        Ok(to_embeddings(tape.value(e), EmbeddingKind::Semantic))
    }

    /// Applies `g_xy` to sketch embeddings or `g_yx` to image embeddings.
    pub fn decode_cross(&self, e: &Embedding, direction: CrossDirection) -> Result<Vec<f64>> {
        let expected = match direction {
            CrossDirection::SketchToImage => EmbeddingKind::Sketch,
            CrossDirection::ImageToSketch => EmbeddingKind::Image,
        };
        if e.kind != expected {
            return Err(Error::Contract(format!(
                "{direction:?} decoder applied to a {:?} embedding",
                e.kind
            )));
        }
        let mut tape = Tape::new();
        let m = self.bind_frozen(&mut tape);
        let x = tape.constant(rows_tensor(&[&e.vector], self.config.d_shared)?);
        let out = m.decode_cross(&mut tape, x, direction)?;
        Ok(tape.value(out).row(0).to_vec())
    }

    fn hash_pre(&self, embeddings: &[Embedding]) -> Result<Tensor> {
        let rows: Vec<&[f64]> = embeddings.iter().map(|e| e.vector.as_slice()).collect();
        let mut tape = Tape::new();
        let m = self.bind_frozen(&mut tape);
        let x = tape.constant(rows_tensor(&rows, self.config.d_shared)?);
        let z = m.hash_preactivation(&mut tape, x)?;
        Ok(tape.value(z).clone())
    }

    /// Hard ternary codes `sgn(e · W_t)`.
    pub fn hash_codes(&self, embeddings: &[Embedding]) -> Result<Vec<TernaryCode>> {
        let z = self.hash_pre(embeddings)?;
        Ok((0..z.rows())
            .map(|i| TernaryCode(z.row(i).iter().map(|&v| hard_sign(v)).collect()))
            .collect())
    }

    /// Relaxed codes `tanh(beta · e · W_t)`.
    pub fn hash_relaxed(&self, embeddings: &[Embedding], beta: f64) -> Result<Vec<Vec<f64>>> {
        let z = self.hash_pre(embeddings)?;
        Ok((0..z.rows())
            .map(|i| z.row(i).iter().map(|&v| (beta * v).tanh()).collect())
            .collect())
    }

    pub fn classify_logits(&self, codes: &[&[f64]]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let m = self.bind_frozen(&mut tape);
        let x = tape.constant(rows_tensor(codes, self.config.d_shared)?);
        let out = m.classify_logits(&mut tape, x)?;
        Ok(tape.value(out).clone())
    }
}
