//! The shared-space model: visual encoders, attention gate, semantic encoder,
//! cross-modal decoders, hash projection and classifier.

mod checkpoint;
mod forward;

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffmath::{Tape, Tensor, Var, DEFAULT_LEAKY_SLOPE};
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    hard_sign, BoundLinear, BoundMlp, BoundModel, CrossDirection, Embedding, EmbeddingKind,
    ImageGate, TernaryCode,
};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_w: usize,
    pub d_shared: usize,
    /// Hidden widths of both visual encoders.
    pub encoder_hidden: Vec<usize>,
    /// Hidden widths of the semantic encoder.
    pub semantic_hidden: Vec<usize>,
    /// Output width of the attention branch's global average pooling.
    pub att_pool: usize,
    pub leaky_slope: f64,
    /// Sharpness of the tanh relaxation used for hash codes during training.
    pub hash_beta: f64,
    /// Adds a decoder from the semantic embedding back to the composed prototype.
    pub semantic_decoder: bool,
    /// Seen classes in classifier-column order.
    pub seen_classes: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: 2048,
            d_w: 300,
            d_shared: 64,
            encoder_hidden: vec![512],
            semantic_hidden: vec![256],
            att_pool: 16,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            hash_beta: 1.0,
            semantic_decoder: false,
            seen_classes: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn num_seen(&self) -> usize {
        self.seen_classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("d_in", self.d_in),
            ("d_w", self.d_w),
            ("d_shared", self.d_shared),
            ("att_pool", self.att_pool),
        ];
        for (name, w) in widths {
            if w == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.encoder_hidden.iter().chain(&self.semantic_hidden).any(|&w| w == 0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if self.d_in % self.att_pool != 0 {
            return Err(Error::Config(format!(
                "att_pool {} must divide d_in {}",
                self.att_pool, self.d_in
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config("leaky_slope must lie in (0,1)".into()));
        }
        if !(self.hash_beta > 0.0 && self.hash_beta.is_finite()) {
            return Err(Error::Config("hash_beta must be positive".into()));
        }
        if self.seen_classes.len() < 2 {
            return Err(Error::Config("classifier needs at least 2 seen classes".into()));
        }
        Ok(())
    }
}

/// Parameter groups, used for freezing and for per-group inspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    SketchEncoder,
    ImageEncoder,
    Attention,
    SemanticEncoder,
    DecoderXy,
    DecoderYx,
    Hash,
    Classifier,
    Gcn,
    SemanticDecoder,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamGroup::SketchEncoder => "sketch_encoder",
            ParamGroup::ImageEncoder => "image_encoder",
            ParamGroup::Attention => "attention",
            ParamGroup::SemanticEncoder => "semantic_encoder",
            ParamGroup::DecoderXy => "decoder_xy",
            ParamGroup::DecoderYx => "decoder_yx",
            ParamGroup::Hash => "hash",
            ParamGroup::Classifier => "classifier",
            ParamGroup::Gcn => "gcn",
            ParamGroup::SemanticDecoder => "semantic_decoder",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn glorot(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Result<Self> {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let data = (0..d_in * d_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Ok(Self {
            weight: Tensor::matrix(d_in, d_out, data)?,
            bias: Tensor::zeros(&[d_out])?,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Fully-connected stack with leaky ReLU between layers (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    fn glorot(rng: &mut ChaCha8Rng, d_in: usize, hidden: &[usize], d_out: usize) -> Result<Self> {
        let mut widths = vec![d_in];
        widths.extend_from_slice(hidden);
        widths.push(d_out);
        let layers = widths
            .windows(2)
            .map(|w| Linear::glorot(rng, w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map(Linear::d_out).unwrap_or(0)
    }
}

/// Every learnable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub sketch_encoder: Mlp,
    pub image_encoder: Mlp,
    pub attention: Mlp,
    pub semantic_encoder: Mlp,
    pub decoder_xy: Linear,
    pub decoder_yx: Linear,
    /// Hash projection `W_t`, `d_shared × d_shared`; codes are `sgn(e · W_t)`.
    pub hash_projection: Tensor,
    pub classifier: Linear,
    pub gcn_weight: Tensor,
    pub semantic_decoder: Option<Mlp>,
}

/// Random initialisation: Glorot-uniform weights, zero biases.
pub fn init_model(config: &ModelConfig, rng_seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let c = config;
    let sketch_encoder = Mlp::glorot(&mut rng, c.d_in, &c.encoder_hidden, c.d_shared)?;
    let image_encoder = Mlp::glorot(&mut rng, c.d_in, &c.encoder_hidden, c.d_shared)?;
    let attention = Mlp::glorot(&mut rng, c.att_pool, &[c.d_shared], c.d_shared)?;
    let semantic_encoder = Mlp::glorot(&mut rng, 2 * c.d_w, &c.semantic_hidden, c.d_shared)?;
    let decoder_xy = Linear::glorot(&mut rng, c.d_shared, c.d_shared)?;
    let decoder_yx = Linear::glorot(&mut rng, c.d_shared, c.d_shared)?;
    let hash_projection = Linear::glorot(&mut rng, c.d_shared, c.d_shared)?.weight;
    let classifier = Linear::glorot(&mut rng, c.d_shared, c.num_seen())?;
    let gcn_weight = Linear::glorot(&mut rng, c.d_w, c.d_w)?.weight;
    let semantic_decoder = if c.semantic_decoder {
        let rev: Vec<usize> = c.semantic_hidden.iter().rev().copied().collect();
        Some(Mlp::glorot(&mut rng, c.d_shared, &rev, 2 * c.d_w)?)
    } else {
        None
    };
    Ok(ModelParams {
        config: config.clone(),
        sketch_encoder,
        image_encoder,
        attention,
        semantic_encoder,
        decoder_xy,
        decoder_yx,
        hash_projection,
        classifier,
        gcn_weight,
        semantic_decoder,
    })
}

fn push_mlp<'a>(
    out: &mut Vec<(String, ParamGroup, &'a Tensor)>,
    prefix: &str,
    group: ParamGroup,
    mlp: &'a Mlp,
) {
    for (i, l) in mlp.layers.iter().enumerate() {
        out.push((format!("{prefix}.{i}.weight"), group, &l.weight));
        out.push((format!("{prefix}.{i}.bias"), group, &l.bias));
    }
}

impl ModelParams {
    /// All tensors with stable names, in the canonical flattening order.
    pub fn named_tensors(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        use ParamGroup::*;
        let mut out = Vec::new();
        push_mlp(&mut out, "sketch_encoder", SketchEncoder, &self.sketch_encoder);
        push_mlp(&mut out, "image_encoder", ImageEncoder, &self.image_encoder);
        push_mlp(&mut out, "attention", Attention, &self.attention);
        push_mlp(&mut out, "semantic_encoder", SemanticEncoder, &self.semantic_encoder);
        out.push(("decoder_xy.weight".into(), DecoderXy, &self.decoder_xy.weight));
        out.push(("decoder_xy.bias".into(), DecoderXy, &self.decoder_xy.bias));
        out.push(("decoder_yx.weight".into(), DecoderYx, &self.decoder_yx.weight));
        out.push(("decoder_yx.bias".into(), DecoderYx, &self.decoder_yx.bias));
        out.push(("hash_projection".into(), Hash, &self.hash_projection));
        out.push(("classifier.weight".into(), Classifier, &self.classifier.weight));
        out.push(("classifier.bias".into(), Classifier, &self.classifier.bias));
        out.push(("gcn_weight".into(), Gcn, &self.gcn_weight));
        if let Some(dec) = &self.semantic_decoder {
            push_mlp(&mut out, "semantic_decoder", SemanticDecoder, dec);
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|t| t.2).collect()
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        self.named_tensors().into_iter().map(|t| t.1).collect()
    }

    /// Mutable tensors in the same order as [`ModelParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        fn mlp_mut<'a>(out: &mut Vec<&'a mut Tensor>, mlp: &'a mut Mlp) {
            for l in &mut mlp.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        let mut out = Vec::new();
        mlp_mut(&mut out, &mut self.sketch_encoder);
        mlp_mut(&mut out, &mut self.image_encoder);
        mlp_mut(&mut out, &mut self.attention);
        mlp_mut(&mut out, &mut self.semantic_encoder);
        out.push(&mut self.decoder_xy.weight);
        out.push(&mut self.decoder_xy.bias);
        out.push(&mut self.decoder_yx.weight);
        out.push(&mut self.decoder_yx.bias);
        out.push(&mut self.hash_projection);
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out.push(&mut self.gcn_weight);
        if let Some(dec) = &mut self.semantic_decoder {
            mlp_mut(&mut out, dec);
        }
        out
    }

    /// Copies of all tensors, in canonical order.
    pub fn flatten(&self) -> Vec<Tensor> {
        self.tensors().into_iter().cloned().collect()
    }

    /// Replaces every tensor from a flattened list with matching shapes.
    pub fn assign(&mut self, values: &[Tensor]) -> Result<()> {
        let mut slots = self.tensors_mut();
        if slots.len() != values.len() {
            return Err(Error::Dimension(format!(
                "expected {} tensors, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            if !slot.same_shape(v) {
                return Err(Error::Dimension(format!(
                    "tensor shape {:?} does not match {:?}",
                    v.shape(),
                    slot.shape()
                )));
            }
        }
        for (slot, v) in slots.into_iter().zip(values) {
            *slot = v.clone();
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Records every tensor on `tape`; groups for which `trainable` returns
    /// false become constants.
    pub fn bind_with(&self, tape: &mut Tape, trainable: impl Fn(ParamGroup) -> bool) -> BoundModel {
        let mut vars = Vec::new();
        let mut bind = |t: &Tensor, g: ParamGroup| -> Var {
            let v = if trainable(g) {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            vars.push(v);
            v
        };
        let mut mlp = |m: &Mlp, g: ParamGroup| BoundMlp {
            layers: m
                .layers
                .iter()
                .map(|l| BoundLinear {
                    weight: bind(&l.weight, g),
                    bias: bind(&l.bias, g),
                })
                .collect(),
        };
        use ParamGroup::*;
        let sketch_encoder = mlp(&self.sketch_encoder, SketchEncoder);
        let image_encoder = mlp(&self.image_encoder, ImageEncoder);
        let attention = mlp(&self.attention, Attention);
        let semantic_encoder = mlp(&self.semantic_encoder, SemanticEncoder);
        let mut lin = |l: &Linear, g: ParamGroup| BoundLinear {
            weight: bind(&l.weight, g),
            bias: bind(&l.bias, g),
        };
        let decoder_xy = lin(&self.decoder_xy, DecoderXy);
        let decoder_yx = lin(&self.decoder_yx, DecoderYx);
        let hash = bind(&self.hash_projection, Hash);
        let classifier = BoundLinear {
            weight: bind(&self.classifier.weight, Classifier),
            bias: bind(&self.classifier.bias, Classifier),
        };
        let gcn = bind(&self.gcn_weight, Gcn);
        let semantic_decoder = self.semantic_decoder.as_ref().map(|dec| BoundMlp {
            layers: dec
                .layers
                .iter()
                .map(|l| BoundLinear {
                    weight: bind(&l.weight, SemanticDecoder),
                    bias: bind(&l.bias, SemanticDecoder),
                })
                .collect(),
        });
        BoundModel {
            config: self.config.clone(),
            sketch_encoder,
            image_encoder,
            attention,
            semantic_encoder,
            decoder_xy,
            decoder_yx,
            hash,
            classifier,
            gcn,
            semantic_decoder,
            vars,
        }
    }

    /// All groups trainable.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        self.bind_with(tape, |_| true)
    }

    /// All groups constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundModel {
        self.bind_with(tape, |_| false)
    }

    /// Per-group parameter counts, for reporting.
    pub fn group_sizes(&self) -> BTreeMap<ParamGroup, usize> {
        let mut out = BTreeMap::new();
        for (_, g, t) in self.named_tensors() {
            *out.entry(g).or_insert(0) += t.len();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            d_in: 8,
            d_w: 6,
            d_shared: 8,
            encoder_hidden: vec![12],
            semantic_hidden: vec![10],
            att_pool: 4,
            seen_classes: vec!["a".into(), "b".into(), "c".into()],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn deterministic_init() {
        let a = init_model(&small_config(), 4).unwrap();
        let b = init_model(&small_config(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_model(&small_config(), 5).unwrap());
    }

    #[test]
    fn widths_follow_d_shared() {
        for d_shared in [64, 8] {
            let cfg = ModelConfig {
                d_in: 32,
                d_shared,
                seen_classes: vec!["a".into(), "b".into()],
                ..ModelConfig::default()
            };
            let p = init_model(&cfg, 0).unwrap();
            for mlp in [&p.sketch_encoder, &p.image_encoder, &p.attention, &p.semantic_encoder] {
                assert_eq!(mlp.d_out(), d_shared);
            }
            assert_eq!(p.decoder_xy.d_out(), d_shared);
            assert_eq!(p.hash_projection.shape(), &[d_shared, d_shared]);
        }
    }

    #[test]
    fn zero_width_rejected() {
        let mut cfg = small_config();
        cfg.encoder_hidden = vec![0];
        assert!(matches!(init_model(&cfg, 0), Err(Error::Config(_))));
        let mut cfg = small_config();
        cfg.d_shared = 0;
        assert!(matches!(init_model(&cfg, 0), Err(Error::Config(_))));
        let mut cfg = small_config();
        cfg.att_pool = 3;
        assert!(matches!(init_model(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn flatten_assign_round_trip() {
        let p = init_model(&small_config(), 1).unwrap();
        let mut q = init_model(&small_config(), 2).unwrap();
        q.assign(&p.flatten()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.named_tensors().len(), p.tensors().len());
    }
}
