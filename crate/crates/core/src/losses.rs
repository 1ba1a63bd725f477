//! Objective terms and their weighted sum.
//!
//! All batch reductions are means over rows, so the weights keep the same
//! meaning at any batch size.

use crate::diffmath::{Tape, Var};
use crate::error::{Error, Result};
use crate::network::{BoundModel, CrossDirection};

/// Weights of the four objective terms plus the triplet margin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Cross-modal latent (semantic alignment) term.
    pub lambda1: f64,
    /// Cross-modal decoder term.
    pub lambda2: f64,
    /// Cross-triplet term.
    pub lambda3: f64,
    /// Classification term on relaxed hash codes.
    pub lambda4: f64,
    /// Optional semantic auto-encoder reconstruction; zero disables it.
    pub lambda5: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            lambda3: 1.0,
            lambda4: 0.01,
            lambda5: 0.0,
            alpha: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5", self.lambda5),
        ];
        for (name, v) in lambdas {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if lambdas[..4].iter().all(|(_, v)| *v == 0.0) {
            return Err(Error::Config("at least one of lambda1..lambda4 must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("margin alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.lambda1, self.lambda2, self.lambda3, self.lambda4]
    }
}

/// Component values and their weighted total for one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cmd: f64,
    pub dl: f64,
    pub triplet: f64,
    pub ce: f64,
    pub semantic: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `epoch,cmd,dl,triplet,ce,total`.
    pub fn csv_line(&self, epoch: usize) -> String {
        format!(
            "{epoch},{},{},{},{},{}",
            self.cmd, self.dl, self.triplet, self.ce, self.total
        )
    }

    pub fn scaled_add(&mut self, other: &LossBreakdown, s: f64) {
        self.cmd += s * other.cmd;
        self.dl += s * other.dl;
        self.triplet += s * other.triplet;
        self.ce += s * other.ce;
        self.semantic += s * other.semantic;
        self.total += s * other.total;
    }
}

fn same_rows(tape: &Tape, vars: &[Var], what: &str) -> Result<usize> {
    let n = tape.value(vars[0]).rows();
    for v in &vars[1..] {
        let t = tape.value(*v);
        if t.rows() != n || !t.same_shape(tape.value(vars[0])) {
            return Err(Error::Pairing(format!(
                "{what}: batches of shape {:?} and {:?} are not row-aligned",
                tape.value(vars[0]).shape(),
                t.shape()
            )));
        }
    }
    Ok(n)
}

fn mean_sq_dist(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.row_sq_norm(d)?;
    tape.mean(sq)
}

/// `mean(||f_x − f_w||² + ||f_y − f_w||²)` over class-aligned rows.
pub fn loss_cmd(tape: &mut Tape, sketch: Var, image: Var, semantic: Var) -> Result<Var> {
    same_rows(tape, &[sketch, image, semantic], "cross-modal latent loss")?;
    let a = mean_sq_dist(tape, sketch, semantic)?;
    let b = mean_sq_dist(tape, image, semantic)?;
    tape.add(a, b)
}

/// `mean(||g_xy(f_x) − f_y||² + ||g_yx(f_y) − f_x||²)` over class-aligned rows.
pub fn loss_decoder(tape: &mut Tape, model: &BoundModel, sketch: Var, image: Var) -> Result<Var> {
    same_rows(tape, &[sketch, image], "decoder loss")?;
    let to_image = model.decode_cross(tape, sketch, CrossDirection::SketchToImage)?;
    let to_sketch = model.decode_cross(tape, image, CrossDirection::ImageToSketch)?;
    let a = mean_sq_dist(tape, to_image, image)?;
    let b = mean_sq_dist(tape, to_sketch, sketch)?;
    tape.add(a, b)
}

/// Embedded triplets with their class indices.
#[derive(Clone, Debug)]
pub struct TripletBatch {
    pub anchor: Var,
    pub positive: Var,
    pub negative: Var,
    pub anchor_labels: Vec<usize>,
    pub positive_labels: Vec<usize>,
    pub negative_labels: Vec<usize>,
}

/// Per-row hinge `max(d(a,p) − d(a,n) + alpha, 0)` with Euclidean `d`; returns
/// the `n`-vector of hinge values.
pub fn triplet_hinges(tape: &mut Tape, batch: &TripletBatch, alpha: f64) -> Result<Var> {
    let n = same_rows(tape, &[batch.anchor, batch.positive, batch.negative], "triplet loss")?;
    if batch.anchor_labels.len() != n
        || batch.positive_labels.len() != n
        || batch.negative_labels.len() != n
    {
        return Err(Error::Pairing(format!("triplet batch of {n} rows has mismatched labels")));
    }
    for i in 0..n {
        if batch.positive_labels[i] != batch.anchor_labels[i] {
            return Err(Error::Contract(format!(
                "triplet row {i}: positive label {} differs from anchor label {}",
                batch.positive_labels[i], batch.anchor_labels[i]
            )));
        }
        if batch.negative_labels[i] == batch.anchor_labels[i] {
            return Err(Error::Contract(format!(
                "triplet row {i}: negative shares the anchor label {}",
                batch.anchor_labels[i]
            )));
        }
    }
    let dp = tape.sub(batch.anchor, batch.positive)?;
    let dp = tape.row_norm(dp)?;
    let dn = tape.sub(batch.anchor, batch.negative)?;
    let dn = tape.row_norm(dn)?;
    let diff = tape.sub(dp, dn)?;
    let shifted = tape.add_scalar(diff, alpha)?;
    tape.relu(shifted)
}

/// Mean hinge over a triplet batch.
pub fn loss_triplet(tape: &mut Tape, batch: &TripletBatch, alpha: f64) -> Result<Var> {
    let h = triplet_hinges(tape, batch, alpha)?;
    tape.mean(h)
}

/// Mean of the per-anchor-type sub-batch losses.
pub fn combine_triplet_parts(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    match parts.len() {
        0 => Err(Error::Contract("no triplet sub-batches".into())),
        1 => Ok(parts[0]),
        n => {
            let terms: Vec<(Var, f64)> = parts.iter().map(|&p| (p, 1.0 / n as f64)).collect();
            tape.weighted_sum(&terms)
        }
    }
}

/// `CE(S_X) + CE(S_Y)` on relaxed codes, each a mean over the batch.
pub fn loss_ce(
    tape: &mut Tape,
    model: &BoundModel,
    sketch_codes: Var,
    image_codes: Var,
    labels: &[usize],
) -> Result<Var> {
    let c = model.config.num_seen();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Contract(format!(
            "label index {bad} is not a seen class (have {c})"
        )));
    }
    same_rows(tape, &[sketch_codes, image_codes], "classification loss")?;
    let ls = model.classify_logits(tape, sketch_codes)?;
    let li = model.classify_logits(tape, image_codes)?;
    let a = tape.softmax_cross_entropy(ls, labels)?;
    let b = tape.softmax_cross_entropy(li, labels)?;
    tape.add(a, b)
}

/// Scalar term handles for one objective evaluation. `semantic` is the
/// optional auto-encoder term.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cmd: Var,
    pub dl: Var,
    pub triplet: Var,
    pub ce: Var,
    pub semantic: Option<Var>,
}

/// Weighted total recorded on the tape, plus the numeric breakdown.
pub fn loss_total(
    tape: &mut Tape,
    terms: &LossTerms,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let mut weighted = vec![
        (terms.cmd, weights.lambda1),
        (terms.dl, weights.lambda2),
        (terms.triplet, weights.lambda3),
        (terms.ce, weights.lambda4),
    ];
    if let Some(s) = terms.semantic {
        weighted.push((s, weights.lambda5));
    }
    let total = tape.weighted_sum(&weighted)?;
    let value = |v: Var| tape.value(v).data()[0];
    let breakdown = LossBreakdown {
        cmd: value(terms.cmd),
        dl: value(terms.dl),
        triplet: value(terms.triplet),
        ce: value(terms.ce),
        semantic: terms.semantic.map(value).unwrap_or(0.0),
        total: value(total),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::Tensor;
    use crate::network::{init_model, ModelConfig};

    fn mat(tape: &mut Tape, rows: &[&[f64]]) -> Var {
        tape.constant(Tensor::from_rows(rows).unwrap())
    }

    fn model(tape: &mut Tape, d: usize) -> (crate::network::ModelParams, BoundModel) {
        let cfg = ModelConfig {
            d_in: 4,
            d_w: 2,
            d_shared: d,
            encoder_hidden: vec![],
            semantic_hidden: vec![],
            att_pool: 2,
            seen_classes: (0..4).map(|i| format!("c{i}")).collect(),
            ..ModelConfig::default()
        };
        let mut p = init_model(&cfg, 0).unwrap();
        p.decoder_xy.weight = Tensor::identity(d).unwrap();
        p.decoder_yx.weight = Tensor::identity(d).unwrap();
        let b = p.bind(tape);
        (p, b)
    }

    #[test]
    fn cmd_examples() {
        let mut tape = Tape::new();
        let s = mat(&mut tape, &[&[1.0, 0.0]]);
        let i = mat(&mut tape, &[&[0.0, 1.0]]);
        let w = mat(&mut tape, &[&[0.0, 0.0]]);
        let l = loss_cmd(&mut tape, s, i, w).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 2.0);
        let l0 = loss_cmd(&mut tape, s, s, s).unwrap();
        assert_eq!(tape.value(l0).item().unwrap(), 0.0);
        let s2 = mat(&mut tape, &[&[2.0, 0.0]]);
        let i2 = mat(&mut tape, &[&[0.0, 2.0]]);
        let l2 = loss_cmd(&mut tape, s2, i2, w).unwrap();
        assert_eq!(tape.value(l2).item().unwrap(), 8.0);
        let two = mat(&mut tape, &[&[0.0, 0.0], &[1.0, 1.0]]);
        assert!(matches!(loss_cmd(&mut tape, s, i, two), Err(Error::Pairing(_))));
    }

    #[test]
    fn decoder_examples() {
        let mut tape = Tape::new();
        let (_, m) = model(&mut tape, 2);
        let s = mat(&mut tape, &[&[1.0, 0.0]]);
        let i = mat(&mut tape, &[&[0.0, 0.0]]);
        let l = loss_decoder(&mut tape, &m, s, i).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 2.0);
        let l0 = loss_decoder(&mut tape, &m, s, s).unwrap();
        assert_eq!(tape.value(l0).item().unwrap(), 0.0);
    }

    #[test]
    fn decoder_loss_symmetric_under_swap() {
        let mut tape = Tape::new();
        let (mut p, _) = model(&mut tape, 2);
        p.decoder_xy.weight = Tensor::matrix(2, 2, vec![0.5, 0.2, -0.3, 1.1]).unwrap();
        p.decoder_yx.weight = Tensor::matrix(2, 2, vec![0.9, -0.4, 0.1, 0.7]).unwrap();
        let mut swapped = p.clone();
        std::mem::swap(&mut swapped.decoder_xy, &mut swapped.decoder_yx);
        let mut tape = Tape::new();
        let m = p.bind(&mut tape);
        let ms = swapped.bind(&mut tape);
        let s = mat(&mut tape, &[&[1.0, -2.0], &[0.3, 0.4]]);
        let i = mat(&mut tape, &[&[0.5, 0.5], &[-1.0, 2.0]]);
        let a = loss_decoder(&mut tape, &m, s, i).unwrap();
        let b = loss_decoder(&mut tape, &ms, i, s).unwrap();
        let (a, b) = (tape.value(a).item().unwrap(), tape.value(b).item().unwrap());
        assert!((a - b).abs() < 1e-12);
    }

    fn triplet(tape: &mut Tape, a: &[f64], p: &[f64], n: &[f64]) -> TripletBatch {
        TripletBatch {
            anchor: mat(tape, &[a]),
            positive: mat(tape, &[p]),
            negative: mat(tape, &[n]),
            anchor_labels: vec![0],
            positive_labels: vec![0],
            negative_labels: vec![1],
        }
    }

    #[test]
    fn triplet_examples() {
        let mut tape = Tape::new();
        let b = triplet(&mut tape, &[0.0, 0.0], &[0.0, 0.0], &[2.0, 0.0]);
        let l = loss_triplet(&mut tape, &b, 1.0).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
        let b = triplet(&mut tape, &[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]);
        let l = loss_triplet(&mut tape, &b, 1.0).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 1.0);
    }

    #[test]
    fn triplet_label_contract() {
        let mut tape = Tape::new();
        let mut b = triplet(&mut tape, &[0.0], &[1.0], &[2.0]);
        b.positive_labels = vec![3];
        assert!(matches!(loss_triplet(&mut tape, &b, 1.0), Err(Error::Contract(_))));
        b.positive_labels = vec![0];
        b.negative_labels = vec![0];
        assert!(matches!(loss_triplet(&mut tape, &b, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn ce_uniform_logits() {
        let mut tape = Tape::new();
        let (mut p, _) = model(&mut tape, 3);
        p.classifier.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let m = p.bind(&mut tape);
        let codes = mat(&mut tape, &[&[0.3, -0.2, 0.9], &[1.0, 1.0, -1.0]]);
        let l = loss_ce(&mut tape, &m, codes, codes, &[0, 3]).unwrap();
        let v = tape.value(l).item().unwrap();
        assert!((v - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!((v - 2.7726).abs() < 1e-4);
        assert!(matches!(
            loss_ce(&mut tape, &m, codes, codes, &[0, 4]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ce_separable_case_is_small() {
        // codes are one-hot sign patterns; classifier aligned with them
        let mut tape = Tape::new();
        let (mut p, _) = model(&mut tape, 4);
        let mut w = vec![0.0; 16];
        for k in 0..4 {
            w[k * 4 + k] = 10.0;
        }
        p.classifier.weight = Tensor::matrix(4, 4, w).unwrap();
        let mut tape = Tape::new();
        let m = p.bind(&mut tape);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|k| (0..4).map(|j| if j == k { 1.0 } else { -1.0 }).collect())
            .collect();
        let codes = tape.constant(Tensor::from_rows(&rows).unwrap());
        let l = loss_ce(&mut tape, &m, codes, codes, &[0, 1, 2, 3]).unwrap();
        assert!(tape.value(l).item().unwrap() <= 0.01);
    }

    #[test]
    fn total_masks_and_combines() {
        let mut tape = Tape::new();
        let vals = [0.7, 1.3, 0.4, 2.2];
        let v: Vec<Var> = vals.iter().map(|&x| tape.constant(Tensor::scalar(x))).collect();
        let terms = LossTerms { cmd: v[0], dl: v[1], triplet: v[2], ce: v[3], semantic: None };
        let only_cmd = LossWeights { lambda1: 1.0, lambda2: 0.0, lambda3: 0.0, lambda4: 0.0, ..Default::default() };
        let (_, b) = loss_total(&mut tape, &terms, &only_cmd).unwrap();
        assert_eq!(b.total, b.cmd);
        let (_, b) = loss_total(&mut tape, &terms, &LossWeights::default()).unwrap();
        let want = 0.1 * 0.7 + 0.1 * 1.3 + 1.0 * 0.4 + 0.01 * 2.2;
        assert!((b.total - want).abs() < 1e-12);

        let zeros: Vec<Var> = (0..4).map(|_| tape.constant(Tensor::scalar(0.0))).collect();
        let terms0 = LossTerms { cmd: zeros[0], dl: zeros[1], triplet: zeros[2], ce: zeros[3], semantic: None };
        let (_, b) = loss_total(&mut tape, &terms0, &LossWeights::default()).unwrap();
        assert_eq!(b.total, 0.0);

        let neg = LossWeights { lambda2: -0.1, ..Default::default() };
        assert!(matches!(loss_total(&mut tape, &terms, &neg), Err(Error::Config(_))));
        let none = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, lambda4: 0.0, ..Default::default() };
        assert!(matches!(none.validate(), Err(Error::Config(_))));
    }
}
