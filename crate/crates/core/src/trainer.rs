//! Optimisation loop: triad batches, Adam updates, convergence tracking.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{sample_triads, Dataset, Modality, Triad, TriadMode, WordTable, ZeroShotSplit};
use crate::diffmath::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{
    combine_triplet_parts, loss_ce, loss_cmd, loss_decoder, loss_total, loss_triplet,
    LossBreakdown, LossTerms, LossWeights, TripletBatch,
};
use crate::network::{
    load_checkpoint, save_checkpoint, BoundModel, ImageGate, ModelParams, ParamGroup,
};
use crate::semantics::{build_semantic_graph, word_matrix, SemanticGraph};

/// Triad composition per batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Sketch-anchored triads only.
    Sbir,
    /// Alternating sketch- and image-anchored triads.
    CrossModal,
}

impl TrainMode {
    pub fn triad_mode(self) -> TriadMode {
        match self {
            TrainMode::Sbir => TriadMode::SketchAnchored,
            TrainMode::CrossModal => TriadMode::Balanced,
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sbir" => Ok(TrainMode::Sbir),
            "cross_modal" => Ok(TrainMode::CrossModal),
            other => Err(Error::Config(format!(
                "unknown training mode {other:?} (expected sbir or cross_modal)"
            ))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Sbir => "sbir",
            TrainMode::CrossModal => "cross_modal",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub mode: TrainMode,
    /// One optimiser sub-step per active loss term instead of the summed objective.
    pub alternating: bool,
    pub seed: u64,
    /// Triads drawn per epoch; 0 means one per seen-class record.
    pub triads_per_epoch: usize,
    /// Include the MST graph features in the composed prototypes.
    pub use_graph: bool,
    /// Build the graph over seen and unseen classes.
    pub full_graph: bool,
    /// Keep the semantic encoder and GCN weight at their initial values.
    pub freeze_semantic: bool,
    /// Auto-encoder epochs on the semantic branch before joint training.
    pub semantic_pretrain_epochs: usize,
    pub convergence_window: usize,
    pub convergence_tol: f64,
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 200,
            learning_rate: 0.001,
            weights: LossWeights::default(),
            mode: TrainMode::CrossModal,
            alternating: false,
            seed: 0,
            triads_per_epoch: 0,
            use_graph: true,
            full_graph: false,
            freeze_semantic: false,
            semantic_pretrain_epochs: 0,
            convergence_window: 10,
            convergence_tol: 1e-6,
            divergence_threshold: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.convergence_window == 0 {
            return Err(Error::Config("convergence_window must be positive".into()));
        }
        self.weights.validate()
    }
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// Bias-corrected Adam update applied in place.
///
/// Non-finite gradients reject the whole step before anything is modified.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    hp: &Adam,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Dimension(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "gradient {i} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient {i} holds non-finite values; step rejected")));
        }
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect::<Result<_>>()?;
        state.v = state.m.clone();
    }
    state.t += 1;
    let c1 = 1.0 - hp.beta1.powi(state.t as i32);
    let c2 = 1.0 - hp.beta2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (pd, gd) = (p.data_mut(), g.data());
        for (k, (md, vd)) in m.data_mut().iter_mut().zip(v.data_mut().iter_mut()).enumerate() {
            let gk = gd[k];
            *md = hp.beta1 * *md + (1.0 - hp.beta1) * gk;
            *vd = hp.beta2 * *vd + (1.0 - hp.beta2) * gk * gk;
            pd[k] -= hp.lr * (*md / c1) / ((*vd / c2).sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Word vectors and class graph used to build semantic embeddings on a tape.
#[derive(Clone, Debug)]
pub struct SemanticContext {
    graph: SemanticGraph,
    words: Tensor,
    use_graph: bool,
    /// Graph row of each seen class, in classifier order.
    seen_rows: Vec<usize>,
}

impl SemanticContext {
    pub fn new(
        words: &WordTable,
        split: &ZeroShotSplit,
        seen_classes: &[String],
        use_graph: bool,
        full_graph: bool,
    ) -> Result<Self> {
        let labels: Vec<String> = if full_graph {
            split.all().into_iter().collect()
        } else {
            split.seen_list()
        };
        let table = words.subset(&labels)?;
        let graph = build_semantic_graph(&table)?;
        let seen_rows = seen_classes
            .iter()
            .map(|l| {
                graph
                    .position(l)
                    .ok_or_else(|| Error::Schema(format!("seen class {l} is missing from the graph")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            words: word_matrix(&table)?,
            graph,
            use_graph,
            seen_rows,
        })
    }

    pub fn graph(&self) -> &SemanticGraph {
        &self.graph
    }

    /// Composed prototypes `[word | graph]` for every graph node.
    pub fn composed(&self, tape: &mut Tape, model: &BoundModel) -> Result<Var> {
        let words = tape.constant(self.words.clone());
        let graph = if self.use_graph {
            self.graph.graph_convolve(tape, words, model.gcn)?
        } else {
            tape.constant(Tensor::zeros(self.words.shape())?)
        };
        tape.concat_cols(words, graph)
    }
}

/// Resolves seen-class labels to classifier indices and enforces zero-shot purity.
#[derive(Clone, Debug)]
pub struct ClassIndex(BTreeMap<String, usize>);

impl ClassIndex {
    pub fn new(seen_classes: &[String]) -> Self {
        Self(seen_classes.iter().cloned().enumerate().map(|(i, l)| (l, i)).collect())
    }

    pub fn get(&self, label: &str) -> Result<usize> {
        self.0.get(label).copied().ok_or_else(|| {
            Error::Contract(format!("record of class {label} is not a seen class"))
        })
    }
}

fn rows(dataset: &Dataset, idx: impl Iterator<Item = usize>) -> Result<Tensor> {
    let r: Vec<&[f64]> = idx.map(|i| dataset.record(i).feature.as_slice()).collect();
    Tensor::from_rows(&r)
}

/// Records every loss term for one triad batch.
///
/// Each triad's anchor/positive pair supplies the class-aligned rows of the
/// latent, decoder and classification terms. Images are gated by the sketch
/// they are compared against.
pub fn batch_terms(
    tape: &mut Tape,
    model: &BoundModel,
    semantics: &SemanticContext,
    classes: &ClassIndex,
    dataset: &Dataset,
    batch: &[Triad],
    weights: &LossWeights,
) -> Result<LossTerms> {
    if batch.is_empty() {
        return Err(Error::Contract("empty triad batch".into()));
    }
    let mut labels = Vec::with_capacity(batch.len());
    let mut neg_labels = Vec::with_capacity(batch.len());
    for t in batch {
        t.validate(dataset)?;
        let a = classes.get(&dataset.record(t.anchor).label)?;
        classes.get(&dataset.record(t.positive).label)?;
        neg_labels.push(classes.get(&dataset.record(t.negative).label)?);
        labels.push(a);
    }
    let pairs: Vec<(usize, usize)> = batch.iter().map(Triad::pair).collect();
    let s = tape.constant(rows(dataset, pairs.iter().map(|p| p.0))?);
    let i = tape.constant(rows(dataset, pairs.iter().map(|p| p.1))?);
    let es = model.encode_sketch(tape, s)?;
    let gate = model.attention_gate(tape, s)?;
    let ei = model.encode_image(tape, i, ImageGate::Precomputed(gate))?;

    let composed = semantics.composed(tape, model)?;
    let sem_all = model.encode_semantic(tape, composed)?;
    let sem_rows: Vec<usize> = labels.iter().map(|&l| semantics.seen_rows[l]).collect();
    let sem = tape.gather_rows(sem_all, &sem_rows)?;

    let cmd = loss_cmd(tape, es, ei, sem)?;
    let dl = loss_decoder(tape, model, es, ei)?;

    let sketch_anchored: Vec<usize> = (0..batch.len())
        .filter(|&k| batch[k].anchor_modality == Modality::Sketch)
        .collect();
    let image_anchored: Vec<usize> = (0..batch.len())
        .filter(|&k| batch[k].anchor_modality == Modality::Image)
        .collect();
    let pick = |idx: &[usize], v: &[usize]| idx.iter().map(|&k| v[k]).collect::<Vec<_>>();
    let mut parts = Vec::new();
    if !sketch_anchored.is_empty() {
        let neg = tape.constant(rows(dataset, sketch_anchored.iter().map(|&k| batch[k].negative))?);
        let g = tape.gather_rows(gate, &sketch_anchored)?;
        let en = model.encode_image(tape, neg, ImageGate::Precomputed(g))?;
        let tb = TripletBatch {
            anchor: tape.gather_rows(es, &sketch_anchored)?,
            positive: tape.gather_rows(ei, &sketch_anchored)?,
            negative: en,
            anchor_labels: pick(&sketch_anchored, &labels),
            positive_labels: pick(&sketch_anchored, &labels),
            negative_labels: pick(&sketch_anchored, &neg_labels),
        };
        parts.push(loss_triplet(tape, &tb, weights.alpha)?);
    }
    if !image_anchored.is_empty() {
        let neg = tape.constant(rows(dataset, image_anchored.iter().map(|&k| batch[k].negative))?);
        let en = model.encode_sketch(tape, neg)?;
        let tb = TripletBatch {
            anchor: tape.gather_rows(ei, &image_anchored)?,
            positive: tape.gather_rows(es, &image_anchored)?,
            negative: en,
            anchor_labels: pick(&image_anchored, &labels),
            positive_labels: pick(&image_anchored, &labels),
            negative_labels: pick(&image_anchored, &neg_labels),
        };
        parts.push(loss_triplet(tape, &tb, weights.alpha)?);
    }
    let triplet = combine_triplet_parts(tape, &parts)?;

    let beta = model.config.hash_beta;
    let cs = model.hash_relaxed(tape, es, beta)?;
    let ci = model.hash_relaxed(tape, ei, beta)?;
    let ce = loss_ce(tape, model, cs, ci, &labels)?;

    let semantic = if weights.lambda5 > 0.0 {
        semantic_reconstruction(tape, model, composed, sem_all)?
    } else {
        None
    };
    Ok(LossTerms { cmd, dl, triplet, ce, semantic })
}

fn semantic_reconstruction(
    tape: &mut Tape,
    model: &BoundModel,
    composed: Var,
    sem: Var,
) -> Result<Option<Var>> {
    match model.decode_semantic(tape, sem)? {
        Some(rec) => {
            let d = tape.sub(rec, composed)?;
            let sq = tape.row_sq_norm(d)?;
            Ok(Some(tape.mean(sq)?))
        }
        None => Ok(None),
    }
}

/// Weighted objective for one batch.
pub fn batch_loss(
    tape: &mut Tape,
    model: &BoundModel,
    semantics: &SemanticContext,
    classes: &ClassIndex,
    dataset: &Dataset,
    batch: &[Triad],
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let terms = batch_terms(tape, model, semantics, classes, dataset, batch, weights)?;
    loss_total(tape, &terms, weights)
}

/// Per-epoch loss history, serialised as the metrics log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub epochs: Vec<LossBreakdown>,
}

pub const METRICS_HEADER: &str = "#crossat-metrics v1";

impl MetricsLog {
    pub fn to_text(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\nepoch,cmd,dl,triplet,ce,total\n");
        for (e, b) in self.epochs.iter().enumerate() {
            s.push_str(&b.csv_line(e + 1));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn totals(&self) -> Vec<f64> {
        self.epochs.iter().map(|b| b.total).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StopReason {
    Completed,
    Converged { epoch: usize },
    /// Parameters are those of the last finite epoch.
    Diverged { epoch: usize, total: f64 },
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: ModelParams,
    pub log: MetricsLog,
    pub stop: StopReason,
}

impl FitResult {
    /// Turns a divergence into [`Error::Diverged`].
    pub fn into_result(self) -> Result<Self> {
        match self.stop {
            StopReason::Diverged { epoch, total } => Err(Error::Diverged { epoch, total }),
            _ => Ok(self),
        }
    }
}

fn is_semantic(g: ParamGroup) -> bool {
    matches!(g, ParamGroup::SemanticEncoder | ParamGroup::Gcn | ParamGroup::SemanticDecoder)
}

fn gradients_for(model: &BoundModel, params: &ModelParams, tape: Tape, loss: Var) -> Result<Vec<Tensor>> {
    let g = tape.backward(loss)?;
    Ok(model
        .vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| g.get_or_zeros(v, t.shape()))
        .collect())
}

struct Step<'a> {
    semantics: &'a SemanticContext,
    classes: &'a ClassIndex,
    dataset: &'a Dataset,
    config: &'a TrainConfig,
    hp: Adam,
}

impl Step<'_> {
    fn bind(&self, params: &ModelParams, tape: &mut Tape) -> BoundModel {
        if self.config.freeze_semantic {
            params.bind_with(tape, |g| !is_semantic(g))
        } else {
            params.bind(tape)
        }
    }

    fn joint(&self, params: &mut ModelParams, state: &mut AdamState, batch: &[Triad]) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let model = self.bind(params, &mut tape);
        let w = &self.config.weights;
        let (loss, breakdown) =
            batch_loss(&mut tape, &model, self.semantics, self.classes, self.dataset, batch, w)?;
        let grads = gradients_for(&model, params, tape, loss)?;
        adam_step(&mut params.tensors_mut(), &grads, state, &self.hp)?;
        Ok(breakdown)
    }

    /// One sub-step per active term; the reported breakdown is measured before
    /// the first sub-step.
    fn alternating(&self, params: &mut ModelParams, state: &mut AdamState, batch: &[Triad]) -> Result<LossBreakdown> {
        let w = self.config.weights;
        let mut first = None;
        for k in 0..5 {
            let lambda = [w.lambda1, w.lambda2, w.lambda3, w.lambda4, w.lambda5][k];
            if lambda == 0.0 {
                continue;
            }
            let mut tape = Tape::new();
            let model = self.bind(params, &mut tape);
            let terms = batch_terms(&mut tape, &model, self.semantics, self.classes, self.dataset, batch, &w)?;
            if first.is_none() {
                first = Some(loss_total(&mut tape, &terms, &w)?.1);
            }
            let term = match k {
                0 => terms.cmd,
                1 => terms.dl,
                2 => terms.triplet,
                3 => terms.ce,
                _ => match terms.semantic {
                    Some(s) => s,
                    None => continue,
                },
            };
            let loss = tape.scale(term, lambda)?;
            let grads = gradients_for(&model, params, tape, loss)?;
            adam_step(&mut params.tensors_mut(), &grads, state, &self.hp)?;
        }
        first.ok_or_else(|| Error::Config("no active loss term".into()))
    }
}

/// Auto-encoder pretraining of the semantic branch over all graph nodes.
pub fn pretrain_semantic(
    params: &mut ModelParams,
    semantics: &SemanticContext,
    epochs: usize,
    learning_rate: f64,
) -> Result<Vec<f64>> {
    if params.semantic_decoder.is_none() {
        return Err(Error::Config("semantic pretraining needs semantic_decoder = true".into()));
    }
    let hp = Adam::new(learning_rate);
    let mut state = AdamState::default();
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut tape = Tape::new();
        let model = params.bind_with(&mut tape, is_semantic);
        let composed = semantics.composed(&mut tape, &model)?;
        let sem = model.encode_semantic(&mut tape, composed)?;
        let loss = semantic_reconstruction(&mut tape, &model, composed, sem)?
            .expect("decoder present");
        history.push(tape.value(loss).data()[0]);
        let grads = gradients_for(&model, params, tape, loss)?;
        adam_step(&mut params.tensors_mut(), &grads, &mut state, &hp)?;
    }
    Ok(history)
}

fn check_seen_only(dataset: &Dataset, split: &ZeroShotSplit, batch: &[Triad]) -> Result<()> {
    for t in batch {
        for idx in [t.anchor, t.positive, t.negative] {
            let r = dataset.record(idx);
            if !split.seen.contains(&r.label) {
                return Err(Error::Contract(format!(
                    "record {} of unseen class {} reached the training batch",
                    r.id, r.label
                )));
            }
        }
    }
    Ok(())
}

/// Trains `params` on the seen classes of `split`.
///
/// Divergence (total above the threshold or a non-finite value) stops training
/// and returns the parameters of the last good epoch.
pub fn fit(
    dataset: &Dataset,
    split: &ZeroShotSplit,
    words: &WordTable,
    mut params: ModelParams,
    config: &TrainConfig,
) -> Result<FitResult> {
    config.validate()?;
    params.config.validate()?;
    split.validate_against(dataset)?;
    let seen = split.seen_list();
    if params.config.seen_classes != seen {
        return Err(Error::Config(format!(
            "model classifier covers [{}] but the split's seen classes are [{}]",
            params.config.seen_classes.join(", "),
            seen.join(", ")
        )));
    }
    let mut log = MetricsLog::default();
    if config.epochs == 0 {
        return Ok(FitResult { params, log, stop: StopReason::Completed });
    }
    let semantics = SemanticContext::new(words, split, &seen, config.use_graph, config.full_graph)?;
    let classes = ClassIndex::new(&seen);
    if config.semantic_pretrain_epochs > 0 {
        pretrain_semantic(&mut params, &semantics, config.semantic_pretrain_epochs, config.learning_rate)?;
    }
    let per_epoch = if config.triads_per_epoch == 0 {
        dataset.records().iter().filter(|r| split.seen.contains(&r.label)).count()
    } else {
        config.triads_per_epoch
    };
    let step = Step {
        semantics: &semantics,
        classes: &classes,
        dataset,
        config,
        hp: Adam::new(config.learning_rate),
    };
    let mut state = AdamState::default();
    let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
    let mut last_good = params.clone();

    for epoch in 1..=config.epochs {
        let triads = sample_triads(dataset, split, per_epoch, config.mode.triad_mode(), seeds.random())?;
        let mut sum = LossBreakdown::default();
        let mut failure = None;
        for batch in triads.chunks(config.batch_size) {
            check_seen_only(dataset, split, batch)?;
            let r = if config.alternating {
                step.alternating(&mut params, &mut state, batch)
            } else {
                step.joint(&mut params, &mut state, batch)
            };
            match r {
                Ok(b) => sum.scaled_add(&b, batch.len() as f64 / triads.len() as f64),
                Err(Error::NonFinite(_)) => {
                    failure = Some(f64::NAN);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let total = failure.unwrap_or(sum.total);
        if !total.is_finite() || total > config.divergence_threshold || !params.is_finite() {
            log::warn!("training diverged at epoch {epoch} (total {total}); keeping epoch {} parameters", epoch - 1);
            return Ok(FitResult {
                params: last_good,
                log,
                stop: StopReason::Diverged { epoch, total },
            });
        }
        log::debug!("epoch {epoch}: {}", sum.csv_line(epoch));
        log.epochs.push(sum);
        last_good.clone_from(&params);
        let w = config.convergence_window;
        if log.epochs.len() > w {
            let then = log.epochs[log.epochs.len() - 1 - w].total;
            if (then - total) / then.abs().max(f64::MIN_POSITIVE) < config.convergence_tol {
                log::info!("converged at epoch {epoch}");
                return Ok(FitResult { params, log, stop: StopReason::Converged { epoch } });
            }
        }
    }
    Ok(FitResult { params, log, stop: StopReason::Completed })
}

pub fn checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    save_checkpoint(params, path)
}

pub fn restore(path: &Path) -> Result<ModelParams> {
    load_checkpoint(path)
}
