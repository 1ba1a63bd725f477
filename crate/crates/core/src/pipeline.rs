//! End-to-end runs: synthesise, train, evaluate, and the ablation grid.

use std::fmt;

use crate::datamodel::{make_split, push_values, Modality, synth_generate, Dataset, SynthConfig, WordTable, ZeroShotSplit};
use crate::error::Result;
use crate::eval::{evaluate, evaluate_classes, permutation_null, EvalOptions, EvalReport, NullEstimate};
use crate::losses::LossWeights;
use crate::network::{init_model, ModelConfig, ModelParams, TernaryCode};
use crate::retrieval::{Gating, Metric};
use crate::trainer::{fit, FitResult, TrainConfig};

/// Architecture settings that do not depend on the data.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub d_shared: usize,
    pub encoder_hidden: Vec<usize>,
    pub semantic_hidden: Vec<usize>,
    pub att_pool: usize,
    pub leaky_slope: f64,
    pub hash_beta: f64,
    pub semantic_decoder: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d_shared: m.d_shared,
            encoder_hidden: m.encoder_hidden,
            semantic_hidden: m.semantic_hidden,
            att_pool: m.att_pool,
            leaky_slope: m.leaky_slope,
            hash_beta: m.hash_beta,
            semantic_decoder: m.semantic_decoder,
        }
    }
}

impl ArchConfig {
    /// Completes the architecture with data-dependent widths and the seen classes.
    pub fn model_config(&self, d_in: usize, d_w: usize, split: &ZeroShotSplit) -> ModelConfig {
        ModelConfig {
            d_in,
            d_w,
            d_shared: self.d_shared,
            encoder_hidden: self.encoder_hidden.clone(),
            semantic_hidden: self.semantic_hidden.clone(),
            att_pool: self.att_pool,
            leaky_slope: self.leaky_slope,
            hash_beta: self.hash_beta,
            semantic_decoder: self.semantic_decoder,
            seen_classes: split.seen_list(),
        }
    }
}

/// Initialises a model sized for `dataset`, `words` and `split`.
pub fn init_for(
    arch: &ArchConfig,
    dataset: &Dataset,
    words: &WordTable,
    split: &ZeroShotSplit,
    seed: u64,
) -> Result<ModelParams> {
    init_model(&arch.model_config(dataset.d_in(), words.dim(), split), seed)
}

/// One synthetic train/evaluate run.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub synth: SynthConfig,
    pub unseen_classes: usize,
    pub split_seed: u64,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub k: usize,
    pub gating: Gating,
    pub null_shuffles: usize,
}

impl Experiment {
    /// The desk-scale benchmark: 8 classes (2 unseen), 40 records per class
    /// and modality, 32-wide features, a 16-wide shared space. Gallery images
    /// are gated by the query sketch, as they are during training.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            synth: SynthConfig {
                classes: 8,
                per_class_per_modality: 40,
                d_in: 32,
                modality_shift: 1.0,
                noise: 0.3,
                seed,
                ..SynthConfig::default()
            },
            unseen_classes: 2,
            split_seed: seed,
            arch: ArchConfig { d_shared: 16, ..ArchConfig::default() },
            train: TrainConfig { seed, ..TrainConfig::default() },
            k: 100,
            gating: Gating::QueryConditioned,
            null_shuffles: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub fit: FitResult,
    pub split: ZeroShotSplit,
    pub seen: EvalReport,
    pub unseen: EvalReport,
    pub unseen_hashed: EvalReport,
    pub null: NullEstimate,
}

pub fn prepare(exp: &Experiment) -> Result<(Dataset, WordTable, ZeroShotSplit)> {
    let (ds, words) = synth_generate(&exp.synth)?;
    let split = make_split(ds.classes(), exp.unseen_classes, exp.split_seed)?;
    Ok((ds, words, split))
}

/// Evaluation settings shared by experiment runs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalPlan {
    pub k: usize,
    pub gating: Gating,
    pub null_shuffles: usize,
}

/// Trains on the seen classes, then scores seen and unseen sketch-to-image retrieval.
pub fn train_and_evaluate(
    dataset: &Dataset,
    words: &WordTable,
    split: &ZeroShotSplit,
    arch: &ArchConfig,
    train: &TrainConfig,
    plan: &EvalPlan,
) -> Result<ExperimentResult> {
    let params = init_for(arch, dataset, words, split, train.seed)?;
    let fit = fit(dataset, split, words, params, train)?.into_result()?;
    let opts = EvalOptions { k: plan.k, gating: plan.gating, ..EvalOptions::default() };
    let (seen, _) = evaluate_classes(&fit.params, dataset, &split.seen, &opts)?;
    let (unseen, rankings) = evaluate(&fit.params, dataset, split, &opts)?;
    let hashed_opts = EvalOptions { metric: Metric::Hamming, ..opts };
    let (unseen_hashed, _) = evaluate(&fit.params, dataset, split, &hashed_opts)?;
    let null = permutation_null(&rankings, plan.null_shuffles, None, train.seed)?;
    Ok(ExperimentResult { fit, split: split.clone(), seen, unseen, unseen_hashed, null })
}

pub fn run_experiment(exp: &Experiment) -> Result<ExperimentResult> {
    let (ds, words, split) = prepare(exp)?;
    let plan = EvalPlan { k: exp.k, gating: exp.gating, null_shuffles: exp.null_shuffles };
    train_and_evaluate(&ds, &words, &split, &exp.arch, &exp.train, &plan)
}

/// Switches of the ablation grid; `true` is the full model's setting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub graph: bool,
    pub decoder_loss: bool,
    pub triplet_loss: bool,
    /// Learned (true) or fixed (false) semantic space.
    pub latent_semantic: bool,
    /// Graph over seen and unseen classes.
    pub full_graph: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        graph: true,
        decoder_loss: true,
        triplet_loss: true,
        latent_semantic: true,
        full_graph: false,
    };

    /// Applies the switches to a training configuration.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let weights = LossWeights {
            lambda2: if self.decoder_loss { base.weights.lambda2 } else { 0.0 },
            lambda3: if self.triplet_loss { base.weights.lambda3 } else { 0.0 },
            ..base.weights
        };
        TrainConfig {
            weights,
            use_graph: self.graph,
            full_graph: self.full_graph,
            freeze_semantic: !self.latent_semantic,
            ..base.clone()
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on = |b: bool| if b { "on" } else { "off" };
        write!(
            f,
            "graph={} decoder={} triplet={} semantic={} graph_scope={}",
            on(self.graph),
            on(self.decoder_loss),
            on(self.triplet_loss),
            if self.latent_semantic { "latent" } else { "fixed" },
            if self.full_graph { "seen+unseen" } else { "seen" }
        )
    }
}

/// Which switches the grid varies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AblationGrid {
    pub graph: bool,
    pub decoder_loss: bool,
    pub triplet_loss: bool,
    pub latent_semantic: bool,
    pub full_graph: bool,
}

impl AblationGrid {
    pub fn all() -> Self {
        Self { graph: true, decoder_loss: true, triplet_loss: true, latent_semantic: true, full_graph: true }
    }

    /// Full factorial over the enabled switches; the full model comes first.
    pub fn cells(&self) -> Vec<Ablation> {
        let mut cells = vec![Ablation::FULL];
        let toggles: [(bool, fn(&mut Ablation)); 5] = [
            (self.graph, |a| a.graph = !a.graph),
            (self.decoder_loss, |a| a.decoder_loss = !a.decoder_loss),
            (self.triplet_loss, |a| a.triplet_loss = !a.triplet_loss),
            (self.latent_semantic, |a| a.latent_semantic = !a.latent_semantic),
            (self.full_graph, |a| a.full_graph = !a.full_graph),
        ];
        for (enabled, toggle) in toggles {
            if enabled {
                let flipped: Vec<Ablation> = cells
                    .iter()
                    .map(|c| {
                        let mut c = *c;
                        toggle(&mut c);
                        c
                    })
                    .collect();
                cells.extend(flipped);
            }
        }
        cells
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: Ablation,
    pub seed: u64,
    pub unseen_map: f64,
    pub unseen_hashed_map: f64,
    pub seen_map: f64,
}

impl AblationRow {
    pub const HEADER: &'static str = "graph,decoder,triplet,semantic,graph_scope,seed,unseen_map,unseen_hashed_map,seen_map";

    pub fn csv_line(&self) -> String {
        let c = &self.cell;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            c.graph as u8,
            c.decoder_loss as u8,
            c.triplet_loss as u8,
            if c.latent_semantic { "latent" } else { "fixed" },
            if c.full_graph { "seen+unseen" } else { "seen" },
            self.seed,
            self.unseen_map,
            self.unseen_hashed_map,
            self.seen_map
        )
    }
}

/// Runs every grid cell for every seed on fresh synthetic data from `base(seed)`.
pub fn run_ablation(
    base: impl Fn(u64) -> Experiment,
    cells: &[Ablation],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(cells.len() * seeds.len());
    for cell in cells {
        for &seed in seeds {
            let mut exp = base(seed);
            exp.train = cell.apply(&exp.train);
            let r = run_experiment(&exp)?;
            rows.push(row(cell, seed, &r));
        }
    }
    Ok(rows)
}

/// Grid over fixed data; each seed re-initialises and retrains.
pub fn run_ablation_on(
    dataset: &Dataset,
    words: &WordTable,
    split: &ZeroShotSplit,
    arch: &ArchConfig,
    base: &TrainConfig,
    plan: &EvalPlan,
    cells: &[Ablation],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(cells.len() * seeds.len());
    for cell in cells {
        for &seed in seeds {
            let train = cell.apply(&TrainConfig { seed, ..base.clone() });
            let r = train_and_evaluate(dataset, words, split, arch, &train, plan)?;
            rows.push(row(cell, seed, &r));
        }
    }
    Ok(rows)
}

fn row(cell: &Ablation, seed: u64, r: &ExperimentResult) -> AblationRow {
    log::info!("{cell} seed={seed}: unseen mAP {:.4}", r.unseen.map);
    AblationRow {
        cell: *cell,
        seed,
        unseen_map: r.unseen.map,
        unseen_hashed_map: r.unseen_hashed.map,
        seen_map: r.seen.map,
    }
}

/// Per-cell medians over seeds, in cell order.
pub fn ablation_medians(cells: &[Ablation], rows: &[AblationRow]) -> Vec<(Ablation, f64)> {
    cells
        .iter()
        .map(|c| {
            let mut v: Vec<f64> = rows.iter().filter(|r| r.cell == *c).map(|r| r.unseen_map).collect();
            (*c, median(&mut v))
        })
        .collect()
}

pub const EMBEDDINGS_HEADER: &str = "#crossat-embeddings v1";

/// Shared-space embeddings (or hard codes) of every record, images ungated.
///
/// Lines are `id\tmodality\tlabel\tvalues` after a header naming the kind and width.
pub fn embeddings_text(model: &ModelParams, dataset: &Dataset, codes: bool) -> Result<String> {
    let mut vectors: Vec<Option<Vec<f64>>> = vec![None; dataset.len()];
    for modality in [Modality::Sketch, Modality::Image] {
        let idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.record(i).modality == modality).collect();
        if idx.is_empty() {
            continue;
        }
        let feats: Vec<&[f64]> = idx.iter().map(|&i| dataset.record(i).feature.as_slice()).collect();
        let emb = match modality {
            Modality::Sketch => model.encode_sketches(&feats)?,
            Modality::Image => model.encode_images(&feats, None)?,
        };
        let values: Vec<Vec<f64>> = if codes {
            model.hash_codes(&emb)?.iter().map(TernaryCode::to_f64).collect()
        } else {
            emb.into_iter().map(|e| e.vector).collect()
        };
        for (i, v) in idx.into_iter().zip(values) {
            vectors[i] = Some(v);
        }
    }
    let kind = if codes { "code" } else { "real" };
    let mut s = format!("{EMBEDDINGS_HEADER} kind={kind} d={}\n", model.config.d_shared);
    for (r, v) in dataset.records().iter().zip(vectors) {
        s.push_str(&format!("{}\t{}\t{}\t", r.id, r.modality, r.label));
        push_values(&mut s, &v.expect("every record encoded"), ',');
        s.push('\n');
    }
    Ok(s)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_counts() {
        assert_eq!(AblationGrid::default().cells(), vec![Ablation::FULL]);
        let g = AblationGrid { graph: true, triplet_loss: true, ..AblationGrid::default() };
        let cells = g.cells();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[0], Ablation::FULL);
        assert_eq!(AblationGrid::all().cells().len(), 32);
    }

    #[test]
    fn ablation_applies_switches() {
        let a = Ablation { decoder_loss: false, latent_semantic: false, ..Ablation::FULL };
        let t = a.apply(&TrainConfig::default());
        assert_eq!(t.weights.lambda2, 0.0);
        assert_eq!(t.weights.lambda3, 1.0);
        assert!(t.freeze_semantic);
        assert!(t.use_graph);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn embeddings_cover_every_record() {
        let mut exp = Experiment::benchmark(1);
        exp.synth.classes = 3;
        exp.synth.per_class_per_modality = 2;
        exp.synth.d_w = 4;
        exp.unseen_classes = 1;
        let (ds, words, split) = prepare(&exp).unwrap();
        let m = init_for(&exp.arch, &ds, &words, &split, 0).unwrap();
        let text = embeddings_text(&m, &ds, true).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "#crossat-embeddings v1 kind=code d=16");
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), ds.len());
        let vals = rows[0].split('\t').nth(3).unwrap();
        assert!(vals.split(',').all(|v| ["-1", "0", "1"].contains(&v)));
    }

    #[test]
    fn small_experiment_runs() {
        let mut exp = Experiment::benchmark(0);
        exp.synth.classes = 5;
        exp.synth.per_class_per_modality = 8;
        exp.synth.d_w = 10;
        exp.arch.encoder_hidden = vec![16];
        exp.arch.semantic_hidden = vec![8];
        exp.train.epochs = 3;
        exp.null_shuffles = 5;
        let r = run_experiment(&exp).unwrap();
        assert_eq!(r.fit.log.epochs.len(), 3);
        assert_eq!(r.unseen.num_queries(), 16);
        assert!(r.null.mean > 0.0);
    }
}
