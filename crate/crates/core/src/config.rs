//! Flat `key = value` run configuration.
//!
//! Values are resolved as defaults, then the config file, then command-line
//! overrides. Unknown keys are rejected with the closest valid key.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::datamodel::{make_split, Dataset, SynthConfig, ZeroShotSplit};
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::pipeline::{Ablation, AblationGrid, ArchConfig};
use crate::retrieval::{Gating, Metric, Task};
use crate::trainer::{TrainConfig, TrainMode};

/// Environment variable naming a default config file.
pub const CONFIG_ENV: &str = "CROSSAT_CONFIG";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub features: PathBuf,
    pub words: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub index: PathBuf,
    pub report: PathBuf,
    pub embeddings: PathBuf,
    pub ablation_out: PathBuf,

    pub synth: SynthConfig,
    /// Explicit unseen classes; when empty, `unseen_count` are drawn with `split_seed`.
    pub unseen: Vec<String>,
    pub unseen_count: usize,
    pub split_seed: u64,

    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub ablate_grid: AblationGrid,
    pub ablate_seeds: Vec<u64>,

    pub task: Task,
    pub metric: Metric,
    pub gating: Gating,
    pub k: usize,
    /// 0 scores the full ranking.
    pub map_cutoff: usize,
    pub null_shuffles: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            features: "features.tsv".into(),
            words: "words.txt".into(),
            checkpoint: "model.ckpt".into(),
            metrics: "metrics.csv".into(),
            index: "gallery.idx".into(),
            report: "report.txt".into(),
            embeddings: "embeddings.tsv".into(),
            ablation_out: "ablation.csv".into(),
            synth: SynthConfig::default(),
            unseen: Vec::new(),
            unseen_count: 2,
            split_seed: 0,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            ablation: Ablation::FULL,
            ablate_grid: AblationGrid {
                graph: true,
                decoder_loss: true,
                triplet_loss: true,
                latent_semantic: false,
                full_graph: false,
            },
            ablate_seeds: vec![0, 1, 2, 3, 4],
            task: Task::SKETCH_TO_IMAGE,
            metric: Metric::Euclidean,
            gating: Gating::Unconditioned,
            k: 100,
            map_cutoff: 0,
            null_shuffles: 100,
        }
    }
}

/// Every accepted key, in documentation order.
pub const KEYS: &[&str] = &[
    "features", "words", "checkpoint", "metrics", "index", "report", "embeddings", "ablation_out",
    "synth_classes", "synth_per_class", "synth_d_in", "synth_d_w", "synth_shift", "synth_noise",
    "synth_latent_dim", "synth_radius", "synth_word_noise", "synth_seed",
    "unseen", "unseen_count", "split_seed",
    "d_shared", "encoder_hidden", "semantic_hidden", "att_pool", "leaky_slope", "hash_beta",
    "semantic_decoder",
    "batch_size", "epochs", "learning_rate", "lambda1", "lambda2", "lambda3", "lambda4", "lambda5",
    "alpha", "mode", "alternating", "seed", "triads_per_epoch", "convergence_window",
    "convergence_tol", "semantic_pretrain_epochs",
    "graph", "decoder_loss", "triplet_loss", "semantic_space", "full_graph",
    "ablate_switches", "ablate_seeds",
    "task", "metric", "gating", "k", "map_cutoff", "null_shuffles",
];

/// Closest key by edit distance; bigram overlap breaks ties.
fn nearest_key(key: &str) -> &'static str {
    KEYS.iter()
        .min_by(|a, b| {
            strsim::levenshtein(key, a)
                .cmp(&strsim::levenshtein(key, b))
                .then_with(|| strsim::sorensen_dice(key, b).total_cmp(&strsim::sorensen_dice(key, a)))
        })
        .copied()
        .unwrap_or("features")
}

fn typed<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Config(format!("{key} expects {expected}, got {value:?}"))
    })
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key} expects a boolean (true/false), got {value:?}"))),
    }
}

fn list<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| typed(key, s, expected))
        .collect()
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        const INT: &str = "a non-negative integer";
        const REAL: &str = "a real number";
        match key {
            "features" => self.features = v.into(),
            "words" => self.words = v.into(),
            "checkpoint" => self.checkpoint = v.into(),
            "metrics" => self.metrics = v.into(),
            "index" => self.index = v.into(),
            "report" => self.report = v.into(),
            "embeddings" => self.embeddings = v.into(),
            "ablation_out" => self.ablation_out = v.into(),
            "synth_classes" => self.synth.classes = typed(key, v, INT)?,
            "synth_per_class" => self.synth.per_class_per_modality = typed(key, v, INT)?,
            "synth_d_in" => self.synth.d_in = typed(key, v, INT)?,
            "synth_d_w" => self.synth.d_w = typed(key, v, INT)?,
            "synth_shift" => self.synth.modality_shift = typed(key, v, REAL)?,
            "synth_noise" => self.synth.noise = typed(key, v, REAL)?,
            "synth_latent_dim" => self.synth.latent_dim = typed(key, v, INT)?,
            "synth_radius" => self.synth.radius = typed(key, v, REAL)?,
            "synth_word_noise" => self.synth.word_noise = typed(key, v, REAL)?,
            "synth_seed" => self.synth.seed = typed(key, v, INT)?,
            "unseen" => self.unseen = list(key, v, "a comma-separated list of labels")?,
            "unseen_count" => self.unseen_count = typed(key, v, INT)?,
            "split_seed" => self.split_seed = typed(key, v, INT)?,
            "d_shared" => self.arch.d_shared = typed(key, v, INT)?,
            "encoder_hidden" => self.arch.encoder_hidden = list(key, v, "a comma-separated list of widths")?,
            "semantic_hidden" => self.arch.semantic_hidden = list(key, v, "a comma-separated list of widths")?,
            "att_pool" => self.arch.att_pool = typed(key, v, INT)?,
            "leaky_slope" => self.arch.leaky_slope = typed(key, v, REAL)?,
            "hash_beta" => self.arch.hash_beta = typed(key, v, REAL)?,
            "semantic_decoder" => self.arch.semantic_decoder = boolean(key, v)?,
            "batch_size" => self.train.batch_size = typed(key, v, INT)?,
            "epochs" => self.train.epochs = typed(key, v, INT)?,
            "learning_rate" => self.train.learning_rate = typed(key, v, REAL)?,
            "lambda1" => self.train.weights.lambda1 = typed(key, v, REAL)?,
            "lambda2" => self.train.weights.lambda2 = typed(key, v, REAL)?,
            "lambda3" => self.train.weights.lambda3 = typed(key, v, REAL)?,
            "lambda4" => self.train.weights.lambda4 = typed(key, v, REAL)?,
            "lambda5" => self.train.weights.lambda5 = typed(key, v, REAL)?,
            "alpha" => self.train.weights.alpha = typed(key, v, REAL)?,
            "mode" => self.train.mode = v.parse::<TrainMode>()?,
            "alternating" => self.train.alternating = boolean(key, v)?,
            "seed" => self.train.seed = typed(key, v, INT)?,
            "triads_per_epoch" => self.train.triads_per_epoch = typed(key, v, INT)?,
            "convergence_window" => self.train.convergence_window = typed(key, v, INT)?,
            "convergence_tol" => self.train.convergence_tol = typed(key, v, REAL)?,
            "semantic_pretrain_epochs" => self.train.semantic_pretrain_epochs = typed(key, v, INT)?,
            "graph" => self.ablation.graph = boolean(key, v)?,
            "decoder_loss" => self.ablation.decoder_loss = boolean(key, v)?,
            "triplet_loss" => self.ablation.triplet_loss = boolean(key, v)?,
            "semantic_space" => {
                self.ablation.latent_semantic = match v {
                    "latent" => true,
                    "fixed" => false,
                    _ => return Err(Error::Config(format!("semantic_space expects latent or fixed, got {v:?}"))),
                }
            }
            "full_graph" => self.ablation.full_graph = boolean(key, v)?,
            "ablate_switches" => {
                let mut g = AblationGrid::default();
                for s in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    match s {
                        "graph" => g.graph = true,
                        "decoder_loss" => g.decoder_loss = true,
                        "triplet_loss" => g.triplet_loss = true,
                        "semantic_space" => g.latent_semantic = true,
                        "full_graph" => g.full_graph = true,
                        other => {
                            return Err(Error::Config(format!(
                                "unknown ablation switch {other:?} (expected graph, decoder_loss, \
                                 triplet_loss, semantic_space or full_graph)"
                            )))
                        }
                    }
                }
                self.ablate_grid = g;
            }
            "ablate_seeds" => self.ablate_seeds = list(key, v, "a comma-separated list of integers")?,
            "task" => self.task = v.parse()?,
            "metric" => self.metric = v.parse()?,
            "gating" => self.gating = v.parse()?,
            "k" => self.k = typed(key, v, INT)?,
            "map_cutoff" => self.map_cutoff = typed(key, v, INT)?,
            "null_shuffles" => self.null_shuffles = typed(key, v, INT)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key {other:?}; did you mean {:?}?",
                    nearest_key(other)
                )))
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Parse { line: n + 1, message: e.to_string() })?;
        }
        Ok(())
    }

    /// Defaults, then `file` (or the file named by [`CONFIG_ENV`]), then overrides.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let env_path = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        if let Some(path) = file.map(Path::to_path_buf).or(env_path) {
            let text = std::fs::read_to_string(&path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            cfg.apply_text(&text)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.training().validate()?;
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.null_shuffles == 0 {
            return Err(Error::Config("null_shuffles must be at least 1".into()));
        }
        let unique: BTreeSet<&String> = self.unseen.iter().collect();
        if unique.len() != self.unseen.len() {
            return Err(Error::Config("unseen lists a class twice".into()));
        }
        Ok(())
    }

    /// Training configuration with the ablation switches applied.
    pub fn training(&self) -> TrainConfig {
        self.ablation.apply(&self.train)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            task: self.task,
            metric: self.metric,
            k: self.k,
            map_cutoff: (self.map_cutoff > 0).then_some(self.map_cutoff),
            gating: self.gating,
        }
    }

    /// The explicit `unseen` list, or `unseen_count` classes drawn with `split_seed`.
    pub fn split(&self, dataset: &Dataset) -> Result<ZeroShotSplit> {
        let split = if self.unseen.is_empty() {
            make_split(dataset.classes(), self.unseen_count, self.split_seed)?
        } else {
            let unseen: BTreeSet<String> = self.unseen.iter().cloned().collect();
            if let Some(c) = unseen.iter().find(|c| !dataset.classes().contains(*c)) {
                return Err(Error::Config(format!("unseen class {c} does not occur in the data")));
            }
            let seen = dataset.classes().iter().filter(|c| !unseen.contains(*c)).cloned().collect();
            ZeroShotSplit::new(seen, unseen)?
        };
        split.validate_against(dataset)?;
        Ok(split)
    }

    /// Every key with its current value; parses back to the same config.
    pub fn to_text(&self) -> String {
        let (s, t, a, w) = (&self.synth, &self.train, &self.arch, &self.train.weights);
        let g = &self.ablate_grid;
        let switches: Vec<&str> = [
            (g.graph, "graph"),
            (g.decoder_loss, "decoder_loss"),
            (g.triplet_loss, "triplet_loss"),
            (g.latent_semantic, "semantic_space"),
            (g.full_graph, "full_graph"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        let values: Vec<String> = vec![
            self.features.display().to_string(),
            self.words.display().to_string(),
            self.checkpoint.display().to_string(),
            self.metrics.display().to_string(),
            self.index.display().to_string(),
            self.report.display().to_string(),
            self.embeddings.display().to_string(),
            self.ablation_out.display().to_string(),
            s.classes.to_string(),
            s.per_class_per_modality.to_string(),
            s.d_in.to_string(),
            s.d_w.to_string(),
            s.modality_shift.to_string(),
            s.noise.to_string(),
            s.latent_dim.to_string(),
            s.radius.to_string(),
            s.word_noise.to_string(),
            s.seed.to_string(),
            self.unseen.join(","),
            self.unseen_count.to_string(),
            self.split_seed.to_string(),
            a.d_shared.to_string(),
            join(&a.encoder_hidden),
            join(&a.semantic_hidden),
            a.att_pool.to_string(),
            a.leaky_slope.to_string(),
            a.hash_beta.to_string(),
            a.semantic_decoder.to_string(),
            t.batch_size.to_string(),
            t.epochs.to_string(),
            t.learning_rate.to_string(),
            w.lambda1.to_string(),
            w.lambda2.to_string(),
            w.lambda3.to_string(),
            w.lambda4.to_string(),
            w.lambda5.to_string(),
            w.alpha.to_string(),
            t.mode.to_string(),
            t.alternating.to_string(),
            t.seed.to_string(),
            t.triads_per_epoch.to_string(),
            t.convergence_window.to_string(),
            t.convergence_tol.to_string(),
            t.semantic_pretrain_epochs.to_string(),
            self.ablation.graph.to_string(),
            self.ablation.decoder_loss.to_string(),
            self.ablation.triplet_loss.to_string(),
            if self.ablation.latent_semantic { "latent" } else { "fixed" }.to_string(),
            self.ablation.full_graph.to_string(),
            switches.join(","),
            join(&self.ablate_seeds),
            self.task.to_string(),
            self.metric.to_string(),
            self.gating.to_string(),
            self.k.to_string(),
            self.map_cutoff.to_string(),
            self.null_shuffles.to_string(),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        let mut out = String::from("#crossat-config v1\n");
        for (k, v) in KEYS.iter().zip(values) {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let mut c = RunConfig::default();
        c.apply_text("# nothing here\n\n").unwrap();
        assert_eq!(c.arch.d_shared, 64);
        assert_eq!(c.train.weights.alpha, 1.0);
        assert_eq!(c.train.batch_size, 256);
        assert_eq!(c.train.epochs, 200);
        assert_eq!(c.train.learning_rate, 0.001);
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn overrides_take_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "lambda3 = 0.5\nepochs = 7 # short\n").unwrap();
        let c = RunConfig::load(Some(&path), &[("lambda3".into(), "1".into())]).unwrap();
        assert_eq!(c.train.weights.lambda3, 1.0);
        assert_eq!(c.train.epochs, 7);
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let err = RunConfig::default().set("metricc", "hamming").unwrap_err();
        assert!(err.to_string().contains("\"metric\""), "{err}");
        let err = RunConfig::default().apply_text("a = 1\nbatch_sise = 3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn type_errors_name_the_expected_type() {
        let err = RunConfig::default().set("epochs", "many").unwrap_err();
        assert!(err.to_string().contains("integer"), "{err}");
        let err = RunConfig::default().set("graph", "maybe").unwrap_err();
        assert!(err.to_string().contains("boolean"), "{err}");
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("unseen", "class_001,class_004").unwrap();
        c.set("ablate_switches", "graph,full_graph").unwrap();
        c.set("semantic_space", "fixed").unwrap();
        let text = c.to_text();
        let mut back = RunConfig::default();
        back.apply_text(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn explicit_and_drawn_splits() {
        let (ds, _) = crate::datamodel::synth_generate(&SynthConfig {
            classes: 5,
            per_class_per_modality: 2,
            d_w: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut c = RunConfig::default();
        assert_eq!(c.split(&ds).unwrap().unseen.len(), 2);
        c.set("unseen", "class_003").unwrap();
        let s = c.split(&ds).unwrap();
        assert_eq!(s.unseen_list(), vec!["class_003".to_string()]);
        assert_eq!(s.seen.len(), 4);
        c.set("unseen", "class_009").unwrap();
        assert!(c.split(&ds).is_err());
    }

    #[test]
    fn switches_reach_training() {
        let mut c = RunConfig::default();
        c.set("triplet_loss", "off").unwrap();
        assert_eq!(c.training().weights.lambda3, 0.0);
        c.set("lambda1", "0").unwrap();
        c.set("lambda2", "0").unwrap();
        c.set("lambda4", "0").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
