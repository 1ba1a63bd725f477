//! Zero-shot evaluation: mAP and P@k over unseen-class queries.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{write_file, Dataset, FeatureRecord, ZeroShotSplit};
use crate::error::{Error, Result};
use crate::network::ModelParams;
use crate::retrieval::{build_index, Gating, Metric, Task};

pub const EVAL_HEADER: &str = "#crossat-eval v1";

/// Average precision of a ranked relevance list.
///
/// `cutoff` restricts the sum to the first `k` positions and divides by
/// `min(total_relevant, k)`; `None` scores the full ranking.
pub fn average_precision_at(relevance: &[bool], total_relevant: usize, cutoff: Option<usize>) -> Result<f64> {
    if total_relevant == 0 {
        return Err(Error::Evaluation("query has no relevant gallery items".into()));
    }
    let n = cutoff.map_or(relevance.len(), |k| k.min(relevance.len()));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevance[..n].iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    let denom = cutoff.map_or(total_relevant, |k| total_relevant.min(k));
    Ok(sum / denom as f64)
}

pub fn average_precision(relevance: &[bool], total_relevant: usize) -> Result<f64> {
    average_precision_at(relevance, total_relevant, None)
}

/// Hits among the first `k` positions divided by `k`, even if the list is shorter.
pub fn precision_at_k(relevance: &[bool], k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    relevance.iter().take(k).filter(|&&r| r).count() as f64 / k as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub task: Task,
    pub metric: Metric,
    pub k: usize,
    /// mAP@cutoff instead of mAP over the full ranking.
    pub map_cutoff: Option<usize>,
    pub gating: Gating,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            task: Task::SKETCH_TO_IMAGE,
            metric: Metric::Euclidean,
            k: 100,
            map_cutoff: None,
            gating: Gating::Unconditioned,
        }
    }
}

/// Ranked gallery labels for each query, the input to every metric.
#[derive(Clone, Debug, PartialEq)]
pub struct Rankings {
    pub query_ids: Vec<String>,
    pub query_labels: Vec<String>,
    pub gallery_labels: Vec<String>,
    /// Per query, gallery positions in ranked order.
    pub order: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryScore {
    pub id: String,
    pub label: String,
    pub ap: f64,
    pub p_at_k: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub task: Task,
    pub metric: Metric,
    pub map: f64,
    pub p_at_k: f64,
    pub k: usize,
    pub per_query: Vec<QueryScore>,
    /// Mean AP of each class's queries.
    pub per_class: BTreeMap<String, f64>,
    /// Queries dropped for lacking any relevant gallery item.
    pub excluded: usize,
}

impl EvalReport {
    pub fn num_queries(&self) -> usize {
        self.per_query.len()
    }

    /// `task,metric,mAP,P@k,k,num_queries`.
    pub fn summary_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.task,
            self.metric,
            self.map,
            self.p_at_k,
            self.k,
            self.num_queries()
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{EVAL_HEADER}\ntask={}\nmetric={}\nmap={}\np_at_k={}\nk={}\nnum_queries={}\nexcluded={}\n",
            self.task,
            self.metric,
            self.map,
            self.p_at_k,
            self.k,
            self.num_queries(),
            self.excluded
        );
        for (c, ap) in &self.per_class {
            s.push_str(&format!("class.{c}={ap}\n"));
        }
        s.push_str("# task,metric,mAP,P@k,k,num_queries\n");
        s.push_str(&self.summary_line());
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_text())
    }
}

/// Ranks every query record against the gallery records.
///
/// In uni-modal tasks a query never retrieves itself.
pub fn rank_records(
    model: &ModelParams,
    queries: &[&FeatureRecord],
    gallery: &[&FeatureRecord],
    options: &EvalOptions,
) -> Result<Rankings> {
    if gallery.is_empty() {
        return Err(Error::Protocol("evaluation gallery is empty".into()));
    }
    if queries.is_empty() {
        return Err(Error::Protocol("no evaluation queries".into()));
    }
    let index = build_index(gallery, model, options.task, options.metric, options.gating)?;
    let position: BTreeMap<&str, usize> = gallery.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let mut order = Vec::with_capacity(queries.len());
    for q in queries {
        let exclude = options.task.is_unimodal().then_some(q.id.as_str());
        let hits = index.rank(q, model, exclude)?;
        order.push(hits.iter().map(|h| position[h.id.as_str()]).collect());
    }
    Ok(Rankings {
        query_ids: queries.iter().map(|r| r.id.clone()).collect(),
        query_labels: queries.iter().map(|r| r.label.clone()).collect(),
        gallery_labels: gallery.iter().map(|r| r.label.clone()).collect(),
        order,
    })
}

/// Scores rankings under `gallery_labels` (which may be a shuffled copy).
pub fn score_rankings(
    rankings: &Rankings,
    gallery_labels: &[String],
    task: Task,
    metric: Metric,
    k: usize,
    map_cutoff: Option<usize>,
) -> Result<EvalReport> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut per_query = Vec::with_capacity(rankings.order.len());
    let mut excluded = 0;
    for ((id, label), order) in rankings.query_ids.iter().zip(&rankings.query_labels).zip(&rankings.order) {
        let relevance: Vec<bool> = order.iter().map(|&g| &gallery_labels[g] == label).collect();
        let total = relevance.iter().filter(|&&r| r).count();
        if total == 0 {
            log::warn!("query {id} has no relevant gallery item; excluded");
            excluded += 1;
            continue;
        }
        per_query.push(QueryScore {
            id: id.clone(),
            label: label.clone(),
            ap: average_precision_at(&relevance, total, map_cutoff)?,
            p_at_k: precision_at_k(&relevance, k),
        });
    }
    if per_query.is_empty() {
        return Err(Error::Evaluation("no query has a relevant gallery item".into()));
    }
    let n = per_query.len() as f64;
    let map = per_query.iter().map(|q| q.ap).sum::<f64>() / n;
    let p_at_k = per_query.iter().map(|q| q.p_at_k).sum::<f64>() / n;
    let mut classes: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for q in &per_query {
        let e = classes.entry(q.label.clone()).or_default();
        e.0 += q.ap;
        e.1 += 1;
    }
    Ok(EvalReport {
        task,
        metric,
        map,
        p_at_k,
        k,
        per_query,
        per_class: classes.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect(),
        excluded,
    })
}

/// Evaluates retrieval restricted to records whose class is in `classes`.
pub fn evaluate_classes(
    model: &ModelParams,
    dataset: &Dataset,
    classes: &BTreeSet<String>,
    options: &EvalOptions,
) -> Result<(EvalReport, Rankings)> {
    let pick = |m| -> Vec<&FeatureRecord> {
        dataset.select(m, classes).into_iter().map(|i| dataset.record(i)).collect()
    };
    let queries = pick(options.task.query);
    let gallery = pick(options.task.gallery);
    let rankings = rank_records(model, &queries, &gallery, options)?;
    let report = score_rankings(
        &rankings,
        &rankings.gallery_labels,
        options.task,
        options.metric,
        options.k,
        options.map_cutoff,
    )?;
    Ok((report, rankings))
}

/// Zero-shot protocol: unseen-class queries against the unseen-class gallery.
pub fn evaluate(
    model: &ModelParams,
    dataset: &Dataset,
    split: &ZeroShotSplit,
    options: &EvalOptions,
) -> Result<(EvalReport, Rankings)> {
    split.validate_against(dataset)?;
    let (report, rankings) = evaluate_classes(model, dataset, &split.unseen, options)?;
    for label in rankings.query_labels.iter().chain(&rankings.gallery_labels) {
        if !split.unseen.contains(label) {
            return Err(Error::Contract(format!("seen class {label} entered zero-shot evaluation")));
        }
    }
    Ok((report, rankings))
}

/// Mean and standard deviation of mAP under random gallery-label permutations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NullEstimate {
    pub mean: f64,
    pub std: f64,
    pub shuffles: usize,
}

pub fn permutation_null(
    rankings: &Rankings,
    shuffles: usize,
    map_cutoff: Option<usize>,
    seed: u64,
) -> Result<NullEstimate> {
    if shuffles == 0 {
        return Err(Error::Config("permutation null needs at least one shuffle".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = rankings.gallery_labels.clone();
    let mut maps = Vec::with_capacity(shuffles);
    for _ in 0..shuffles {
        labels.shuffle(&mut rng);
        let r = score_rankings(rankings, &labels, Task::SKETCH_TO_IMAGE, Metric::Euclidean, 1, map_cutoff)?;
        maps.push(r.map);
    }
    let mean = maps.iter().sum::<f64>() / shuffles as f64;
    let var = maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / shuffles as f64;
    Ok(NullEstimate { mean, std: var.sqrt(), shuffles })
}
