//! Exact k-NN over embedding or ternary-code galleries.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::datamodel::{push_values, write_file, FeatureRecord, Modality};
use crate::error::{Error, Result};
use crate::network::{ModelParams, TernaryCode};

pub const INDEX_HEADER: &str = "#crossat-index v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    /// Generalised Hamming distance over ternary codes.
    Hamming,
    /// Euclidean distance between ternary codes read as reals.
    CodeEuclidean,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Hamming => "hamming",
            Metric::CodeEuclidean => "code_euclidean",
        }
    }

    pub fn uses_codes(self) -> bool {
        !matches!(self, Metric::Euclidean)
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "hamming" => Ok(Metric::Hamming),
            "code_euclidean" => Ok(Metric::CodeEuclidean),
            other => Err(Error::Config(format!(
                "unknown metric {other:?} (expected euclidean, hamming or code_euclidean)"
            ))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How gallery images are gated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gating {
    /// Ones-gate; embeddings are computed once at build time.
    Unconditioned,
    /// Gallery images are re-encoded under each query sketch's gate.
    QueryConditioned,
}

impl FromStr for Gating {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unconditioned" => Ok(Gating::Unconditioned),
            "query_conditioned" => Ok(Gating::QueryConditioned),
            other => Err(Error::Config(format!(
                "unknown gating {other:?} (expected unconditioned or query_conditioned)"
            ))),
        }
    }
}

impl fmt::Display for Gating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gating::Unconditioned => "unconditioned",
            Gating::QueryConditioned => "query_conditioned",
        })
    }
}

/// Retrieval direction: query modality and gallery modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Task {
    pub query: Modality,
    pub gallery: Modality,
}

impl Task {
    pub const SKETCH_TO_IMAGE: Task = Task { query: Modality::Sketch, gallery: Modality::Image };
    pub const IMAGE_TO_SKETCH: Task = Task { query: Modality::Image, gallery: Modality::Sketch };
    pub const SKETCH_TO_SKETCH: Task = Task { query: Modality::Sketch, gallery: Modality::Sketch };
    pub const IMAGE_TO_IMAGE: Task = Task { query: Modality::Image, gallery: Modality::Image };

    pub fn is_unimodal(self) -> bool {
        self.query == self.gallery
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "unknown task {s:?} (expected <sketch|image>_to_<sketch|image>)"
            ))
        };
        let (q, g) = s.split_once("_to_").ok_or_else(bad)?;
        Ok(Task {
            query: q.parse().map_err(|_| bad())?,
            gallery: g.parse().map_err(|_| bad())?,
        })
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_to_{}", self.query, self.gallery)
    }
}

/// Trits packed two bits apiece: a nonzero mask and a negative-sign mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedTrits {
    len: usize,
    nonzero: Vec<u64>,
    negative: Vec<u64>,
}

impl PackedTrits {
    pub fn pack(trits: &[i8]) -> Self {
        let words = trits.len().div_ceil(64);
        let mut nonzero = vec![0u64; words];
        let mut negative = vec![0u64; words];
        for (i, &t) in trits.iter().enumerate() {
            if t != 0 {
                nonzero[i / 64] |= 1 << (i % 64);
            }
            if t < 0 {
                negative[i / 64] |= 1 << (i % 64);
            }
        }
        Self { len: trits.len(), nonzero, negative }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of positions holding different trits.
    pub fn distance(&self, other: &PackedTrits) -> Result<usize> {
        if self.len != other.len {
            return Err(Error::Dimension(format!(
                "codes of length {} and {} cannot be compared",
                self.len, other.len
            )));
        }
        let mut n = 0;
        for w in 0..self.nonzero.len() {
            let (za, zb) = (self.nonzero[w], other.nonzero[w]);
            let both = za & zb;
            let differ = (za ^ zb) | (both & (self.negative[w] ^ other.negative[w]));
            n += differ.count_ones() as usize;
        }
        Ok(n)
    }
}

/// Generalised Hamming distance: count of unequal trits.
pub fn hamming_distance(a: &TernaryCode, b: &TernaryCode) -> Result<usize> {
    PackedTrits::pack(a.trits()).distance(&PackedTrits::pack(b.trits()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub label: String,
    /// Embedding, trits as reals, or raw features in a query-conditioned index.
    pub values: Vec<f64>,
    packed: Option<PackedTrits>,
}

impl IndexEntry {
    fn new(id: String, label: String, values: Vec<f64>, metric: Metric) -> Self {
        let packed = (metric == Metric::Hamming).then(|| {
            PackedTrits::pack(&values.iter().map(|&v| v as i8).collect::<Vec<_>>())
        });
        Self { id, label, values, packed }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryIndex {
    metric: Metric,
    gating: Gating,
    task: Task,
    dim: usize,
    entries: Vec<IndexEntry>,
}

/// One ranked gallery item.
#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub id: String,
    pub label: String,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnResult {
    pub hits: Vec<Hit>,
    /// Set when `k` exceeded the gallery size.
    pub truncated: bool,
}

fn encode(model: &ModelParams, modality: Modality, features: &[&[f64]], metric: Metric) -> Result<Vec<Vec<f64>>> {
    let emb = match modality {
        Modality::Sketch => model.encode_sketches(features)?,
        Modality::Image => model.encode_images(features, None)?,
    };
    if metric.uses_codes() {
        Ok(model.hash_codes(&emb)?.iter().map(TernaryCode::to_f64).collect())
    } else {
        Ok(emb.into_iter().map(|e| e.vector).collect())
    }
}

/// Encodes every gallery record of `task.gallery` modality.
///
/// A query-conditioned index keeps raw image features; they are encoded per query.
pub fn build_index(
    records: &[&FeatureRecord],
    model: &ModelParams,
    task: Task,
    metric: Metric,
    gating: Gating,
) -> Result<GalleryIndex> {
    if records.is_empty() {
        return Err(Error::Protocol("gallery is empty".into()));
    }
    if let Some(r) = records.iter().find(|r| r.modality != task.gallery) {
        return Err(Error::Contract(format!(
            "record {} is a {} but the {task} gallery holds {}s",
            r.id, r.modality, task.gallery
        )));
    }
    if gating == Gating::QueryConditioned && task != Task::SKETCH_TO_IMAGE {
        return Err(Error::Contract(format!(
            "query-conditioned gating needs sketch queries against images, not {task}"
        )));
    }
    let features: Vec<&[f64]> = records.iter().map(|r| r.feature.as_slice()).collect();
    let values = match gating {
        Gating::Unconditioned => encode(model, task.gallery, &features, metric)?,
        Gating::QueryConditioned => features.iter().map(|f| f.to_vec()).collect(),
    };
    let dim = values[0].len();
    let entries = records
        .iter()
        .zip(values)
        .map(|(r, v)| IndexEntry::new(r.id.clone(), r.label.clone(), v, metric))
        .collect();
    Ok(GalleryIndex { metric, gating, task, dim, entries })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn by_distance_then_id(a: &Hit, b: &Hit) -> Ordering {
    a.distance.total_cmp(&b.distance).then_with(|| a.id.cmp(&b.id))
}

/// Sorts all hits and keeps the first `k`.
pub fn top_k(mut hits: Vec<Hit>, k: usize) -> Vec<Hit> {
    if k < hits.len() {
        hits.select_nth_unstable_by(k, by_distance_then_id);
        hits.truncate(k);
    }
    hits.sort_by(by_distance_then_id);
    hits
}

impl GalleryIndex {
    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn gating(&self) -> Gating {
        self.gating
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distance from an already-encoded query to every entry, in entry order.
    pub fn distances(&self, query: &[f64]) -> Result<Vec<f64>> {
        if self.gating == Gating::QueryConditioned {
            return Err(Error::Contract(
                "a query-conditioned index has no precomputed embeddings".into(),
            ));
        }
        if query.len() != self.dim {
            return Err(Error::Dimension(format!(
                "query of width {} against an index of width {}",
                query.len(),
                self.dim
            )));
        }
        match self.metric {
            Metric::Euclidean | Metric::CodeEuclidean => {
                Ok(self.entries.iter().map(|e| euclidean(query, &e.values)).collect())
            }
            Metric::Hamming => {
                let q = PackedTrits::pack(&query.iter().map(|&v| v as i8).collect::<Vec<_>>());
                self.entries
                    .iter()
                    .map(|e| Ok(q.distance(e.packed.as_ref().expect("hamming entries are packed"))? as f64))
                    .collect()
            }
        }
    }

    /// Ranks every entry for a query record, excluding entries whose id is in `exclude`.
    pub fn rank(&self, query: &FeatureRecord, model: &ModelParams, exclude: Option<&str>) -> Result<Vec<Hit>> {
        if query.modality != self.task.query {
            return Err(Error::Contract(format!(
                "{} query against a {} index",
                query.modality, self.task
            )));
        }
        let distances = match self.gating {
            Gating::Unconditioned => {
                let q = encode(model, query.modality, &[&query.feature], self.metric)?;
                self.distances(&q[0])?
            }
            Gating::QueryConditioned => self.conditioned_distances(query, model)?,
        };
        let mut hits: Vec<Hit> = self
            .entries
            .iter()
            .zip(distances)
            .filter(|(e, _)| Some(e.id.as_str()) != exclude)
            .map(|(e, d)| Hit { id: e.id.clone(), label: e.label.clone(), distance: d })
            .collect();
        hits.sort_by(by_distance_then_id);
        Ok(hits)
    }

    fn conditioned_distances(&self, query: &FeatureRecord, model: &ModelParams) -> Result<Vec<f64>> {
        let q = model.encode_sketches(&[&query.feature])?;
        let feats: Vec<&[f64]> = self.entries.iter().map(|e| e.values.as_slice()).collect();
        let gate: Vec<&[f64]> = vec![query.feature.as_slice(); feats.len()];
        let g = model.encode_images(&feats, Some(&gate))?;
        if self.metric.uses_codes() {
            let qc = model.hash_codes(&q)?.remove(0);
            let gc = model.hash_codes(&g)?;
            gc.iter()
                .map(|c| match self.metric {
                    Metric::Hamming => Ok(hamming_distance(&qc, c)? as f64),
                    _ => Ok(euclidean(&qc.to_f64(), &c.to_f64())),
                })
                .collect()
        } else {
            Ok(g.iter().map(|e| euclidean(&q[0].vector, &e.vector)).collect())
        }
    }

    /// Exact top-`k`, ascending by distance with ties broken by id.
    pub fn query_knn(&self, query: &FeatureRecord, model: &ModelParams, k: usize) -> Result<KnnResult> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let hits = self.rank(query, model, None)?;
        let truncated = k > hits.len();
        if truncated {
            log::warn!("k={k} exceeds the gallery size {}; returning all entries", hits.len());
        }
        Ok(KnnResult { hits: top_k(hits, k), truncated })
    }

    /// Text export: header then `id\tlabel\tvalues` per entry.
    pub fn to_text(&self) -> Result<String> {
        if self.gating == Gating::QueryConditioned {
            return Err(Error::Contract(
                "a query-conditioned index holds raw features and cannot be exported".into(),
            ));
        }
        let mut s = format!(
            "{INDEX_HEADER} metric={} d={} task={}\n",
            self.metric, self.dim, self.task
        );
        for e in &self.entries {
            s.push_str(&e.id);
            s.push('\t');
            s.push_str(&e.label);
            s.push('\t');
            if self.metric.uses_codes() {
                let trits: Vec<String> = e.values.iter().map(|&v| (v as i8).to_string()).collect();
                s.push_str(&trits.join(","));
            } else {
                push_values(&mut s, &e.values, ',');
            }
            s.push('\n');
        }
        Ok(s)
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let rest = header
            .strip_prefix(INDEX_HEADER)
            .ok_or_else(|| Error::Format(format!("missing index header {INDEX_HEADER:?}")))?;
        let (mut metric, mut dim, mut task) = (None, None, Task::SKETCH_TO_IMAGE);
        for tok in rest.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad index header token {tok:?}")))?;
            match k {
                "metric" => metric = Some(v.parse::<Metric>().map_err(|e| Error::Format(e.to_string()))?),
                "d" => dim = Some(v.parse::<usize>().map_err(|_| Error::Format(format!("bad width {v:?}")))?),
                "task" => task = v.parse().map_err(|e: Error| Error::Format(e.to_string()))?,
                _ => {}
            }
        }
        let metric = metric.ok_or_else(|| Error::Format("index header lacks metric".into()))?;
        let dim = dim.ok_or_else(|| Error::Format("index header lacks d".into()))?;
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            let line_no = n + 2;
            if line.is_empty() {
                continue;
            }
            let parse = |m: String| Error::Parse { line: line_no, message: m };
            let mut f = line.split('\t');
            let (id, label, vals) = match (f.next(), f.next(), f.next(), f.next()) {
                (Some(a), Some(b), Some(c), None) => (a, b, c),
                _ => return Err(parse("expected id, label and values".into())),
            };
            let values: Vec<f64> = vals
                .split(',')
                .map(|v| v.parse::<f64>().map_err(|_| parse(format!("bad value {v:?}"))))
                .collect::<Result<_>>()?;
            if values.len() != dim {
                return Err(parse(format!("{} values, header says d={dim}", values.len())));
            }
            if metric.uses_codes() && values.iter().any(|&v| v != -1.0 && v != 0.0 && v != 1.0) {
                return Err(parse("code entries must be -1, 0 or 1".into()));
            }
            entries.push(IndexEntry::new(id.to_string(), label.to_string(), values, metric));
        }
        if entries.is_empty() {
            return Err(Error::Protocol("index file has no entries".into()));
        }
        Ok(GalleryIndex { metric, gating: Gating::Unconditioned, task, dim, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_text()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_model, ModelConfig};

    fn model() -> ModelParams {
        let cfg = ModelConfig {
            d_in: 4,
            d_w: 3,
            d_shared: 6,
            encoder_hidden: vec![8],
            semantic_hidden: vec![],
            att_pool: 2,
            seen_classes: vec!["a".into(), "b".into()],
            ..ModelConfig::default()
        };
        init_model(&cfg, 4).unwrap()
    }

    fn rec(id: &str, m: Modality, label: &str, f: [f64; 4]) -> FeatureRecord {
        FeatureRecord { id: id.into(), modality: m, label: label.into(), feature: f.to_vec() }
    }

    fn gallery() -> Vec<FeatureRecord> {
        (0..5)
            .map(|i| {
                let x = i as f64;
                rec(&format!("g{i}"), Modality::Image, if i % 2 == 0 { "a" } else { "b" }, [x, -x, 0.5 * x, 1.0])
            })
            .collect()
    }

    #[test]
    fn hamming_examples() {
        let c = |v: Vec<i8>| TernaryCode::new(v).unwrap();
        assert_eq!(hamming_distance(&c(vec![1, -1, 0]), &c(vec![1, -1, 0])).unwrap(), 0);
        assert_eq!(hamming_distance(&c(vec![1, -1, 0]), &c(vec![1, 0, 0])).unwrap(), 1);
        let a: Vec<i8> = (0..70).map(|i| [1, 0, -1][i % 3]).collect();
        let b: Vec<i8> = (0..70).map(|i| [0, -1, 1][i % 3]).collect();
        assert_eq!(hamming_distance(&c(a), &c(b)).unwrap(), 70);
        assert!(matches!(
            hamming_distance(&c(vec![1]), &c(vec![1, 0])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn build_counts_and_codes() {
        let m = model();
        let g = gallery();
        let refs: Vec<&FeatureRecord> = g.iter().collect();
        let idx = build_index(&refs, &m, Task::SKETCH_TO_IMAGE, Metric::Hamming, Gating::Unconditioned).unwrap();
        assert_eq!(idx.len(), 5);
        assert!(idx.entries().iter().flat_map(|e| &e.values).all(|&v| v == -1.0 || v == 0.0 || v == 1.0));
        let again = build_index(&refs, &m, Task::SKETCH_TO_IMAGE, Metric::Hamming, Gating::Unconditioned).unwrap();
        assert_eq!(idx, again);
    }

    #[test]
    fn unconditioned_entries_equal_ones_gate_embeddings() {
        let m = model();
        let g = gallery();
        let refs: Vec<&FeatureRecord> = g.iter().collect();
        let idx = build_index(&refs, &m, Task::SKETCH_TO_IMAGE, Metric::Euclidean, Gating::Unconditioned).unwrap();
        let feats: Vec<&[f64]> = g.iter().map(|r| r.feature.as_slice()).collect();
        let direct = m.encode_images(&feats, None).unwrap();
        for (e, d) in idx.entries().iter().zip(direct) {
            assert_eq!(e.values, d.vector);
        }
    }

    #[test]
    fn self_match_ranks_first() {
        let m = model();
        let g = gallery();
        let refs: Vec<&FeatureRecord> = g.iter().collect();
        let idx = build_index(&refs, &m, Task::IMAGE_TO_IMAGE, Metric::Euclidean, Gating::Unconditioned).unwrap();
        let r = idx.query_knn(&g[3], &m, 3).unwrap();
        assert_eq!(r.hits.len(), 3);
        assert_eq!(r.hits[0].id, "g3");
        assert_eq!(r.hits[0].distance, 0.0);
        assert!(r.hits.windows(2).all(|w| w[0].distance <= w[1].distance));
        assert!(!r.truncated);
        let big = idx.query_knn(&g[0], &m, 9).unwrap();
        assert!(big.truncated);
        assert_eq!(big.hits.len(), 5);
    }

    #[test]
    fn modality_and_gating_contracts() {
        let m = model();
        let g = gallery();
        let refs: Vec<&FeatureRecord> = g.iter().collect();
        let idx = build_index(&refs, &m, Task::SKETCH_TO_IMAGE, Metric::Euclidean, Gating::Unconditioned).unwrap();
        assert!(matches!(idx.query_knn(&g[0], &m, 1), Err(Error::Contract(_))));
        assert!(matches!(
            build_index(&refs, &m, Task::IMAGE_TO_IMAGE, Metric::Euclidean, Gating::QueryConditioned),
            Err(Error::Contract(_))
        ));
        let cond = build_index(&refs, &m, Task::SKETCH_TO_IMAGE, Metric::Euclidean, Gating::QueryConditioned).unwrap();
        assert!(matches!(cond.distances(&[0.0; 6]), Err(Error::Contract(_))));
        assert!(matches!(cond.to_text(), Err(Error::Contract(_))));
        let q = rec("q", Modality::Sketch, "a", [0.1, 0.2, 0.3, 0.4]);
        let r = cond.query_knn(&q, &m, 5).unwrap();
        assert_eq!(r.hits.len(), 5);
    }

    #[test]
    fn conditioned_matches_explicit_gating() {
        let m = model();
        let g = gallery();
        let refs: Vec<&FeatureRecord> = g.iter().collect();
        let cond = build_index(&refs, &m, Task::SKETCH_TO_IMAGE, Metric::Euclidean, Gating::QueryConditioned).unwrap();
        let q = rec("q", Modality::Sketch, "a", [0.1, -0.2, 0.3, 0.4]);
        let hits = cond.rank(&q, &m, None).unwrap();
        let qe = m.encode_sketches(&[&q.feature]).unwrap();
        for h in hits {
            let r = g.iter().find(|r| r.id == h.id).unwrap();
            let e = m.encode_images(&[&r.feature], Some(&[&q.feature])).unwrap();
            assert_eq!(h.distance, euclidean(&qe[0].vector, &e[0].vector));
        }
    }

    #[test]
    fn export_round_trip() {
        let m = model();
        let g = gallery();
        let refs: Vec<&FeatureRecord> = g.iter().collect();
        for metric in [Metric::Euclidean, Metric::Hamming, Metric::CodeEuclidean] {
            let idx = build_index(&refs, &m, Task::SKETCH_TO_IMAGE, metric, Gating::Unconditioned).unwrap();
            let text = idx.to_text().unwrap();
            assert!(text.starts_with(&format!("#crossat-index v1 metric={metric} d=6")));
            let back = GalleryIndex::parse_text(&text).unwrap();
            assert_eq!(back, idx);
            assert_eq!(back.to_text().unwrap(), text);
        }
    }

    #[test]
    fn parse_rejects_bad_rows() {
        let bad = "#crossat-index v1 metric=hamming d=2\nx\ta\t1,2\n";
        assert!(matches!(GalleryIndex::parse_text(bad), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(GalleryIndex::parse_text("nope"), Err(Error::Format(_))));
    }

    #[test]
    fn task_parsing() {
        assert_eq!("sketch_to_image".parse::<Task>().unwrap(), Task::SKETCH_TO_IMAGE);
        assert_eq!(Task::IMAGE_TO_SKETCH.to_string(), "image_to_sketch");
        assert!("sketch_image".parse::<Task>().is_err());
    }
}
