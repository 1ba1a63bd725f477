use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const FEATURE_HEADER: &str = "#crossat-features v1";
pub const WORDS_HEADER: &str = "#crossat-words v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Sketch,
    Image,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::Sketch => Modality::Image,
            Modality::Image => Modality::Sketch,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Sketch => "sketch",
            Modality::Image => "image",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sketch" => Ok(Modality::Sketch),
            "image" => Ok(Modality::Image),
            other => Err(Error::Schema(format!(
                "unknown modality {other:?} (expected sketch or image)"
            ))),
        }
    }
}

/// One pre-extracted visual feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub modality: Modality,
    pub label: String,
    pub feature: Vec<f64>,
}

/// An immutable collection of feature records sharing one input width.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    d_in: usize,
    records: Vec<FeatureRecord>,
    classes: Vec<String>,
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::Schema(format!(
            "{kind} {s:?} must be non-empty and free of whitespace"
        )));
    }
    Ok(())
}

impl Dataset {
    pub fn new(d_in: usize, records: Vec<FeatureRecord>) -> Result<Self> {
        if d_in == 0 {
            return Err(Error::Schema("d_in must be positive".into()));
        }
        let mut ids = HashSet::with_capacity(records.len());
        let mut classes = BTreeSet::new();
        for r in &records {
            check_token("record id", &r.id)?;
            check_token("label", &r.label)?;
            if r.feature.len() != d_in {
                return Err(Error::Schema(format!(
                    "record {} ({}) has width {}, expected {d_in}",
                    r.id,
                    r.modality,
                    r.feature.len()
                )));
            }
            if r.feature.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema(format!("record {} has non-finite values", r.id)));
            }
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Schema(format!("duplicate record id {}", r.id)));
            }
            classes.insert(r.label.clone());
        }
        Ok(Self {
            d_in,
            records,
            classes: classes.into_iter().collect(),
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &FeatureRecord {
        &self.records[i]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn find(&self, id: &str) -> Option<&FeatureRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Indices of records of `modality` whose label is in `labels`, in file order.
    pub fn select(&self, modality: Modality, labels: &BTreeSet<String>) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.modality == modality && labels.contains(&r.label))
            .map(|(i, _)| i)
            .collect()
    }

    /// Per-class record indices, split by modality.
    pub fn class_index(&self) -> BTreeMap<&str, ClassMembers> {
        let mut out: BTreeMap<&str, ClassMembers> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            let entry = out.entry(r.label.as_str()).or_default();
            match r.modality {
                Modality::Sketch => entry.sketches.push(i),
                Modality::Image => entry.images.push(i),
            }
        }
        out
    }

    pub fn to_feature_text(&self) -> String {
        let mut s = format!("{FEATURE_HEADER} d_in={}\n", self.d_in);
        for r in &self.records {
            s.push_str(&r.id);
            s.push('\t');
            s.push_str(r.modality.as_str());
            s.push('\t');
            s.push_str(&r.label);
            s.push('\t');
            push_values(&mut s, &r.feature, ',');
            s.push('\n');
        }
        s
    }

    pub fn parse_feature_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 1, message: "empty feature file".into() })?;
        let d_in = header
            .strip_prefix(FEATURE_HEADER)
            .and_then(|rest| rest.trim().strip_prefix("d_in="))
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("expected header `{FEATURE_HEADER} d_in=<int>`, got {header:?}"),
            })?;
        let mut records = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse { line: line_no, message };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(parse_err(format!(
                    "expected 4 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            let modality: Modality = fields[1].parse()?;
            let feature = fields[3]
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| parse_err(format!("bad number {v:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if feature.len() != d_in {
                return Err(Error::Schema(format!(
                    "line {line_no}: record {} has width {}, expected {d_in}",
                    fields[0],
                    feature.len()
                )));
            }
            records.push(FeatureRecord {
                id: fields[0].to_string(),
                modality,
                label: fields[2].to_string(),
                feature,
            });
        }
        Dataset::new(d_in, records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_feature_text())
    }
}

/// Reads a feature file.
pub fn load_features(path: &Path) -> Result<Dataset> {
    Dataset::parse_feature_text(&fs::read_to_string(path)?)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassMembers {
    pub sketches: Vec<usize>,
    pub images: Vec<usize>,
}

impl ClassMembers {
    pub fn of(&self, modality: Modality) -> &[usize] {
        match modality {
            Modality::Sketch => &self.sketches,
            Modality::Image => &self.images,
        }
    }
}

/// Class-name word vectors, kept in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct WordTable {
    dim: usize,
    entries: Vec<(String, Vec<f64>)>,
}

impl WordTable {
    pub fn new(entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let Some(dim) = entries.first().map(|e| e.1.len()) else {
            return Err(Error::Schema("word table is empty".into()));
        };
        if dim == 0 {
            return Err(Error::Schema("word vectors must be non-empty".into()));
        }
        let mut seen = HashSet::new();
        for (token, v) in &entries {
            check_token("word token", token)?;
            if !seen.insert(token.as_str()) {
                return Err(Error::Schema(format!("duplicate class label {token}")));
            }
            if v.len() != dim {
                return Err(Error::Schema(format!(
                    "word vector for {token} has width {}, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Schema(format!("word vector for {token} is non-finite")));
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(String, Vec<f64>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(t, _)| t == label)
            .map(|(_, v)| v.as_slice())
    }

    /// Table restricted to `labels`, in the order given.
    pub fn subset(&self, labels: &[String]) -> Result<WordTable> {
        let mut missing = Vec::new();
        let mut entries = Vec::with_capacity(labels.len());
        for l in labels {
            match self.get(l) {
                Some(v) => entries.push((l.clone(), v.to_vec())),
                None => missing.push(l.as_str()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Schema(format!(
                "word table lacks classes: {}",
                missing.join(", ")
            )));
        }
        WordTable::new(entries)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{WORDS_HEADER} d_w={}\n", self.dim);
        for (token, v) in &self.entries {
            s.push_str(token);
            s.push(' ');
            push_values(&mut s, v, ' ');
            s.push('\n');
        }
        s
    }

    /// Parses the common `<token> <v1> ... <vd>` text format. Lines starting
    /// with `#` and a leading word2vec `<count> <dim>` line are skipped.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut parts = trimmed.split_whitespace();
            let token = parts.next().unwrap_or_default();
            let rest: Vec<&str> = parts.collect();
            if entries.is_empty()
                && rest.len() == 1
                && token.parse::<usize>().is_ok()
                && rest[0].parse::<usize>().is_ok()
            {
                continue;
            }
            let v = rest
                .iter()
                .map(|x| {
                    x.parse::<f64>().map_err(|_| Error::Parse {
                        line: line_no,
                        message: format!("bad number {x:?}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if v.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("token {token} has no vector"),
                });
            }
            entries.push((token.to_string(), v));
        }
        WordTable::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_text())
    }
}

pub fn load_word_table(path: &Path) -> Result<WordTable> {
    WordTable::parse_text(&fs::read_to_string(path)?)
}

pub(crate) fn push_values(s: &mut String, values: &[f64], sep: char) {
    use std::fmt::Write as _;
    for (j, v) in values.iter().enumerate() {
        if j > 0 {
            s.push(sep);
        }
        // Display for f64 is the shortest representation that round-trips.
        let _ = write!(s, "{v}");
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = "#crossat-features v1 d_in=4\n\
        a\tsketch\tcat\t1,2,3,4\n\
        b\timage\tcat\t0.5,-1,1e-3,7\n";

    #[test]
    fn parses_two_records() {
        let ds = Dataset::parse_feature_text(TWO).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.classes(), &["cat".to_string()]);
        assert_eq!(ds.record(1).feature, vec![0.5, -1.0, 1e-3, 7.0]);
    }

    #[test]
    fn width_mismatch_is_schema_error() {
        let text = format!("{TWO}c\timage\tdog\t1,2,3,4,5\n");
        assert!(matches!(
            Dataset::parse_feature_text(&text),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{TWO}c\timage\tdog\t1,2,x,4\n");
        match Dataset::parse_feature_text(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
        let text = format!("{TWO}only-two\tfields\n");
        assert!(matches!(
            Dataset::parse_feature_text(&text),
            Err(Error::Parse { line: 4, .. })
        ));
    }

    #[test]
    fn unknown_modality_rejected() {
        let text = format!("{TWO}c\tphoto\tdog\t1,2,3,4\n");
        assert!(matches!(
            Dataset::parse_feature_text(&text),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn bad_header_rejected() {
        assert!(Dataset::parse_feature_text("a\tsketch\tcat\t1\n").is_err());
        assert!(Dataset::parse_feature_text("").is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = format!("{TWO}a\timage\tdog\t1,2,3,4\n");
        assert!(matches!(
            Dataset::parse_feature_text(&text),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn word_table_accepts_word2vec_count_line() {
        let t = WordTable::parse_text("2 3\ncat 1 2 3\ndog 0.5 0 -1\n").unwrap();
        assert_eq!(t.dim(), 3);
        assert_eq!(t.get("dog").unwrap(), &[0.5, 0.0, -1.0]);
        let back = WordTable::parse_text(&t.to_text()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn word_table_duplicate_labels_rejected() {
        assert!(matches!(
            WordTable::parse_text("cat 1 2\ncat 3 4\n"),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn subset_names_missing_labels() {
        let t = WordTable::parse_text("cat 1 2\ndog 3 4\n").unwrap();
        let err = t
            .subset(&["cat".into(), "cow".into()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("cow"), "{err}");
    }
}
