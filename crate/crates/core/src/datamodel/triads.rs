use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::records::{Dataset, Modality};
use super::split::ZeroShotSplit;
use crate::error::{Error, Result};

/// Cross-modal triplet of dataset record indices.
///
/// A sketch-anchored triad pairs a sketch anchor with a same-class positive
/// image and an other-class negative image; an image-anchored triad mirrors it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triad {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub anchor_modality: Modality,
}

impl Triad {
    /// The same-class (sketch, image) pair inside the triad.
    pub fn pair(&self) -> (usize, usize) {
        match self.anchor_modality {
            Modality::Sketch => (self.anchor, self.positive),
            Modality::Image => (self.positive, self.anchor),
        }
    }

    /// Checks label and modality constraints against `dataset`.
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        let (a, p, n) = (
            dataset.record(self.anchor),
            dataset.record(self.positive),
            dataset.record(self.negative),
        );
        if a.label != p.label {
            return Err(Error::Contract(format!(
                "positive {} has label {}, anchor {} has {}",
                p.id, p.label, a.id, a.label
            )));
        }
        if a.label == n.label {
            return Err(Error::Contract(format!(
                "negative {} shares the anchor label {}",
                n.id, a.label
            )));
        }
        let other = self.anchor_modality.other();
        if a.modality != self.anchor_modality || p.modality != other || n.modality != other {
            return Err(Error::Contract(format!(
                "triad ({}, {}, {}) violates the {}-anchored modality layout",
                a.id, p.id, n.id, self.anchor_modality
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TriadMode {
    SketchAnchored,
    ImageAnchored,
    Balanced,
}

impl FromStr for TriadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sketch_anchored" => Ok(TriadMode::SketchAnchored),
            "image_anchored" => Ok(TriadMode::ImageAnchored),
            "balanced" => Ok(TriadMode::Balanced),
            other => Err(Error::Config(format!("unknown triad mode {other:?}"))),
        }
    }
}

impl fmt::Display for TriadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TriadMode::SketchAnchored => "sketch_anchored",
            TriadMode::ImageAnchored => "image_anchored",
            TriadMode::Balanced => "balanced",
        })
    }
}

/// Samples `count` triads from seen classes only.
///
/// In balanced mode anchors alternate sketch, image, sketch, ... so any
/// contiguous batch of even size holds equal numbers of both kinds.
/// Negatives are drawn uniformly over the other seen classes.
pub fn sample_triads(
    dataset: &Dataset,
    split: &ZeroShotSplit,
    count: usize,
    mode: TriadMode,
    rng_seed: u64,
) -> Result<Vec<Triad>> {
    let index = dataset.class_index();
    let mut classes = Vec::with_capacity(split.seen.len());
    for label in &split.seen {
        let members = index.get(label.as_str());
        match members {
            Some(m) if !m.sketches.is_empty() && !m.images.is_empty() => classes.push(m),
            _ => {
                return Err(Error::Data(format!(
                    "seen class {label} lacks a sketch or an image record"
                )))
            }
        }
    }
    if classes.len() < 2 {
        return Err(Error::Data(
            "triad sampling needs at least two seen classes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let anchor_modality = match mode {
            TriadMode::SketchAnchored => Modality::Sketch,
            TriadMode::ImageAnchored => Modality::Image,
            TriadMode::Balanced if i % 2 == 0 => Modality::Sketch,
            TriadMode::Balanced => Modality::Image,
        };
        let other = anchor_modality.other();
        let c = rng.random_range(0..classes.len());
        let mut nc = rng.random_range(0..classes.len() - 1);
        if nc >= c {
            nc += 1;
        }
        let pick = |rng: &mut ChaCha8Rng, ids: &[usize]| ids[rng.random_range(0..ids.len())];
        let anchor = pick(&mut rng, classes[c].of(anchor_modality));
        let positive = pick(&mut rng, classes[c].of(other));
        let negative = pick(&mut rng, classes[nc].of(other));
        out.push(Triad {
            anchor,
            positive,
            negative,
            anchor_modality,
        });
    }
    Ok(out)
}
