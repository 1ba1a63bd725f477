use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::records::Dataset;
use crate::error::{Error, Result};

/// Disjoint partition of the class labels into training and test classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ZeroShotSplit {
    pub seen: BTreeSet<String>,
    pub unseen: BTreeSet<String>,
}

impl ZeroShotSplit {
    pub fn new(seen: BTreeSet<String>, unseen: BTreeSet<String>) -> Result<Self> {
        if let Some(both) = seen.intersection(&unseen).next() {
            return Err(Error::Config(format!(
                "class {both} is both seen and unseen"
            )));
        }
        if seen.is_empty() || unseen.is_empty() {
            return Err(Error::Config("both seen and unseen sets must be non-empty".into()));
        }
        Ok(Self { seen, unseen })
    }

    /// Seen classes in sorted order; classifier column `i` is `seen_list()[i]`.
    pub fn seen_list(&self) -> Vec<String> {
        self.seen.iter().cloned().collect()
    }

    pub fn unseen_list(&self) -> Vec<String> {
        self.unseen.iter().cloned().collect()
    }

    pub fn all(&self) -> BTreeSet<String> {
        self.seen.union(&self.unseen).cloned().collect()
    }

    /// Checks that the split covers every label present in `dataset`.
    pub fn validate_against(&self, dataset: &Dataset) -> Result<()> {
        let missing: Vec<&str> = dataset
            .classes()
            .iter()
            .filter(|c| !self.seen.contains(*c) && !self.unseen.contains(*c))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!(
                "labels not covered by the split: {}",
                missing.join(", ")
            )));
        }
        Ok(())
    }
}

/// Draws `unseen_count` labels uniformly at random as unseen classes.
pub fn make_split(labels: &[String], unseen_count: usize, rng_seed: u64) -> Result<ZeroShotSplit> {
    let mut sorted: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if sorted.len() != labels.len() {
        return Err(Error::Config("duplicate labels passed to make_split".into()));
    }
    if unseen_count == 0 || unseen_count >= sorted.len() {
        return Err(Error::Config(format!(
            "unseen_count {unseen_count} must lie in 1..{}",
            sorted.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sorted.shuffle(&mut rng);
    let unseen = sorted[..unseen_count].iter().cloned().collect();
    let seen = sorted[unseen_count..].iter().cloned().collect();
    ZeroShotSplit::new(seen, unseen)
}
