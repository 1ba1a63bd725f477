//! Feature ingestion, zero-shot splits, triad sampling and synthetic data.

mod records;
mod split;
mod synth;
mod triads;

pub use records::{
    load_features, load_word_table, ClassMembers, Dataset, FeatureRecord, Modality, WordTable,
    FEATURE_HEADER, WORDS_HEADER,
};
pub(crate) use records::{push_values, write_file};
pub use split::{make_split, ZeroShotSplit};
pub use synth::{synth_generate, synth_label, SynthConfig};
pub use triads::{sample_triads, Triad, TriadMode};
