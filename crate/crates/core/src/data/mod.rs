//! Corpus ingestion: captions, precomputed image features, vocabulary,
//! train/dev/test splits and a synthetic corpus generator.

pub mod captions;
pub mod dataset;
pub mod features;
pub mod synth;
pub mod vocab;

pub use captions::{load_captions, write_captions, CaptionGroup};
pub use dataset::{
    assemble_dataset, split_dataset, split_explicit, CaptionedImage, Dataset, Split, SplitIds,
    SplitSpec, SplitSpecLists, Splits,
};
pub use features::{load_features, write_features, FeatureFormat, FeatureStore};
pub use synth::{gen_synthetic, SyntheticCorpus};
pub use vocab::{build_vocab, Vocabulary, END, START, UNK};
