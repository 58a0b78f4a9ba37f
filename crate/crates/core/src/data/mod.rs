//! Interaction logs, modality features, the item-level cold-start split,
//! BPR triplet sampling, and synthetic benchmark generation.

mod dataset;
mod features;
mod interactions;
mod sampling;
mod split;
pub mod synthetic;

pub use dataset::{
    data_hash, load_dataset, save_dataset, DataManifest, Dataset, ModalitySpec, INTERACTIONS_FILE, MANIFEST_FILE,
};
pub use features::{load_features, save_features, ModalityFeatureTable, ModalityFeatures};
pub use interactions::{
    load_interactions, save_interactions, ColdStartSplit, Interaction, InteractionSet, Interner, Partition,
};
pub use sampling::{sample_triplets, Triplet, TripletBatch, TripletSampler};
pub use split::{cold_start_split, write_split_files, SplitRatios};
pub use synthetic::{generate_synthetic, generate_synthetic_with_latents, SyntheticLatents, SyntheticSpec};
