//! Dataset loading, global normalisation and triplet sampling.

mod cifar;
mod dataset;
mod idx;
mod normalize;
mod synthetic;
mod triplet;

pub use cifar::{load_cifar_binary, CIFAR_PIXELS};
pub use dataset::{Dataset, LabeledSample};
pub use idx::{encode_idx, load_idx_dataset, parse_idx, read_idx, IdxArray, IMAGES_MAGIC, LABELS_MAGIC};
pub use normalize::{normalize_global, NormStats};
pub use synthetic::{blobs, write_blobs_idx, BlobSpec};
pub use triplet::{enumerate_permutations, sample_triplet_batch, TripletBatch, TripletSampler};
