//! Lesion-volume statistics, patch-size selection and a reference 3D ViT
//! encoder for tumor segmentation experiments.
//!
//! The pipeline reads labelled CT volumes ([`volume_io`]), measures connected
//! lesions ([`lesion_stats`]), picks a cubic patch edge from the mean lesion
//! volume ([`patch_select`]), tokenizes volumes ([`tokenizer`]) and runs a
//! small double-precision ViT encoder with reverse-mode gradients ([`vit`])
//! under a Dice + cross-entropy loss ([`loss`]). [`synth`] builds phantoms
//! with known lesion volumes for testing.

pub mod config;
pub mod gradcheck;
pub mod init;
pub mod lesion_stats;
pub mod loss;
pub mod patch_select;
pub mod synth;
pub mod tokenizer;
pub mod verify;
pub mod vit;
pub mod volume_io;

pub use lesion_stats::{AggregationMode, Connectivity, DatasetStats, LesionStats};
pub use patch_select::{select_patch, token_geometry, PatchDecision, TokenGeometry, UnitMode};
pub use volume_io::{read_nifti, write_nifti, LabelVolume, VolumeError};
