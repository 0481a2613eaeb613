//! Pipeline configuration and recorded reference numbers.

use serde::{Deserialize, Serialize};

use crate::lesion_stats::{AggregationMode, Connectivity};
use crate::patch_select::{UnitMode, DEFAULT_CANDIDATES};
use crate::vit::ViTConfig;

/// Resampled voxel spacing of the reference datasets, mm.
pub const REFERENCE_SPACING_MM: [f32; 3] = [0.765, 0.765, 1.5];
pub const REFERENCE_DIMS: [usize; 3] = [256, 256, 96];
/// Published parameter count of the 12-layer, 768-wide encoder.
pub const REFERENCE_BASE_PARAMS: usize = 86_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnitModeName {
    #[default]
    VoxelEdge,
    PaperLiteral,
}

impl std::str::FromStr for UnitModeName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "voxel-edge" => Ok(Self::VoxelEdge),
            "paper-literal" => Ok(Self::PaperLiteral),
            other => Err(format!("unknown unit mode {other}")),
        }
    }
}

/// Optimizer settings carried as provenance only; nothing here trains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMetadata {
    pub optimizer: String,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for TrainingMetadata {
    fn default() -> Self {
        Self { optimizer: "Adam".into(), learning_rate: 1e-4, weight_decay: 1e-5, batch_size: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub dims: [usize; 3],
    pub candidates: Vec<usize>,
    pub unit_mode: UnitModeName,
    pub scale_s: Option<f64>,
    pub spacing_mm: [f32; 3],
    pub connectivity: Connectivity,
    pub aggregation_mode: AggregationMode,
    pub target_label: u8,
    pub histogram_bins: usize,
    pub vit_preset: String,
    pub seed: u64,
    pub training: TrainingMetadata,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dims: REFERENCE_DIMS,
            candidates: DEFAULT_CANDIDATES.to_vec(),
            unit_mode: UnitModeName::VoxelEdge,
            scale_s: None,
            spacing_mm: REFERENCE_SPACING_MM,
            connectivity: Connectivity::TwentySix,
            aggregation_mode: AggregationMode::PerLesion,
            target_label: 2,
            histogram_bins: 10,
            vit_preset: "tiny".into(),
            seed: 0,
            training: TrainingMetadata::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn resolved_unit_mode(&self) -> Result<UnitMode, String> {
        match (self.unit_mode, self.scale_s) {
            (UnitModeName::VoxelEdge, _) => Ok(UnitMode::VoxelEdge),
            (UnitModeName::PaperLiteral, Some(s)) => Ok(UnitMode::PaperLiteral { s }),
            (UnitModeName::PaperLiteral, None) => Err("paper-literal mode needs a scale s".into()),
        }
    }

    pub fn vit_config(&self) -> Result<ViTConfig, String> {
        ViTConfig::preset(&self.vit_preset).ok_or_else(|| format!("unknown ViT preset {}", self.vit_preset))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceDataset {
    pub name: &'static str,
    pub mean_tumor_volume_cm3: f64,
    pub selected_patch: usize,
    /// Tumor DSC (%) per patch size after training from scratch.
    pub tumor_dsc_by_patch: &'static [(usize, f64)],
}

/// Published outcomes kept alongside reports for comparison. Only the
/// volumes and selected patch sizes are checkable here; the DSC values need
/// GPU training on the original data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceResults {
    pub datasets: [ReferenceDataset; 2],
    pub candidates: [usize; 4],
    pub spacing_mm: [f32; 3],
    pub pretraining_tumor_dsc_gain_at_16: f64,
    pub base_param_count: usize,
    pub reproducible_here: &'static [&'static str],
    pub not_reproducible_here: &'static [&'static str],
}

pub fn reference_results() -> ReferenceResults {
    ReferenceResults {
        datasets: [
            ReferenceDataset {
                name: "LiTS",
                mean_tumor_volume_cm3: 17.56,
                selected_patch: 16,
                tumor_dsc_by_patch: &[(8, 48.62), (12, 51.19), (16, 53.08), (24, 51.91)],
            },
            ReferenceDataset {
                name: "mCRC",
                mean_tumor_volume_cm3: 10.42,
                selected_patch: 12,
                tumor_dsc_by_patch: &[(8, 39.64), (12, 41.44), (16, 40.14), (24, 38.82)],
            },
        ],
        candidates: DEFAULT_CANDIDATES,
        spacing_mm: REFERENCE_SPACING_MM,
        pretraining_tumor_dsc_gain_at_16: 4.8,
        base_param_count: REFERENCE_BASE_PARAMS,
        reproducible_here: &["patch selection from mean volume", "token geometry", "parameter count"],
        not_reproducible_here: &["tumor and liver DSC", "pretraining DSC gain", "training time"],
    }
}
