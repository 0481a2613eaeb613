//! Patch-size selection from mean lesion volume.
//!
//! The selected patch edge `M*` is the candidate closest to the cube-root
//! target edge derived from the mean lesion volume:
//! `M* = argmin_M | cbrt(V·S) − M |`. How `V·S` is formed is the [`UnitMode`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lesion_stats::DatasetStats;

pub const DEFAULT_CANDIDATES: [usize; 4] = [8, 12, 16, 24];

#[derive(Debug, Error, PartialEq)]
pub enum SelectError {
    #[error("volume and spacing must be finite and positive")]
    NonPositiveInput,
    #[error("candidate list is empty")]
    EmptyCandidates,
    #[error("patch size must be >= 1, got {0}")]
    InvalidCandidate(usize),
    #[error("target edge must be finite and positive, got {0}")]
    InvalidTarget(f64),
    #[error("image dimensions must be positive, got {0:?}")]
    InvalidDims([usize; 3]),
    #[error("a transfer plan needs at least two datasets")]
    NeedTwoDatasets,
}

/// How the cube-root term turns a volume into an edge length.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum UnitMode {
    /// `cbrt(V_mm³ / (sx·sy·sz))`: edge in voxels of a cube holding the mean
    /// lesion volume.
    #[default]
    VoxelEdge,
    /// `cbrt(V_mm³ · s)` with a caller-supplied scalar `s`.
    PaperLiteral { s: f64 },
}

impl UnitMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::VoxelEdge => "voxel-edge",
            Self::PaperLiteral { .. } => "paper-literal",
        }
    }
}

pub fn target_edge(mean_volume_mm3: f64, spacing_mm: [f64; 3], mode: UnitMode) -> Result<f64, SelectError> {
    let positive = |x: f64| x.is_finite() && x > 0.0;
    if !positive(mean_volume_mm3) {
        return Err(SelectError::NonPositiveInput);
    }
    match mode {
        UnitMode::VoxelEdge => {
            if !spacing_mm.iter().all(|&s| positive(s)) {
                return Err(SelectError::NonPositiveInput);
            }
            let voxel: f64 = spacing_mm.iter().product();
            Ok((mean_volume_mm3 / voxel).cbrt())
        }
        UnitMode::PaperLiteral { s } => {
            if !positive(s) {
                return Err(SelectError::NonPositiveInput);
            }
            Ok((mean_volume_mm3 * s).cbrt())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGeometry {
    pub patch: usize,
    /// Patches per axis, `ceil(dim / M)`.
    pub grid: [usize; 3],
    pub token_count: usize,
    pub padded_dims: [usize; 3],
    pub pad_voxels: usize,
    pub divides_exactly: [bool; 3],
}

impl TokenGeometry {
    pub fn needs_padding(&self) -> bool {
        self.pad_voxels > 0
    }
}

pub fn token_geometry(dims: [usize; 3], patch: usize) -> TokenGeometry {
    assert!(patch >= 1, "patch size must be >= 1");
    let grid = dims.map(|d| d.div_ceil(patch));
    let padded_dims = grid.map(|g| g * patch);
    let original: usize = dims.iter().product();
    let padded: usize = padded_dims.iter().product();
    TokenGeometry {
        patch,
        grid,
        token_count: grid.iter().product(),
        padded_dims,
        pad_voxels: padded - original,
        divides_exactly: dims.map(|d| d % patch == 0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchDecision {
    pub candidates: Vec<usize>,
    pub target_edge: f64,
    pub scores: Vec<f64>,
    pub selected: usize,
    pub geometry: Vec<TokenGeometry>,
}

impl PatchDecision {
    pub fn selected_geometry(&self) -> &TokenGeometry {
        self.geometry.iter().find(|g| g.patch == self.selected).expect("selected is a candidate")
    }
}

/// Argmin of `|target − M|`; ties go to the smallest `M`.
pub fn select_patch(target_edge: f64, candidates: &[usize], dims: [usize; 3]) -> Result<PatchDecision, SelectError> {
    if candidates.is_empty() {
        return Err(SelectError::EmptyCandidates);
    }
    if let Some(&bad) = candidates.iter().find(|&&m| m == 0) {
        return Err(SelectError::InvalidCandidate(bad));
    }
    if !(target_edge.is_finite() && target_edge > 0.0) {
        return Err(SelectError::InvalidTarget(target_edge));
    }
    if dims.contains(&0) {
        return Err(SelectError::InvalidDims(dims));
    }
    let scores: Vec<f64> = candidates.iter().map(|&m| (target_edge - m as f64).abs()).collect();
    let selected = candidates
        .iter()
        .zip(&scores)
        .min_by(|(ma, sa), (mb, sb)| sa.total_cmp(sb).then(ma.cmp(mb)))
        .map(|(&m, _)| m)
        .expect("non-empty");
    let geometry = candidates.iter().map(|&m| token_geometry(dims, m)).collect();
    Ok(PatchDecision { candidates: candidates.to_vec(), target_edge, scores, selected, geometry })
}

/// Range of `s` for which paper-literal mode sends each `(volume, wanted M)`
/// pair to its wanted candidate. Bounds come from the midpoints between
/// neighbouring candidates; returns `None` when the constraints are
/// incompatible. The lower bound may be exclusive because ties go to the
/// smaller candidate.
pub fn literal_scale_interval(
    requirements: &[(f64, usize)],
    candidates: &[usize],
) -> Option<(f64, f64)> {
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut lo = 0.0f64;
    let mut hi = f64::INFINITY;
    for &(volume, wanted) in requirements {
        let pos = sorted.iter().position(|&m| m == wanted)?;
        let edge_lo = if pos == 0 { 0.0 } else { (sorted[pos - 1] + sorted[pos]) as f64 / 2.0 };
        let edge_hi = sorted.get(pos + 1).map_or(f64::INFINITY, |&next| (sorted[pos] + next) as f64 / 2.0);
        lo = lo.max(edge_lo.powi(3) / volume);
        hi = hi.min(edge_hi.powi(3) / volume);
    }
    (lo < hi).then_some((lo, hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub dataset_id: String,
    pub mean_volume_mm3: f64,
    pub selected_patch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPlan {
    /// Descending mean lesion volume; ties by id.
    pub ordered_datasets: Vec<PlanEntry>,
    pub pretrain_on: String,
    pub finetune_on: Vec<String>,
}

/// Order datasets so pretraining uses the one with the largest lesions.
pub fn transfer_plan(datasets: &[(String, DatasetStats, PatchDecision)]) -> Result<TransferPlan, SelectError> {
    if datasets.len() < 2 {
        return Err(SelectError::NeedTwoDatasets);
    }
    let mut entries: Vec<PlanEntry> = datasets
        .iter()
        .map(|(id, stats, decision)| PlanEntry {
            dataset_id: id.clone(),
            mean_volume_mm3: stats.dataset_mean_volume_mm3,
            selected_patch: decision.selected,
        })
        .collect();
    entries.sort_by(|a, b| {
        b.mean_volume_mm3.total_cmp(&a.mean_volume_mm3).then_with(|| a.dataset_id.cmp(&b.dataset_id))
    });
    Ok(TransferPlan {
        pretrain_on: entries[0].dataset_id.clone(),
        finetune_on: entries[1..].iter().map(|e| e.dataset_id.clone()).collect(),
        ordered_datasets: entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lesion_stats::{AggregationMode, LesionStats};
    use proptest::prelude::*;

    const DIMS: [usize; 3] = [256, 256, 96];

    #[test]
    fn exact_cube_edge() {
        assert_eq!(target_edge(4096.0, [1.0; 3], UnitMode::VoxelEdge).unwrap(), 16.0);
        assert_eq!(target_edge(1000.0, [1.0; 3], UnitMode::PaperLiteral { s: 1.0 }).unwrap(), 10.0);
    }

    #[test]
    fn lits_voxel_edge() {
        let voxel = 0.765 * 0.765 * 1.5;
        let by_hand = (17560.0f64 / voxel).powf(1.0 / 3.0);
        let got = target_edge(17560.0, [0.765, 0.765, 1.5], UnitMode::VoxelEdge).unwrap();
        assert!((got - by_hand).abs() < 1e-12);
        assert!((got - 27.1459).abs() < 1e-3, "{got}");
    }

    #[test]
    fn rejects_non_positive() {
        assert_eq!(target_edge(-1.0, [1.0; 3], UnitMode::VoxelEdge), Err(SelectError::NonPositiveInput));
        assert_eq!(target_edge(1.0, [1.0, 0.0, 1.0], UnitMode::VoxelEdge), Err(SelectError::NonPositiveInput));
        assert_eq!(target_edge(1.0, [1.0; 3], UnitMode::PaperLiteral { s: 0.0 }), Err(SelectError::NonPositiveInput));
    }

    #[test]
    fn selection_examples() {
        let d = select_patch(16.0, &DEFAULT_CANDIDATES, DIMS).unwrap();
        assert_eq!(d.selected, 16);
        assert_eq!(d.scores, vec![8.0, 4.0, 0.0, 8.0]);
        let d = select_patch(10.0, &DEFAULT_CANDIDATES, DIMS).unwrap();
        assert_eq!(d.scores, vec![2.0, 2.0, 6.0, 14.0]);
        assert_eq!(d.selected, 8);
        // tie-break does not depend on list order
        assert_eq!(select_patch(10.0, &[12, 8], DIMS).unwrap().selected, 8);
        assert_eq!(select_patch(1.0, &[], DIMS), Err(SelectError::EmptyCandidates));
        assert_eq!(select_patch(1.0, &[0, 8], DIMS), Err(SelectError::InvalidCandidate(0)));
    }

    #[test]
    fn geometry_examples() {
        let g = token_geometry(DIMS, 16);
        assert_eq!((g.grid, g.token_count, g.pad_voxels), ([16, 16, 6], 1536, 0));
        assert_eq!(token_geometry(DIMS, 8).token_count, 12288);
        let g = token_geometry(DIMS, 12);
        assert_eq!(g.grid, [22, 22, 8]);
        assert_eq!(g.token_count, 3872);
        assert_eq!(g.divides_exactly, [false, false, true]);
        assert_eq!(g.padded_dims, [264, 264, 96]);
        assert_eq!(g.pad_voxels, 264 * 264 * 96 - 256 * 256 * 96);
    }

    #[test]
    fn literal_interval_matches_hand_bounds() {
        let (lo, hi) = literal_scale_interval(&[(17560.0, 16), (10420.0, 12)], &DEFAULT_CANDIDATES).unwrap();
        assert!((lo - 2744.0 / 17560.0).abs() < 1e-15);
        assert!((hi - 2744.0 / 10420.0).abs() < 1e-15);
        assert!(literal_scale_interval(&[(17560.0, 8), (10420.0, 24)], &DEFAULT_CANDIDATES).is_none());
    }

    fn dataset(mean: f64) -> DatasetStats {
        let s = LesionStats::from_volumes(vec![mean], 1).unwrap();
        DatasetStats::aggregate(vec![("scan".into(), s)], AggregationMode::PerLesion).unwrap()
    }

    #[test]
    fn plan_orders_by_volume_then_id() {
        let dec = |t| select_patch(t, &DEFAULT_CANDIDATES, DIMS).unwrap();
        let plan = transfer_plan(&[
            ("mCRC".into(), dataset(10420.0), dec(12.0)),
            ("LiTS".into(), dataset(17560.0), dec(16.0)),
        ])
        .unwrap();
        assert_eq!(plan.pretrain_on, "LiTS");
        assert_eq!(plan.finetune_on, vec!["mCRC".to_string()]);
        assert_eq!(plan.ordered_datasets[0].selected_patch, 16);

        let tie = transfer_plan(&[("b".into(), dataset(5.0), dec(8.0)), ("a".into(), dataset(5.0), dec(8.0))]).unwrap();
        assert_eq!(tie.pretrain_on, "a");

        assert_eq!(transfer_plan(&[("a".into(), dataset(5.0), dec(8.0))]), Err(SelectError::NeedTwoDatasets));
    }

    proptest! {
        #[test]
        fn selected_minimises_score(target in 0.01f64..100.0, cands in proptest::collection::vec(1usize..64, 1..8)) {
            let d = select_patch(target, &cands, DIMS).unwrap();
            prop_assert!(cands.contains(&d.selected));
            let best = d.scores.iter().copied().fold(f64::INFINITY, f64::min);
            let sel_score = (target - d.selected as f64).abs();
            prop_assert_eq!(sel_score, best);
            for (m, s) in cands.iter().zip(&d.scores) {
                if *s == best { prop_assert!(d.selected <= *m); }
            }
        }

        #[test]
        fn scaling_scores_keeps_argmin(target in 0.01f64..100.0, k in 0.001f64..1000.0) {
            let d = select_patch(target, &DEFAULT_CANDIDATES, DIMS).unwrap();
            let scaled: Vec<f64> = d.scores.iter().map(|s| s * k).collect();
            let arg = (0..scaled.len())
                .min_by(|&a, &b| scaled[a].total_cmp(&scaled[b]).then(DEFAULT_CANDIDATES[a].cmp(&DEFAULT_CANDIDATES[b])))
                .unwrap();
            prop_assert_eq!(DEFAULT_CANDIDATES[arg], d.selected);
        }

        #[test]
        fn selection_monotone_in_target(a in 0.01f64..100.0, b in 0.01f64..100.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let sl = select_patch(lo, &DEFAULT_CANDIDATES, DIMS).unwrap().selected;
            let sh = select_patch(hi, &DEFAULT_CANDIDATES, DIMS).unwrap().selected;
            prop_assert!(sl <= sh);
        }

        #[test]
        fn dividing_patch_reproduces_volume(gh in 1usize..20, gw in 1usize..20, gl in 1usize..20, m in 1usize..9) {
            let dims = [gh * m, gw * m, gl * m];
            let g = token_geometry(dims, m);
            prop_assert_eq!(g.token_count * m * m * m, dims.iter().product::<usize>());
            prop_assert_eq!(g.pad_voxels, 0);
        }
    }
}
