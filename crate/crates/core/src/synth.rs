//! Ellipsoid phantoms with analytically known lesion volumes.
//!
//! Voxel `(i, j, k)` has its center at `((i+½)·sx, (j+½)·sy, (k+½)·sz)` mm and
//! belongs to an ellipsoid when `Σ ((p − c)/axis)² ≤ 1`. Lesions may not
//! overlap or touch (26-neighbourhood), so each one rasterizes to its own
//! connected component.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume_io::{write_nifti, LabelVolume, VolumeError};

pub const TUMOR_LABEL: u8 = 2;
pub const LIVER_LABEL: u8 = 1;
const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("lesions {0} and {1} overlap or touch")]
    OverlapError(usize, usize),
    #[error("{what} extends outside the volume")]
    OutOfBounds { what: String },
    #[error("invalid phantom: {0}")]
    Invalid(String),
    #[error("could not place {wanted} lesions without contact (placed {placed})")]
    PlacementFailed { wanted: usize, placed: usize },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn tumor_label() -> u8 {
    TUMOR_LABEL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
    #[serde(default = "tumor_label")]
    pub label: u8,
}

impl Ellipsoid {
    pub fn sphere(center_mm: [f64; 3], radius_mm: f64) -> Self {
        Self { center_mm, semi_axes_mm: [radius_mm; 3], label: TUMOR_LABEL }
    }

    /// `4/3·π·a·b·c`
    pub fn analytic_volume_mm3(&self) -> f64 {
        4.0 / 3.0 * PI * self.semi_axes_mm.iter().product::<f64>()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center_mm[a]) / self.semi_axes_mm[a]).powi(2)).sum::<f64>() <= 1.0
    }

    fn bounding_radius(&self) -> f64 {
        self.semi_axes_mm.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f32; 3],
    #[serde(default)]
    pub lesions: Vec<Ellipsoid>,
    #[serde(default)]
    pub liver: Option<Ellipsoid>,
    #[serde(default)]
    pub seed: u64,
}

impl PhantomSpec {
    pub fn extent_mm(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.dims[a] as f64 * f64::from(self.spacing_mm[a]))
    }

    pub fn analytic_volumes_mm3(&self) -> Vec<f64> {
        self.lesions.iter().map(Ellipsoid::analytic_volume_mm3).collect()
    }

    pub fn analytic_mean_mm3(&self) -> f64 {
        if self.lesions.is_empty() {
            0.0
        } else {
            self.analytic_volumes_mm3().iter().sum::<f64>() / self.lesions.len() as f64
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.dims.contains(&0) {
            return Err(SynthError::Invalid(format!("dims {:?}", self.dims)));
        }
        let extent = self.extent_mm();
        let check = |e: &Ellipsoid, what: String| -> Result<(), SynthError> {
            if e.semi_axes_mm.iter().any(|&a| !(a.is_finite() && a > 0.0)) {
                return Err(SynthError::Invalid(format!("{what} has non-positive semi-axes")));
            }
            for (a, &limit) in extent.iter().enumerate() {
                let lo = e.center_mm[a] - e.semi_axes_mm[a];
                let hi = e.center_mm[a] + e.semi_axes_mm[a];
                if !(lo >= 0.0 && hi <= limit) {
                    return Err(SynthError::OutOfBounds { what });
                }
            }
            Ok(())
        };
        if let Some(liver) = &self.liver {
            check(liver, "liver".into())?;
        }
        for (i, e) in self.lesions.iter().enumerate() {
            check(e, format!("lesion {i}"))?;
            if e.label == 0 {
                return Err(SynthError::Invalid(format!("lesion {i} uses the background label")));
            }
        }
        Ok(())
    }
}

/// Per-lesion voxel counts after rasterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterReport {
    pub lesion_voxels: Vec<usize>,
    /// Lesions smaller than the grid resolves; they contribute no voxels.
    pub empty_lesions: Vec<usize>,
}

/// Voxel index ranges whose centers could fall inside `e`.
fn voxel_range(e: &Ellipsoid, spacing: [f64; 3], dims: [usize; 3]) -> [std::ops::Range<usize>; 3] {
    [0, 1, 2].map(|a| {
        let lo = ((e.center_mm[a] - e.semi_axes_mm[a]) / spacing[a] - 0.5).floor().max(0.0) as usize;
        let hi = ((e.center_mm[a] + e.semi_axes_mm[a]) / spacing[a] - 0.5).ceil().max(0.0) as usize + 1;
        lo.min(dims[a])..hi.min(dims[a])
    })
}

fn for_each_voxel_in(e: &Ellipsoid, spacing: [f64; 3], dims: [usize; 3], mut f: impl FnMut([usize; 3])) {
    let [rx, ry, rz] = voxel_range(e, spacing, dims);
    for z in rz {
        for y in ry.clone() {
            for x in rx.clone() {
                let p = [(x as f64 + 0.5) * spacing[0], (y as f64 + 0.5) * spacing[1], (z as f64 + 0.5) * spacing[2]];
                if e.contains(p) {
                    f([x, y, z]);
                }
            }
        }
    }
}

pub fn rasterize(spec: &PhantomSpec) -> Result<LabelVolume, SynthError> {
    rasterize_with_report(spec).map(|(v, _)| v)
}

pub fn rasterize_with_report(spec: &PhantomSpec) -> Result<(LabelVolume, RasterReport), SynthError> {
    spec.validate()?;
    let dims = spec.dims;
    let spacing = spec.spacing_mm.map(f64::from);
    let mut vol = LabelVolume::zeros(dims, spec.spacing_mm)?;
    if let Some(liver) = &spec.liver {
        let label = liver.label;
        for_each_voxel_in(liver, spacing, dims, |[x, y, z]| vol.set(x, y, z, label));
    }

    // owner[i] = lesion index + 1
    let mut owner = vec![0u32; vol.len()];
    let mut lesion_voxels = vec![0usize; spec.lesions.len()];
    for (i, lesion) in spec.lesions.iter().enumerate() {
        let me = i as u32 + 1;
        let mut clash = None;
        for_each_voxel_in(lesion, spacing, dims, |[x, y, z]| {
            if clash.is_some() {
                return;
            }
            for dz in -1isize..=1 {
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (nx, ny, nz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                        if nx < 0 || ny < 0 || nz < 0 || nx >= dims[0] as isize || ny >= dims[1] as isize || nz >= dims[2] as isize {
                            continue;
                        }
                        let o = owner[vol.index(nx as usize, ny as usize, nz as usize)];
                        if o != 0 && o != me {
                            clash = Some(o as usize - 1);
                        }
                    }
                }
            }
            let idx = vol.index(x, y, z);
            owner[idx] = me;
            vol.set(x, y, z, lesion.label);
            lesion_voxels[i] += 1;
        });
        if let Some(other) = clash {
            return Err(SynthError::OverlapError(other, i));
        }
    }
    let empty_lesions = lesion_voxels.iter().enumerate().filter(|(_, &n)| n == 0).map(|(i, _)| i).collect();
    Ok((vol, RasterReport { lesion_voxels, empty_lesions }))
}

/// Knobs for [`random_spec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomPhantom {
    pub dims: [usize; 3],
    pub spacing_mm: [f32; 3],
    pub lesions: usize,
    /// Semi-axes are drawn uniformly from this range (mm), never below the
    /// voxel spacing so that every lesion covers at least one voxel center.
    pub semi_axis_mm: (f64, f64),
    pub with_liver: bool,
}

/// Non-touching random ellipsoids, reproducible from `seed`.
pub fn random_spec(cfg: &RandomPhantom, seed: u64) -> Result<PhantomSpec, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spacing = cfg.spacing_mm.map(f64::from);
    let max_spacing = spacing.iter().copied().fold(0.0, f64::max);
    let extent = [0, 1, 2].map(|a| cfg.dims[a] as f64 * spacing[a]);
    let (lo, hi) = cfg.semi_axis_mm;
    if !(lo > 0.0 && hi >= lo) {
        return Err(SynthError::Invalid(format!("semi-axis range {:?}", cfg.semi_axis_mm)));
    }
    // 26-adjacent voxel centers are at most sqrt(3)·max_spacing apart
    let gap = 3f64.sqrt() * max_spacing;

    let mut lesions: Vec<Ellipsoid> = Vec::with_capacity(cfg.lesions);
    let mut attempts = 0;
    while lesions.len() < cfg.lesions {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(SynthError::PlacementFailed { wanted: cfg.lesions, placed: lesions.len() });
        }
        let axes = [0, 1, 2].map(|a| rng.random_range(lo..=hi).max(spacing[a]));
        if (0..3).any(|a| 2.0 * axes[a] > extent[a]) {
            continue;
        }
        let center = [0, 1, 2].map(|a| rng.random_range(axes[a]..=extent[a] - axes[a]));
        let candidate = Ellipsoid { center_mm: center, semi_axes_mm: axes, label: TUMOR_LABEL };
        let clear = lesions.iter().all(|other| {
            let d = (0..3).map(|a| (center[a] - other.center_mm[a]).powi(2)).sum::<f64>().sqrt();
            d > candidate.bounding_radius() + other.bounding_radius() + gap
        });
        if clear {
            lesions.push(candidate);
        }
    }

    let liver = cfg.with_liver.then(|| Ellipsoid {
        center_mm: extent.map(|e| e / 2.0),
        semi_axes_mm: extent.map(|e| 0.45 * e),
        label: LIVER_LABEL,
    });
    Ok(PhantomSpec { dims: cfg.dims, spacing_mm: cfg.spacing_mm, lesions, liver, seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarLesion {
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
    pub label: u8,
    pub analytic_volume_mm3: f64,
    pub voxel_count: usize,
    pub rasterized_volume_mm3: f64,
}

/// Oracle values written next to each fixture volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub scan_id: String,
    pub dims: [usize; 3],
    pub spacing_mm: [f32; 3],
    pub seed: u64,
    pub lesions: Vec<SidecarLesion>,
    pub analytic_mean_volume_mm3: f64,
    pub rasterized_mean_volume_mm3: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureFiles {
    pub volume: PathBuf,
    pub sidecar: PathBuf,
}

/// Writes `<scan_id>.nii` and `<scan_id>.json` into `dir`.
pub fn write_fixture(spec: &PhantomSpec, dir: impl AsRef<Path>, scan_id: &str) -> Result<FixtureFiles, SynthError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (vol, report) = rasterize_with_report(spec)?;
    let voxel_mm3 = vol.voxel_volume_mm3();
    let lesions: Vec<SidecarLesion> = spec
        .lesions
        .iter()
        .zip(&report.lesion_voxels)
        .map(|(e, &n)| SidecarLesion {
            center_mm: e.center_mm,
            semi_axes_mm: e.semi_axes_mm,
            label: e.label,
            analytic_volume_mm3: e.analytic_volume_mm3(),
            voxel_count: n,
            rasterized_volume_mm3: n as f64 * voxel_mm3,
        })
        .collect();
    let rasterized_mean = if lesions.is_empty() {
        0.0
    } else {
        lesions.iter().map(|l| l.rasterized_volume_mm3).sum::<f64>() / lesions.len() as f64
    };
    let sidecar = Sidecar {
        scan_id: scan_id.to_string(),
        dims: spec.dims,
        spacing_mm: spec.spacing_mm,
        seed: spec.seed,
        lesions,
        analytic_mean_volume_mm3: spec.analytic_mean_mm3(),
        rasterized_mean_volume_mm3: rasterized_mean,
    };
    let files = FixtureFiles { volume: dir.join(format!("{scan_id}.nii")), sidecar: dir.join(format!("{scan_id}.json")) };
    write_nifti(&vol, &files.volume)?;
    fs::write(&files.sidecar, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lesion_stats::{connected_components, lesion_stats, Connectivity};

    fn spec(dims: [usize; 3], spacing: f32, lesions: Vec<Ellipsoid>) -> PhantomSpec {
        PhantomSpec { dims, spacing_mm: [spacing; 3], lesions, liver: None, seed: 0 }
    }

    #[test]
    fn sphere_volume_within_five_percent() {
        let s = spec([64; 3], 1.0, vec![Ellipsoid::sphere([32.0; 3], 10.0)]);
        let (vol, report) = rasterize_with_report(&s).unwrap();
        let analytic = 4.0 / 3.0 * PI * 1000.0;
        assert!((analytic - 4_188.790_204_786_391).abs() < 1e-9);
        let measured = report.lesion_voxels[0] as f64;
        assert!((measured / analytic - 1.0).abs() < 0.05, "{measured}");
        assert_eq!(vol.count_label(TUMOR_LABEL), report.lesion_voxels[0]);
        let stats = lesion_stats(&vol, TUMOR_LABEL, 4, Connectivity::TwentySix).unwrap();
        assert!((stats.mean_volume_mm3 / analytic - 1.0).abs() < 0.05);
    }

    #[test]
    fn sub_voxel_lesion_is_reported_empty() {
        // center on a voxel corner, radius well below half a voxel
        let s = spec([8; 3], 1.0, vec![Ellipsoid::sphere([4.0; 3], 0.2)]);
        let (vol, report) = rasterize_with_report(&s).unwrap();
        assert_eq!(report.empty_lesions, vec![0]);
        assert_eq!(vol.count_label(TUMOR_LABEL), 0);
    }

    #[test]
    fn two_disjoint_spheres_give_two_components() {
        let s = spec([16; 3], 1.0, vec![Ellipsoid::sphere([4.0; 3], 1.0), Ellipsoid::sphere([12.0; 3], 1.0)]);
        let vol = rasterize(&s).unwrap();
        assert_eq!(connected_components(&vol, TUMOR_LABEL, Connectivity::TwentySix).len(), 2);
    }

    #[test]
    fn overlap_and_bounds_are_errors() {
        let touching = spec([16; 3], 1.0, vec![Ellipsoid::sphere([5.0; 3], 2.0), Ellipsoid::sphere([5.0, 5.0, 9.0], 2.0)]);
        assert!(matches!(rasterize(&touching), Err(SynthError::OverlapError(0, 1))));
        let outside = spec([16; 3], 1.0, vec![Ellipsoid::sphere([1.0; 3], 2.0)]);
        assert!(matches!(rasterize(&outside), Err(SynthError::OutOfBounds { .. })));
    }

    #[test]
    fn empty_spec_is_background() {
        let vol = rasterize(&spec([4, 5, 6], 0.5, vec![])).unwrap();
        assert!(vol.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn lesions_override_liver() {
        let mut s = spec([20; 3], 1.0, vec![Ellipsoid::sphere([10.0; 3], 3.0)]);
        s.liver = Some(Ellipsoid { center_mm: [10.0; 3], semi_axes_mm: [9.0; 3], label: LIVER_LABEL });
        let vol = rasterize(&s).unwrap();
        assert_eq!(vol.get(10, 10, 10), TUMOR_LABEL);
        assert_eq!(vol.get(10, 10, 16), LIVER_LABEL);
        assert_eq!(vol.get(0, 0, 0), 0);
    }

    #[test]
    fn whole_voxel_translation_is_invariant() {
        let a = spec([32; 3], 1.0, vec![Ellipsoid { center_mm: [10.3, 11.7, 12.1], semi_axes_mm: [4.0, 5.0, 3.0], label: 2 }]);
        let mut b = a.clone();
        b.lesions[0].center_mm = [13.3, 11.7, 17.1];
        let (va, vb) = (rasterize(&a).unwrap(), rasterize(&b).unwrap());
        for z in 0..20 {
            for y in 0..32 {
                for x in 0..26 {
                    assert_eq!(va.get(x, y, z), vb.get(x + 3, y, z + 5));
                }
            }
        }
    }

    #[test]
    fn random_specs_are_reproducible() {
        let cfg = RandomPhantom { dims: [40; 3], spacing_mm: [1.0; 3], lesions: 5, semi_axis_mm: (2.0, 5.0), with_liver: true };
        let a = random_spec(&cfg, 42).unwrap();
        assert_eq!(a, random_spec(&cfg, 42).unwrap());
        assert_ne!(a, random_spec(&cfg, 43).unwrap());
        assert_eq!(a.lesions.len(), 5);
        let crowded = RandomPhantom { lesions: 500, ..cfg };
        assert!(matches!(random_spec(&crowded, 1), Err(SynthError::PlacementFailed { .. })));
    }

    #[test]
    fn spec_json_rejects_unknown_keys() {
        let ok = r#"{"dims":[8,8,8],"spacing_mm":[1,1,1],"lesions":[{"center_mm":[4,4,4],"semi_axes_mm":[2,2,2]}]}"#;
        let s: PhantomSpec = serde_json::from_str(ok).unwrap();
        assert_eq!(s.lesions[0].label, TUMOR_LABEL);
        let bad = r#"{"dims":[8,8,8],"spacing_mm":[1,1,1],"radius":3}"#;
        assert!(serde_json::from_str::<PhantomSpec>(bad).is_err());
    }
}
