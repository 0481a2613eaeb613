//! Connected-component lesion statistics.
//!
//! Each connected set of voxels carrying the target label is one lesion. Its
//! physical volume is `voxel_count · sx·sy·sz` in mm³. A dataset's mean lesion
//! volume is the `V` fed to patch-size selection.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume_io::LabelVolume;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("no scans given")]
    NoScans,
    #[error("histogram needs at least one bin")]
    ZeroBins,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbours only.
    #[serde(rename = "6")]
    Six,
    /// Face, edge and corner neighbours.
    #[default]
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::with_capacity(26);
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

impl std::str::FromStr for Connectivity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "6" => Ok(Self::Six),
            "26" => Ok(Self::TwentySix),
            other => Err(format!("connectivity must be 6 or 26, got {other}")),
        }
    }
}

/// Inclusive voxel-index bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoundingBox {
    fn point(p: [usize; 3]) -> Self {
        Self { min: p, max: p }
    }

    fn grow(&mut self, p: [usize; 3]) {
        for (a, &v) in p.iter().enumerate() {
            self.min[a] = self.min[a].min(v);
            self.max[a] = self.max[a].max(v);
        }
    }

    /// Sort key: lower corner in (z, y, x) order.
    fn zyx_corner(&self) -> [usize; 3] {
        [self.min[2], self.min[1], self.min[0]]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    pub voxel_count: usize,
    pub bounding_box: BoundingBox,
}

/// Label every maximal connected set of `target_label` voxels.
///
/// Components come back largest first; equal sizes are ordered by the
/// bounding-box lower corner compared in (z, y, x) order.
pub fn connected_components(vol: &LabelVolume, target_label: u8, connectivity: Connectivity) -> Vec<Component> {
    let [h, w, l] = vol.dims();
    let labels = vol.labels();
    let offsets = connectivity.offsets();
    let mut visited = vec![false; labels.len()];
    let mut queue = VecDeque::new();
    let mut components = Vec::new();

    for start in 0..labels.len() {
        if visited[start] || labels[start] != target_label {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        let mut bbox = BoundingBox::point(vol.coords(start));
        let mut count = 0;
        while let Some(idx) = queue.pop_front() {
            count += 1;
            let p = vol.coords(idx);
            bbox.grow(p);
            for off in &offsets {
                let nx = p[0] as isize + off[0];
                let ny = p[1] as isize + off[1];
                let nz = p[2] as isize + off[2];
                if nx < 0 || ny < 0 || nz < 0 || nx >= h as isize || ny >= w as isize || nz >= l as isize {
                    continue;
                }
                let n = vol.index(nx as usize, ny as usize, nz as usize);
                if !visited[n] && labels[n] == target_label {
                    visited[n] = true;
                    queue.push_back(n);
                }
            }
        }
        components.push(Component { voxel_count: count, bounding_box: bbox });
    }

    components.sort_by(|a, b| {
        b.voxel_count
            .cmp(&a.voxel_count)
            .then_with(|| a.bounding_box.zyx_corner().cmp(&b.bounding_box.zyx_corner()))
    });
    components
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower_mm3: f64,
    pub upper_mm3: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionStats {
    /// Sorted descending.
    pub lesion_volumes_mm3: Vec<f64>,
    pub lesion_count: usize,
    pub mean_volume_mm3: f64,
    pub histogram: Vec<HistogramBin>,
}

impl LesionStats {
    pub fn from_volumes(mut volumes: Vec<f64>, bins: usize) -> Result<Self, StatsError> {
        if bins == 0 {
            return Err(StatsError::ZeroBins);
        }
        volumes.sort_by(|a, b| b.total_cmp(a));
        let mean = mean(&volumes);
        let histogram = histogram(&volumes, bins);
        Ok(Self { lesion_count: volumes.len(), lesion_volumes_mm3: volumes, mean_volume_mm3: mean, histogram })
    }

    pub fn total_volume_mm3(&self) -> f64 {
        self.lesion_volumes_mm3.iter().sum()
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Equal-width bins over `[0, max]`; the maximum falls in the last bin.
fn histogram(volumes: &[f64], bins: usize) -> Vec<HistogramBin> {
    let Some(max) = volumes.iter().copied().reduce(f64::max) else {
        return Vec::new();
    };
    let width = max / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in volumes {
        let b = if width > 0.0 { ((v / width) as usize).min(bins - 1) } else { bins - 1 };
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            lower_mm3: width * i as f64,
            upper_mm3: if i + 1 == bins { max } else { width * (i + 1) as f64 },
            count,
        })
        .collect()
}

pub fn lesion_stats(
    vol: &LabelVolume,
    target_label: u8,
    bins: usize,
    connectivity: Connectivity,
) -> Result<LesionStats, StatsError> {
    if bins == 0 {
        return Err(StatsError::ZeroBins);
    }
    let voxel_mm3 = vol.voxel_volume_mm3();
    let volumes = connected_components(vol, target_label, connectivity)
        .iter()
        .map(|c| c.voxel_count as f64 * voxel_mm3)
        .collect();
    LesionStats::from_volumes(volumes, bins)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// Mean over every lesion of every scan.
    #[default]
    PerLesion,
    /// Mean over scans of each scan's total lesion volume.
    PerScanTotal,
}

impl std::str::FromStr for AggregationMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-lesion" => Ok(Self::PerLesion),
            "per-scan-total" => Ok(Self::PerScanTotal),
            other => Err(format!("unknown aggregation mode {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub per_scan: Vec<(String, LesionStats)>,
    pub dataset_mean_volume_mm3: f64,
    pub aggregation_mode: AggregationMode,
}

impl DatasetStats {
    /// Fold per-scan statistics; scans are sorted by id first.
    pub fn aggregate(mut per_scan: Vec<(String, LesionStats)>, mode: AggregationMode) -> Result<Self, StatsError> {
        if per_scan.is_empty() {
            return Err(StatsError::NoScans);
        }
        per_scan.sort_by(|a, b| a.0.cmp(&b.0));
        let dataset_mean = match mode {
            AggregationMode::PerLesion => {
                let all: Vec<f64> =
                    per_scan.iter().flat_map(|(_, s)| s.lesion_volumes_mm3.iter().copied()).collect();
                mean(&all)
            }
            AggregationMode::PerScanTotal => {
                let totals: Vec<f64> = per_scan.iter().map(|(_, s)| s.total_volume_mm3()).collect();
                mean(&totals)
            }
        };
        Ok(Self { per_scan, dataset_mean_volume_mm3: dataset_mean, aggregation_mode: mode })
    }

    pub fn lesion_count(&self) -> usize {
        self.per_scan.iter().map(|(_, s)| s.lesion_count).sum()
    }
}

/// Per-scan statistics run in parallel on the current rayon pool.
pub fn dataset_stats(
    scans: &[(String, LabelVolume)],
    target_label: u8,
    bins: usize,
    connectivity: Connectivity,
    mode: AggregationMode,
) -> Result<DatasetStats, StatsError> {
    if scans.is_empty() {
        return Err(StatsError::NoScans);
    }
    let per_scan = scans
        .par_iter()
        .map(|(id, vol)| lesion_stats(vol, target_label, bins, connectivity).map(|s| (id.clone(), s)))
        .collect::<Result<Vec<_>, _>>()?;
    DatasetStats::aggregate(per_scan, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(dims: [usize; 3], spacing: [f32; 3], tumor: &[[usize; 3]]) -> LabelVolume {
        let mut v = LabelVolume::zeros(dims, spacing).unwrap();
        for p in tumor {
            v.set(p[0], p[1], p[2], 2);
        }
        v
    }

    /// Brute-force oracle: repeatedly merge labels of adjacent voxel pairs
    /// until nothing changes, then count distinct labels.
    fn brute_force_count(vol: &LabelVolume, label: u8, conn: Connectivity) -> usize {
        let pts: Vec<[usize; 3]> =
            (0..vol.len()).filter(|&i| vol.labels()[i] == label).map(|i| vol.coords(i)).collect();
        let mut id: Vec<usize> = (0..pts.len()).collect();
        loop {
            let mut changed = false;
            for i in 0..pts.len() {
                for j in 0..pts.len() {
                    let d: Vec<usize> = (0..3).map(|a| pts[i][a].abs_diff(pts[j][a])).collect();
                    let adjacent = match conn {
                        Connectivity::Six => d.iter().sum::<usize>() == 1,
                        Connectivity::TwentySix => d.iter().all(|&x| x <= 1) && d.iter().any(|&x| x > 0),
                    };
                    if adjacent && id[i] != id[j] {
                        let m = id[i].min(id[j]);
                        id[i] = m;
                        id[j] = m;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        id.sort_unstable();
        id.dedup();
        id.len()
    }

    #[test]
    fn empty_volume_has_no_components() {
        let v = grid([8, 8, 8], [1.0; 3], &[]);
        assert!(connected_components(&v, 2, Connectivity::TwentySix).is_empty());
        let s = lesion_stats(&v, 2, 10, Connectivity::TwentySix).unwrap();
        assert_eq!(s.lesion_count, 0);
        assert_eq!(s.mean_volume_mm3, 0.0);
        assert!(s.histogram.is_empty());
    }

    #[test]
    fn isolated_voxels() {
        let v = grid([8, 8, 8], [1.0; 3], &[[0, 0, 0], [5, 5, 5]]);
        let cc = connected_components(&v, 2, Connectivity::TwentySix);
        assert_eq!(cc.len(), 2);
        assert!(cc.iter().all(|c| c.voxel_count == 1));
        assert_eq!(cc[0].bounding_box.min, [0, 0, 0]);
        assert_eq!(cc[1].bounding_box.min, [5, 5, 5]);
    }

    #[test]
    fn solid_cube() {
        let pts: Vec<[usize; 3]> =
            (0..10).flat_map(|z| (0..10).flat_map(move |y| (0..10).map(move |x| [x + 1, y + 1, z + 1]))).collect();
        let v = grid([12, 12, 12], [0.5, 0.5, 2.0], &pts);
        let cc = connected_components(&v, 2, Connectivity::Six);
        assert_eq!(cc.len(), 1);
        assert_eq!(cc[0].voxel_count, 1000);
        assert_eq!(cc[0].bounding_box, BoundingBox { min: [1, 1, 1], max: [10, 10, 10] });
        let s = lesion_stats(&v, 2, 4, Connectivity::TwentySix).unwrap();
        assert_eq!(s.lesion_volumes_mm3, vec![500.0]);
        assert_eq!(s.mean_volume_mm3, 500.0);
    }

    #[test]
    fn diagonal_neighbours_depend_on_connectivity() {
        let v = grid([4, 4, 4], [1.0; 3], &[[0, 0, 0], [1, 1, 1]]);
        assert_eq!(connected_components(&v, 2, Connectivity::TwentySix).len(), 1);
        assert_eq!(connected_components(&v, 2, Connectivity::Six).len(), 2);
    }

    #[test]
    fn tie_order_uses_zyx_corner() {
        // (3,0,0) has smaller z,y than (0,2,0) so it sorts first
        let v = grid([6, 6, 6], [1.0; 3], &[[0, 2, 0], [3, 0, 0], [0, 0, 4]]);
        let cc = connected_components(&v, 2, Connectivity::TwentySix);
        let corners: Vec<_> = cc.iter().map(|c| c.bounding_box.min).collect();
        assert_eq!(corners, vec![[3, 0, 0], [0, 2, 0], [0, 0, 4]]);
    }

    #[test]
    fn histogram_counts_and_edges() {
        let s = LesionStats::from_volumes(vec![1.0, 10.0, 5.0, 4.9], 2).unwrap();
        assert_eq!(s.lesion_volumes_mm3, vec![10.0, 5.0, 4.9, 1.0]);
        assert_eq!(s.histogram.len(), 2);
        assert_eq!(s.histogram[0].count, 2);
        assert_eq!(s.histogram[1].count, 2);
        assert_eq!(s.histogram[1].upper_mm3, 10.0);
        assert_eq!(LesionStats::from_volumes(vec![1.0], 0), Err(StatsError::ZeroBins));
    }

    fn stats_of(vols: &[f64]) -> LesionStats {
        LesionStats::from_volumes(vols.to_vec(), 5).unwrap()
    }

    #[test]
    fn dataset_modes() {
        let one = vec![("a".to_string(), stats_of(&[500.0]))];
        for mode in [AggregationMode::PerLesion, AggregationMode::PerScanTotal] {
            assert_eq!(DatasetStats::aggregate(one.clone(), mode).unwrap().dataset_mean_volume_mm3, 500.0);
        }
        let two = vec![("b".to_string(), stats_of(&[300.0, 500.0])), ("a".to_string(), stats_of(&[100.0]))];
        let per_lesion = DatasetStats::aggregate(two.clone(), AggregationMode::PerLesion).unwrap();
        assert_eq!(per_lesion.dataset_mean_volume_mm3, 300.0);
        assert_eq!(per_lesion.per_scan[0].0, "a");
        let per_scan = DatasetStats::aggregate(two, AggregationMode::PerScanTotal).unwrap();
        assert_eq!(per_scan.dataset_mean_volume_mm3, 450.0);
        assert_eq!(DatasetStats::aggregate(vec![], AggregationMode::PerLesion), Err(StatsError::NoScans));
    }

    fn random_volume() -> impl Strategy<Value = LabelVolume> {
        (1usize..7, 1usize..7, 1usize..7).prop_flat_map(|(h, w, l)| {
            proptest::collection::vec(prop_oneof![3 => Just(0u8), 2 => Just(2u8), 1 => Just(1u8)], h * w * l)
                .prop_map(move |labels| LabelVolume::new([h, w, l], [1.0; 3], labels).unwrap())
        })
    }

    proptest! {
        #[test]
        fn components_partition_label_voxels(v in random_volume()) {
            for conn in [Connectivity::Six, Connectivity::TwentySix] {
                let cc = connected_components(&v, 2, conn);
                prop_assert_eq!(cc.iter().map(|c| c.voxel_count).sum::<usize>(), v.count_label(2));
                prop_assert_eq!(cc.len(), brute_force_count(&v, 2, conn));
            }
        }

        #[test]
        fn six_never_fewer_than_twenty_six(v in random_volume()) {
            prop_assert!(
                connected_components(&v, 2, Connectivity::Six).len()
                    >= connected_components(&v, 2, Connectivity::TwentySix).len()
            );
        }

        #[test]
        fn flips_preserve_component_count(v in random_volume(), axis in 0usize..3) {
            for conn in [Connectivity::Six, Connectivity::TwentySix] {
                prop_assert_eq!(
                    connected_components(&v, 2, conn).len(),
                    connected_components(&v.flipped(axis), 2, conn).len()
                );
            }
        }

        #[test]
        fn dataset_mean_ignores_scan_order(
            vols in proptest::collection::vec(proptest::collection::vec(1.0f64..1000.0, 0..4), 1..5),
            rot in 0usize..5,
        ) {
            let scans: Vec<(String, LesionStats)> =
                vols.iter().enumerate().map(|(i, v)| (format!("s{i}"), stats_of(v))).collect();
            let mut rotated = scans.clone();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            for mode in [AggregationMode::PerLesion, AggregationMode::PerScanTotal] {
                let a = DatasetStats::aggregate(scans.clone(), mode).unwrap();
                let b = DatasetStats::aggregate(rotated.clone(), mode).unwrap();
                prop_assert_eq!(a.dataset_mean_volume_mm3.to_bits(), b.dataset_mean_volume_mm3.to_bits());
            }
        }
    }
}
