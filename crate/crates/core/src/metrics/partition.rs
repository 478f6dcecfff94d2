//! Region metrics comparing two partitions of the same grid. Every metric
//! here works from the contingency table, so it depends on the partitions
//! only and not on the id values.

use crate::error::{Error, Result};
use crate::grid::RegionMap;

/// Joint pixel counts `n_ij` of region `i` in `a` and region `j` in `b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Contingency {
    pub rows: usize,
    pub cols: usize,
    pub counts: Vec<u64>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub total: u64,
}

impl Contingency {
    pub fn new(a: &RegionMap, b: &RegionMap) -> Result<Self> {
        if a.height() != b.height() || a.width() != b.width() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                a.height(),
                a.width(),
                b.height(),
                b.width()
            )));
        }
        let (rows, cols) = (a.region_count(), b.region_count());
        let mut counts = vec![0u64; rows * cols];
        for (&i, &j) in a.ids().iter().zip(b.ids()) {
            counts[i as usize * cols + j as usize] += 1;
        }
        let row_sums = (0..rows).map(|i| counts[i * cols..(i + 1) * cols].iter().sum()).collect();
        let col_sums = (0..cols).map(|j| (0..rows).map(|i| counts[i * cols + j]).sum()).collect();
        Ok(Self {
            rows,
            cols,
            counts,
            row_sums,
            col_sums,
            total: a.pixels() as u64,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.cols + j]
    }
}

fn pairs(n: u64) -> f64 {
    (n as f64) * (n.saturating_sub(1) as f64) / 2.0
}

/// Fraction of pixel pairs on which the partitions agree (both same-region
/// or both different-region). A single pixel scores 1.
pub fn rand_index(a: &RegionMap, b: &RegionMap) -> Result<f64> {
    let t = Contingency::new(a, b)?;
    let all = pairs(t.total);
    if all == 0.0 {
        return Ok(1.0);
    }
    let joint: f64 = t.counts.iter().map(|&n| pairs(n)).sum();
    let same_a: f64 = t.row_sums.iter().map(|&n| pairs(n)).sum();
    let same_b: f64 = t.col_sums.iter().map(|&n| pairs(n)).sum();
    let disagreements = (same_a - joint) + (same_b - joint);
    Ok(1.0 - disagreements / all)
}

/// `H(A|B) + H(B|A)` in nats.
pub fn variation_of_information(a: &RegionMap, b: &RegionMap) -> Result<f64> {
    let t = Contingency::new(a, b)?;
    let total = t.total as f64;
    let mut vi = 0.0;
    for i in 0..t.rows {
        for j in 0..t.cols {
            let n = t.get(i, j);
            if n == 0 {
                continue;
            }
            let n = n as f64;
            let given_a = (n / t.row_sums[i] as f64).ln();
            let given_b = (n / t.col_sums[j] as f64).ln();
            vi -= n / total * (given_a + given_b);
        }
    }
    Ok(vi)
}

/// `Σ_g (|g|/P) · max_p IoU(g, p)` over ground-truth regions `g`.
pub fn gt_covering(pred: &RegionMap, gt: &RegionMap) -> Result<f64> {
    let t = Contingency::new(gt, pred)?;
    let total = t.total as f64;
    let mut cover = 0.0;
    for g in 0..t.rows {
        let size = t.row_sums[g];
        let best = (0..t.cols)
            .map(|p| {
                let inter = t.get(g, p);
                inter as f64 / (size + t.col_sums[p] - inter) as f64
            })
            .fold(0.0, f64::max);
        cover += size as f64 / total * best;
    }
    Ok(cover)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, ids: &[u32]) -> RegionMap {
        RegionMap::new(h, w, ids.to_vec()).unwrap()
    }

    #[test]
    fn identical_partitions() {
        let a = map(2, 3, &[0, 0, 1, 2, 2, 1]);
        assert_eq!(rand_index(&a, &a).unwrap(), 1.0);
        assert_eq!(variation_of_information(&a, &a).unwrap(), 0.0);
        assert_eq!(gt_covering(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn rand_index_every_pair_disagrees() {
        let single = map(1, 2, &[0, 0]);
        let split = map(1, 2, &[0, 1]);
        assert_eq!(rand_index(&single, &split).unwrap(), 0.0);
    }

    #[test]
    fn vi_hand_computed() {
        // Halves against quarters: the quarters determine the halves, so
        // H(A|B) = 0 and H(B|A) = ln 2.
        let halves = map(2, 2, &[0, 0, 1, 1]);
        let quarters = map(2, 2, &[0, 1, 2, 3]);
        let ln2 = std::f64::consts::LN_2;
        assert!((variation_of_information(&halves, &quarters).unwrap() - ln2).abs() < 1e-15);
        // Top/bottom against left/right are independent: ln 2 each way.
        let columns = map(2, 2, &[0, 1, 0, 1]);
        assert!((variation_of_information(&halves, &columns).unwrap() - 2.0 * ln2).abs() < 1e-15);
    }

    #[test]
    fn covering_single_region_against_halves() {
        let halves = map(2, 2, &[0, 0, 1, 1]);
        assert_eq!(gt_covering(&RegionMap::single(2, 2), &halves).unwrap(), 0.5);
    }

    #[test]
    fn dimension_mismatch() {
        let a = RegionMap::single(2, 2);
        let b = RegionMap::single(1, 4);
        assert!(rand_index(&a, &b).is_err());
        assert!(variation_of_information(&a, &b).is_err());
        assert!(gt_covering(&a, &b).is_err());
    }
}
