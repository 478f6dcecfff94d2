//! Single-pass region statistics and region relabelling.

use crate::error::{Error, Result};
use crate::grid::{RegionMap, SoftmaxField};

/// Per-region pixel counts and channel-wise mean descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionStats {
    sizes: Vec<usize>,
    /// `region_count * channels`, region-major.
    means: Vec<f64>,
    channels: usize,
}

impl RegionStats {
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn region_count(&self) -> usize {
        self.sizes.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Mean descriptor of region `i`.
    pub fn mean(&self, i: usize) -> &[f64] {
        &self.means[i * self.channels..(i + 1) * self.channels]
    }

    pub fn means(&self) -> impl Iterator<Item = &[f64]> {
        self.means.chunks_exact(self.channels)
    }
}

/// Computes `|r_i|` and the channel-wise mean of `s` over every region in one
/// sequential pass over the pixels, `O(pixels * channels)`.
pub fn compute_region_stats(s: &SoftmaxField, r: &RegionMap) -> Result<RegionStats> {
    r.check_plane_matches(s.shape())?;
    let m = s.channels();
    let n = r.region_count();
    let mut sizes = vec![0usize; n];
    let mut means = vec![0.0; n * m];
    for (px, &id) in s.values().chunks_exact(m).zip(r.ids()) {
        let id = id as usize;
        sizes[id] += 1;
        for (acc, v) in means[id * m..(id + 1) * m].iter_mut().zip(px) {
            *acc += v;
        }
    }
    for (i, &size) in sizes.iter().enumerate() {
        if size == 0 {
            return Err(Error::InvalidRegionMap(format!("region {i} is empty")));
        }
        let inv = size as f64;
        means[i * m..(i + 1) * m].iter_mut().for_each(|v| *v /= inv);
    }
    Ok(RegionStats {
        sizes,
        means,
        channels: m,
    })
}

/// Checks that `perm` is a bijection on `0..n`.
pub fn check_permutation(perm: &[u32], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::InvalidArgument(format!(
            "permutation has {} entries for {n} regions",
            perm.len()
        )));
    }
    let mut hit = vec![false; n];
    for &p in perm {
        let p = p as usize;
        if p >= n || hit[p] {
            return Err(Error::InvalidArgument(format!(
                "{perm:?} is not a permutation of 0..{n}"
            )));
        }
        hit[p] = true;
    }
    Ok(())
}

/// Relabels every pixel `old -> perm[old]`.
pub fn permute_region_ids(r: &RegionMap, perm: &[u32]) -> Result<RegionMap> {
    check_permutation(perm, r.region_count())?;
    let ids = r.ids().iter().map(|&id| perm[id as usize]).collect();
    RegionMap::new(r.height(), r.width(), ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Shape;
    use crate::synth::{random_region_map as random_regions, random_softmax_field as random_field, rng_from_seed};

    #[test]
    fn constant_field_has_constant_means() {
        let s = SoftmaxField::uniform(4, 5, 2);
        let r = RegionMap::new(4, 5, (0..20).map(|i| (i % 3) as u32).collect()).unwrap();
        let stats = compute_region_stats(&s, &r).unwrap();
        for mean in stats.means() {
            assert_eq!(mean, &[0.5, 0.5]);
        }
    }

    #[test]
    fn singleton_regions() {
        let s = SoftmaxField::new(Shape::new(2, 1, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = RegionMap::new(2, 1, vec![0, 1]).unwrap();
        let stats = compute_region_stats(&s, &r).unwrap();
        assert_eq!(stats.mean(0), &[1.0, 0.0]);
        assert_eq!(stats.mean(1), &[0.0, 1.0]);
        assert_eq!(stats.sizes(), &[1, 1]);
    }

    #[test]
    fn matches_naive_double_loop() {
        let mut rng = rng_from_seed(11);
        let s = random_field(&mut rng, 8, 8, 3);
        let r = random_regions(&mut rng, 8, 8, 3);
        let stats = compute_region_stats(&s, &r).unwrap();
        for i in 0..3 {
            for m in 0..3 {
                let mut sum = 0.0;
                let mut count = 0;
                for y in 0..8 {
                    for x in 0..8 {
                        if r.get(y, x) as usize == i {
                            sum += s.values()[(y * 8 + x) * 3 + m];
                            count += 1;
                        }
                    }
                }
                assert_eq!(stats.sizes()[i], count);
                assert!((stats.mean(i)[m] - sum / count as f64).abs() < 1e-12);
            }
        }
        assert_eq!(stats.sizes().iter().sum::<usize>(), 64);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let s = SoftmaxField::uniform(2, 2, 2);
        let r = RegionMap::single(2, 3);
        assert!(matches!(
            compute_region_stats(&s, &r),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn permutation_examples() {
        let r = RegionMap::new(1, 4, vec![0, 1, 2, 1]).unwrap();
        assert_eq!(permute_region_ids(&r, &[0, 1, 2]).unwrap(), r);

        let binary = RegionMap::new(1, 3, vec![0, 1, 1]).unwrap();
        let swapped = permute_region_ids(&binary, &[1, 0]).unwrap();
        assert_eq!(swapped.ids(), &[1, 0, 0]);

        let cycle = [1, 2, 0];
        let mut m = r.clone();
        for _ in 0..3 {
            m = permute_region_ids(&m, &cycle).unwrap();
        }
        assert_eq!(m, r);

        assert!(permute_region_ids(&r, &[0, 0, 1]).is_err());
        assert!(permute_region_ids(&r, &[0, 1]).is_err());
    }

    #[test]
    fn stats_are_equivariant_under_permutation() {
        let mut rng = rng_from_seed(5);
        let s = random_field(&mut rng, 6, 7, 3);
        let r = random_regions(&mut rng, 6, 7, 4);
        let perm = [2, 0, 3, 1];
        let a = compute_region_stats(&s, &r).unwrap();
        let b = compute_region_stats(&s, &permute_region_ids(&r, &perm).unwrap()).unwrap();
        for old in 0..4 {
            let new = perm[old] as usize;
            assert_eq!(a.sizes()[old], b.sizes()[new]);
            assert_eq!(a.mean(old), b.mean(new));
        }
    }
}
