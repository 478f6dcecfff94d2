//! Contour metric: F-measure of matched region boundaries.

use crate::error::{Error, Result};
use crate::grid::RegionMap;

pub const DEFAULT_TOLERANCE: f64 = 2.0;

/// Pixels with a 4-neighbour in a different region, in raster order.
pub fn boundary_pixels(r: &RegionMap) -> Vec<(usize, usize)> {
    let (h, w) = (r.height(), r.width());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let id = r.get(y, x);
            let differs = (y > 0 && r.get(y - 1, x) != id)
                || (y + 1 < h && r.get(y + 1, x) != id)
                || (x > 0 && r.get(y, x - 1) != id)
                || (x + 1 < w && r.get(y, x + 1) != id);
            if differs {
                out.push((y, x));
            }
        }
    }
    out
}

/// F1 of boundary pixels matched one-to-one within Euclidean distance `tol`.
///
/// Matching is greedy: every candidate pair within tolerance is visited by
/// increasing distance (ties in raster order of the predicted, then the
/// ground-truth pixel) and kept when both ends are still free. Greedy
/// matching never beats the optimal assignment, so this is a lower bound on
/// the optimally-matched score. Two boundary-free maps score 1; exactly one
/// boundary-free map scores 0.
pub fn boundary_f(pred: &RegionMap, gt: &RegionMap, tol: f64) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    if !(tol >= 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance {tol}")));
    }
    let bp = boundary_pixels(pred);
    let bg = boundary_pixels(gt);
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }

    let (h, w) = (gt.height(), gt.width());
    let mut gt_index = vec![usize::MAX; h * w];
    for (k, &(y, x)) in bg.iter().enumerate() {
        gt_index[y * w + x] = k;
    }
    let reach = tol.floor() as isize;
    let tol_sq = tol * tol;
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, &(y, x)) in bp.iter().enumerate() {
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let d2 = (dy * dy + dx * dx) as f64;
                if d2 > tol_sq {
                    continue;
                }
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                let k = gt_index[yy as usize * w + xx as usize];
                if k != usize::MAX {
                    candidates.push((d2, i, k));
                }
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut pred_used = vec![false; bp.len()];
    let mut gt_used = vec![false; bg.len()];
    let mut matched = 0usize;
    for (_, i, k) in candidates {
        if !pred_used[i] && !gt_used[k] {
            pred_used[i] = true;
            gt_used[k] = true;
            matched += 1;
        }
    }
    let precision = matched as f64 / bp.len() as f64;
    let recall = matched as f64 / bg.len() as f64;
    Ok(super::saliency::f_from_pr(precision, recall, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vertical_split(h: usize, w: usize, at: usize) -> RegionMap {
        let ids = (0..h * w).map(|p| u32::from(p % w >= at)).collect();
        RegionMap::new(h, w, ids).unwrap()
    }

    #[test]
    fn identical_maps_score_one() {
        let r = vertical_split(8, 8, 3);
        assert_eq!(boundary_f(&r, &r, DEFAULT_TOLERANCE).unwrap(), 1.0);
    }

    #[test]
    fn one_pixel_shift_is_within_tolerance() {
        let gt = vertical_split(16, 16, 8);
        let pred = vertical_split(16, 16, 9);
        assert_eq!(boundary_f(&pred, &gt, 2.0).unwrap(), 1.0);
        // With zero tolerance only the shared column matches.
        assert_eq!(boundary_f(&pred, &gt, 0.0).unwrap(), 0.5);
    }

    #[test]
    fn missing_boundary_scores_zero() {
        let gt = vertical_split(6, 6, 2);
        assert_eq!(boundary_f(&RegionMap::single(6, 6), &gt, 2.0).unwrap(), 0.0);
        let s = RegionMap::single(6, 6);
        assert_eq!(boundary_f(&s, &s, 2.0).unwrap(), 1.0);
    }

    #[test]
    fn boundary_pixels_of_a_split() {
        let r = vertical_split(2, 4, 2);
        assert_eq!(boundary_pixels(&r), vec![(0, 1), (0, 2), (1, 1), (1, 2)]);
    }
}
