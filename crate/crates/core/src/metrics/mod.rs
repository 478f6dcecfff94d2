//! Evaluation metrics: thresholded saliency scores (F-beta, MAE), output
//! channel selection, and region/contour metrics for comparing partitions.

mod boundary;
mod partition;
mod saliency;

use serde::{Deserialize, Serialize};

pub use boundary::{boundary_f, boundary_pixels, DEFAULT_TOLERANCE};
pub use partition::{gt_covering, rand_index, variation_of_information, Contingency};
pub use saliency::{
    adaptive_threshold, binarize, f_beta, mae, precision_recall, select_salient_channel, SaliencyMap,
    DEFAULT_BETA_SQ, MAX_THRESHOLD,
};

use crate::error::{Error, Result};
use crate::grid::{BinaryMap, RegionMap, SoftmaxField};

/// Every metric for one image, or the mean over a set of images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f_beta: f64,
    pub mae: f64,
    pub precision: f64,
    pub recall: f64,
    pub rand_index: f64,
    pub variation_of_information: f64,
    pub gt_covering: f64,
    pub boundary_f: f64,
}

impl MetricsReport {
    /// Column order of [`MetricsReport::csv_row`]. Stable.
    pub const CSV_COLUMNS: [&'static str; 8] = [
        "f_beta",
        "mae",
        "precision",
        "recall",
        "rand_index",
        "variation_of_information",
        "gt_covering",
        "boundary_f",
    ];

    pub fn csv_header() -> String {
        Self::CSV_COLUMNS.join(",")
    }

    pub fn values(&self) -> [f64; 8] {
        [
            self.f_beta,
            self.mae,
            self.precision,
            self.recall,
            self.rand_index,
            self.variation_of_information,
            self.gt_covering,
            self.boundary_f,
        ]
    }

    pub fn csv_row(&self) -> String {
        self.values()
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Scores `s` against one ground truth. Saliency metrics use channel
    /// `salient` thresholded adaptively; region and contour metrics use the
    /// per-pixel argmax as the predicted partition.
    pub fn evaluate(s: &SoftmaxField, salient: usize, regions: &RegionMap, mask: &BinaryMap) -> Result<Self> {
        let map = SaliencyMap::from_channel(s, salient)?;
        let b = binarize(&map);
        let (precision, recall) = precision_recall(&b, mask)?;
        let shape = s.shape();
        let predicted = RegionMap::from_labels(shape.height, shape.width, &s.argmax())?;
        Ok(Self {
            f_beta: saliency::f_from_pr(precision, recall, DEFAULT_BETA_SQ),
            mae: mae(&map, mask)?,
            precision,
            recall,
            rand_index: rand_index(&predicted, regions)?,
            variation_of_information: variation_of_information(&predicted, regions)?,
            gt_covering: gt_covering(&predicted, regions)?,
            boundary_f: boundary_f(&predicted, regions, DEFAULT_TOLERANCE)?,
        })
    }

    /// Field-wise mean.
    pub fn mean(reports: &[MetricsReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::InvalidArgument("no reports to average".into()));
        }
        let n = reports.len() as f64;
        let mut sum = [0.0; 8];
        for r in reports {
            for (acc, v) in sum.iter_mut().zip(r.values()) {
                *acc += v;
            }
        }
        let [f_beta, mae, precision, recall, rand_index, variation_of_information, gt_covering, boundary_f] =
            sum.map(|v| v / n);
        Ok(Self {
            f_beta,
            mae,
            precision,
            recall,
            rand_index,
            variation_of_information,
            gt_covering,
            boundary_f,
        })
    }

    /// Whether every field lies in its valid range.
    pub fn in_range(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.f_beta)
            && unit(self.mae)
            && unit(self.precision)
            && unit(self.recall)
            && unit(self.rand_index)
            && self.variation_of_information >= 0.0
            && unit(self.gt_covering)
            && unit(self.boundary_f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Shape;

    #[test]
    fn csv_layout_is_stable() {
        assert_eq!(
            MetricsReport::csv_header(),
            "f_beta,mae,precision,recall,rand_index,variation_of_information,gt_covering,boundary_f"
        );
        let r = MetricsReport {
            f_beta: 0.5,
            ..Default::default()
        };
        assert!(r.csv_row().starts_with("0.500000,0.000000"));
        let json = serde_json::to_value(r).unwrap();
        assert_eq!(json["f_beta"], 0.5);
    }

    #[test]
    fn perfect_prediction_report() {
        let regions = RegionMap::new(2, 2, vec![0, 1, 0, 1]).unwrap();
        let mask = BinaryMap::from_u8(2, 2, &[0, 1, 0, 1]).unwrap();
        let s = SoftmaxField::new(Shape::new(2, 2, 2), vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = MetricsReport::evaluate(&s, 1, &regions, &mask).unwrap();
        assert_eq!(r.f_beta, 1.0);
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.rand_index, 1.0);
        assert_eq!(r.variation_of_information, 0.0);
        assert_eq!(r.gt_covering, 1.0);
        assert_eq!(r.boundary_f, 1.0);
        assert!(r.in_range());
        assert_eq!(MetricsReport::mean(&[r, r]).unwrap(), r);
    }
}
