//! Min-max scaling fitted on the training split.
//!
//! Each feature is mapped through `(x − min) / (max − min)` using statistics
//! from training rows only, so the training split lands in [0, 1] while
//! later splits may legally fall outside it (the transform reports how often
//! that happens instead of failing). Constant features map to 0 and are
//! flagged as degenerate.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::Scenario;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::topology::{NetId, WorkerId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    mins: Vec<f64>,
    maxs: Vec<f64>,
    /// Feature indices whose training range collapsed to a point.
    degenerate: Vec<usize>,
}

/// How many transformed values landed outside [0, 1].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OutOfRange {
    pub below: usize,
    pub above: usize,
}

impl OutOfRange {
    pub fn total(&self) -> usize {
        self.below + self.above
    }

    pub fn absorb(&mut self, other: OutOfRange) {
        self.below += other.below;
        self.above += other.above;
    }
}

impl Normalizer {
    /// Fit per-feature ranges on `rows` of a `[n_samples, n_features]` table.
    pub fn fit(values: &Tensor, rows: Range<usize>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Dataset("cannot fit a normalizer on an empty split".into()));
        }
        if rows.end > values.rows() {
            return Err(Error::Dataset(format!(
                "fit rows {}..{} exceed table length {}",
                rows.start,
                rows.end,
                values.rows()
            )));
        }
        let cols = values.cols();
        let mut mins = vec![f64::INFINITY; cols];
        let mut maxs = vec![f64::NEG_INFINITY; cols];
        for r in rows {
            for c in 0..cols {
                let v = values.get(r, c);
                mins[c] = mins[c].min(v);
                maxs[c] = maxs[c].max(v);
            }
        }
        let degenerate = (0..cols).filter(|&c| maxs[c] == mins[c]).collect();
        Ok(Normalizer {
            mins,
            maxs,
            degenerate,
        })
    }

    pub fn n_features(&self) -> usize {
        self.mins.len()
    }

    /// Training-split (min, max) of one feature, in raw units.
    pub fn feature_range(&self, feature: usize) -> (f64, f64) {
        (self.mins[feature], self.maxs[feature])
    }

    pub fn degenerate_features(&self) -> &[usize] {
        &self.degenerate
    }

    /// Scale one raw value into the unit range of its feature.
    pub fn apply_one(&self, feature: usize, v: f64) -> f64 {
        let (lo, hi) = (self.mins[feature], self.maxs[feature]);
        if hi == lo {
            0.0
        } else {
            (v - lo) / (hi - lo)
        }
    }

    /// Undo [`Self::apply_one`]. Degenerate features recover their constant.
    pub fn invert_one(&self, feature: usize, v: f64) -> f64 {
        let (lo, hi) = (self.mins[feature], self.maxs[feature]);
        if hi == lo {
            lo
        } else {
            lo + v * (hi - lo)
        }
    }

    /// Scale a full table; returns the transformed copy plus out-of-range
    /// counts (values beyond the training range are permitted).
    pub fn apply(&self, values: &Tensor) -> Result<(Tensor, OutOfRange)> {
        if values.cols() != self.n_features() {
            return Err(Error::ShapeMismatch {
                context: "normalizer application",
                expected: vec![values.rows(), self.n_features()],
                got: values.shape().to_vec(),
            });
        }
        let mut out = values.clone();
        let mut report = OutOfRange::default();
        for r in 0..values.rows() {
            for c in 0..values.cols() {
                let v = self.apply_one(c, values.get(r, c));
                if v < 0.0 {
                    report.below += 1;
                } else if v > 1.0 {
                    report.above += 1;
                }
                out.set(r, c, v);
            }
        }
        Ok((out, report))
    }
}

/// Fit one normalizer per table on its first `train_rows` rows and scale the
/// whole table with it. Returns the scaled tables, the per-table
/// normalizers, and the pooled out-of-range count.
#[allow(clippy::type_complexity)]
pub fn normalize_tables(
    scenario: &Scenario,
    train_rows: usize,
) -> Result<(
    BTreeMap<(NetId, WorkerId), Tensor>,
    BTreeMap<(NetId, WorkerId), Normalizer>,
    OutOfRange,
)> {
    let mut scaled = BTreeMap::new();
    let mut normalizers = BTreeMap::new();
    let mut pooled = OutOfRange::default();
    for (&key, table) in &scenario.tables {
        let norm = Normalizer::fit(&table.values, 0..train_rows)?;
        let (values, report) = norm.apply(&table.values)?;
        pooled.absorb(report);
        scaled.insert(key, values);
        normalizers.insert(key, norm);
    }
    Ok((scaled, normalizers, pooled))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[[f64; 2]]) -> Tensor {
        let mut t = Tensor::zeros(&[rows.len(), 2]);
        for (r, row) in rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                t.set(r, c, *v);
            }
        }
        t
    }

    #[test]
    fn midpoint_of_the_range_maps_to_one_half() {
        let t = table(&[[0.0, 1.0], [20.0, 3.0]]);
        let norm = Normalizer::fit(&t, 0..2).unwrap();
        assert_eq!(norm.apply_one(0, 10.0), 0.5);
        assert_eq!(norm.apply_one(0, 0.0), 0.0);
        assert_eq!(norm.apply_one(0, 20.0), 1.0);
    }

    #[test]
    fn inverse_undoes_apply_inside_the_training_range() {
        let t = table(&[[2.0, -3.0], [5.0, 4.0], [3.5, 0.0]]);
        let norm = Normalizer::fit(&t, 0..3).unwrap();
        for &v in &[2.0, 3.1, 5.0] {
            let roundtrip = norm.invert_one(0, norm.apply_one(0, v));
            assert!((roundtrip - v).abs() < 1e-12);
        }
    }

    #[test]
    fn refit_on_scaled_training_data_is_idempotent() {
        let t = table(&[[2.0, -3.0], [5.0, 4.0], [3.5, 0.0]]);
        let norm = Normalizer::fit(&t, 0..3).unwrap();
        let (once, _) = norm.apply(&t).unwrap();
        let refit = Normalizer::fit(&once, 0..3).unwrap();
        let (twice, _) = refit.apply(&once).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_features_are_flagged_and_map_to_zero() {
        let t = table(&[[7.0, 1.0], [7.0, 2.0]]);
        let norm = Normalizer::fit(&t, 0..2).unwrap();
        assert_eq!(norm.degenerate_features(), &[0]);
        assert_eq!(norm.apply_one(0, 7.0), 0.0);
        assert_eq!(norm.invert_one(0, 0.0), 7.0);
    }

    #[test]
    fn values_beyond_the_training_range_are_permitted_and_counted() {
        let train = table(&[[0.0, 0.0], [10.0, 1.0]]);
        let norm = Normalizer::fit(&train, 0..2).unwrap();
        let probe = table(&[[-5.0, 0.5], [15.0, 2.0]]);
        let (scaled, report) = norm.apply(&probe).unwrap();
        assert_eq!(report, OutOfRange { below: 1, above: 2 });
        assert_eq!(scaled.get(0, 0), -0.5);
        assert_eq!(scaled.get(1, 0), 1.5);
    }

    #[test]
    fn empty_split_is_rejected() {
        let t = table(&[[1.0, 2.0]]);
        assert!(Normalizer::fit(&t, 0..0).is_err());
        assert!(Normalizer::fit(&t, 0..5).is_err());
    }
}
