//! Order statistics shared by corpus summaries and score distributions.

use serde::{Deserialize, Serialize};

/// Quantile by linear interpolation between closest ranks (Hyndman & Fan
/// type 7, the default of R and NumPy).
///
/// `sorted` must be ascending and non-empty; `q` is clamped to `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let q = q.clamp(0.0, 1.0);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Sorts a copy of `values` and returns the requested quantile.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, q)
}

/// First, second and third quartile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            q1: quantile_sorted(&sorted, 0.25),
            q2: quantile_sorted(&sorted, 0.5),
            q3: quantile_sorted(&sorted, 0.75),
        }
    }
}

/// Min, quartiles and max of a sample, keeping the sample itself so the
/// summary can always be recomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiveNumberSummary {
    pub values: Vec<f64>,
    pub min: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub max: f64,
}

impl FiveNumberSummary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        Self {
            min: sorted[0],
            q1: quantile_sorted(&sorted, 0.25),
            q2: quantile_sorted(&sorted, 0.5),
            q3: quantile_sorted(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
            values,
        }
    }

    pub fn median(&self) -> f64 {
        self.q2
    }

    /// `max - min`.
    pub fn spread(&self) -> f64 {
        self.max - self.min
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn type7_quartiles_of_three_values() {
        let q = Quartiles::of(&[300.0, 100.0, 200.0]);
        assert_eq!((q.q1, q.q2, q.q3), (150.0, 200.0, 250.0));
    }

    #[test]
    fn single_value_collapses() {
        let q = Quartiles::of(&[42.0]);
        assert_eq!((q.q1, q.q2, q.q3), (42.0, 42.0, 42.0));
    }

    #[test]
    fn matches_numpy_reference() {
        // numpy.percentile([1, 2, 4, 7, 11], [25, 50, 75]) == [2, 4, 7]
        let q = Quartiles::of(&[7.0, 1.0, 11.0, 2.0, 4.0]);
        assert_eq!((q.q1, q.q2, q.q3), (2.0, 4.0, 7.0));
        // numpy.percentile([1, 2, 3, 4], 25) == 1.75
        assert!((quantile(&[4.0, 3.0, 2.0, 1.0], 0.25) - 1.75).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn summary_is_monotone(values in prop::collection::vec(-1e6f64..1e6, 1..60)) {
            let s = FiveNumberSummary::from_values(values);
            prop_assert!(s.min <= s.q1 && s.q1 <= s.q2 && s.q2 <= s.q3 && s.q3 <= s.max);
        }
    }
}
