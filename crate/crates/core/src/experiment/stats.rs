use serde::{Deserialize, Serialize};

/// Descriptive statistics over a set of iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    /// Lower-middle element for even counts.
    pub median: f64,
    pub min: f64,
    pub max: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single value.
    pub stddev: f64,
}

impl Stats {
    /// `None` for an empty slice.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        // Welford
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for (i, &x) in values.iter().enumerate() {
            let delta = x - mean;
            mean += delta / (i + 1) as f64;
            m2 += delta * (x - mean);
        }
        let n = values.len();
        let stddev = if n > 1 { (m2 / (n - 1) as f64).max(0.0).sqrt() } else { 0.0 };

        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            mean,
            median: sorted[(n - 1) / 2],
            min: sorted[0],
            max: sorted[n - 1],
            stddev,
        })
    }
}
