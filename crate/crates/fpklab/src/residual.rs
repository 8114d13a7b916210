//! Residual curves: the defect of a time-integrated weak formulation,
//! recorded per grid node and test function.

use serde::{Deserialize, Serialize};

/// One residual series on a time grid. By construction the first value is
/// exactly zero (the formulation is anchored at the initial node).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualCurve {
    /// Which test function or coordinate the series belongs to.
    pub label: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl ResidualCurve {
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

/// Long-format CSV with columns `t, idx, residual`.
pub fn residual_csv(curves: &[ResidualCurve]) -> String {
    let mut out = String::from("t,idx,residual\n");
    for curve in curves {
        for (t, v) in curve.times.iter().zip(&curve.values) {
            out.push_str(&format!("{t},{},{v}\n", curve.label));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_abs_and_csv_shape() {
        let c = ResidualCurve {
            label: "g1".into(),
            times: vec![0.0, 0.5, 1.0],
            values: vec![0.0, -0.25, 0.1],
        };
        assert_eq!(c.max_abs(), 0.25);
        let csv = residual_csv(std::slice::from_ref(&c));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,idx,residual");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,g1,"));
    }
}
