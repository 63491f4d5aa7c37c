//! Observations and datasets shared by the estimators, the workbench and the generators.

use std::path::Path;

use crate::error::{invalid, Result};

/// One draw of `O`, reduced to the roles the estimators need.
///
/// `w` and `z` are the coordinates at which nuisance functions are evaluated,
/// `x` is the value deciding structural-zero membership, `s` the auxiliary
/// outcome and `r` the weight `r(O)`. Workbench rows also carry state indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub w: Vec<f64>,
    pub z: Vec<f64>,
    pub x: f64,
    pub s: f64,
    pub r: f64,
    pub w_index: Option<usize>,
    pub z_index: Option<usize>,
}

impl Observation {
    /// Exchanges the W and Z roles.
    pub fn swapped(&self) -> Observation {
        Observation {
            w: self.z.clone(),
            z: self.w.clone(),
            x: self.x,
            s: self.s,
            r: self.r,
            w_index: self.z_index,
            z_index: self.w_index,
        }
    }

    fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.z).all(|v| v.is_finite())
            && self.x.is_finite()
            && self.s.is_finite()
            && self.r.is_finite()
    }
}

/// Rows plus optional probability weights.
///
/// Without weights every row counts `1/n`. Weighted datasets turn empirical means
/// into exact expectations, which is how the workbench runs estimators at
/// population scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub rows: Vec<Observation>,
    pub weights: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(rows: Vec<Observation>) -> Result<Self> {
        if rows.len() < 2 {
            return invalid(format!("dataset needs at least 2 rows, got {}", rows.len()));
        }
        if let Some(i) = rows.iter().position(|o| !o.is_finite()) {
            return invalid(format!("row {i} has non-finite entries"));
        }
        Ok(Dataset { rows, weights: None })
    }

    /// Rows with probability weights summing to one.
    pub fn weighted(rows: Vec<Observation>, weights: Vec<f64>) -> Result<Self> {
        if rows.is_empty() || rows.len() != weights.len() {
            return invalid("weighted dataset needs one weight per row");
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| *w < 0.0) || (total - 1.0).abs() > 1e-12 {
            return invalid(format!("weights must be nonnegative and sum to 1 (sum {total})"));
        }
        Ok(Dataset { rows, weights: Some(weights) })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn weight(&self, i: usize) -> f64 {
        match &self.weights {
            Some(w) => w[i],
            None => 1.0 / self.rows.len() as f64,
        }
    }

    pub fn mean(&self, f: impl Fn(&Observation) -> f64) -> f64 {
        self.rows.iter().enumerate().map(|(i, o)| self.weight(i) * f(o)).sum()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let rows = idx.iter().map(|&i| self.rows[i].clone()).collect();
        match &self.weights {
            None => Dataset::new(rows),
            Some(w) => {
                let total: f64 = idx.iter().map(|&i| w[i]).sum();
                Dataset::weighted(rows, idx.iter().map(|&i| w[i] / total).collect())
            }
        }
    }

    pub fn swapped(&self) -> Dataset {
        Dataset { rows: self.rows.iter().map(Observation::swapped).collect(), weights: self.weights.clone() }
    }

    /// Workbench export with columns `w_index, z_index, x_value, s_value`.
    pub fn write_workbench_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["w_index", "z_index", "x_value", "s_value"])?;
        for o in &self.rows {
            let wi = o.w_index.map(|v| v.to_string()).unwrap_or_default();
            let zi = o.z_index.map(|v| v.to_string()).unwrap_or_default();
            wtr.write_record([wi, zi, fmt_f64(o.x), fmt_f64(o.s)])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Shortest representation that round-trips exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(s: f64) -> Observation {
        Observation { w: vec![1.0], z: vec![2.0], x: 0.0, s, r: 1.0, w_index: Some(0), z_index: Some(1) }
    }

    #[test]
    fn rejects_tiny_and_nonfinite() {
        assert!(Dataset::new(vec![obs(0.0)]).is_err());
        assert!(Dataset::new(vec![obs(0.0), obs(f64::NAN)]).is_err());
        assert!(Dataset::weighted(vec![obs(0.0)], vec![0.5]).is_err());
        assert!(Dataset::weighted(vec![obs(0.0)], vec![1.0]).is_ok());
    }

    #[test]
    fn swapping_twice_is_identity() {
        let d = Dataset::new(vec![obs(1.0), obs(2.0)]).unwrap();
        assert_eq!(d.swapped().swapped(), d);
        assert_eq!(d.swapped().rows[0].w, vec![2.0]);
        assert_eq!(d.swapped().rows[0].w_index, Some(1));
    }

    #[test]
    fn weighted_mean() {
        let d = Dataset::weighted(vec![obs(1.0), obs(3.0)], vec![0.25, 0.75]).unwrap();
        assert!((d.mean(|o| o.s) - 2.5).abs() < 1e-15);
        let u = Dataset::new(vec![obs(1.0), obs(3.0)]).unwrap();
        assert!((u.mean(|o| o.s) - 2.0).abs() < 1e-15);
    }
}
