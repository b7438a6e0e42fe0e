//! One-way permutation ANOVA over categorical experiment factors.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PERMUTATIONS: usize = 4999;
const WITHIN_FLOOR: f64 = 1e-300;

/// Rows of categorical factor levels and one outcome each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorTable {
    pub factors: Vec<String>,
    pub rows: Vec<(Vec<String>, f64)>,
}

impl FactorTable {
    pub fn new(factors: Vec<String>) -> Self {
        Self {
            factors,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, levels: Vec<String>, outcome: f64) -> Result<()> {
        crate::error::check_dim("factor levels", self.factors.len(), levels.len())?;
        if !outcome.is_finite() {
            return Err(Error::Contract(format!("non-finite outcome {outcome}")));
        }
        self.rows.push((levels, outcome));
        Ok(())
    }

    /// Group index per row for `factor`, and the number of groups.
    fn groups(&self, factor: &str) -> Result<(Vec<usize>, usize)> {
        let col = self
            .factors
            .iter()
            .position(|f| f == factor)
            .ok_or_else(|| Error::Contract(format!("unknown factor {factor}")))?;
        let mut ids = BTreeMap::new();
        for (levels, _) in &self.rows {
            let n = ids.len();
            ids.entry(levels[col].as_str()).or_insert(n);
        }
        let labels = self.rows.iter().map(|(l, _)| ids[l[col].as_str()]).collect();
        Ok((labels, ids.len()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f: f64,
    pub p: f64,
    pub df_between: usize,
    pub df_within: usize,
}

/// One-way ANOVA F for fixed group labels. The within-group mean square is
/// floored so that a constant outcome gives `F = 0`.
pub fn f_statistic(labels: &[usize], n_groups: usize, y: &[f64]) -> f64 {
    let n = y.len();
    let mut sums = vec![0.0; n_groups];
    let mut counts = vec![0usize; n_groups];
    for (&g, &v) in labels.iter().zip(y) {
        sums[g] += v;
        counts[g] += 1;
    }
    let grand = y.iter().sum::<f64>() / n as f64;
    let means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let ssb: f64 = means
        .iter()
        .zip(&counts)
        .map(|(m, &c)| c as f64 * (m - grand).powi(2))
        .sum();
    let ssw: f64 = labels.iter().zip(y).map(|(&g, v)| (v - means[g]).powi(2)).sum();
    let msb = ssb / (n_groups - 1) as f64;
    let msw = (ssw / (n - n_groups) as f64).max(WITHIN_FLOOR);
    msb / msw
}

/// Main-effect permutation test for `factor`: outcomes are shuffled across
/// rows, and `p = (1 + #{F_perm ≥ F_obs}) / (n_perm + 1)`.
pub fn permutation_anova(table: &FactorTable, factor: &str, n_perm: usize, seed: u64) -> Result<AnovaResult> {
    if n_perm == 0 {
        return Err(Error::Contract("need at least one permutation".into()));
    }
    let (labels, k) = table.groups(factor)?;
    if k < 2 {
        return Err(Error::Contract(format!("factor {factor} has a single level")));
    }
    let n = labels.len();
    if n <= k {
        return Err(Error::Contract(format!(
            "{n} rows leave no within-group degrees of freedom for {k} levels"
        )));
    }
    let y: Vec<f64> = table.rows.iter().map(|(_, v)| *v).collect();
    let f_obs = f_statistic(&labels, k, &y);
    let exceed: usize = (0..n_perm)
        .into_par_iter()
        .map_init(
            || y.clone(),
            |buf, i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                buf.copy_from_slice(&y);
                buf.shuffle(&mut rng);
                usize::from(f_statistic(&labels, k, buf) >= f_obs)
            },
        )
        .sum();
    Ok(AnovaResult {
        f: f_obs,
        p: (1 + exceed) as f64 / (n_perm + 1) as f64,
        df_between: k - 1,
        df_within: n - k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(groups: &[(&str, &[f64])]) -> FactorTable {
        let mut t = FactorTable::new(vec!["g".into()]);
        for (name, vals) in groups {
            for v in *vals {
                t.push(vec![name.to_string()], *v).unwrap();
            }
        }
        t
    }

    #[test]
    fn constant_outcome_has_no_effect() {
        let t = table(&[("a", &[1.0; 6]), ("b", &[1.0; 6])]);
        let r = permutation_anova(&t, "g", 199, 1).unwrap();
        assert_eq!(r.f, 0.0);
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn hand_computed_f() {
        // a: 1,2,3 (mean 2), b: 4,6,8 (mean 6); grand 4
        // SSB = 3·4 + 3·4 = 24, SSW = 2 + 8 = 10; F = 24 / (10/4) = 9.6
        let t = table(&[("a", &[1.0, 2.0, 3.0]), ("b", &[4.0, 6.0, 8.0])]);
        let r = permutation_anova(&t, "g", 10, 0).unwrap();
        assert!((r.f - 9.6).abs() < 1e-10);
        assert_eq!((r.df_between, r.df_within), (1, 4));
    }

    #[test]
    fn errors() {
        let t = table(&[("a", &[1.0, 2.0])]);
        assert!(permutation_anova(&t, "g", 10, 0).is_err());
        let t = table(&[("a", &[1.0, 2.0]), ("b", &[3.0])]);
        assert!(permutation_anova(&t, "h", 10, 0).is_err());
        assert!(permutation_anova(&t, "g", 0, 0).is_err());
        let mut t = FactorTable::new(vec!["g".into()]);
        assert!(t.push(vec![], 1.0).is_err());
        assert!(t.push(vec!["a".into()], f64::NAN).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let t = table(&[("a", &[1.0, 2.5, 3.0, 0.2]), ("b", &[2.0, 2.2, 3.1, 1.0]), ("c", &[0.5, 1.7, 2.9])]);
        let a = permutation_anova(&t, "g", 999, 7).unwrap();
        let b = permutation_anova(&t, "g", 999, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.p >= 1.0 / 1000.0 && a.p <= 1.0);
    }
}
