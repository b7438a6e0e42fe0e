//! Subset Extended Kalman Filter training. The parameters are the hidden state
//! of a random walk observed through the predictor; each update corrects only
//! the `m` highest-scoring parameters, with a diagonal covariance carried over
//! between steps.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Example;
use crate::error::{check_dim, Error, Result};
use crate::gradient::{mse_loss, EpochTracker, SekfPassRecord, TrainOutcome};
use crate::nn::ParamVector;
use crate::predictor::Predictor;

pub const DIAG_FLOOR: f64 = 1e-12;
pub const SOLVE_JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// `diag_j · Σ_i H_ij²`
    #[default]
    Uncertainty,
    /// `|Hᵀ r|_j`
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SekfConfig {
    pub r: f64,
    pub q: f64,
    pub p0: f64,
    pub subset_size: usize,
    pub minibatch_size: usize,
    pub passes: usize,
    pub early_stop_patience: usize,
    pub max_consecutive_skips: usize,
    pub selection: SelectionRule,
    pub seed: u64,
}

impl Default for SekfConfig {
    fn default() -> Self {
        Self {
            r: 0.01,
            q: 1e-4,
            p0: 1.0,
            subset_size: 200,
            minibatch_size: 1,
            passes: 20,
            early_stop_patience: 5,
            max_consecutive_skips: 50,
            selection: SelectionRule::Uncertainty,
            seed: 0,
        }
    }
}

impl SekfConfig {
    pub fn validate(&self, n_params: usize) -> Result<()> {
        let ok = self.r > 0.0
            && self.q >= 0.0
            && self.p0 > 0.0
            && self.r.is_finite()
            && self.p0.is_finite()
            && self.subset_size >= 1
            && self.minibatch_size >= 1
            && self.early_stop_patience >= 1
            && self.max_consecutive_skips >= 1;
        if !ok {
            return Err(Error::Config(format!("invalid SEKF config {self:?}")));
        }
        if self.subset_size > n_params {
            return Err(Error::Config(format!(
                "subset size {} exceeds parameter count {n_params}",
                self.subset_size
            )));
        }
        Ok(())
    }
}

/// Per-parameter variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceState {
    pub diag: Vec<f64>,
}

impl CovarianceState {
    pub fn new(n: usize, p0: f64) -> Self {
        Self { diag: vec![p0; n] }
    }

    pub fn predict(&mut self, q: f64) {
        self.diag.iter_mut().for_each(|d| *d += q);
    }

    pub fn mean(&self) -> f64 {
        self.diag.iter().sum::<f64>() / self.diag.len().max(1) as f64
    }
}

fn top_m(scores: &[f64], m: usize) -> Vec<usize> {
    crate::gradient::top_k_by_magnitude(scores, m)
}

/// Indices of the `m` largest `diag_j · Σ_i H_ij²`, ties to the lower index,
/// returned in ascending order.
pub fn select_subset(h: &DMatrix<f64>, diag: &[f64], m: usize) -> Vec<usize> {
    let scores: Vec<f64> = h
        .column_iter()
        .zip(diag)
        .map(|(col, d)| d * col.norm_squared())
        .collect();
    top_m(&scores, m)
}

/// Indices of the `m` largest `|Hᵀ r|_j`.
pub fn select_subset_gradient(h: &DMatrix<f64>, residual: &[f64], m: usize) -> Vec<usize> {
    let r = DVector::from_column_slice(residual);
    let scores: Vec<f64> = h.column_iter().map(|col| col.dot(&r)).collect();
    top_m(&scores, m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateStatus {
    Applied { gain_norm: f64 },
    Skipped,
}

/// Kalman correction restricted to `subset`. `residual` is `target − prediction`.
/// On an unsolvable innovation matrix nothing is changed.
pub fn kalman_subset_update(
    params: &mut ParamVector,
    cov: &mut CovarianceState,
    h: &DMatrix<f64>,
    residual: &[f64],
    subset: &[usize],
    r: f64,
) -> Result<UpdateStatus> {
    check_dim("measurement residual", h.nrows(), residual.len())?;
    check_dim("measurement Jacobian columns", params.len(), h.ncols())?;
    let d = h.nrows();
    let m = subset.len();
    // A = H_I P_I
    let mut a = DMatrix::zeros(d, m);
    for (k, &j) in subset.iter().enumerate() {
        let pj = cov.diag[j];
        for i in 0..d {
            a[(i, k)] = h[(i, j)] * pj;
        }
    }
    let mut s = DMatrix::zeros(d, d);
    for (k, &j) in subset.iter().enumerate() {
        let hj = h.column(j);
        let ak = a.column(k);
        for c in 0..d {
            let hc = hj[c];
            if hc == 0.0 {
                continue;
            }
            for rr in 0..d {
                s[(rr, c)] += ak[rr] * hc;
            }
        }
    }
    for i in 0..d {
        s[(i, i)] += r;
    }
    let chol = match s.clone().cholesky() {
        Some(c) => Some(c),
        None => {
            for i in 0..d {
                s[(i, i)] += SOLVE_JITTER;
            }
            s.cholesky()
        }
    };
    let Some(chol) = chol else {
        log::warn!("innovation matrix not positive definite; update skipped");
        return Ok(UpdateStatus::Skipped);
    };
    // Kᵀ = S⁻¹ A  (d x m)
    let kt = chol.solve(&a);
    let rv = DVector::from_column_slice(residual);
    let delta = kt.tr_mul(&rv);
    if !delta.iter().all(|v| v.is_finite()) || !kt.iter().all(|v| v.is_finite()) {
        log::warn!("non-finite Kalman gain; update skipped");
        return Ok(UpdateStatus::Skipped);
    }
    let p = params.as_mut_slice();
    for (k, &j) in subset.iter().enumerate() {
        p[j] += delta[k];
        let shrink: f64 = kt.column(k).dot(&a.column(k));
        cov.diag[j] = (cov.diag[j] - shrink).max(DIAG_FLOOR);
    }
    Ok(UpdateStatus::Applied {
        gain_norm: kt.norm(),
    })
}

/// Stacked predictions, residuals and Jacobian rows over a minibatch.
pub fn measurement<E: std::borrow::Borrow<Example>>(
    predictor: &dyn Predictor,
    params: &ParamVector,
    batch: &[E],
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let per = predictor.output_len();
    let mut h = DMatrix::zeros(per * batch.len(), predictor.n_params());
    let mut residual = Vec::with_capacity(per * batch.len());
    for (b, e) in batch.iter().enumerate() {
        let e = e.borrow();
        let (pred, jac) = predictor.predict_with_jacobian(params, e)?;
        check_dim("example target", pred.len(), e.target.len())?;
        h.rows_mut(b * per, per).copy_from(&jac);
        residual.extend(e.target.iter().zip(&pred).map(|(t, p)| t - p));
    }
    if residual.iter().all(|v| v.is_finite()) {
        Ok((h, residual))
    } else {
        Err(Error::NonFinite("SEKF measurement"))
    }
}

/// One predict/update cycle over `batch`.
pub fn sekf_update<E: std::borrow::Borrow<Example>>(
    predictor: &dyn Predictor,
    params: &mut ParamVector,
    cov: &mut CovarianceState,
    batch: &[E],
    config: &SekfConfig,
) -> Result<UpdateStatus> {
    if batch.is_empty() || batch.len() > config.minibatch_size {
        return Err(Error::Contract(format!(
            "SEKF batch of {} with minibatch size {}",
            batch.len(),
            config.minibatch_size
        )));
    }
    cov.predict(config.q);
    let (h, residual) = measurement(predictor, params, batch)?;
    let subset = match config.selection {
        SelectionRule::Uncertainty => select_subset(&h, &cov.diag, config.subset_size),
        SelectionRule::Gradient => select_subset_gradient(&h, &residual, config.subset_size),
    };
    kalman_subset_update(params, cov, &h, &residual, &subset, config.r)
}

/// Sequential passes over the shuffled train split; best-validation params are
/// returned.
pub fn train_sekf(
    predictor: &dyn Predictor,
    init: &ParamVector,
    train: &[Example],
    val: &[Example],
    config: &SekfConfig,
) -> Result<TrainOutcome> {
    config.validate(predictor.n_params())?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract("training needs non-empty train and validation splits".into()));
    }
    check_dim("initial parameters", predictor.n_params(), init.len())?;
    let mut tracker = EpochTracker::new(init);
    let mut params = init.clone();
    let mut cov = CovarianceState::new(params.len(), config.p0);
    let train_loss = mse_loss(predictor, &params, train)?;
    let val_loss = mse_loss(predictor, &params, val)?;
    tracker.record(0, &params, train_loss, val_loss, 0.0);
    let mut passes = vec![SekfPassRecord {
        pass: 0,
        val_loss,
        mean_diag: cov.mean(),
        max_gain_norm: 0.0,
        skipped_updates: 0,
    }];

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut warnings = 0;
    let mut consecutive = 0;

    let run = (|| -> Result<()> {
        for pass in 1..=config.passes {
            order.shuffle(&mut rng);
            let mut max_gain: f64 = 0.0;
            let mut skipped = 0;
            for chunk in order.chunks(config.minibatch_size) {
                let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
                match sekf_update(predictor, &mut params, &mut cov, &batch, config)? {
                    UpdateStatus::Applied { gain_norm } => {
                        consecutive = 0;
                        max_gain = max_gain.max(gain_norm);
                    }
                    UpdateStatus::Skipped => {
                        skipped += 1;
                        warnings += 1;
                        consecutive += 1;
                        if consecutive >= config.max_consecutive_skips {
                            return Err(Error::Contract(format!(
                                "{consecutive} consecutive SEKF updates skipped"
                            )));
                        }
                    }
                }
            }
            let train_loss = mse_loss(predictor, &params, train)?;
            let val_loss = mse_loss(predictor, &params, val)?;
            tracker.record(pass, &params, train_loss, val_loss, 0.0);
            passes.push(SekfPassRecord {
                pass,
                val_loss,
                mean_diag: cov.mean(),
                max_gain_norm: max_gain,
                skipped_updates: skipped,
            });
            if tracker.should_stop(config.early_stop_patience) {
                break;
            }
        }
        Ok(())
    })();
    let aborted = run.err().map(|e| {
        log::warn!("SEKF training aborted: {e}");
        e.to_string()
    });
    Ok(tracker.finish(warnings, aborted, passes))
}

/// CSV `pass,val_loss,mean_diag,max_gain_norm,skipped_updates`.
pub fn write_diagnostics<W: Write>(out: W, passes: &[SekfPassRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in passes {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// `y = π · x` for scalar `x` stored in `x0[0]`.
    struct Scalar;

    impl Predictor for Scalar {
        fn n_params(&self) -> usize {
            1
        }
        fn output_len(&self) -> usize {
            1
        }
        fn predict(&self, p: &ParamVector, e: &Example) -> Result<Vec<f64>> {
            Ok(vec![p[0] * e.x0[0]])
        }
        fn predict_with_jacobian(&self, p: &ParamVector, e: &Example) -> Result<(Vec<f64>, DMatrix<f64>)> {
            Ok((vec![p[0] * e.x0[0]], DMatrix::from_element(1, 1, e.x0[0])))
        }
    }

    fn datum(x: f64, y: f64) -> Example {
        Example {
            x0: vec![x],
            u_seq: vec![],
            target: vec![y],
        }
    }

    fn scalar_cfg(r: f64) -> SekfConfig {
        SekfConfig {
            r,
            q: 0.0,
            subset_size: 1,
            ..Default::default()
        }
    }

    #[test]
    fn scalar_update_matches_closed_form() {
        let (pi, p, x, y, r) = (0.3, 2.5, 1.7, 2.0, 0.01);
        let mut params = ParamVector::new(vec![pi]);
        let mut cov = CovarianceState::new(1, p);
        sekf_update(&Scalar, &mut params, &mut cov, &[datum(x, y)], &scalar_cfg(r)).unwrap();
        let gain = p * x / (p * x * x + r);
        assert!((params[0] - (pi + gain * (y - pi * x))).abs() < 1e-12);
        assert!((cov.diag[0] - (p - gain * x * p)).abs() < 1e-12);
    }

    #[test]
    fn huge_measurement_noise_ignores_data() {
        let mut params = ParamVector::new(vec![0.3]);
        let mut cov = CovarianceState::new(1, 1.0);
        sekf_update(&Scalar, &mut params, &mut cov, &[datum(1.0, 10.0)], &scalar_cfg(1e12)).unwrap();
        assert!((params[0] - 0.3).abs() < 1e-9);
    }

    #[test]
    fn zero_residual_leaves_params_and_shrinks_variance() {
        let mut params = ParamVector::new(vec![0.5]);
        let mut cov = CovarianceState::new(1, 1.0);
        sekf_update(&Scalar, &mut params, &mut cov, &[datum(2.0, 1.0)], &scalar_cfg(0.01)).unwrap();
        assert_eq!(params[0], 0.5);
        assert!(cov.diag[0] <= 1.0);
    }

    #[test]
    fn gain_shrinks_with_measurement_noise() {
        let mut last = f64::INFINITY;
        for r in [1e-4, 1e-3, 1e-2, 0.1, 1.0, 10.0, 1e3] {
            let mut params = ParamVector::new(vec![0.0]);
            let mut cov = CovarianceState::new(1, 1.0);
            sekf_update(&Scalar, &mut params, &mut cov, &[datum(1.3, 1.0)], &scalar_cfg(r)).unwrap();
            let step = params[0].abs();
            assert!(step <= last);
            last = step;
        }
    }

    #[test]
    fn selection_rules() {
        let mut h = DMatrix::zeros(2, 5);
        h[(1, 3)] = 1.0;
        let diag = vec![1.0; 5];
        assert_eq!(select_subset(&h, &diag, 3), vec![0, 1, 3]);
        assert_eq!(select_subset(&h, &diag, 5), vec![0, 1, 2, 3, 4]);
        let g = select_subset_gradient(&h, &[0.0, -2.0], 1);
        assert_eq!(g, vec![3]);
    }

    #[test]
    fn selection_matches_exhaustive_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let h = DMatrix::from_fn(3, 12, |_, _| rng.random_range(-1.0..1.0));
            let mut diag: Vec<f64> = (0..12).map(|_| rng.random_range(0.1..2.0)).collect();
            let j = rng.random_range(0..12);
            diag[j] *= 2.0;
            let m = rng.random_range(1..=12);
            let mut scored: Vec<(f64, usize)> = (0..12)
                .map(|c| (diag[c] * (0..3).map(|r| h[(r, c)] * h[(r, c)]).sum::<f64>(), c))
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut want: Vec<usize> = scored[..m].iter().map(|s| s.1).collect();
            want.sort();
            assert_eq!(select_subset(&h, &diag, m), want);
        }
    }

    #[test]
    fn config_validation() {
        assert!(SekfConfig::default().validate(1000).is_ok());
        assert!(SekfConfig::default().validate(10).is_err());
        assert!(SekfConfig { r: 0.0, ..Default::default() }.validate(1000).is_err());
        assert!(SekfConfig { q: -1.0, ..Default::default() }.validate(1000).is_err());
    }

    #[test]
    fn oversized_batch_rejected() {
        let mut params = ParamVector::new(vec![0.0]);
        let mut cov = CovarianceState::new(1, 1.0);
        let batch = [datum(1.0, 1.0), datum(2.0, 1.0)];
        assert!(sekf_update(&Scalar, &mut params, &mut cov, &batch, &scalar_cfg(0.01)).is_err());
    }

    #[test]
    fn diagnostics_header() {
        let mut buf = Vec::new();
        write_diagnostics(
            &mut buf,
            &[SekfPassRecord {
                pass: 0,
                val_loss: 1.0,
                mean_diag: 1.0,
                max_gain_norm: 0.0,
                skipped_updates: 0,
            }],
        )
        .unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("pass,val_loss,mean_diag,max_gain_norm,skipped_updates\n"));
    }
}
