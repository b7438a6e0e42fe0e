//! Gradient-based training: loss and gradient assembly, subset-masked Adam,
//! L-BFGS with backtracking line search, and the shared epoch loop with plateau
//! learning-rate decay and early stopping on validation loss.

use std::borrow::Borrow;
use std::collections::VecDeque;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Example;
use crate::error::{Error, Result};
use crate::nn::ParamVector;
use crate::predictor::Predictor;

/// Mean squared error per example and per output entry:
/// `1/(N·d) Σ ‖target − prediction‖²`.
pub fn mse_loss<E: Borrow<Example>>(
    predictor: &dyn Predictor,
    params: &ParamVector,
    batch: &[E],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("loss needs a non-empty batch".into()));
    }
    let mut total = 0.0;
    for e in batch {
        let e = e.borrow();
        let pred = predictor.predict(params, e)?;
        crate::error::check_dim("example target", pred.len(), e.target.len())?;
        total += pred
            .iter()
            .zip(&e.target)
            .map(|(p, t)| (t - p) * (t - p))
            .sum::<f64>();
    }
    let loss = total / (batch.len() * predictor.output_len()) as f64;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite("prediction loss"))
    }
}

/// Loss and its gradient `2/(N·d) Σ Hᵀ (prediction − target)`.
pub fn grad_loss<E: Borrow<Example>>(
    predictor: &dyn Predictor,
    params: &ParamVector,
    batch: &[E],
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Contract("gradient needs a non-empty batch".into()));
    }
    let norm = (batch.len() * predictor.output_len()) as f64;
    let mut grad = vec![0.0; predictor.n_params()];
    let mut total = 0.0;
    for e in batch {
        total += predictor.accumulate_gradient(params, e.borrow(), 2.0 / norm, &mut grad)?;
    }
    let loss = total / norm;
    if loss.is_finite() && grad.iter().all(|g| g.is_finite()) {
        Ok((loss, grad))
    } else {
        Err(Error::NonFinite("loss gradient"))
    }
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Indices of the `k` largest `|values|`, ties to the lower index, in ascending order.
pub fn top_k_by_magnitude(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if k < values.len() {
        let cmp = |a: &usize, b: &usize| {
            values[*b]
                .abs()
                .total_cmp(&values[*a].abs())
                .then(a.cmp(b))
        };
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

pub fn subset_len(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).ceil() as usize).clamp(1, n)
}

/// One Adam step. Moments are updated for every parameter; the parameter
/// update is applied only to the `⌈q·n⌉` entries with largest `|grad|`.
/// Returns the number of parameters written.
pub fn adam_subset_step(
    state: &mut AdamState,
    params: &mut ParamVector,
    grad: &[f64],
    learning_rate: f64,
    fraction: f64,
) -> usize {
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    for ((m, v), g) in state.m.iter_mut().zip(state.v.iter_mut()).zip(grad) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
    }
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let p = params.as_mut_slice();
    let mut apply = |i: usize| {
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        p[i] -= learning_rate * m_hat / (v_hat.sqrt() + state.eps);
    };
    let k = subset_len(fraction, grad.len());
    if k == grad.len() {
        (0..k).for_each(&mut apply);
    } else {
        top_k_by_magnitude(grad, k).into_iter().for_each(apply);
    }
    k
}

// ---------------------------------------------------------------------------
// L-BFGS

pub const ARMIJO_C1: f64 = 1e-4;
pub const CURVATURE_EPS: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LbfgsState {
    capacity: usize,
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOutcome {
    pub loss_before: f64,
    pub loss_after: f64,
    pub step: f64,
    /// The line search failed and a plain gradient step was taken instead.
    pub fell_back: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LbfgsState {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            pairs: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Two-loop recursion: returns `-H·grad`.
    pub fn direction(&self, grad: &[f64]) -> Vec<f64> {
        let mut q = grad.to_vec();
        if self.pairs.is_empty() {
            let norm = dot(grad, grad).sqrt();
            let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
            return q.iter().map(|g| -g * scale).collect();
        }
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let (s, y, _) = self.pairs.back().unwrap();
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        if sy <= CURVATURE_EPS {
            return;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }
}

/// One L-BFGS iteration with Armijo backtracking starting at `learning_rate`.
pub fn lbfgs_step(
    state: &mut LbfgsState,
    params: &mut ParamVector,
    learning_rate: f64,
    max_line_searches: usize,
    mut loss_fn: impl FnMut(&ParamVector) -> Result<(f64, Vec<f64>)>,
) -> Result<LbfgsOutcome> {
    let (f0, g0) = loss_fn(params)?;
    let mut d = state.direction(&g0);
    let mut slope = dot(&g0, &d);
    if !(slope < 0.0) {
        if dot(&g0, &g0) == 0.0 {
            return Ok(LbfgsOutcome {
                loss_before: f0,
                loss_after: f0,
                step: 0.0,
                fell_back: false,
            });
        }
        state.pairs.clear();
        d = state.direction(&g0);
        slope = dot(&g0, &d);
    }
    let mut t = learning_rate;
    let mut trial = params.clone();
    for _ in 0..max_line_searches {
        for ((x, p), di) in trial.as_mut_slice().iter_mut().zip(params.as_slice()).zip(&d) {
            *x = p + t * di;
        }
        match loss_fn(&trial) {
            Ok((f1, g1)) if f1 <= f0 + ARMIJO_C1 * t * slope => {
                let s: Vec<f64> = d.iter().map(|di| t * di).collect();
                let y: Vec<f64> = g1.iter().zip(&g0).map(|(a, b)| a - b).collect();
                state.push(s, y);
                *params = trial;
                return Ok(LbfgsOutcome {
                    loss_before: f0,
                    loss_after: f1,
                    step: t,
                    fell_back: false,
                });
            }
            Ok(_) | Err(Error::NonFinite(_)) | Err(Error::Divergence { .. }) => t *= 0.5,
            Err(e) => return Err(e),
        }
    }
    log::warn!("line search failed after {max_line_searches} trials; taking a gradient step");
    for (p, g) in params.as_mut_slice().iter_mut().zip(&g0) {
        *p -= learning_rate * g;
    }
    let f1 = loss_fn(params).map(|(f, _)| f).unwrap_or(f64::NAN);
    Ok(LbfgsOutcome {
        loss_before: f0,
        loss_after: f1,
        step: learning_rate,
        fell_back: true,
    })
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum GradientMethod {
    Adam,
    Lbfgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub minibatch_size: usize,
    pub minibatches_per_epoch: usize,
    pub max_epochs: usize,
    pub lr_patience: usize,
    pub lr_factor: f64,
    pub early_stop_patience: usize,
    pub adam_subset_fraction: f64,
    pub lbfgs_history: usize,
    pub lbfgs_max_line_searches: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            minibatch_size: 16,
            minibatches_per_epoch: 50,
            max_epochs: 100,
            lr_patience: 10,
            lr_factor: 0.5,
            early_stop_patience: 20,
            adam_subset_fraction: 1.0,
            lbfgs_history: 10,
            lbfgs_max_line_searches: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.minibatch_size > 0
            && self.minibatches_per_epoch > 0
            && self.lr_patience > 0
            && self.early_stop_patience > 0
            && self.lr_factor > 0.0
            && self.lr_factor < 1.0
            && self.adam_subset_fraction > 0.0
            && self.adam_subset_fraction <= 1.0
            && self.lbfgs_history > 0
            && self.lbfgs_max_line_searches > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_clock_s: f64,
}

/// Per-pass SEKF diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SekfPassRecord {
    pub pass: usize,
    pub val_loss: f64,
    pub mean_diag: f64,
    pub max_gain_norm: f64,
    pub skipped_updates: usize,
}

/// What any trainer hands back: the best-validation parameters and the history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub params: ParamVector,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub convergence_time_s: f64,
    pub warnings: usize,
    /// Set when training stopped on an error; `params` is then the best seen so far.
    pub aborted: Option<String>,
    #[serde(default)]
    pub sekf_passes: Vec<SekfPassRecord>,
}

impl TrainOutcome {
    pub fn epochs_run(&self) -> usize {
        self.curve.last().map(|r| r.epoch).unwrap_or(0)
    }
}

/// Tracks best validation loss and time, decides LR decay and early stopping.
pub(crate) struct EpochTracker {
    start: Instant,
    pub best_params: ParamVector,
    pub best_val: f64,
    pub best_epoch: usize,
    pub best_time: f64,
    since_best: usize,
    since_decay: usize,
    pub curve: Vec<EpochRecord>,
}

impl EpochTracker {
    pub fn new(init: &ParamVector) -> Self {
        Self {
            start: Instant::now(),
            best_params: init.clone(),
            best_val: f64::INFINITY,
            best_epoch: 0,
            best_time: 0.0,
            since_best: 0,
            since_decay: 0,
            curve: Vec::new(),
        }
    }

    /// Records an epoch; returns true when validation improved.
    pub fn record(&mut self, epoch: usize, params: &ParamVector, train_loss: f64, val_loss: f64, lr: f64) -> bool {
        let now = self.start.elapsed().as_secs_f64();
        self.curve.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            wall_clock_s: now,
        });
        if val_loss < self.best_val {
            self.best_val = val_loss;
            self.best_params = params.clone();
            self.best_epoch = epoch;
            self.best_time = now;
            self.since_best = 0;
            self.since_decay = 0;
            true
        } else {
            self.since_best += 1;
            self.since_decay += 1;
            false
        }
    }

    pub fn should_decay(&mut self, patience: usize) -> bool {
        if self.since_decay >= patience {
            self.since_decay = 0;
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self, patience: usize) -> bool {
        self.since_best >= patience
    }

    pub fn finish(self, warnings: usize, aborted: Option<String>, sekf_passes: Vec<SekfPassRecord>) -> TrainOutcome {
        TrainOutcome {
            params: self.best_params,
            curve: self.curve,
            best_epoch: self.best_epoch,
            best_val_loss: self.best_val,
            convergence_time_s: self.best_time,
            warnings,
            aborted,
            sekf_passes,
        }
    }
}

/// Epoch loop for Adam or L-BFGS. Each epoch draws `minibatches_per_epoch`
/// minibatches uniformly with replacement from `train`.
pub fn train(
    predictor: &dyn Predictor,
    init: &ParamVector,
    train: &[Example],
    val: &[Example],
    config: &TrainConfig,
    method: GradientMethod,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract("training needs non-empty train and validation splits".into()));
    }
    crate::error::check_dim("initial parameters", predictor.n_params(), init.len())?;
    let mut tracker = EpochTracker::new(init);
    let mut params = init.clone();
    let mut lr = config.learning_rate;
    let train_loss = mse_loss(predictor, &params, train)?;
    let val_loss = mse_loss(predictor, &params, val)?;
    tracker.record(0, &params, train_loss, val_loss, lr);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(params.len());
    let mut lbfgs = LbfgsState::new(config.lbfgs_history);
    let mut warnings = 0;
    let mut batch: Vec<&Example> = Vec::with_capacity(config.minibatch_size);

    let run = (|| -> Result<()> {
        for epoch in 1..=config.max_epochs {
            for _ in 0..config.minibatches_per_epoch {
                batch.clear();
                batch.extend((0..config.minibatch_size).map(|_| &train[rng.random_range(0..train.len())]));
                match method {
                    GradientMethod::Adam => {
                        let (_, g) = grad_loss(predictor, &params, &batch)?;
                        adam_subset_step(&mut adam, &mut params, &g, lr, config.adam_subset_fraction);
                    }
                    GradientMethod::Lbfgs => {
                        let out = lbfgs_step(
                            &mut lbfgs,
                            &mut params,
                            lr,
                            config.lbfgs_max_line_searches,
                            |p| grad_loss(predictor, p, &batch),
                        )?;
                        if out.fell_back {
                            warnings += 1;
                        }
                    }
                }
            }
            let train_loss = mse_loss(predictor, &params, train)?;
            let val_loss = mse_loss(predictor, &params, val)?;
            tracker.record(epoch, &params, train_loss, val_loss, lr);
            if tracker.should_stop(config.early_stop_patience) {
                break;
            }
            if tracker.should_decay(config.lr_patience) {
                lr *= config.lr_factor;
            }
        }
        Ok(())
    })();
    let aborted = run.err().map(|e| {
        log::warn!("training aborted: {e}");
        e.to_string()
    });
    Ok(tracker.finish(warnings, aborted, Vec::new()))
}

/// CSV `epoch,train_loss,val_loss,lr,wall_clock_s`.
pub fn write_loss_curve<W: Write>(out: W, curve: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in curve {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, NetworkSpec};
    use crate::predictor::MlpPredictor;
    use nalgebra::DMatrix;

    /// `prediction = W π` with a fixed design matrix per example.
    struct Linear {
        rows: usize,
        n: usize,
    }

    impl Predictor for Linear {
        fn n_params(&self) -> usize {
            self.n
        }
        fn output_len(&self) -> usize {
            self.rows
        }
        fn predict(&self, p: &ParamVector, e: &Example) -> Result<Vec<f64>> {
            Ok(self.predict_with_jacobian(p, e)?.0)
        }
        fn predict_with_jacobian(&self, p: &ParamVector, e: &Example) -> Result<(Vec<f64>, DMatrix<f64>)> {
            let h = DMatrix::from_row_slice(self.rows, self.n, &e.u_seq);
            let y = &h * nalgebra::DVector::from_column_slice(p.as_slice());
            Ok((y.as_slice().to_vec(), h))
        }
    }

    fn random_batch(spec: &NetworkSpec, n: usize, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Example {
                x0: (0..spec.input_width()).map(|_| rng.random_range(-2.0..2.0)).collect(),
                u_seq: vec![],
                target: (0..spec.output_width()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect()
    }

    #[test]
    fn loss_zero_at_exact_fit_and_per_entry_scaling() {
        let spec = NetworkSpec::new(vec![2, 3, 20]).unwrap();
        let pred = MlpPredictor::new(spec.clone());
        let p = ParamVector::zeros(&spec);
        let mut e = Example {
            x0: vec![0.1, 0.2],
            u_seq: vec![],
            target: vec![0.0; 20],
        };
        assert_eq!(mse_loss(&pred, &p, &[e.clone()]).unwrap(), 0.0);
        e.target[0] = 1.0;
        assert_eq!(mse_loss(&pred, &p, &[e]).unwrap(), 0.05);
        assert!(mse_loss::<Example>(&pred, &p, &[]).is_err());
    }

    #[test]
    fn loss_matches_two_loop_oracle() {
        let spec = NetworkSpec::new(vec![2, 6, 5]).unwrap();
        let pred = MlpPredictor::new(spec.clone());
        let p = init_params(&spec, 4);
        let batch = random_batch(&spec, 13, 2);
        let mut acc = 0.0;
        for e in &batch {
            let y = crate::nn::forward(&spec, &p, &e.x0).unwrap();
            for j in 0..5 {
                acc += (e.target[j] - y[j]).powi(2);
            }
        }
        let oracle = acc / (13.0 * 5.0);
        assert!((mse_loss(&pred, &p, &batch).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_directional_finite_difference() {
        let spec = NetworkSpec::new(vec![2, 6, 4, 3]).unwrap();
        let pred = MlpPredictor::new(spec.clone());
        let p = init_params(&spec, 9);
        let batch = random_batch(&spec, 7, 5);
        let (_, g) = grad_loss(&pred, &p, &batch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let dir: Vec<f64> = (0..p.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h = 1e-5;
            let shift = |s: f64| {
                ParamVector::new(p.as_slice().iter().zip(&dir).map(|(a, d)| a + s * d).collect())
            };
            let fd = (mse_loss(&pred, &shift(h), &batch).unwrap()
                - mse_loss(&pred, &shift(-h), &batch).unwrap())
                / (2.0 * h);
            let an = dot(&g, &dir);
            assert!((fd - an).abs() / an.abs().max(1e-8) < 1e-5, "{fd} vs {an}");
        }
    }

    #[test]
    fn generic_gradient_path_agrees_with_backprop() {
        struct ViaJacobian(MlpPredictor);
        impl Predictor for ViaJacobian {
            fn n_params(&self) -> usize {
                self.0.n_params()
            }
            fn output_len(&self) -> usize {
                self.0.output_len()
            }
            fn predict(&self, p: &ParamVector, e: &Example) -> Result<Vec<f64>> {
                self.0.predict(p, e)
            }
            fn predict_with_jacobian(&self, p: &ParamVector, e: &Example) -> Result<(Vec<f64>, DMatrix<f64>)> {
                self.0.predict_with_jacobian(p, e)
            }
        }
        let spec = NetworkSpec::new(vec![2, 5, 4]).unwrap();
        let fast = MlpPredictor::new(spec.clone());
        let slow = ViaJacobian(fast.clone());
        let p = init_params(&spec, 2);
        let batch = random_batch(&spec, 6, 3);
        let (la, ga) = grad_loss(&fast, &p, &batch).unwrap();
        let (lb, gb) = grad_loss(&slow, &p, &batch).unwrap();
        assert!((la - lb).abs() < 1e-14);
        for (a, b) in ga.iter().zip(&gb) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn gradient_vanishes_at_exact_fit_and_is_linear_in_residual() {
        let lin = Linear { rows: 3, n: 2 };
        let design = vec![1.0, 2.0, -1.0, 0.5, 0.3, 0.7];
        let truth = ParamVector::new(vec![0.4, -1.2]);
        let mut e = Example {
            x0: vec![],
            u_seq: design,
            target: vec![0.0; 3],
        };
        e.target = lin.predict(&truth, &e).unwrap();
        let (l, g) = grad_loss(&lin, &truth, &[e.clone()]).unwrap();
        assert!(l == 0.0 && dot(&g, &g).sqrt() < 1e-10);
        let p = ParamVector::new(vec![0.0, 0.0]);
        let (_, g1) = grad_loss(&lin, &p, &[e.clone()]).unwrap();
        let e2 = Example {
            target: e.target.iter().map(|t| 2.0 * t).collect(),
            ..e
        };
        let (_, g2) = grad_loss(&lin, &p, &[e2]).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn full_adam_is_textbook() {
        let mut state = AdamState::new(3);
        let mut p = ParamVector::new(vec![1.0, -2.0, 0.5]);
        let grads = [[0.1, -0.3, 0.0], [0.2, 0.1, -0.5]];
        let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
        let mut reference = [1.0, -2.0, 0.5];
        for (t, g) in grads.iter().enumerate() {
            adam_subset_step(&mut state, &mut p, g, 0.01, 1.0);
            for i in 0..3 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t as i32 + 1));
                let vh = v[i] / (1.0 - 0.999f64.powi(t as i32 + 1));
                reference[i] -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
        }
        assert_eq!(p.as_slice(), &reference);
    }

    #[test]
    fn subset_adam_masks_exactly() {
        let n = 50;
        let mut state = AdamState::new(n);
        let mut p = ParamVector::new((0..n).map(|i| i as f64 * 0.1).collect());
        let before = p.clone();
        let mut g = vec![0.0; n];
        g[17] = 1.0;
        let k = adam_subset_step(&mut state, &mut p, &g, 0.01, 1.0 / n as f64);
        assert_eq!(k, 1);
        for i in 0..n {
            if i == 17 {
                assert_ne!(p[i], before[i]);
            } else {
                assert_eq!(p[i].to_bits(), before[i].to_bits());
            }
        }
        // ties go to the lower index
        assert_eq!(top_k_by_magnitude(&[1.0, -2.0, 2.0, 0.5], 2), vec![1, 2]);
        assert_eq!(top_k_by_magnitude(&[1.0, 1.0, 1.0], 2), vec![0, 1]);
    }

    #[test]
    fn lbfgs_solves_convex_quadratic() {
        // f = ½ xᵀ A x − bᵀ x, minimizer A⁻¹ b
        let a = [[3.0, 0.8], [0.8, 1.5]];
        let b = [1.0, -2.0];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let xstar = [
            (a[1][1] * b[0] - a[0][1] * b[1]) / det,
            (-a[1][0] * b[0] + a[0][0] * b[1]) / det,
        ];
        let f = |p: &ParamVector| -> Result<(f64, Vec<f64>)> {
            let x = p.as_slice();
            let ax = [a[0][0] * x[0] + a[0][1] * x[1], a[1][0] * x[0] + a[1][1] * x[1]];
            let val = 0.5 * (x[0] * ax[0] + x[1] * ax[1]) - b[0] * x[0] - b[1] * x[1];
            Ok((val, vec![ax[0] - b[0], ax[1] - b[1]]))
        };
        let fstar = f(&ParamVector::new(xstar.to_vec())).unwrap().0;
        let mut state = LbfgsState::new(10);
        let mut p = ParamVector::new(vec![0.0, 0.0]);
        // empty history: unit-length steepest descent direction
        let (_, g0) = f(&p).unwrap();
        let d0 = state.direction(&g0);
        let gn = dot(&g0, &g0).sqrt();
        assert!((d0[0] + g0[0] / gn).abs() < 1e-15 && (d0[1] + g0[1] / gn).abs() < 1e-15);
        for _ in 0..20 {
            let (_, g) = f(&p).unwrap();
            if dot(&g, &g).sqrt() < 1e-12 {
                break;
            }
            let out = lbfgs_step(&mut state, &mut p, 1.0, 10, f).unwrap();
            // the line search can only fail once f is flat to rounding
            assert!(!out.fell_back || (out.loss_before - fstar).abs() < 1e-14);
            if !out.fell_back {
                assert!(out.loss_after <= out.loss_before);
            }
        }
        assert!((p[0] - xstar[0]).abs() < 1e-8 && (p[1] - xstar[1]).abs() < 1e-8);
    }

    #[test]
    fn lbfgs_skips_flat_curvature_pairs() {
        let mut state = LbfgsState::new(3);
        state.push(vec![1.0, 0.0], vec![-1.0, 0.0]);
        state.push(vec![1e-6, 0.0], vec![1e-6, 0.0]);
        assert!(state.is_empty());
        for _ in 0..5 {
            state.push(vec![1.0, 0.0], vec![1.0, 0.0]);
        }
        assert_eq!(state.len(), 3);
    }

    fn toy_task() -> (MlpPredictor, Vec<Example>, Vec<Example>) {
        let spec = NetworkSpec::new(vec![1, 4, 1]).unwrap();
        let mk = |x: f64| Example {
            x0: vec![x],
            u_seq: vec![],
            target: vec![0.7 * x - 0.2],
        };
        let train = (0..20).map(|i| mk(i as f64 / 10.0 - 1.0)).collect();
        let val = (0..5).map(|i| mk(i as f64 / 5.0 - 0.45)).collect();
        (MlpPredictor::new(spec), train, val)
    }

    #[test]
    fn zero_epochs_returns_init() {
        let (pred, train_set, val) = toy_task();
        let init = init_params(&pred.spec, 3);
        let cfg = TrainConfig {
            max_epochs: 0,
            ..Default::default()
        };
        let out = train(&pred, &init, &train_set, &val, &cfg, GradientMethod::Adam).unwrap();
        assert_eq!(out.params, init);
        assert_eq!(out.epochs_run(), 0);
        assert_eq!(out.best_epoch, 0);
    }

    #[test]
    fn training_is_deterministic_and_selects_best_epoch() {
        let (pred, train_set, val) = toy_task();
        let init = init_params(&pred.spec, 3);
        for method in [GradientMethod::Adam, GradientMethod::Lbfgs] {
            let cfg = TrainConfig {
                max_epochs: 15,
                minibatch_size: 8,
                learning_rate: 0.05,
                seed: 5,
                ..Default::default()
            };
            let a = train(&pred, &init, &train_set, &val, &cfg, method).unwrap();
            let b = train(&pred, &init, &train_set, &val, &cfg, method).unwrap();
            let losses = |o: &TrainOutcome| o.curve.iter().map(|r| (r.train_loss, r.val_loss)).collect::<Vec<_>>();
            assert_eq!(losses(&a), losses(&b));
            assert_eq!(a.params, b.params);
            assert!(a.best_val_loss <= a.curve[0].val_loss);
            let min = a.curve.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
            assert_eq!(a.best_val_loss, min);
            assert_eq!(mse_loss(&pred, &a.params, &val).unwrap(), min);
            assert!(a.aborted.is_none());
        }
    }

    #[test]
    fn adam_golden_curve() {
        let (pred, train_set, val) = toy_task();
        let init = init_params(&pred.spec, 1);
        let cfg = TrainConfig {
            max_epochs: 5,
            minibatch_size: 4,
            learning_rate: 0.01,
            seed: 42,
            ..Default::default()
        };
        let out = train(&pred, &init, &train_set, &val, &cfg, GradientMethod::Adam).unwrap();
        let got: Vec<f64> = out.curve.iter().map(|r| r.val_loss).collect();
        let golden = GOLDEN_ADAM_VAL;
        assert_eq!(got.len(), golden.len());
        for (g, e) in got.iter().zip(golden) {
            assert!((g - e).abs() <= 1e-12 * e.abs(), "{got:?}");
        }
    }

    const GOLDEN_ADAM_VAL: &[f64] = &[
        0.07408568115180054,
        0.01730452123415723,
        0.003980380884869026,
        4.9496276505567176e-5,
        0.00022552563904969813,
        0.00024016344779971733,
    ];

    #[test]
    fn loss_curve_csv_header() {
        let mut buf = Vec::new();
        write_loss_curve(
            &mut buf,
            &[EpochRecord {
                epoch: 0,
                train_loss: 1.0,
                val_loss: 2.0,
                lr: 0.1,
                wall_clock_s: 0.0,
            }],
        )
        .unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("epoch,train_loss,val_loss,lr,wall_clock_s\n"));
    }
}
