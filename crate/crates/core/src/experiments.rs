//! Transfer-learning experiment grid: source training, target data, the
//! finetune/retrain × optimizer × size × replicate trials, and aggregation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{
    self, build_spring_dataset, build_tclab_dataset, fit_normalizer, split_protocol, train_count, Dataset, Example,
    Normalizer, Split, TCLAB_HORIZON, TCLAB_SAMPLE_DT,
};
use crate::error::{Error, Result};
use crate::gradient::{self, mse_loss, EpochRecord, GradientMethod, TrainConfig, TrainOutcome};
use crate::metrics::{self, TrialResult};
use crate::nn::{init_params, NetworkSpec, ParamVector};
use crate::node::NodeSpec;
use crate::predictor::{MlpPredictor, Model, Predictor};
use crate::sekf::{train_sekf, SekfConfig};
use crate::stats::{permutation_anova, FactorTable};
use crate::systems::{SpringParams, TclabParams};

/// Overrides `output_dir` from the config when set.
pub const OUTPUT_ENV: &str = "SEKF_TL_OUT";

const SPRING_FULL_EXAMPLES: f64 = 100_000.0;
const TCLAB_FULL_DURATION_S: f64 = 365.0 * 86_400.0;
const DAY_S: f64 = 86_400.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    Spring,
    Tclab,
}

impl SystemKind {
    pub fn name(self) -> &'static str {
        match self {
            SystemKind::Spring => "spring",
            SystemKind::Tclab => "tclab",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMethod {
    Finetune,
    Retrain,
}

impl InitMethod {
    pub fn name(self) -> &'static str {
        match self {
            InitMethod::Finetune => "finetune",
            InitMethod::Retrain => "retrain",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sekf,
    Adam,
    Lbfgs,
}

impl Optimizer {
    pub fn name(self) -> &'static str {
        match self {
            Optimizer::Sekf => "sekf",
            Optimizer::Adam => "adam",
            Optimizer::Lbfgs => "lbfgs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpringParam {
    M,
    C,
    K,
    U,
}

/// How a target system differs from its source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetSpec {
    /// Relative change of `m`, `c` or `k`; absolute change in newtons for `u`.
    Spring { param: SpringParam, delta: f64 },
    TclabPerturbed,
}

impl TargetSpec {
    pub fn name(&self) -> String {
        match self {
            TargetSpec::Spring { param: SpringParam::U, delta } => format!("u{delta:+}N"),
            TargetSpec::Spring { param, delta } => {
                let p = match param {
                    SpringParam::M => "m",
                    SpringParam::C => "c",
                    SpringParam::K => "k",
                    SpringParam::U => unreachable!(),
                };
                format!("{p}{:+}pct", (delta * 100.0).round() as i64)
            }
            TargetSpec::TclabPerturbed => "perturbed".into(),
        }
    }

    pub fn spring_params(&self, source: &SpringParams) -> Result<SpringParams> {
        let TargetSpec::Spring { param, delta } = *self else {
            return Err(Error::Config("target is not a spring transform".into()));
        };
        let mut p = *source;
        match param {
            SpringParam::M => p.m *= 1.0 + delta,
            SpringParam::C => p.c *= 1.0 + delta,
            SpringParam::K => p.k *= 1.0 + delta,
            SpringParam::U => p.u += delta,
        }
        p.validate()?;
        Ok(p)
    }

    /// The eight single-parameter spring targets.
    pub fn all_spring() -> Vec<TargetSpec> {
        let mut v = Vec::new();
        for param in [SpringParam::M, SpringParam::C, SpringParam::K] {
            for delta in [-0.1, 0.1] {
                v.push(TargetSpec::Spring { param, delta });
            }
        }
        for delta in [-1.0, 1.0] {
            v.push(TargetSpec::Spring {
                param: SpringParam::U,
                delta,
            });
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    /// Spring: training + validation examples.
    pub examples: usize,
    /// Spring: held-out test examples.
    pub test_examples: usize,
    /// TCLab: simulated seconds for training + validation windows.
    pub duration_s: f64,
    /// TCLab: simulated seconds of the separate test run.
    pub test_duration_s: f64,
    /// TCLab: window stride in samples.
    pub stride: usize,
    pub noise_sigma: f64,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TclabConfig {
    pub rate_scale: f64,
    pub substeps: usize,
    pub target_days: usize,
    pub test_days: usize,
    pub target_stride: usize,
    pub test_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub system: SystemKind,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub hidden: Vec<usize>,
    pub source: SourceConfig,
    pub targets: Vec<TargetSpec>,
    /// Spring: examples. TCLab: hours of data.
    pub sizes: Vec<f64>,
    pub replicates: usize,
    /// Spring: examples per replicate chunk of the target pool.
    pub replicate_len: usize,
    /// Spring: tail of each replicate chunk held out for testing.
    pub test_len: usize,
    pub target_noise_sigma: f64,
    pub tclab: TclabConfig,
    pub inits: Vec<InitMethod>,
    pub optimizers: Vec<Optimizer>,
    pub adam: TrainConfig,
    pub lbfgs: TrainConfig,
    /// SEKF settings for finetuning, where `p0` is the prior spread around the
    /// source parameters.
    pub sekf: SekfConfig,
    /// SEKF settings when starting from a random initialization.
    pub sekf_retrain: SekfConfig,
    /// Pick hyperparameters per trial by grid search on validation loss.
    pub tune: bool,
    /// Skip all optimization (evaluates the initial parameters).
    pub zero_epochs: bool,
    pub n_perm: usize,
}

impl ExperimentConfig {
    pub fn defaults(system: SystemKind) -> Self {
        let transfer = TrainConfig {
            learning_rate: 1e-3,
            minibatch_size: 16,
            max_epochs: 100,
            ..TrainConfig::default()
        };
        let spring = system == SystemKind::Spring;
        Self {
            system,
            seed: 0,
            output_dir: PathBuf::from("runs").join(system.name()),
            hidden: vec![32, 32],
            source: SourceConfig {
                examples: 10_000,
                test_examples: 2_000,
                duration_s: 14.0 * DAY_S,
                test_duration_s: DAY_S,
                stride: 30,
                noise_sigma: if spring { 0.05 } else { 0.25 },
                train: TrainConfig {
                    learning_rate: 1e-3,
                    minibatch_size: 64,
                    max_epochs: 1000,
                    early_stop_patience: 30,
                    ..TrainConfig::default()
                },
            },
            targets: if spring {
                TargetSpec::all_spring()
            } else {
                vec![TargetSpec::TclabPerturbed]
            },
            sizes: if spring {
                vec![10.0, 50.0, 100.0, 500.0, 1000.0]
            } else {
                vec![0.5, 1.0, 4.0, 12.0, 24.0]
            },
            replicates: if spring { 10 } else { 5 },
            replicate_len: 10_000,
            test_len: 9_000,
            target_noise_sigma: if spring { 0.05 } else { 0.5 },
            tclab: TclabConfig {
                rate_scale: 0.01,
                substeps: 2,
                target_days: 7,
                test_days: 2,
                target_stride: 6,
                test_stride: 30,
            },
            inits: vec![InitMethod::Finetune, InitMethod::Retrain],
            optimizers: vec![Optimizer::Sekf, Optimizer::Adam, Optimizer::Lbfgs],
            adam: transfer.clone(),
            lbfgs: TrainConfig {
                learning_rate: 1.0,
                ..transfer
            },
            sekf: SekfConfig {
                q: 1e-6,
                p0: 0.01,
                minibatch_size: 8,
                ..SekfConfig::default()
            },
            sekf_retrain: SekfConfig {
                q: 1e-6,
                p0: 1.0,
                minibatch_size: 8,
                ..SekfConfig::default()
            },
            tune: false,
            zero_epochs: false,
            n_perm: crate::stats::DEFAULT_PERMUTATIONS,
        }
    }

    /// Parses a JSON config; missing fields take the defaults of its `system`.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: serde_json::Value = serde_json::from_str(text)?;
        let system: SystemKind = serde_json::from_value(
            user.get("system")
                .cloned()
                .ok_or_else(|| Error::Config("config needs a \"system\" field".into()))?,
        )
        .map_err(|e| Error::Config(format!("system: {e}")))?;
        let mut merged = serde_json::to_value(Self::defaults(system))?;
        merge(&mut merged, user);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// `output_dir`, unless the environment overrides it.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.targets.is_empty() || self.sizes.is_empty() || self.inits.is_empty() || self.optimizers.is_empty() {
            return fail("targets, sizes, inits and optimizers must be non-empty");
        }
        if self.replicates == 0 {
            return fail("replicates must be >= 1");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return fail("hidden widths must be non-empty and positive");
        }
        if self.sizes.iter().any(|s| !(*s > 0.0)) {
            return fail("sizes must be positive");
        }
        let spring = self.system == SystemKind::Spring;
        for t in &self.targets {
            if matches!(t, TargetSpec::TclabPerturbed) == spring {
                return fail("target kinds must match the system");
            }
        }
        if spring {
            if self.sizes.iter().any(|s| s.fract() != 0.0) {
                return fail("spring sizes are example counts");
            }
            let max = self.sizes.iter().cloned().fold(0.0, f64::max) as usize;
            if max + self.test_len > self.replicate_len {
                return fail("largest size plus test length exceeds the replicate length");
            }
            if self.source.examples < 10 || self.source.test_examples == 0 {
                return fail("source needs >= 10 examples and a test set");
            }
        } else {
            let t = &self.tclab;
            if t.test_days == 0 || t.target_days <= t.test_days || self.replicates > t.target_days - t.test_days {
                return fail("tclab needs test days and one target day per replicate");
            }
            if self.sizes.iter().any(|h| h * 3600.0 > DAY_S) {
                return fail("tclab sizes must fit in one day");
            }
            if t.target_stride == 0 || t.test_stride == 0 || self.source.stride == 0 || t.substeps == 0 {
                return fail("strides and substeps must be >= 1");
            }
            if !(t.rate_scale > 0.0) {
                return fail("rate_scale must be positive");
            }
        }
        self.source.train.validate()?;
        self.adam.validate()?;
        self.lbfgs.validate()?;
        let n_params = self.model()?.network().param_count();
        self.sekf.validate(n_params)?;
        self.sekf_retrain.validate(n_params)?;
        Ok(())
    }

    pub fn model(&self) -> Result<Model> {
        match self.system {
            SystemKind::Spring => {
                let mut w = vec![2];
                w.extend(&self.hidden);
                w.push(datasets::SPRING_HORIZON);
                Ok(Model::Mlp(MlpPredictor::new(NetworkSpec::new(w)?)))
            }
            SystemKind::Tclab => {
                let mut w = vec![4];
                w.extend(&self.hidden);
                w.push(2);
                let node = NodeSpec::new(
                    NetworkSpec::new(w)?,
                    2,
                    2,
                    TCLAB_SAMPLE_DT,
                    self.tclab.substeps,
                    TCLAB_HORIZON,
                )?
                .with_rate_scale(self.tclab.rate_scale);
                Ok(Model::Node(node))
            }
        }
    }

    /// Every trial, in the fixed execution and reporting order.
    pub fn trials(&self) -> Vec<TrialSpec> {
        let mut v = Vec::new();
        for target in &self.targets {
            for &size in &self.sizes {
                for replicate in 0..self.replicates {
                    for &init in &self.inits {
                        for &optimizer in &self.optimizers {
                            v.push(TrialSpec {
                                target: *target,
                                init,
                                optimizer,
                                size,
                                replicate,
                            });
                        }
                    }
                }
            }
        }
        v
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Stable 64-bit seed from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in base.to_le_bytes().iter().chain(label.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub target: TargetSpec,
    pub init: InitMethod,
    pub optimizer: Optimizer,
    pub size: f64,
    pub replicate: usize,
}

impl TrialSpec {
    pub fn label(&self) -> String {
        format!(
            "{}_{}_s{}_r{}",
            self.init.name(),
            self.optimizer.name(),
            self.size,
            self.replicate
        )
    }

    pub fn seed(&self, config_seed: u64) -> u64 {
        derive_seed(config_seed, &format!("{}/{}", self.target.name(), self.label()))
    }

    pub fn path(&self, root: &Path) -> PathBuf {
        root.join("trials")
            .join(self.target.name())
            .join(format!("{}.json", self.label()))
    }
}

// ---------------------------------------------------------------------------
// source model

/// The trained source model and its baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceArtifact {
    pub system: SystemKind,
    pub seed: u64,
    pub model: Model,
    pub params: ParamVector,
    pub normalizer: Option<Normalizer>,
    pub train_loss: f64,
    pub val_loss: f64,
    pub test_loss: f64,
    pub convergence_time_s: f64,
    pub best_epoch: usize,
    pub epochs: usize,
    /// Source data actually used relative to the full-scale experiment.
    pub data_scale: f64,
    pub curve: Vec<EpochRecord>,
}

impl SourceArtifact {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("artifact.json"), &serde_json::to_string(self)?)?;
        gradient::write_loss_curve(fs::File::create(dir.join("loss_curve.csv"))?, &self.curve)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join("artifact.json"))?)?)
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn normalize_all(examples: &[Example], norm: Option<&Normalizer>) -> Vec<Example> {
    match norm {
        Some(n) => examples.iter().map(|e| n.apply(e)).collect(),
        None => examples.to_vec(),
    }
}

/// MSE in physical units for normalized examples.
pub fn physical_loss(
    predictor: &dyn Predictor,
    params: &ParamVector,
    examples: &[Example],
    norm: Option<&Normalizer>,
) -> Result<f64> {
    let Some(n) = norm else {
        return mse_loss(predictor, params, examples);
    };
    if examples.is_empty() {
        return Err(Error::Contract("loss needs a non-empty batch".into()));
    }
    let mut total = 0.0;
    for e in examples {
        let pred = n.denormalize_target(&predictor.predict(params, e)?);
        let target = n.denormalize_target(&e.target);
        total += pred.iter().zip(&target).map(|(p, t)| (t - p).powi(2)).sum::<f64>();
    }
    let loss = total / (examples.len() * predictor.output_len()) as f64;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite("prediction loss"))
    }
}

struct SourceData {
    train: Vec<Example>,
    val: Vec<Example>,
    test: Vec<Example>,
    normalizer: Option<Normalizer>,
    data_scale: f64,
}

fn source_data(config: &ExperimentConfig) -> Result<SourceData> {
    let s = &config.source;
    let seed_pool = derive_seed(config.seed, "source-pool");
    let seed_test = derive_seed(config.seed, "source-test");
    let (pool, test, data_scale) = match config.system {
        SystemKind::Spring => {
            let p = SpringParams::default();
            (
                build_spring_dataset(&p, s.examples, seed_pool, s.noise_sigma)?,
                build_spring_dataset(&p, s.test_examples, seed_test, s.noise_sigma)?,
                s.examples as f64 / SPRING_FULL_EXAMPLES,
            )
        }
        SystemKind::Tclab => {
            let p = TclabParams::default();
            (
                build_tclab_dataset(&p, s.duration_s, seed_pool, s.noise_sigma, s.stride)?,
                build_tclab_dataset(&p, s.test_duration_s, seed_test, s.noise_sigma, s.stride)?,
                s.duration_s / TCLAB_FULL_DURATION_S,
            )
        }
    };
    let n_train = train_count(pool.len());
    let train_ds = pool.subset(0..n_train, Split::Train);
    let normalizer = match config.system {
        SystemKind::Spring => None,
        SystemKind::Tclab => Some(fit_normalizer(&train_ds, true)?),
    };
    let nz = normalizer.as_ref();
    Ok(SourceData {
        train: normalize_all(&train_ds.examples, nz),
        val: normalize_all(&pool.examples[n_train..], nz),
        test: normalize_all(&test.examples, nz),
        normalizer,
        data_scale,
    })
}

/// Trains the source model on the nominal system with Adam.
pub fn train_source(config: &ExperimentConfig) -> Result<SourceArtifact> {
    config.validate()?;
    let data = source_data(config)?;
    if data.val.is_empty() {
        return Err(Error::Config("source pool too small for a validation split".into()));
    }
    let model = config.model()?;
    let pred = model.as_predictor();
    let init = init_params(model.network(), derive_seed(config.seed, "source-init"));
    let train_cfg = TrainConfig {
        seed: derive_seed(config.seed, "source-batches"),
        ..config.source.train.clone()
    };
    log::info!(
        "training {} source model on {} examples",
        config.system.name(),
        data.train.len()
    );
    let out = gradient::train(pred, &init, &data.train, &data.val, &train_cfg, GradientMethod::Adam)?;
    if let Some(reason) = &out.aborted {
        return Err(Error::Contract(format!("source training aborted: {reason}")));
    }
    let nz = data.normalizer.as_ref();
    let artifact = SourceArtifact {
        system: config.system,
        seed: config.seed,
        train_loss: physical_loss(pred, &out.params, &data.train, nz)?,
        val_loss: physical_loss(pred, &out.params, &data.val, nz)?,
        test_loss: physical_loss(pred, &out.params, &data.test, nz)?,
        convergence_time_s: out.convergence_time_s,
        best_epoch: out.best_epoch,
        epochs: out.epochs_run(),
        data_scale: data.data_scale,
        params: out.params,
        curve: out.curve,
        normalizer: data.normalizer,
        model,
    };
    Ok(artifact)
}

/// Re-evaluates a stored source model on its regenerated test set.
pub fn source_test_loss(config: &ExperimentConfig, artifact: &SourceArtifact) -> Result<f64> {
    let data = source_data(config)?;
    physical_loss(
        artifact.model.as_predictor(),
        &artifact.params,
        &data.test,
        artifact.normalizer.as_ref(),
    )
}

// ---------------------------------------------------------------------------
// target data

/// Normalized train/val per size and a shared test set for one replicate.
#[derive(Debug, Clone)]
pub struct ReplicateData {
    pub sizes: Vec<(f64, Vec<Example>, Vec<Example>)>,
    pub test: Vec<Example>,
}

impl ReplicateData {
    fn split(&self, size: f64) -> Result<(&[Example], &[Example])> {
        self.sizes
            .iter()
            .find(|(s, _, _)| *s == size)
            .map(|(_, t, v)| (t.as_slice(), v.as_slice()))
            .ok_or_else(|| Error::Config(format!("size {size} not prepared")))
    }
}

fn spring_target_pool(config: &ExperimentConfig, target: &TargetSpec) -> Result<Dataset> {
    let p = target.spring_params(&SpringParams::default())?;
    build_spring_dataset(
        &p,
        config.replicates * config.replicate_len,
        derive_seed(config.seed, &format!("target/{}", target.name())),
        config.target_noise_sigma,
    )
}

fn tclab_target_run(config: &ExperimentConfig, target: &TargetSpec) -> Result<Dataset> {
    build_tclab_dataset(
        &TclabParams::default().perturbed_target(),
        config.tclab.target_days as f64 * DAY_S,
        derive_seed(config.seed, &format!("target/{}", target.name())),
        config.target_noise_sigma,
        config.tclab.target_stride,
    )
}

/// Target datasets for every replicate, normalized with the source normalizer.
pub fn target_data(
    config: &ExperimentConfig,
    target: &TargetSpec,
    norm: Option<&Normalizer>,
) -> Result<Vec<ReplicateData>> {
    match config.system {
        SystemKind::Spring => {
            let pool = spring_target_pool(config, target)?;
            let sizes: Vec<usize> = config.sizes.iter().map(|s| *s as usize).collect();
            (0..config.replicates)
                .map(|r| {
                    let rs = split_protocol(&pool, &sizes, r, config.replicate_len, config.test_len)?;
                    Ok(ReplicateData {
                        sizes: rs
                            .sizes
                            .iter()
                            .map(|s| {
                                (
                                    s.size as f64,
                                    normalize_all(&s.train.examples, norm),
                                    normalize_all(&s.val.examples, norm),
                                )
                            })
                            .collect(),
                        test: normalize_all(&rs.test.examples, norm),
                    })
                })
                .collect()
        }
        SystemKind::Tclab => {
            let run = tclab_target_run(config, target)?;
            let t = &config.tclab;
            let per_day = (DAY_S / TCLAB_SAMPLE_DT) as usize / t.target_stride;
            let test_start = (t.target_days - t.test_days) * per_day;
            let test: Vec<Example> = run.examples[test_start.min(run.len())..]
                .iter()
                .step_by(t.test_stride.div_ceil(t.target_stride).max(1))
                .cloned()
                .collect();
            let test = normalize_all(&test, norm);
            (0..config.replicates)
                .map(|day| {
                    let start = day * per_day;
                    let sizes = config
                        .sizes
                        .iter()
                        .map(|h| {
                            let n = ((h * 3600.0 / TCLAB_SAMPLE_DT) as usize / t.target_stride).max(2);
                            let region = &run.examples[start..start + n];
                            let n_train = train_count(n);
                            (
                                *h,
                                normalize_all(&region[..n_train], norm),
                                normalize_all(&region[n_train..], norm),
                            )
                        })
                        .collect();
                    Ok(ReplicateData {
                        sizes,
                        test: test.clone(),
                    })
                })
                .collect()
        }
    }
}

/// Source/target data similarity: per-dimension Wasserstein distance between
/// test targets and cosine similarity of noise-free trajectories from shared
/// initial conditions and inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSimilarity {
    pub target: String,
    pub wasserstein: f64,
    pub trajectory_cosine: f64,
}

pub fn system_similarity(config: &ExperimentConfig, target: &TargetSpec) -> Result<SystemSimilarity> {
    let seed = derive_seed(config.seed, "similarity");
    let (a, b, dim) = match config.system {
        SystemKind::Spring => {
            let sp = SpringParams::default();
            let tp = target.spring_params(&sp)?;
            (
                build_spring_dataset(&sp, 500, seed, 0.0)?,
                build_spring_dataset(&tp, 500, seed, 0.0)?,
                datasets::SPRING_HORIZON,
            )
        }
        SystemKind::Tclab => {
            let sp = TclabParams::default();
            (
                build_tclab_dataset(&sp, DAY_S, seed, 0.0, 60)?,
                build_tclab_dataset(&sp.perturbed_target(), DAY_S, seed, 0.0, 60)?,
                2 * TCLAB_HORIZON,
            )
        }
    };
    let flat = |d: &Dataset| d.examples.iter().flat_map(|e| e.target.clone()).collect::<Vec<f64>>();
    let (fa, fb) = (flat(&a), flat(&b));
    Ok(SystemSimilarity {
        target: target.name(),
        wasserstein: metrics::wasserstein_per_dim(&fa, &fb, dim)?,
        trajectory_cosine: metrics::cosine_similarity(&ParamVector::new(fa), &ParamVector::new(fb))?,
    })
}

// ---------------------------------------------------------------------------
// trials

/// Learning rates and batch sizes searched when tuning gradient trainers.
pub const TUNE_LEARNING_RATES: [f64; 3] = [1e-4, 1e-3, 1e-2];
pub const TUNE_BATCH_SIZES: [usize; 2] = [16, 64];
pub const TUNE_SEKF_Q: [f64; 4] = [1e-6, 1e-4, 1e-2, 1e-1];
pub const TUNE_SEKF_P0: [f64; 4] = [0.01, 1.0, 10.0, 100.0];
pub const TUNE_SEKF_BATCH: [usize; 4] = [1, 2, 4, 8];

/// Runs `method` over the small learning-rate × batch grid and keeps the
/// outcome with the lowest validation loss (first wins on ties).
pub fn tune_gradient(
    predictor: &dyn Predictor,
    init: &ParamVector,
    train: &[Example],
    val: &[Example],
    base: &TrainConfig,
    method: GradientMethod,
) -> Result<(TrainConfig, TrainOutcome)> {
    let mut best: Option<(TrainConfig, TrainOutcome)> = None;
    for lr in TUNE_LEARNING_RATES {
        for batch in TUNE_BATCH_SIZES {
            let cfg = TrainConfig {
                learning_rate: if method == GradientMethod::Lbfgs { lr * 1e3 } else { lr },
                minibatch_size: batch,
                ..base.clone()
            };
            let out = gradient::train(predictor, init, train, val, &cfg, method)?;
            if best.as_ref().is_none_or(|(_, b)| out.best_val_loss < b.best_val_loss) {
                best = Some((cfg, out));
            }
        }
    }
    Ok(best.expect("non-empty grid"))
}

/// Grid search over process noise, initial covariance and minibatch size.
pub fn tune_sekf(
    predictor: &dyn Predictor,
    init: &ParamVector,
    train: &[Example],
    val: &[Example],
    base: &SekfConfig,
) -> Result<(SekfConfig, TrainOutcome)> {
    let mut best: Option<(SekfConfig, TrainOutcome)> = None;
    for q in TUNE_SEKF_Q {
        for p0 in TUNE_SEKF_P0 {
            for batch in TUNE_SEKF_BATCH {
                let cfg = SekfConfig {
                    q,
                    p0,
                    minibatch_size: batch,
                    ..base.clone()
                };
                let out = train_sekf(predictor, init, train, val, &cfg)?;
                if best.as_ref().is_none_or(|(_, b)| out.best_val_loss < b.best_val_loss) {
                    best = Some((cfg, out));
                }
            }
        }
    }
    Ok(best.expect("non-empty grid"))
}

/// Trains one trial and computes every metric against the source baselines.
pub fn run_trial(
    config: &ExperimentConfig,
    source: &SourceArtifact,
    data: &ReplicateData,
    spec: &TrialSpec,
) -> Result<TrialResult> {
    let (train, val) = data.split(spec.size)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!("size {} leaves an empty split", spec.size)));
    }
    let model = &source.model;
    let pred = model.as_predictor();
    let seed = spec.seed(config.seed);
    let init = match spec.init {
        InitMethod::Finetune => source.params.clone(),
        InitMethod::Retrain => init_params(model.network(), seed),
    };
    let epochs = |c: &TrainConfig| TrainConfig {
        seed,
        max_epochs: if config.zero_epochs { 0 } else { c.max_epochs },
        ..c.clone()
    };
    let out = match spec.optimizer {
        Optimizer::Adam | Optimizer::Lbfgs => {
            let (base, method) = if spec.optimizer == Optimizer::Adam {
                (epochs(&config.adam), GradientMethod::Adam)
            } else {
                (epochs(&config.lbfgs), GradientMethod::Lbfgs)
            };
            if config.tune && !config.zero_epochs {
                tune_gradient(pred, &init, train, val, &base, method)?.1
            } else {
                gradient::train(pred, &init, train, val, &base, method)?
            }
        }
        Optimizer::Sekf => {
            let chosen = match spec.init {
                InitMethod::Finetune => &config.sekf,
                InitMethod::Retrain => &config.sekf_retrain,
            };
            let base = SekfConfig {
                seed,
                passes: if config.zero_epochs { 0 } else { chosen.passes },
                subset_size: chosen.subset_size.min(pred.n_params()),
                ..chosen.clone()
            };
            if config.tune && !config.zero_epochs {
                tune_sekf(pred, &init, train, val, &base)?.1
            } else {
                train_sekf(pred, &init, train, val, &base)?
            }
        }
    };
    let nz = source.normalizer.as_ref();
    let train_loss = physical_loss(pred, &out.params, train, nz)?;
    let test_loss = physical_loss(pred, &out.params, &data.test, nz)?;
    Ok(TrialResult {
        system: config.system.name().into(),
        target: spec.target.name(),
        init: spec.init.name().into(),
        optimizer: spec.optimizer.name().into(),
        size: spec.size as usize,
        replicate: spec.replicate,
        seed,
        train_loss,
        val_loss: physical_loss(pred, &out.params, val, nz)?,
        test_loss,
        convergence_time_s: out.convergence_time_s,
        epochs: out.epochs_run(),
        best_epoch: out.best_epoch,
        source_test_loss: source.test_loss,
        source_convergence_time_s: source.convergence_time_s,
        normalized_mse: metrics::normalized_mse(test_loss, source.test_loss)?,
        normalized_time: metrics::normalized_convergence_time(
            out.convergence_time_s,
            source.convergence_time_s.max(f64::MIN_POSITIVE),
        )?,
        gap: metrics::train_test_gap(train_loss, test_loss),
        cosine_similarity: metrics::cosine_similarity(&source.params, &out.params)?,
        warnings: out.warnings,
        aborted: out.aborted,
        layer_changes: metrics::layer_change_report(model.network(), &source.params, &out.params)?,
        final_params: Some(out.params),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub planned: usize,
    pub executed: usize,
    pub skipped: usize,
    /// `(trial path, reason)` for trials that errored or aborted.
    pub failures: Vec<(String, String)>,
}

/// Loads the source artifact under `root`, training and saving it if absent.
pub fn ensure_source(config: &ExperimentConfig, root: &Path) -> Result<SourceArtifact> {
    let dir = root.join("source");
    if dir.join("artifact.json").exists() {
        let a = SourceArtifact::load(&dir)?;
        if a.system == config.system && a.seed == config.seed {
            return Ok(a);
        }
        log::warn!("stored source artifact does not match the config; retraining");
    }
    let a = train_source(config)?;
    a.save(&dir)?;
    Ok(a)
}

/// Runs every trial not already on disk (when `resume`), on `jobs` workers,
/// then writes the aggregate CSVs.
pub fn run_grid(config: &ExperimentConfig, jobs: usize, resume: bool) -> Result<GridSummary> {
    config.validate()?;
    let root = config.output_root();
    fs::create_dir_all(&root)?;
    write_atomic(&root.join("config.json"), &serde_json::to_string_pretty(config)?)?;
    let source = ensure_source(config, &root)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;

    let mut summary = GridSummary::default();
    let mut similarity = Vec::new();
    for target in &config.targets {
        let specs: Vec<TrialSpec> = config.trials().into_iter().filter(|t| t.target == *target).collect();
        summary.planned += specs.len();
        let todo: Vec<TrialSpec> = specs
            .into_iter()
            .filter(|t| !(resume && load_trial(&t.path(&root)).is_ok()))
            .collect();
        summary.skipped += config.trials().iter().filter(|t| t.target == *target).count() - todo.len();
        similarity.push(system_similarity(config, target)?);
        if todo.is_empty() {
            continue;
        }
        fs::create_dir_all(root.join("trials").join(target.name()))?;
        let data = target_data(config, target, source.normalizer.as_ref())?;
        let results: Vec<(TrialSpec, Result<TrialResult>)> = pool.install(|| {
            todo.par_iter()
                .map(|t| {
                    let start = Instant::now();
                    let r = run_trial(config, &source, &data[t.replicate], t);
                    log::info!(
                        "{}/{} finished in {:.1}s",
                        t.target.name(),
                        t.label(),
                        start.elapsed().as_secs_f64()
                    );
                    (*t, r)
                })
                .collect()
        });
        for (t, r) in results {
            let path = t.path(&root);
            summary.executed += 1;
            match r {
                Ok(res) => {
                    if let Some(reason) = &res.aborted {
                        summary.failures.push((path.display().to_string(), reason.clone()));
                    }
                    write_atomic(&path, &serde_json::to_string(&res)?)?;
                }
                Err(e) => {
                    log::error!("trial {} failed: {e}", path.display());
                    fs::write(path.with_extension("failed"), e.to_string())?;
                    summary.failures.push((path.display().to_string(), e.to_string()));
                }
            }
        }
    }
    write_similarity(&root, &similarity)?;
    let trials = collect_results(config, &root)?;
    write_results_csv(&root.join("results.csv"), &trials)?;
    Ok(summary)
}

fn write_similarity(root: &Path, rows: &[SystemSimilarity]) -> Result<()> {
    let mut w = csv::Writer::from_path(root.join("similarity.csv"))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_trial(path: &Path) -> Result<TrialResult> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Completed trial records of `config`, in grid order.
pub fn collect_results(config: &ExperimentConfig, root: &Path) -> Result<Vec<TrialResult>> {
    Ok(config
        .trials()
        .iter()
        .filter_map(|t| load_trial(&t.path(root)).ok())
        .collect())
}

/// Every trial record found under `root/trials`, sorted by factor columns.
pub fn scan_results(root: &Path) -> Result<Vec<TrialResult>> {
    let mut out = Vec::new();
    let dir = root.join("trials");
    if !dir.exists() {
        return Ok(out);
    }
    for target in fs::read_dir(dir)? {
        let target = target?.path();
        if !target.is_dir() {
            continue;
        }
        for f in fs::read_dir(target)? {
            let f = f?.path();
            if f.extension().is_some_and(|e| e == "json") {
                out.push(load_trial(&f)?);
            }
        }
    }
    out.sort_by(|a, b| {
        (&a.target, a.size, a.replicate, &a.init, &a.optimizer).cmp(&(&b.target, b.size, b.replicate, &b.init, &b.optimizer))
    });
    Ok(out)
}

#[derive(Serialize)]
struct ResultRow<'a> {
    system: &'a str,
    target: &'a str,
    init: &'a str,
    optimizer: &'a str,
    size: usize,
    replicate: usize,
    seed: u64,
    train_loss: f64,
    val_loss: f64,
    test_loss: f64,
    gap: f64,
    normalized_mse: f64,
    normalized_time: f64,
    cosine_similarity: f64,
    epochs: usize,
    best_epoch: usize,
    warnings: usize,
    aborted: &'a str,
    convergence_time_s: f64,
}

/// One row per trial; wall-clock columns last.
pub fn write_results_csv(path: &Path, trials: &[TrialResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for t in trials {
        w.serialize(ResultRow {
            system: &t.system,
            target: &t.target,
            init: &t.init,
            optimizer: &t.optimizer,
            size: t.size,
            replicate: t.replicate,
            seed: t.seed,
            train_loss: t.train_loss,
            val_loss: t.val_loss,
            test_loss: t.test_loss,
            gap: t.gap,
            normalized_mse: t.normalized_mse,
            normalized_time: t.normalized_time,
            cosine_similarity: t.cosine_similarity,
            epochs: t.epochs,
            best_epoch: t.best_epoch,
            warnings: t.warnings,
            aborted: t.aborted.as_deref().unwrap_or(""),
            convergence_time_s: t.convergence_time_s,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaRow {
    pub outcome: String,
    pub factor: String,
    #[serde(rename = "F")]
    pub f: f64,
    pub p: f64,
    pub df_between: usize,
    pub df_within: usize,
}

pub const ANOVA_OUTCOMES: [&str; 3] = ["normalized_mse", "gap", "normalized_time"];
pub const ANOVA_FACTORS: [&str; 3] = ["size", "init", "optimizer"];

fn outcome(t: &TrialResult, name: &str) -> f64 {
    match name {
        "normalized_mse" => t.normalized_mse,
        "gap" => t.gap,
        "normalized_time" => t.normalized_time,
        "test_loss" => t.test_loss,
        "cosine_similarity" => t.cosine_similarity,
        _ => f64::NAN,
    }
}

pub fn factor_table(trials: &[TrialResult], outcome_name: &str) -> Result<FactorTable> {
    let mut table = FactorTable::new(ANOVA_FACTORS.iter().map(|s| s.to_string()).collect());
    for t in trials.iter().filter(|t| t.aborted.is_none()) {
        table.push(
            vec![t.size.to_string(), t.init.clone(), t.optimizer.clone()],
            outcome(t, outcome_name),
        )?;
    }
    Ok(table)
}

/// Main-effect permutation ANOVA of each outcome on each factor with more
/// than one level.
pub fn anova_report(trials: &[TrialResult], n_perm: usize, seed: u64) -> Result<Vec<AnovaRow>> {
    let mut rows = Vec::new();
    for name in ANOVA_OUTCOMES {
        let table = factor_table(trials, name)?;
        for (col, factor) in ANOVA_FACTORS.iter().enumerate() {
            let levels: std::collections::BTreeSet<&str> = table.rows.iter().map(|(l, _)| l[col].as_str()).collect();
            if levels.len() < 2 {
                continue;
            }
            let r = permutation_anova(&table, factor, n_perm, derive_seed(seed, &format!("anova/{name}/{factor}")))?;
            rows.push(AnovaRow {
                outcome: name.into(),
                factor: factor.to_string(),
                f: r.f,
                p: r.p,
                df_between: r.df_between,
                df_within: r.df_within,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerChangeRow {
    pub init: String,
    pub optimizer: String,
    pub size: usize,
    pub layer: usize,
    pub trials: usize,
    pub mean_abs: f64,
    pub max_abs: f64,
    pub changed_fraction: f64,
}

/// Per-layer weight changes averaged over replicates and targets.
pub fn layer_change_summary(trials: &[TrialResult]) -> Vec<LayerChangeRow> {
    let mut acc: BTreeMap<(String, String, usize, usize), (usize, f64, f64, f64)> = BTreeMap::new();
    for t in trials {
        for l in &t.layer_changes {
            let e = acc
                .entry((t.init.clone(), t.optimizer.clone(), t.size, l.layer))
                .or_insert((0, 0.0, 0.0, 0.0));
            e.0 += 1;
            e.1 += l.mean_abs;
            e.2 = e.2.max(l.max_abs);
            e.3 += l.changed as f64 / l.count as f64;
        }
    }
    acc.into_iter()
        .map(|((init, optimizer, size, layer), (n, mean, max, frac))| LayerChangeRow {
            init,
            optimizer,
            size,
            layer,
            trials: n,
            mean_abs: mean / n as f64,
            max_abs: max,
            changed_fraction: frac / n as f64,
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportSummary {
    pub trials: usize,
    pub aborted: usize,
    pub anova: Vec<AnovaRow>,
}

/// Rebuilds `results.csv` from the trial files under `dir`, optionally with
/// `anova.csv` and `layer_changes.csv`.
pub fn report(dir: &Path, anova: bool, layer_changes: bool, n_perm: usize, seed: u64) -> Result<ReportSummary> {
    let trials = scan_results(dir)?;
    write_results_csv(&dir.join("results.csv"), &trials)?;
    let mut summary = ReportSummary {
        trials: trials.len(),
        aborted: trials.iter().filter(|t| t.aborted.is_some()).count(),
        anova: Vec::new(),
    };
    if anova {
        summary.anova = anova_report(&trials, n_perm, seed)?;
        let mut w = csv::Writer::from_path(dir.join("anova.csv"))?;
        for r in &summary.anova {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    if layer_changes {
        let mut w = csv::Writer::from_path(dir.join("layer_changes.csv"))?;
        for r in layer_change_summary(&trials) {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(summary)
}
