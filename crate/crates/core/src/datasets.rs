//! Dataset construction, splitting, normalization and persistence.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::systems::{self, gen_heater_schedule, SpringParams, TclabParams};

/// Spring trajectories are predicted over 20 one-second samples.
pub const SPRING_HORIZON: usize = 20;
pub const SPRING_SAMPLE_DT: f64 = 1.0;
pub const SPRING_INTERNAL_DT: f64 = 0.05;
/// Thermal-lab windows: 60 samples of 10 s.
pub const TCLAB_HORIZON: usize = 60;
pub const TCLAB_SAMPLE_DT: f64 = 10.0;

/// One `(initial state, inputs over the horizon, measured trajectory)` tuple.
///
/// `u_seq` and `target` are flattened sample-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x0: Vec<f64>,
    pub u_seq: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pool,
    Train,
    Val,
    Test,
}

/// Shapes and provenance of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub system: String,
    pub n_x0: usize,
    /// Inputs per sample.
    pub n_u: usize,
    /// Target entries per sample.
    pub n_target: usize,
    pub horizon: usize,
    pub seed: u64,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub split: Split,
    pub examples: Vec<Example>,
    pub normalizer: Option<Normalizer>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn subset(&self, range: std::ops::Range<usize>, split: Split) -> Dataset {
        Dataset {
            meta: self.meta.clone(),
            split,
            examples: self.examples[range].to_vec(),
            normalizer: self.normalizer.clone(),
        }
    }

    /// Copy with every example mapped into normalized coordinates.
    pub fn normalized(&self, normalizer: &Normalizer) -> Dataset {
        Dataset {
            meta: self.meta.clone(),
            split: self.split,
            examples: self.examples.iter().map(|e| normalizer.apply(e)).collect(),
            normalizer: Some(normalizer.clone()),
        }
    }
}

/// Uniform initial conditions in [-5, 5]², targets are (noisy) positions at
/// t = 1..20 s.
pub fn build_spring_dataset(p: &SpringParams, n: usize, seed: u64, noise_sigma: f64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Contract("spring dataset needs n >= 1".into()));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::Contract(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let x0 = rng.random_range(-5.0..=5.0);
        let v0 = rng.random_range(-5.0..=5.0);
        let mut target = systems::spring_positions(
            p,
            x0,
            v0,
            SPRING_HORIZON,
            SPRING_SAMPLE_DT,
            SPRING_INTERNAL_DT,
        )?;
        if noise_sigma > 0.0 {
            target.iter_mut().for_each(|y| *y += noise.sample(&mut rng));
        }
        examples.push(Example {
            x0: vec![x0, v0],
            u_seq: Vec::new(),
            target,
        });
    }
    Ok(Dataset {
        meta: DatasetMeta {
            system: "spring".into(),
            n_x0: 2,
            n_u: 0,
            n_target: 1,
            horizon: SPRING_HORIZON,
            seed,
            params: serde_json::to_value(p)?,
        },
        split: Split::Pool,
        examples,
        normalizer: None,
    })
}

/// Sliding windows over one continuous run started at ambient temperature.
///
/// Each window holds the measured temperatures at its start, the 60 heater
/// settings applied over the following samples and the 60 temperature pairs
/// that result. Windows start every `stride` samples.
pub fn build_tclab_dataset(
    p: &TclabParams,
    duration: f64,
    seed: u64,
    noise_sigma: f64,
    stride: usize,
) -> Result<Dataset> {
    let required = (TCLAB_HORIZON + 1) as f64 * TCLAB_SAMPLE_DT;
    if duration < required {
        return Err(Error::InsufficientDuration {
            duration_s: duration,
            required_s: required,
        });
    }
    if stride == 0 {
        return Err(Error::Contract("window stride must be >= 1".into()));
    }
    let schedule = gen_heater_schedule(seed, duration);
    let traj = systems::simulate_tclab(p, [p.t_inf, p.t_inf], &schedule, duration, TCLAB_SAMPLE_DT)?;
    let samples = (duration / TCLAB_SAMPLE_DT).floor() as usize;
    let noise_seed = seed ^ 0x9e37_79b9_7f4a_7c15;
    let t1 = systems::add_noise(&traj.t1[..samples], noise_sigma, noise_seed)?;
    let t2 = systems::add_noise(&traj.t2[..samples], noise_sigma, noise_seed.wrapping_add(1))?;
    let count = (samples - TCLAB_HORIZON) / stride;
    let examples = (0..count)
        .map(|w| {
            let j = w * stride;
            let mut u_seq = Vec::with_capacity(2 * TCLAB_HORIZON);
            let mut target = Vec::with_capacity(2 * TCLAB_HORIZON);
            for i in 0..TCLAB_HORIZON {
                u_seq.push(traj.q1[j + i]);
                u_seq.push(traj.q2[j + i]);
                target.push(t1[j + i + 1]);
                target.push(t2[j + i + 1]);
            }
            Example {
                x0: vec![t1[j], t2[j]],
                u_seq,
                target,
            }
        })
        .collect();
    Ok(Dataset {
        meta: DatasetMeta {
            system: "tclab".into(),
            n_x0: 2,
            n_u: 2,
            n_target: 2,
            horizon: TCLAB_HORIZON,
            seed,
            params: serde_json::to_value(p)?,
        },
        split: Split::Pool,
        examples,
        normalizer: None,
    })
}

/// Number of training examples for a size-`s` subset (the rest is validation).
pub fn train_count(size: usize) -> usize {
    (9 * size).div_ceil(10)
}

/// Train/validation pair for one dataset size.
#[derive(Debug, Clone)]
pub struct SizedSplit {
    pub size: usize,
    pub train: Dataset,
    pub val: Dataset,
}

#[derive(Debug, Clone)]
pub struct ReplicateSplits {
    pub replicate: usize,
    pub sizes: Vec<SizedSplit>,
    pub test: Dataset,
}

/// First `s` examples of `region` for each size: ⌈0.9 s⌉ train, the rest validation.
pub fn split_sizes(region: &Dataset, sizes: &[usize]) -> Result<Vec<SizedSplit>> {
    sizes
        .iter()
        .map(|&s| {
            if s > region.len() {
                return Err(Error::SizeExceedsPool {
                    requested: s,
                    available: region.len(),
                });
            }
            if s == 0 {
                return Err(Error::Contract("dataset size must be >= 1".into()));
            }
            let n_train = train_count(s);
            Ok(SizedSplit {
                size: s,
                train: region.subset(0..n_train, Split::Train),
                val: region.subset(n_train..s, Split::Val),
            })
        })
        .collect()
}

/// Replicate `r` owns the contiguous chunk `[r·L, (r+1)·L)` of the pool; its
/// last `test_len` examples are the test set, sizes are drawn from the front.
pub fn split_protocol(
    pool: &Dataset,
    sizes: &[usize],
    replicate: usize,
    replicate_len: usize,
    test_len: usize,
) -> Result<ReplicateSplits> {
    let end = (replicate + 1) * replicate_len;
    if end > pool.len() {
        return Err(Error::SizeExceedsPool {
            requested: end,
            available: pool.len(),
        });
    }
    if test_len >= replicate_len {
        return Err(Error::Contract(format!(
            "test length {test_len} leaves no room for training in a replicate of {replicate_len}"
        )));
    }
    let start = replicate * replicate_len;
    let front = pool.subset(start..end - test_len, Split::Pool);
    Ok(ReplicateSplits {
        replicate,
        sizes: split_sizes(&front, sizes)?,
        test: pool.subset(end - test_len..end, Split::Test),
    })
}

/// Per-dimension affine map `z = (v - shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

pub const SCALE_FLOOR: f64 = 1e-8;

impl Affine {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    fn dim(&self) -> usize {
        self.shift.len()
    }

    /// Mean and floored population std of interleaved `dim`-wide records.
    fn fit<'a>(dim: usize, chunks: impl Iterator<Item = &'a [f64]>) -> Self {
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut n = 0usize;
        let records: Vec<&[f64]> = chunks.flat_map(|c| c.chunks_exact(dim)).collect();
        for r in &records {
            for d in 0..dim {
                sum[d] += r[d];
            }
            n += 1;
        }
        let n = n.max(1) as f64;
        let shift: Vec<f64> = sum.iter().map(|s| s / n).collect();
        for r in &records {
            for d in 0..dim {
                sq[d] += (r[d] - shift[d]).powi(2);
            }
        }
        let scale = sq
            .iter()
            .map(|s| (s / n).sqrt().max(SCALE_FLOOR))
            .collect();
        Self { shift, scale }
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim();
        if d == 0 {
            return v.to_vec();
        }
        v.iter()
            .enumerate()
            .map(|(i, x)| (x - self.shift[i % d]) / self.scale[i % d])
            .collect()
    }

    fn invert(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim();
        if d == 0 {
            return v.to_vec();
        }
        v.iter()
            .enumerate()
            .map(|(i, z)| z * self.scale[i % d] + self.shift[i % d])
            .collect()
    }
}

/// Affine maps for initial states, inputs and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub x0: Affine,
    pub u: Affine,
    pub target: Affine,
}

impl Normalizer {
    pub fn identity(meta: &DatasetMeta) -> Self {
        Self {
            x0: Affine::identity(meta.n_x0),
            u: Affine::identity(meta.n_u),
            target: Affine::identity(meta.n_target),
        }
    }

    pub fn apply(&self, e: &Example) -> Example {
        Example {
            x0: self.x0.apply(&e.x0),
            u_seq: self.u.apply(&e.u_seq),
            target: self.target.apply(&e.target),
        }
    }

    pub fn invert(&self, e: &Example) -> Example {
        Example {
            x0: self.x0.invert(&e.x0),
            u_seq: self.u.invert(&e.u_seq),
            target: self.target.invert(&e.target),
        }
    }

    /// Maps a flattened predicted (or target) trajectory back to physical units.
    pub fn denormalize_target(&self, v: &[f64]) -> Vec<f64> {
        self.target.invert(v)
    }
}

/// Fits shift = mean and scale = std on the training split only.
///
/// With `shared_state` the initial state and the targets live in the same
/// coordinates (required when the model integrates its own state) and share
/// one fit over both.
pub fn fit_normalizer(train: &Dataset, shared_state: bool) -> Result<Normalizer> {
    if train.is_empty() {
        return Err(Error::Contract("cannot fit a normalizer on an empty split".into()));
    }
    let m = &train.meta;
    let ex = &train.examples;
    let u = Affine::fit(m.n_u.max(1), ex.iter().map(|e| e.u_seq.as_slice()));
    let u = if m.n_u == 0 { Affine::identity(0) } else { u };
    if shared_state {
        check_dim("shared state normalizer", m.n_x0, m.n_target)?;
        let state = Affine::fit(
            m.n_x0,
            ex.iter()
                .flat_map(|e| [e.x0.as_slice(), e.target.as_slice()]),
        );
        Ok(Normalizer {
            x0: state.clone(),
            u,
            target: state,
        })
    } else {
        Ok(Normalizer {
            x0: Affine::fit(m.n_x0, ex.iter().map(|e| e.x0.as_slice())),
            u,
            target: Affine::fit(m.n_target, ex.iter().map(|e| e.target.as_slice())),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    meta: DatasetMeta,
    split: Split,
    len: usize,
    normalizer: Option<Normalizer>,
}

/// Writes `<stem>.csv` (one example per row) and `<stem>.json` (metadata).
pub fn write_dataset(ds: &Dataset, stem: &Path) -> Result<()> {
    let m = &ds.meta;
    let mut w = csv::Writer::from_path(stem.with_extension("csv"))?;
    let mut header: Vec<String> = (0..m.n_x0).map(|i| format!("x0_{i}")).collect();
    for k in 0..m.horizon {
        header.extend((0..m.n_u).map(|i| format!("u{k}_{i}")));
    }
    for k in 0..m.horizon {
        header.extend((0..m.n_target).map(|i| format!("y{k}_{i}")));
    }
    w.write_record(&header)?;
    for e in &ds.examples {
        w.write_record(
            e.x0.iter()
                .chain(&e.u_seq)
                .chain(&e.target)
                .map(|v| v.to_string()),
        )?;
    }
    w.flush()?;
    let side = Sidecar {
        meta: ds.meta.clone(),
        split: ds.split,
        len: ds.len(),
        normalizer: ds.normalizer.clone(),
    };
    fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

pub fn read_dataset(stem: &Path) -> Result<Dataset> {
    let side: Sidecar = serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
    let m = &side.meta;
    let n_u = m.n_u * m.horizon;
    let n_y = m.n_target * m.horizon;
    let width = m.n_x0 + n_u + n_y;
    let mut r = csv::Reader::from_path(stem.with_extension("csv"))?;
    let mut examples = Vec::with_capacity(side.len);
    for rec in r.records() {
        let rec = rec?;
        check_dim("dataset csv row", width, rec.len())?;
        let vals = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Parse(format!("{s:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        examples.push(Example {
            x0: vals[..m.n_x0].to_vec(),
            u_seq: vals[m.n_x0..m.n_x0 + n_u].to_vec(),
            target: vals[m.n_x0 + n_u..].to_vec(),
        });
    }
    check_dim("dataset length", side.len, examples.len())?;
    Ok(Dataset {
        meta: side.meta,
        split: side.split,
        examples,
        normalizer: side.normalizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::simulate_spring;

    #[test]
    fn spring_dataset_shape_and_ranges() {
        let ds = build_spring_dataset(&SpringParams::default(), 10, 3, 0.05).unwrap();
        assert_eq!(ds.len(), 10);
        for e in &ds.examples {
            assert_eq!(e.target.len(), 20);
            assert!(e.u_seq.is_empty());
            assert!(e.x0.iter().all(|v| (-5.0..=5.0).contains(v)));
        }
        assert_eq!(ds, build_spring_dataset(&SpringParams::default(), 10, 3, 0.05).unwrap());
        assert!(build_spring_dataset(&SpringParams::default(), 0, 3, 0.05).is_err());
    }

    #[test]
    fn noiseless_spring_target_is_the_simulation() {
        let p = SpringParams::default();
        let ds = build_spring_dataset(&p, 3, 8, 0.0).unwrap();
        let e = &ds.examples[0];
        let sim = simulate_spring(&p, e.x0[0], e.x0[1], 20.0, 0.05).unwrap();
        for (i, y) in e.target.iter().enumerate() {
            assert_eq!(*y, sim.x[(i + 1) * 20]);
        }
    }

    #[test]
    fn tclab_window_counts_and_alignment() {
        let p = TclabParams::default();
        let ds = build_tclab_dataset(&p, 1800.0, 5, 0.0, 1).unwrap();
        assert_eq!(ds.len(), 120);
        // x0 of window j+1 is the first target sample of window j
        for w in ds.examples.windows(2) {
            assert_eq!(&w[1].x0[..], &w[0].target[..2]);
        }
        for e in &ds.examples {
            assert_eq!(e.u_seq.len(), 120);
            assert_eq!(e.target.len(), 120);
        }
        let coarse = build_tclab_dataset(&p, 1800.0, 5, 0.0, 60).unwrap();
        assert_eq!(coarse.len(), (180 - 60) / 60);
        assert_eq!(coarse.examples[1], ds.examples[60]);
        assert!(matches!(
            build_tclab_dataset(&p, 600.0, 5, 0.0, 1),
            Err(Error::InsufficientDuration { .. })
        ));
    }

    #[test]
    fn tclab_window_inputs_drive_the_targets() {
        let p = TclabParams::default();
        let ds = build_tclab_dataset(&p, 1800.0, 9, 0.0, 1).unwrap();
        let e = &ds.examples[17];
        let mut s = [e.x0[0], e.x0[1]];
        for i in 0..TCLAB_HORIZON {
            let (q1, q2) = (e.u_seq[2 * i], e.u_seq[2 * i + 1]);
            s = systems::rk4_step(|y| p.rhs(y, q1, q2), &s, TCLAB_SAMPLE_DT);
            assert_eq!(s[0], e.target[2 * i]);
            assert_eq!(s[1], e.target[2 * i + 1]);
        }
    }

    #[test]
    fn split_protocol_sizes_and_disjointness() {
        let pool = build_spring_dataset(&SpringParams::default(), 400, 1, 0.05).unwrap();
        let r0 = split_protocol(&pool, &[10, 50], 0, 200, 100).unwrap();
        assert_eq!(r0.sizes[0].train.len(), 9);
        assert_eq!(r0.sizes[0].val.len(), 1);
        assert_eq!(r0.sizes[1].train.len(), 45);
        assert_eq!(r0.test.len(), 100);
        let r1 = split_protocol(&pool, &[10], 1, 200, 100).unwrap();
        let contains = |ds: &Dataset, e: &Example| ds.examples.contains(e);
        for e in r0.sizes[1].train.examples.iter().chain(&r0.sizes[1].val.examples) {
            assert!(!contains(&r0.test, e));
            assert!(!contains(&r1.test, e) && !contains(&r1.sizes[0].train, e));
        }
        assert!(matches!(
            split_protocol(&pool, &[150], 0, 200, 100),
            Err(Error::SizeExceedsPool { .. })
        ));
        assert!(split_protocol(&pool, &[10], 2, 200, 100).is_err());
    }

    #[test]
    fn train_count_rounds_up() {
        assert_eq!(train_count(10), 9);
        assert_eq!(train_count(1), 1);
        assert_eq!(train_count(15), 14);
        assert_eq!(train_count(1000), 900);
    }

    #[test]
    fn normalizer_standardizes_train_split() {
        let p = TclabParams::default();
        let ds = build_tclab_dataset(&p, 3600.0, 2, 0.25, 1).unwrap();
        let norm = fit_normalizer(&ds, true).unwrap();
        let z = ds.normalized(&norm);
        let mut vals = vec![Vec::new(); 2];
        for e in &z.examples {
            for c in e.x0.chunks(2).chain(e.target.chunks(2)) {
                vals[0].push(c[0]);
                vals[1].push(c[1]);
            }
        }
        for v in &vals {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-10);
            assert!((sd - 1.0).abs() < 1e-10);
        }
        for (a, b) in ds.examples.iter().zip(&z.examples) {
            let back = norm.invert(b);
            for (x, y) in a.target.iter().zip(&back.target) {
                assert!((x - y).abs() < 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn constant_feature_scale_is_floored() {
        let p = SpringParams::default();
        let mut ds = build_spring_dataset(&p, 20, 2, 0.0).unwrap();
        ds.examples.iter_mut().for_each(|e| e.x0[1] = 3.0);
        let norm = fit_normalizer(&ds, false).unwrap();
        assert_eq!(norm.x0.scale[1], SCALE_FLOOR);
        let z = norm.apply(&ds.examples[0]);
        assert_eq!(z.x0[1], 0.0);
    }

    #[test]
    fn normalizer_fit_on_train_only() {
        let p = SpringParams::default();
        let a = build_spring_dataset(&p, 50, 2, 0.0).unwrap();
        let shifted = SpringParams { u: 2.0, ..p };
        let b = build_spring_dataset(&shifted, 50, 3, 0.0).unwrap();
        let na = fit_normalizer(&a, false).unwrap();
        let nb = fit_normalizer(&b, false).unwrap();
        assert_ne!(na.target, nb.target);
        let zb = b.normalized(&na);
        let mean: f64 = zb.examples.iter().flat_map(|e| &e.target).sum::<f64>() / 1000.0;
        assert!(mean.abs() > 0.1);
    }

    #[test]
    fn persisted_dataset_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = TclabParams::default();
        let mut ds = build_tclab_dataset(&p, 1500.0, 4, 0.25, 7).unwrap();
        ds.normalizer = Some(fit_normalizer(&ds, true).unwrap());
        let stem = dir.path().join("tclab");
        write_dataset(&ds, &stem).unwrap();
        let back = read_dataset(&stem).unwrap();
        assert_eq!(ds, back);
        let sp = build_spring_dataset(&SpringParams::default(), 25, 1, 0.05).unwrap();
        write_dataset(&sp, &dir.path().join("spring")).unwrap();
        assert_eq!(sp, read_dataset(&dir.path().join("spring")).unwrap());
    }
}
