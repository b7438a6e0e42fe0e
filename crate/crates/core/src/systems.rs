//! Ground-truth simulators: a forced damped spring-mass system and the
//! two-heater thermal lab plant, plus excitation and sensor-noise generators.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One classical RK4 step for a fixed-size autonomous system.
pub fn rk4_step<const N: usize>(f: impl Fn(&[f64; N]) -> [f64; N], x: &[f64; N], h: f64) -> [f64; N] {
    let add = |a: &[f64; N], b: &[f64; N], s: f64| {
        let mut o = *a;
        for i in 0..N {
            o[i] += s * b[i];
        }
        o
    };
    let k1 = f(x);
    let k2 = f(&add(x, &k1, 0.5 * h));
    let k3 = f(&add(x, &k2, 0.5 * h));
    let k4 = f(&add(x, &k3, h));
    let mut out = *x;
    for i in 0..N {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

fn check_step(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!("time step must be positive, got {dt}")))
    }
}

// ---------------------------------------------------------------------------
// spring-mass

/// `m ẍ + c ẋ + k x = u`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpringParams {
    pub m: f64,
    pub c: f64,
    pub k: f64,
    pub u: f64,
}

impl Default for SpringParams {
    fn default() -> Self {
        Self {
            m: 1.0,
            c: 0.5,
            k: 1.0,
            u: 0.0,
        }
    }
}

impl SpringParams {
    pub fn validate(&self) -> Result<()> {
        if self.m > 0.0 && self.k > 0.0 && self.c >= 0.0 && self.u.is_finite() {
            Ok(())
        } else {
            Err(Error::Contract(format!("invalid spring parameters {self:?}")))
        }
    }

    fn rhs(&self, s: &[f64; 2]) -> [f64; 2] {
        [s[1], (self.u - self.c * s[1] - self.k * s[0]) / self.m]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpringTrajectory {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

/// Integrates with step `dt` and records every step, starting at `t = 0`.
pub fn simulate_spring(
    p: &SpringParams,
    x0: f64,
    v0: f64,
    duration: f64,
    dt: f64,
) -> Result<SpringTrajectory> {
    check_step(dt)?;
    p.validate()?;
    let n = (duration / dt).round() as usize;
    let mut traj = SpringTrajectory {
        t: Vec::with_capacity(n + 1),
        x: Vec::with_capacity(n + 1),
        v: Vec::with_capacity(n + 1),
    };
    let mut s = [x0, v0];
    traj.t.push(0.0);
    traj.x.push(x0);
    traj.v.push(v0);
    for step in 1..=n {
        s = rk4_step(|y| p.rhs(y), &s, dt);
        if !s.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step });
        }
        traj.t.push(step as f64 * dt);
        traj.x.push(s[0]);
        traj.v.push(s[1]);
    }
    Ok(traj)
}

/// Positions at `sample_dt, 2·sample_dt, ...` (`n_samples` of them), integrated
/// internally with `internal_dt`.
pub fn spring_positions(
    p: &SpringParams,
    x0: f64,
    v0: f64,
    n_samples: usize,
    sample_dt: f64,
    internal_dt: f64,
) -> Result<Vec<f64>> {
    check_step(sample_dt)?;
    check_step(internal_dt)?;
    let per = (sample_dt / internal_dt).round().max(1.0) as usize;
    let h = sample_dt / per as f64;
    let mut s = [x0, v0];
    let mut out = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        for j in 0..per {
            s = rk4_step(|y| p.rhs(y), &s, h);
            if !s.iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence { step: i * per + j + 1 });
            }
        }
        out.push(s[0]);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// thermal lab

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TclabParams {
    /// kg
    pub mass: f64,
    /// J/(kg K)
    pub cp: f64,
    /// W/(m² K)
    pub u: f64,
    /// m²
    pub area: f64,
    /// m², between heaters
    pub area_s: f64,
    pub emissivity: f64,
    /// W/(m² K⁴)
    pub sigma: f64,
    /// W/%
    pub alpha1: f64,
    /// W/%
    pub alpha2: f64,
    /// K
    pub t_inf: f64,
}

impl Default for TclabParams {
    fn default() -> Self {
        Self {
            mass: 0.004,
            cp: 500.0,
            u: 10.0,
            area: 1.0e-3,
            area_s: 2.0e-4,
            emissivity: 0.9,
            sigma: 5.67e-8,
            alpha1: 0.01,
            alpha2: 0.0075,
            t_inf: 296.15,
        }
    }
}

impl TclabParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.mass,
            self.cp,
            self.u,
            self.area,
            self.area_s,
            self.emissivity,
            self.sigma,
            self.alpha1,
            self.alpha2,
            self.t_inf,
        ]
        .iter()
        .all(|v| *v > 0.0 && v.is_finite());
        if positive && self.emissivity <= 1.0 {
            Ok(())
        } else {
            Err(Error::Contract(format!("invalid thermal-lab parameters {self:?}")))
        }
    }

    /// Stand-in for the physical unit: heat-transfer coefficient and both heater
    /// gains 10% lower.
    pub fn perturbed_target(&self) -> Self {
        Self {
            u: 0.9 * self.u,
            alpha1: 0.9 * self.alpha1,
            alpha2: 0.9 * self.alpha2,
            ..*self
        }
    }

    /// Net heat flow into a heater at temperature `own` next to one at `other`,
    /// with electrical input `heat` (W).
    pub fn heat_flow(&self, own: f64, other: f64, heat: f64) -> f64 {
        let rad = self.emissivity * self.sigma;
        self.u * self.area * (self.t_inf - own)
            + rad * self.area * (self.t_inf.powi(4) - own.powi(4))
            + self.u * self.area_s * (other - own)
            + rad * self.area_s * (other.powi(4) - own.powi(4))
            + heat
    }

    pub fn rhs(&self, temps: &[f64; 2], q1: f64, q2: f64) -> [f64; 2] {
        let mc = self.mass * self.cp;
        [
            self.heat_flow(temps[0], temps[1], self.alpha1 * q1) / mc,
            self.heat_flow(temps[1], temps[0], self.alpha2 * q2) / mc,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeaterSegment {
    pub start: f64,
    pub duration: f64,
    pub q1: f64,
    pub q2: f64,
}

/// Piecewise-constant heater powers in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeaterSchedule {
    pub segments: Vec<HeaterSegment>,
}

impl HeaterSchedule {
    pub fn constant(q1: f64, q2: f64, duration: f64) -> Self {
        Self {
            segments: vec![HeaterSegment {
                start: 0.0,
                duration,
                q1,
                q2,
            }],
        }
    }

    pub fn end(&self) -> f64 {
        self.segments
            .last()
            .map(|s| s.start + s.duration)
            .unwrap_or(0.0)
    }

    /// Powers in force at time `t`; the last segment extends indefinitely.
    pub fn value_at(&self, t: f64) -> (f64, f64) {
        let idx = self
            .segments
            .partition_point(|s| s.start + s.duration <= t)
            .min(self.segments.len().saturating_sub(1));
        self.segments
            .get(idx)
            .map(|s| (s.q1, s.q2))
            .unwrap_or((0.0, 0.0))
    }

    pub fn swapped(&self) -> Self {
        Self {
            segments: self
                .segments
                .iter()
                .map(|s| HeaterSegment {
                    q1: s.q2,
                    q2: s.q1,
                    ..*s
                })
                .collect(),
        }
    }
}

/// Random excitation: segments of 60–600 s, each heater off with probability
/// one half, otherwise uniform on [0, 100] %.
pub fn gen_heater_schedule(seed: u64, duration: f64) -> HeaterSchedule {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| {
        if rng.random_bool(0.5) {
            0.0
        } else {
            rng.random_range(0.0..=100.0)
        }
    };
    let mut segments = Vec::new();
    let mut t = 0.0;
    while t < duration {
        let len = rng.random_range(60.0..=600.0);
        let q1 = draw(&mut rng);
        let q2 = draw(&mut rng);
        segments.push(HeaterSegment {
            start: t,
            duration: len,
            q1,
            q2,
        });
        t += len;
    }
    HeaterSchedule { segments }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TclabTrajectory {
    pub t: Vec<f64>,
    pub t1: Vec<f64>,
    pub t2: Vec<f64>,
    /// Heater power applied over `[t_k, t_k + dt)`.
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
}

/// RK4 with one step per `dt`; heater powers are sampled from the schedule at
/// the start of each step and held over it.
pub fn simulate_tclab(
    p: &TclabParams,
    t0: [f64; 2],
    schedule: &HeaterSchedule,
    duration: f64,
    dt: f64,
) -> Result<TclabTrajectory> {
    check_step(dt)?;
    p.validate()?;
    let n = (duration / dt).floor() as usize;
    let mut traj = TclabTrajectory {
        t: Vec::with_capacity(n + 1),
        t1: Vec::with_capacity(n + 1),
        t2: Vec::with_capacity(n + 1),
        q1: Vec::with_capacity(n + 1),
        q2: Vec::with_capacity(n + 1),
    };
    let mut s = t0;
    for k in 0..=n {
        let t = k as f64 * dt;
        let (q1, q2) = schedule.value_at(t);
        traj.t.push(t);
        traj.t1.push(s[0]);
        traj.t2.push(s[1]);
        traj.q1.push(q1);
        traj.q2.push(q2);
        if k < n {
            s = rk4_step(|y| p.rhs(y, q1, q2), &s, dt);
            if !s.iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence { step: k + 1 });
            }
        }
    }
    Ok(traj)
}

/// Adds i.i.d. zero-mean Gaussian noise with standard deviation `sigma`.
pub fn add_noise(signal: &[f64], sigma: f64, seed: u64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Contract(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(signal.to_vec());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(signal.iter().map(|v| v + normal.sample(&mut rng)).collect())
}

/// CSV with header `t,<state cols>,<input cols>`.
pub fn write_trajectory_csv<W: Write>(
    out: W,
    t: &[f64],
    states: &[(&str, &[f64])],
    inputs: &[(&str, &[f64])],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t"];
    header.extend(states.iter().chain(inputs).map(|(n, _)| *n));
    w.write_record(&header)?;
    for (i, ti) in t.iter().enumerate() {
        let mut rec = vec![ti.to_string()];
        rec.extend(states.iter().chain(inputs).map(|(_, v)| v[i].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed-form free response of `m ẍ + c ẋ + k x = u` in all three damping regimes.
    fn analytic_spring(p: &SpringParams, x0: f64, v0: f64, t: f64) -> f64 {
        let xe = p.u / p.k;
        let y0 = x0 - xe;
        let a = p.c / (2.0 * p.m);
        let w0sq = p.k / p.m;
        let disc = a * a - w0sq;
        let y = if disc < -1e-12 {
            let w = (-disc).sqrt();
            (-a * t).exp() * (y0 * (w * t).cos() + (v0 + a * y0) / w * (w * t).sin())
        } else if disc > 1e-12 {
            let r = disc.sqrt();
            let (r1, r2) = (-a + r, -a - r);
            let c2 = (v0 - r1 * y0) / (r2 - r1);
            let c1 = y0 - c2;
            c1 * (r1 * t).exp() + c2 * (r2 * t).exp()
        } else {
            (y0 + (v0 + a * y0) * t) * (-a * t).exp()
        };
        y + xe
    }

    #[test]
    fn spring_matches_closed_form_in_all_regimes() {
        let cases = [
            SpringParams::default(),
            SpringParams { c: 2.0, ..Default::default() },
            SpringParams { c: 3.0, u: 1.0, ..Default::default() },
            SpringParams { m: 1.1, c: 0.45, k: 0.9, u: -1.0 },
        ];
        for p in cases {
            let traj = simulate_spring(&p, 2.5, -1.5, 20.0, 0.05).unwrap();
            for (t, x) in traj.t.iter().zip(&traj.x) {
                let e = (x - analytic_spring(&p, 2.5, -1.5, *t)).abs();
                assert!(e < 1e-6, "{p:?} t={t} err={e}");
            }
        }
    }

    #[test]
    fn undamped_spring_conserves_energy() {
        let p = SpringParams { c: 0.0, ..Default::default() };
        let traj = simulate_spring(&p, 1.0, 2.0, 20.0, 0.05).unwrap();
        let e0 = 0.5 * 1.0 * 4.0 + 0.5 * 1.0;
        for (x, v) in traj.x.iter().zip(&traj.v) {
            let e = 0.5 * p.m * v * v + 0.5 * p.k * x * x;
            assert!(((e - e0) / e0).abs() < 1e-6);
        }
    }

    #[test]
    fn forced_spring_settles_at_equilibrium() {
        let p = SpringParams { u: 2.0, ..Default::default() };
        let traj = simulate_spring(&p, -3.0, 4.0, 200.0, 0.05).unwrap();
        assert!((traj.x.last().unwrap() - 2.0).abs() < 1e-4);
        assert!(traj.v.last().unwrap().abs() < 1e-4);
    }

    #[test]
    fn spring_positions_sample_the_same_trajectory() {
        let p = SpringParams::default();
        let fine = simulate_spring(&p, 1.0, 0.0, 20.0, 0.05).unwrap();
        let coarse = spring_positions(&p, 1.0, 0.0, 20, 1.0, 0.05).unwrap();
        for (i, x) in coarse.iter().enumerate() {
            assert!((x - fine.x[(i + 1) * 20]).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_step_rejected() {
        let p = SpringParams::default();
        assert!(simulate_spring(&p, 0.0, 0.0, 1.0, 0.0).is_err());
        assert!(simulate_tclab(
            &TclabParams::default(),
            [300.0, 300.0],
            &HeaterSchedule::constant(0.0, 0.0, 10.0),
            10.0,
            -1.0
        )
        .is_err());
    }

    #[test]
    fn tclab_ambient_is_equilibrium() {
        let p = TclabParams::default();
        let sched = HeaterSchedule::constant(0.0, 0.0, 3600.0);
        let traj = simulate_tclab(&p, [p.t_inf, p.t_inf], &sched, 3600.0, 10.0).unwrap();
        assert!(traj.t1.iter().chain(&traj.t2).all(|t| *t == 296.15));
    }

    #[test]
    fn tclab_steady_state_matches_root_finder() {
        let p = TclabParams::default();
        let sched = HeaterSchedule::constant(100.0, 0.0, 6.0 * 3600.0);
        let traj = simulate_tclab(&p, [p.t_inf, p.t_inf], &sched, 6.0 * 3600.0, 10.0).unwrap();
        // independent Newton iteration on the written-out balances
        let (rad, ua, uas) = (
            p.emissivity * p.sigma,
            p.u * p.area,
            p.u * p.area_s,
        );
        let g = |t1: f64, t2: f64| {
            let qc = uas * (t2 - t1);
            let qr = rad * p.area_s * (t2.powi(4) - t1.powi(4));
            (
                ua * (p.t_inf - t1) + rad * p.area * (p.t_inf.powi(4) - t1.powi(4)) + qc + qr
                    + p.alpha1 * 100.0,
                ua * (p.t_inf - t2) + rad * p.area * (p.t_inf.powi(4) - t2.powi(4)) - qc - qr,
            )
        };
        let (mut a, mut b) = (350.0, 310.0);
        for _ in 0..50 {
            let (f1, f2) = g(a, b);
            let hh = 1e-4;
            let (f1a, f2a) = g(a + hh, b);
            let (f1b, f2b) = g(a, b + hh);
            let j = [
                [(f1a - f1) / hh, (f1b - f1) / hh],
                [(f2a - f2) / hh, (f2b - f2) / hh],
            ];
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            a -= (j[1][1] * f1 - j[0][1] * f2) / det;
            b -= (-j[1][0] * f1 + j[0][0] * f2) / det;
        }
        assert!((traj.t1.last().unwrap() - a).abs() < 1e-4);
        assert!((traj.t2.last().unwrap() - b).abs() < 1e-4);
    }

    #[test]
    fn tclab_heater_swap_symmetry() {
        let p = TclabParams::default();
        let swapped = TclabParams {
            alpha1: p.alpha2,
            alpha2: p.alpha1,
            ..p
        };
        let sched = gen_heater_schedule(3, 7200.0);
        let a = simulate_tclab(&p, [300.0, 310.0], &sched, 7200.0, 10.0).unwrap();
        let b = simulate_tclab(&swapped, [310.0, 300.0], &sched.swapped(), 7200.0, 10.0).unwrap();
        assert_eq!(a.t1, b.t2);
        assert_eq!(a.t2, b.t1);
    }

    #[test]
    fn tclab_bounded_between_ambient_and_hottest_steady_state() {
        let p = TclabParams::default();
        let sched = gen_heater_schedule(11, 24.0 * 3600.0);
        let traj = simulate_tclab(&p, [p.t_inf, p.t_inf], &sched, 24.0 * 3600.0, 10.0).unwrap();
        let hot = simulate_tclab(
            &p,
            [p.t_inf, p.t_inf],
            &HeaterSchedule::constant(100.0, 100.0, 1.0),
            8.0 * 3600.0,
            10.0,
        )
        .unwrap();
        let ceiling = hot.t1.last().unwrap().max(*hot.t2.last().unwrap());
        for t in traj.t1.iter().chain(&traj.t2) {
            assert!(*t >= p.t_inf && *t <= ceiling + 1e-6);
        }
    }

    #[test]
    fn heater_schedule_properties() {
        let a = gen_heater_schedule(42, 3600.0 * 24.0);
        assert_eq!(a, gen_heater_schedule(42, 3600.0 * 24.0));
        assert!(a.end() >= 3600.0 * 24.0);
        for s in &a.segments {
            assert!((60.0..=600.0).contains(&s.duration));
            assert!((0.0..=100.0).contains(&s.q1) && (0.0..=100.0).contains(&s.q2));
        }
        // binomial: 2e4 draws, sd of the fraction ~0.0035, so [0.47, 0.53] is > 8 sd wide
        let long = gen_heater_schedule(7, 1e4 * 400.0);
        let segs = &long.segments[..10_000];
        let zeros = segs
            .iter()
            .flat_map(|s| [s.q1, s.q2])
            .filter(|q| *q == 0.0)
            .count();
        let frac = zeros as f64 / 20_000.0;
        assert!((0.47..=0.53).contains(&frac), "{frac}");
    }

    #[test]
    fn noise_properties() {
        let clean: Vec<f64> = (0..100_000).map(|i| (i as f64).sin()).collect();
        assert_eq!(add_noise(&clean, 0.0, 1).unwrap(), clean);
        let noisy = add_noise(&clean, 0.25, 9).unwrap();
        assert_eq!(noisy, add_noise(&clean, 0.25, 9).unwrap());
        let n = clean.len() as f64;
        let mean = noisy.iter().zip(&clean).map(|(a, b)| a - b).sum::<f64>() / n;
        assert!(mean.abs() < 4.0 * 0.25 / n.sqrt());
        assert!(add_noise(&clean, -1.0, 1).is_err());
    }

    #[test]
    fn trajectory_csv_header() {
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &[0.0, 1.0], &[("x", &[1.0, 2.0])], &[("u", &[0.5, 0.5])])
            .unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("t,x,u\n0,1,0.5\n"));
    }
}
