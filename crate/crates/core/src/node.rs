//! Neural-ODE predictor.
//!
//! The network parameterizes a vector field `dx/dt = rate_scale * f_π(x, u)`,
//! integrated with fixed-step classical RK4. Inputs are held constant over
//! each sample interval. Parameter sensitivities are propagated through the
//! discrete RK4 map itself, so the Jacobian is exact for what the predictor
//! actually evaluates.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datasets::Example;
use crate::error::{check_dim, Error, Result};
use crate::nn::{self, NetworkSpec, ParamVector};
use crate::predictor::Predictor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub core: NetworkSpec,
    pub n_x: usize,
    pub n_u: usize,
    /// Time between emitted samples.
    pub dt_sample: f64,
    /// RK4 steps per sample interval.
    pub substeps: usize,
    /// Number of emitted samples.
    pub horizon: usize,
    /// Multiplies the network output; lets the network work with O(1) rates
    /// when `dt_sample` is in seconds.
    #[serde(default = "one")]
    pub rate_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl NodeSpec {
    pub fn new(
        core: NetworkSpec,
        n_x: usize,
        n_u: usize,
        dt_sample: f64,
        substeps: usize,
        horizon: usize,
    ) -> Result<Self> {
        let spec = Self {
            core,
            n_x,
            n_u,
            dt_sample,
            substeps,
            horizon,
            rate_scale: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_rate_scale(mut self, rate_scale: f64) -> Self {
        self.rate_scale = rate_scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_dim("node core input", self.n_x + self.n_u, self.core.input_width())?;
        check_dim("node core output", self.n_x, self.core.output_width())?;
        if self.substeps == 0 || !(self.dt_sample > 0.0) || self.horizon == 0 {
            return Err(Error::Contract(format!(
                "node needs substeps >= 1, dt_sample > 0 and horizon >= 1 (got {}, {}, {})",
                self.substeps, self.dt_sample, self.horizon
            )));
        }
        Ok(())
    }

    fn step_size(&self) -> f64 {
        self.dt_sample / self.substeps as f64
    }

    fn check_inputs(&self, params: &ParamVector, x0: &[f64], u_seq: &[f64]) -> Result<()> {
        params.check(&self.core)?;
        check_dim("node initial state", self.n_x, x0.len())?;
        check_dim("node input sequence", self.n_u * self.horizon, u_seq.len())
    }

    fn field(&self, params: &ParamVector, x: &[f64], u: &[f64], buf: &mut Vec<f64>) -> Result<Vec<f64>> {
        buf.clear();
        buf.extend_from_slice(x);
        buf.extend_from_slice(u);
        let mut y = nn::forward(&self.core, params, buf)?;
        y.iter_mut().for_each(|v| *v *= self.rate_scale);
        Ok(y)
    }

    /// Vector field, its state Jacobian (`n_x x n_x`, row-major) and parameter
    /// Jacobian (`n_x x n_π`, row-major).
    fn field_with_jacobians(
        &self,
        params: &ParamVector,
        x: &[f64],
        u: &[f64],
        buf: &mut Vec<f64>,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        buf.clear();
        buf.extend_from_slice(x);
        buf.extend_from_slice(u);
        let cache = nn::forward_cached(&self.core, params, buf)?;
        let n_p = self.core.param_count();
        let n_in = self.n_x + self.n_u;
        let mut jx = vec![0.0; self.n_x * self.n_x];
        let mut jp = vec![0.0; self.n_x * n_p];
        let mut e = vec![0.0; self.n_x];
        let mut gin = vec![0.0; n_in];
        for r in 0..self.n_x {
            e[r] = 1.0;
            nn::backward_into(
                &self.core,
                params,
                &cache,
                &e,
                self.rate_scale,
                &mut jp[r * n_p..(r + 1) * n_p],
                Some(&mut gin),
            );
            e[r] = 0.0;
            jx[r * self.n_x..(r + 1) * self.n_x].copy_from_slice(&gin[..self.n_x]);
        }
        let f = cache.output().iter().map(|v| v * self.rate_scale).collect();
        Ok((f, jx, jp))
    }

    /// Predicted trajectory, flattened sample-major (`horizon * n_x`).
    pub fn predict_horizon(
        &self,
        params: &ParamVector,
        x0: &[f64],
        u_seq: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_inputs(params, x0, u_seq)?;
        let h = self.step_size();
        let n = self.n_x;
        let mut buf = Vec::with_capacity(n + self.n_u);
        let mut x = x0.to_vec();
        let mut tmp = vec![0.0; n];
        let mut out = Vec::with_capacity(self.horizon * n);
        let mut step = 0;
        for i in 0..self.horizon {
            let u = &u_seq[i * self.n_u..(i + 1) * self.n_u];
            for _ in 0..self.substeps {
                let k1 = self.field(params, &x, u, &mut buf)?;
                axpy_into(&mut tmp, &x, 0.5 * h, &k1);
                let k2 = self.field(params, &tmp, u, &mut buf)?;
                axpy_into(&mut tmp, &x, 0.5 * h, &k2);
                let k3 = self.field(params, &tmp, u, &mut buf)?;
                axpy_into(&mut tmp, &x, h, &k3);
                let k4 = self.field(params, &tmp, u, &mut buf)?;
                for j in 0..n {
                    x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
                }
                step += 1;
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence { step });
                }
            }
            out.extend_from_slice(&x);
        }
        Ok(out)
    }

    /// Trajectory and its parameter Jacobian (`horizon * n_x` rows, sample-major).
    pub fn horizon_jacobian(
        &self,
        params: &ParamVector,
        x0: &[f64],
        u_seq: &[f64],
    ) -> Result<(Vec<f64>, DMatrix<f64>)> {
        self.check_inputs(params, x0, u_seq)?;
        let h = self.step_size();
        let n = self.n_x;
        let n_p = self.core.param_count();
        let mut buf = Vec::with_capacity(n + self.n_u);
        let mut x = x0.to_vec();
        let mut s = vec![0.0; n * n_p];
        let mut xs = vec![0.0; n];
        let mut ss = vec![0.0; n * n_p];
        let mut acc = vec![0.0; n * n_p];
        let mut jac = DMatrix::zeros(self.horizon * n, n_p);
        let mut out = Vec::with_capacity(self.horizon * n);
        let mut step = 0;
        for i in 0..self.horizon {
            let u = &u_seq[i * self.n_u..(i + 1) * self.n_u];
            for _ in 0..self.substeps {
                acc.iter_mut().for_each(|v| *v = 0.0);
                let mut dx = vec![0.0; n];
                xs.copy_from_slice(&x);
                ss.copy_from_slice(&s);
                for (stage, (weight, next_c)) in [(1.0, 0.5), (2.0, 0.5), (2.0, 1.0), (1.0, 0.0)]
                    .into_iter()
                    .enumerate()
                {
                    let (k, jx, jp) = self.field_with_jacobians(params, &xs, u, &mut buf)?;
                    // K = Jx * S_stage + Jp
                    let mut kk = jp;
                    for r in 0..n {
                        for c in 0..n {
                            let a = jx[r * n + c];
                            if a == 0.0 {
                                continue;
                            }
                            let src = &ss[c * n_p..(c + 1) * n_p];
                            let dst = &mut kk[r * n_p..(r + 1) * n_p];
                            for (d, v) in dst.iter_mut().zip(src) {
                                *d += a * v;
                            }
                        }
                    }
                    for j in 0..n {
                        dx[j] += weight * k[j];
                    }
                    for (a, v) in acc.iter_mut().zip(&kk) {
                        *a += weight * v;
                    }
                    if stage < 3 {
                        for j in 0..n {
                            xs[j] = x[j] + next_c * h * k[j];
                        }
                        for ((d, s0), v) in ss.iter_mut().zip(&s).zip(&kk) {
                            *d = s0 + next_c * h * v;
                        }
                    }
                }
                for j in 0..n {
                    x[j] += h / 6.0 * dx[j];
                }
                for (s0, a) in s.iter_mut().zip(&acc) {
                    *s0 += h / 6.0 * a;
                }
                step += 1;
                if x.iter().any(|v| !v.is_finite()) || s.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence { step });
                }
            }
            out.extend_from_slice(&x);
            for r in 0..n {
                let row = i * n + r;
                for c in 0..n_p {
                    jac[(row, c)] = s[r * n_p + c];
                }
            }
        }
        Ok((out, jac))
    }
}

fn axpy_into(out: &mut [f64], x: &[f64], a: f64, y: &[f64]) {
    for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
        *o = xi + a * yi;
    }
}

impl Predictor for NodeSpec {
    fn n_params(&self) -> usize {
        self.core.param_count()
    }

    fn output_len(&self) -> usize {
        self.horizon * self.n_x
    }

    fn predict(&self, params: &ParamVector, example: &Example) -> Result<Vec<f64>> {
        self.predict_horizon(params, &example.x0, &example.u_seq)
    }

    fn predict_with_jacobian(
        &self,
        params: &ParamVector,
        example: &Example,
    ) -> Result<(Vec<f64>, DMatrix<f64>)> {
        self.horizon_jacobian(params, &example.x0, &example.u_seq)
    }
}
