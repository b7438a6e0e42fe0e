//! Trajectory predictors: the surrogate `φ(x_k, u_seq, π)` seen by every trainer.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datasets::Example;
use crate::error::{check_dim, Result};
use crate::nn::{self, NetworkSpec, ParamVector};
use crate::node::NodeSpec;

/// A parametric model mapping one example's initial state and inputs to a flat
/// predicted trajectory.
pub trait Predictor: Send + Sync {
    fn n_params(&self) -> usize;

    /// Length of the flattened predicted trajectory.
    fn output_len(&self) -> usize;

    fn predict(&self, params: &ParamVector, example: &Example) -> Result<Vec<f64>>;

    /// Prediction together with `∂prediction/∂π` (`output_len x n_params`).
    fn predict_with_jacobian(
        &self,
        params: &ParamVector,
        example: &Example,
    ) -> Result<(Vec<f64>, DMatrix<f64>)>;

    /// Adds `scale * Hᵀ (prediction - target)` into `grad` and returns the
    /// squared residual norm of this example.
    fn accumulate_gradient(
        &self,
        params: &ParamVector,
        example: &Example,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        let (pred, h) = self.predict_with_jacobian(params, example)?;
        check_dim("example target", pred.len(), example.target.len())?;
        let resid: Vec<f64> = pred
            .iter()
            .zip(&example.target)
            .map(|(p, t)| p - t)
            .collect();
        for (c, g) in grad.iter_mut().enumerate() {
            let col = h.column(c);
            *g += scale * col.iter().zip(&resid).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(resid.iter().map(|r| r * r).sum())
    }
}

/// Direct multi-step MLP: input `[x0, u_seq]`, output the whole trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpPredictor {
    pub spec: NetworkSpec,
}

impl MlpPredictor {
    pub fn new(spec: NetworkSpec) -> Self {
        Self { spec }
    }

    fn input<'a>(&self, example: &'a Example) -> std::borrow::Cow<'a, [f64]> {
        if example.u_seq.is_empty() {
            std::borrow::Cow::Borrowed(&example.x0)
        } else {
            let mut v = example.x0.clone();
            v.extend_from_slice(&example.u_seq);
            std::borrow::Cow::Owned(v)
        }
    }
}

impl Predictor for MlpPredictor {
    fn n_params(&self) -> usize {
        self.spec.param_count()
    }

    fn output_len(&self) -> usize {
        self.spec.output_width()
    }

    fn predict(&self, params: &ParamVector, example: &Example) -> Result<Vec<f64>> {
        nn::forward(&self.spec, params, &self.input(example))
    }

    fn predict_with_jacobian(
        &self,
        params: &ParamVector,
        example: &Example,
    ) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let (y, jp, _) = nn::jacobians(&self.spec, params, &self.input(example))?;
        Ok((y, jp))
    }

    fn accumulate_gradient(
        &self,
        params: &ParamVector,
        example: &Example,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        let cache = nn::forward_cached(&self.spec, params, &self.input(example))?;
        check_dim("example target", self.output_len(), example.target.len())?;
        let resid: Vec<f64> = cache
            .output()
            .iter()
            .zip(&example.target)
            .map(|(p, t)| p - t)
            .collect();
        nn::backward_into(&self.spec, params, &cache, &resid, scale, grad, None);
        Ok(resid.iter().map(|r| r * r).sum())
    }
}

/// Either surrogate, so configs and artifacts can name the model by value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Model {
    Mlp(MlpPredictor),
    Node(NodeSpec),
}

impl Model {
    pub fn network(&self) -> &NetworkSpec {
        match self {
            Model::Mlp(m) => &m.spec,
            Model::Node(n) => &n.core,
        }
    }

    pub fn as_predictor(&self) -> &dyn Predictor {
        match self {
            Model::Mlp(m) => m,
            Model::Node(n) => n,
        }
    }
}
