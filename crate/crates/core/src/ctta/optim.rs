//! Adam with bias correction. Moment buffers exist only for the parameters
//! the optimizer was built for.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::{Gradients, Graph, ParamId, Precision, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, graph: &Graph, params: impl IntoIterator<Item = ParamId>) -> Result<Self> {
        cfg.validate()?;
        let mut moments = BTreeMap::new();
        for id in params {
            let p = graph
                .param(id)
                .ok_or_else(|| Error::Plan(format!("no parameter {id:?}")))?;
            moments.insert(id, (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
        }
        Ok(Adam { cfg, step: 0, moments })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.moments.keys().copied()
    }

    /// Two moment buffers per tracked parameter.
    pub fn state_bytes(&self, precision: Precision) -> u64 {
        self.moments
            .values()
            .map(|(m, v)| (m.numel() + v.numel()) as u64 * precision.bytes())
            .sum()
    }

    /// One update. Every gradient must belong to a tracked parameter.
    pub fn step(&mut self, graph: &mut Graph, grads: &Gradients) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (id, g) in grads.iter() {
            let (m, v) = self
                .moments
                .get_mut(id)
                .ok_or_else(|| Error::Internal(format!("gradient for untracked parameter {id:?}")))?;
            let p = graph
                .param_mut(*id)
                .ok_or_else(|| Error::Internal(format!("parameter {id:?} vanished")))?;
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{forward, Dense, ForwardOptions, Layer, LayerId, LossGrad, ParamRole, BnMode};

    fn one_dense() -> Graph {
        Graph::new(vec![Layer::Dense(Dense {
            weight: Tensor::full(&[1, 1], 0.0),
            bias: Tensor::zeros(&[1]),
        })])
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut g = one_dense();
        let w = ParamId {
            layer: LayerId(1),
            role: ParamRole::Weight,
        };
        let mut adam = Adam::new(AdamConfig::with_lr(0.01), &g, [w]).unwrap();
        let x = Tensor::full(&[1, 1], 3.0);
        let out = forward(&g, &x, &[LayerId(1)].into(), &ForwardOptions::new(BnMode::UseRunningStats)).unwrap();
        let mut grads = out.tape.backward(&g, &LossGrad::new(0.0, Tensor::full(&[1, 1], 1.0))).unwrap();
        assert!(matches!(adam.step(&mut g, &grads), Err(Error::Internal(_))), "bias is untracked");

        let mut g = one_dense();
        let mut adam = Adam::new(
            AdamConfig::with_lr(0.01),
            &g,
            g.param_ids().into_iter().collect::<Vec<_>>(),
        )
        .unwrap();
        grads = out.tape.backward(&g, &LossGrad::new(0.0, Tensor::full(&[1, 1], 1.0))).unwrap();
        adam.step(&mut g, &grads).unwrap();
        assert!((g.param(w).unwrap().data()[0] + 0.01).abs() < 1e-9);
        assert_eq!(adam.state_bytes(Precision::F32), 2 * 2 * 4);
    }

    #[test]
    fn bad_config_is_rejected() {
        let g = one_dense();
        assert!(Adam::new(AdamConfig::with_lr(0.0), &g, []).is_err());
    }
}
