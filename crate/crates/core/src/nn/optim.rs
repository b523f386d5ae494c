use serde::{Deserialize, Serialize};

use super::param::{ParamGroup, Parameterized};
use super::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Heavy-ball SGD.
    Sgd,
    /// Rectified Adam; `momentum` is used as the first-moment decay.
    RAdam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::RAdam,
            momentum: 0.9,
            weight_decay: 0.005,
        }
    }
}

const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer moments, persisted alongside checkpoints so training can resume.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub spec: OptimizerSpec,
    pub lr: f64,
    pub group: ParamGroup,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, lr: f64, group: ParamGroup) -> Self {
        Self {
            spec,
            lr,
            group,
            state: OptimizerState::default(),
        }
    }

    /// Apply one update to every parameter in the optimizer's group using the
    /// accumulated gradients. Gradients are left untouched.
    pub fn step<T: Real>(&mut self, model: &mut (impl Parameterized<T> + ?Sized)) {
        self.state.step += 1;
        let t = self.state.step as f64;
        let spec = self.spec;
        let lr = self.lr;
        let beta1 = spec.momentum;
        let rho_inf = 2.0 / (1.0 - BETA2) - 1.0;
        let b2t = BETA2.powf(t);
        let rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
        let rect = if rho_t > 5.0 {
            Some(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt())
        } else {
            None
        };
        let bias1 = 1.0 - beta1.powf(t);
        let state = &mut self.state;
        let mut idx = 0;
        model.visit_params(self.group, &mut |p| {
            if state.first.len() <= idx {
                state.first.push(vec![0.0; p.len()]);
                state.second.push(vec![0.0; p.len()]);
            }
            let m = &mut state.first[idx];
            let v = &mut state.second[idx];
            for i in 0..p.len() {
                let w = p.value[i].f64();
                let g = p.grad[i].f64() + spec.weight_decay * w;
                let next = match spec.kind {
                    OptimizerKind::Sgd => {
                        m[i] = beta1 * m[i] + g;
                        w - lr * m[i]
                    }
                    OptimizerKind::RAdam => {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                        let m_hat = m[i] / bias1;
                        match rect {
                            Some(r) => {
                                let l = (1.0 - b2t).sqrt() / (v[i].sqrt() + ADAM_EPS);
                                w - lr * m_hat * r * l
                            }
                            None => w - lr * m_hat,
                        }
                    }
                };
                p.value[i] = T::of(next);
            }
            idx += 1;
        });
    }
}
