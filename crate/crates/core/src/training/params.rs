use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    /// Aggregator, keypoint head, volume network, adjacency.
    Main,
    /// Reconstruction network.
    Recon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: Group,
}

/// Named parameters in registration order. Components keep indices into
/// the store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: Group) -> usize {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, value, group });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].value
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Put every parameter on the tape, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    pub fn gradients(&self, grads: &Gradients, vars: &[Var]) -> Vec<Tensor> {
        self.params
            .iter()
            .zip(vars)
            .map(|(p, &v)| grads.get_or_zeros(v, p.value.shape()))
            .collect()
    }
}

/// Decoupled-weight-decay Adam with one learning rate per group and
/// global-norm gradient clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr_main: f64,
    pub lr_recon: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: &super::TrainConfig) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect::<Vec<_>>();
        Self {
            lr_main: cfg.lr_main,
            lr_recon: cfg.lr_recon,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            clip: cfg.grad_clip,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Apply one update; returns the pre-clipping global gradient norm.
    pub fn update(&mut self, store: &mut ParamStore, grads: &mut [Tensor]) -> f64 {
        let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
        if norm > self.clip {
            let s = self.clip / norm;
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (i, g) in grads.iter().enumerate() {
            let lr = match store.get(i).group {
                Group::Main => self.lr_main,
                Group::Recon => self.lr_recon,
            };
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.value_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * (mh / (vh.sqrt() + eps) + wd * p[j]);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::TrainConfig;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::default();
        store.add("a", Tensor::new([2], vec![1.0, -1.0]), Group::Main);
        store.add("b", Tensor::new([1], vec![0.0]), Group::Recon);
        let cfg = TrainConfig {
            lr_main: 0.1,
            lr_recon: 0.01,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&store, &cfg);
        let mut grads = vec![Tensor::new([2], vec![0.5, -2.0]), Tensor::new([1], vec![1.0])];
        opt.update(&mut store, &mut grads);
        let a = store.get(0).value.data();
        assert!((a[0] - 0.9).abs() < 1e-6 && (a[1] + 0.9).abs() < 1e-6);
        assert!((store.get(1).value.data()[0] + 0.01).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut store = ParamStore::default();
        store.add("a", Tensor::new([2], vec![0.0, 0.0]), Group::Main);
        let cfg = TrainConfig::default();
        let mut opt = AdamW::new(&store, &cfg);
        let mut grads = vec![Tensor::new([2], vec![30.0, 40.0])];
        let norm = opt.update(&mut store, &mut grads);
        assert_eq!(norm, 50.0);
        assert!((grads[0].sq_norm().sqrt() - cfg.grad_clip).abs() < 1e-12);
    }
}
