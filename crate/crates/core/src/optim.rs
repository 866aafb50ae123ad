use crate::graph::Gradients;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Hyperparameters of one SGD parameter group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// SGD with heavy-ball momentum and L2 weight decay
/// (`buf = m·buf + (g + wd·p)`, `p -= lr·buf`).
///
/// Momentum buffers are allocated lazily per parameter and mirror the
/// parameter shape.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    buffers: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig, num_params: usize) -> Self {
        Self {
            config,
            buffers: vec![None; num_params],
        }
    }

    /// Apply one update to every parameter in `ids` that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, ids: &[ParamId]) {
        let lr = T::c(self.config.lr);
        let mom = T::c(self.config.momentum);
        let wd = T::c(self.config.weight_decay);
        for &id in ids {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            let buf = self.buffers[id.index()].get_or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, &gv), bv) in p.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut()) {
                let d = gv + wd * *pv;
                *bv = mom * *bv + d;
                *pv -= lr * *bv;
            }
        }
    }

    pub fn buffer(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.buffers.get(id.index()).and_then(Option::as_ref)
    }

    pub fn set_buffer(&mut self, id: ParamId, t: Tensor<T>) {
        self.buffers[id.index()] = Some(t);
    }

    pub fn num_slots(&self) -> usize {
        self.buffers.len()
    }
}
