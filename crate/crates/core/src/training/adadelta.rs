use crate::tensor::Tensor;

pub const DEFAULT_RHO: f64 = 0.95;
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Running averages for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaDeltaSlot {
    pub sq_grad: Tensor,
    pub sq_delta: Tensor,
}

/// AdaDelta state for a list of tensors, addressed by slot index.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaDeltaState {
    pub rho: f64,
    pub epsilon: f64,
    slots: Vec<AdaDeltaSlot>,
}

impl AdaDeltaState {
    pub fn new<'a>(rho: f64, epsilon: f64, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        assert!(rho > 0.0 && rho < 1.0, "rho must lie in (0, 1)");
        assert!(epsilon > 0.0, "epsilon must be positive");
        let slots = shapes
            .into_iter()
            .map(|s| AdaDeltaSlot {
                sq_grad: Tensor::zeros(s),
                sq_delta: Tensor::zeros(s),
            })
            .collect();
        Self {
            rho,
            epsilon,
            slots,
        }
    }

    pub fn slot(&self, k: usize) -> &AdaDeltaSlot {
        &self.slots[k]
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Applies one update to `param` in place.
    pub fn update(&mut self, k: usize, param: &mut Tensor, grad: &Tensor) {
        assert_eq!(param.shape(), grad.shape(), "gradient shape");
        let (rho, eps) = (self.rho, self.epsilon);
        let slot = &mut self.slots[k];
        assert_eq!(slot.sq_grad.shape(), param.shape(), "optimizer slot shape");
        let eg = slot.sq_grad.data_mut();
        let ed = slot.sq_delta.data_mut();
        for (j, (w, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            eg[j] = rho * eg[j] + (1.0 - rho) * g * g;
            let delta = -((ed[j] + eps).sqrt() / (eg[j] + eps).sqrt()) * g;
            ed[j] = rho * ed[j] + (1.0 - rho) * delta * delta;
            *w += delta;
        }
    }
}
