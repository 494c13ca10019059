use alloc::vec;
use alloc::vec::Vec;

use crate::numerics::Float;

use super::BackboneConfig;

/// Per-layer recurrent memory.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState<F> {
    /// `d×d` mixing state, row index = key channel.
    pub wkv: Vec<F>,
    /// Last normalized input seen by the time-mix token shift.
    pub tm_prev: Vec<F>,
    /// Last normalized input seen by the channel-mix token shift.
    pub cm_prev: Vec<F>,
}

/// Everything the backbone carries from one position to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState<F> {
    pub layers: Vec<LayerState<F>>,
    /// Number of tokens consumed so far.
    pub pos: u64,
}

impl<F: Float> RecurrentState<F> {
    pub fn fresh(config: &BackboneConfig) -> Self {
        let d = config.d_model;
        RecurrentState {
            layers: (0..config.n_layers)
                .map(|_| LayerState {
                    wkv: vec![F::ZERO; d * d],
                    tm_prev: vec![F::ZERO; d],
                    cm_prev: vec![F::ZERO; d],
                })
                .collect(),
            pos: 0,
        }
    }

    pub fn snapshot(&self) -> StateSnapshot<F> {
        StateSnapshot(self.clone())
    }

    /// Number of scalars held.
    pub fn numel(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.wkv.len() + l.tm_prev.len() + l.cm_prev.len())
            .sum()
    }

    /// Largest absolute value across all layers' mixing states.
    pub fn sup_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.wkv.iter())
            .map(|x| libm::fabs(x.to_f64()))
            .fold(0.0, f64::max)
    }
}

/// An owned deep copy of a [`RecurrentState`].
#[derive(Debug, Clone, PartialEq)]
pub struct StateSnapshot<F>(RecurrentState<F>);

impl<F: Float> StateSnapshot<F> {
    pub fn restore(&self) -> RecurrentState<F> {
        self.0.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.numel()
    }
}
