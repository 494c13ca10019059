//! Strictly causal linear-recurrent language model.
//!
//! Each layer is a pre-normalized time-mix sublayer (token shift, a
//! single-head linear recurrence with per-channel decay, sigmoid output
//! gate) followed by a token-shifted squared-ReLU channel-mix MLP. The only
//! route from position `t` to later positions is the recurrent state and the
//! one-token shift, so the model is causal by construction and its whole
//! context is carried forward in [`RecurrentState`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{Float, Parameter, Tensor};
use crate::{Error, Result};

mod forward;
mod state;

pub use forward::Bound;
pub use state::{LayerState, RecurrentState, StateSnapshot};

/// Channel-mix expansion factor.
pub const FFN_MULT: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    /// Range the per-channel decays `sigmoid(decay)` are spread over at init.
    pub decay_init_range: (f64, f64),
    pub tie_embeddings: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            n_layers: 2,
            d_model: 64,
            vocab_size: 259,
            decay_init_range: (0.9, 0.999),
            tie_embeddings: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        if self.d_model < 8 {
            return Err(Error::Config("d_model must be at least 8".into()));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab_size must be at least 4".into()));
        }
        let (lo, hi) = self.decay_init_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "decay_init_range must satisfy 0 < lo <= hi < 1, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (d, v, l) = (self.d_model, self.vocab_size, self.n_layers);
        let per_layer = 13 * d * d + 5 * d;
        let head = if self.tie_embeddings { 0 } else { d * v };
        v * d + l * per_layer + d + head
    }
}

/// Parameter slots of one layer inside [`Model::params`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerSlots {
    pub ln1: usize,
    pub tm_mu: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub w_q: usize,
    pub w_r: usize,
    pub decay: usize,
    pub w_o: usize,
    pub ln2: usize,
    pub cm_mu: usize,
    pub w_up: usize,
    pub w_down: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Slots {
    pub emb: usize,
    pub layers: Vec<LayerSlots>,
    pub ln_out: usize,
    pub head: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    config: BackboneConfig,
    params: Vec<Parameter<F>>,
    slots: Slots,
}

enum Init {
    Normal,
    Const(f64),
    Decay,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

impl<F: Float> Model<F> {
    /// Random initialization: projections and embeddings ~ N(0, (0.02/√L)²),
    /// norm gains 1, token-shift mixes 0.5, decays spread linearly over
    /// `decay_init_range` after the sigmoid.
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02 / libm::sqrt(config.n_layers as f64);
        Self::build(config, |init, shape| {
            let n: usize = shape.iter().product();
            match init {
                Init::Normal => (0..n).map(|_| std * normal(&mut rng)).collect(),
                Init::Const(c) => vec![c; n],
                Init::Decay => {
                    let (lo, hi) = config.decay_init_range;
                    (0..n)
                        .map(|c| {
                            let frac = if n > 1 { c as f64 / (n - 1) as f64 } else { 0.5 };
                            let w = lo + (hi - lo) * frac;
                            libm::log(w / (1.0 - w))
                        })
                        .collect()
                }
            }
        })
    }

    /// Every parameter zero. The output distribution is then uniform at
    /// every position, which tests rely on.
    pub fn zeroed(config: &BackboneConfig) -> Result<Self> {
        Self::build(config, |_, shape| vec![0.0; shape.iter().product()])
    }

    fn build(config: &BackboneConfig, mut fill: impl FnMut(Init, &[usize]) -> Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (d, v) = (config.d_model, config.vocab_size);
        let mut params = Vec::new();
        let mut add = |name: &str, shape: &[usize], init: Init| -> Result<usize> {
            let data = fill(init, shape);
            params.push(Parameter::new(name, Tensor::from_f64(shape, &data)?));
            Ok(params.len() - 1)
        };
        let emb = add("emb", &[v, d], Init::Normal)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            layers.push(LayerSlots {
                ln1: add(&p("ln1"), &[d], Init::Const(1.0))?,
                tm_mu: add(&p("tm_mu"), &[d], Init::Const(0.5))?,
                w_k: add(&p("w_k"), &[d, d], Init::Normal)?,
                w_v: add(&p("w_v"), &[d, d], Init::Normal)?,
                w_q: add(&p("w_q"), &[d, d], Init::Normal)?,
                w_r: add(&p("w_r"), &[d, d], Init::Normal)?,
                decay: add(&p("decay"), &[d], Init::Decay)?,
                w_o: add(&p("w_o"), &[d, d], Init::Normal)?,
                ln2: add(&p("ln2"), &[d], Init::Const(1.0))?,
                cm_mu: add(&p("cm_mu"), &[d], Init::Const(0.5))?,
                w_up: add(&p("w_up"), &[d, FFN_MULT * d], Init::Normal)?,
                w_down: add(&p("w_down"), &[FFN_MULT * d, d], Init::Normal)?,
            });
        }
        let ln_out = add("ln_out", &[d], Init::Const(1.0))?;
        let head = if config.tie_embeddings {
            None
        } else {
            Some(add("head", &[d, v], Init::Normal)?)
        };
        Ok(Model {
            config: config.clone(),
            params,
            slots: Slots {
                emb,
                layers,
                ln_out,
                head,
            },
        })
    }

    /// Rebuilds a model from named tensors, e.g. a checkpoint. Names and
    /// shapes must match the layout `config` implies.
    pub fn from_params(config: &BackboneConfig, named: Vec<(alloc::string::String, Tensor<F>)>) -> Result<Self> {
        let mut model = Self::zeroed(config)?;
        if named.len() != model.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                model.params.len(),
                named.len()
            )));
        }
        for (p, (name, value)) in model.params.iter_mut().zip(named) {
            if p.name != name {
                return Err(Error::Config(format!("expected tensor `{}`, got `{name}`", p.name)));
            }
            if p.value.shape() != value.shape() {
                return Err(Error::Shape {
                    op: "from_params",
                    lhs: p.value.shape().to_vec(),
                    rhs: value.shape().to_vec(),
                });
            }
            p.value = value;
        }
        Ok(model)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn params(&self) -> &[Parameter<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<F>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<F>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<F>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// The same model with every tensor converted to another element kind.
    pub fn cast<G: Float>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(&p.name, p.value.cast()))
                .collect(),
            slots: self.slots.clone(),
        }
    }

    pub(crate) fn slots(&self) -> &Slots {
        &self.slots
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let v = self.config.vocab_size;
        match tokens.iter().position(|&t| t as usize >= v) {
            Some(i) => Err(Error::Index {
                what: "token",
                index: tokens[i] as usize,
                bound: v,
            }),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            n_layers: 2,
            d_model: 8,
            vocab_size: 11,
            ..Default::default()
        }
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut c = tiny();
        c.d_model = 4;
        assert!(Model::<f64>::init(&c, 0).is_err());
        let mut c = tiny();
        c.vocab_size = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.n_layers = 0;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.decay_init_range = (0.5, 1.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::<f64>::init(&tiny(), 7).unwrap();
        let b = Model::<f64>::init(&tiny(), 7).unwrap();
        let c = Model::<f64>::init(&tiny(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_count_matches_enumeration() {
        for &(l, d, v, tie) in &[(1, 8, 4, false), (2, 16, 32, false), (3, 8, 259, true)] {
            let cfg = BackboneConfig {
                n_layers: l,
                d_model: d,
                vocab_size: v,
                tie_embeddings: tie,
                ..Default::default()
            };
            let model = Model::<f32>::init(&cfg, 0).unwrap();
            // enumerate by hand: embedding, per-layer tensors, final norm, head
            let mut count = v * d;
            for _ in 0..l {
                count += d + d; // ln1, tm_mu
                count += 4 * d * d; // k, v, q, r
                count += d; // decay
                count += d * d; // w_o
                count += d + d; // ln2, cm_mu
                count += d * 4 * d + 4 * d * d; // up, down
            }
            count += d;
            if !tie {
                count += d * v;
            }
            assert_eq!(model.num_parameters(), count);
            assert_eq!(cfg.param_count(), count);
        }
    }

    #[test]
    fn decays_land_in_init_range() {
        let cfg = tiny();
        let model = Model::<f64>::init(&cfg, 1).unwrap();
        let decay = model.param("blocks.0.decay").unwrap();
        for &x in decay.value.data() {
            let w = crate::numerics::sigmoid(x);
            assert!((0.9 - 1e-12..=0.999 + 1e-12).contains(&w), "{w}");
        }
    }
}
