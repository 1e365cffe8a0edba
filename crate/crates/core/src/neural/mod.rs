//! Autoregressive event predictor: multi-hot embedding, gated recurrent cell
//! and a sigmoid output head, trained with binary cross-entropy.
//!
//! ```text
//! v_t = W_emb · y_t
//! h_t = GRU(h_{t-1}, v_t)
//! ŷ_{t+1} = σ(W_o · h_t + b_o)
//! ```

mod cell;
mod io;
mod loss;
mod optim;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cell::{forward_step, hidden_trajectory, predict_from_hidden, predict_next};
pub use io::{load_model, read_model, save_model, write_model, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub use loss::{
    backward, bce, bce_component, head_loss_and_gradient, loss_and_gradient, sequence_loss, HeadExample,
    PROBABILITY_CLAMP,
};
pub use optim::{optimizer_step, optimizer_step_with_lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch { what: &'static str, expected: usize, got: usize },
    #[error("sequence of length {0} has no supervised pair")]
    TooShort(usize),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("model file version error: {0}")]
    Version(String),
    #[error("model file format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `|E|`
    pub n_input: usize,
    /// `|E'|`
    pub n_target: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub l2_weight: f64,
    pub rng_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_input: 0,
            n_target: 0,
            embed_dim: 16,
            hidden_dim: 64,
            learning_rate: 0.005,
            l2_weight: 1e-5,
            rng_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(n_input: usize, n_target: usize) -> Self {
        Self { n_input, n_target, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_input == 0 || self.n_target == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(ModelError::InvalidConfig("all dimensions must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ModelError::InvalidConfig(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.l2_weight.is_finite() && self.l2_weight >= 0.0) {
            return Err(ModelError::InvalidConfig(format!("l2 weight {} must be nonnegative", self.l2_weight)));
        }
        Ok(())
    }
}

/// Which parameters an optimizer step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Embedding,
    Cell,
    Output,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Embedding, ParamGroup::Cell, ParamGroup::Output];

    fn slot(self) -> usize {
        match self {
            ParamGroup::Embedding => 0,
            ParamGroup::Cell => 1,
            ParamGroup::Output => 2,
        }
    }
}

/// Set of parameter groups. Parsed from strings like `output` or `cell+output`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ParamMask {
    pub embedding: bool,
    pub cell: bool,
    pub output: bool,
}

impl ParamMask {
    pub const ALL: ParamMask = ParamMask { embedding: true, cell: true, output: true };
    pub const OUTPUT: ParamMask = ParamMask { embedding: false, cell: false, output: true };
    pub const NONE: ParamMask = ParamMask { embedding: false, cell: false, output: false };

    pub fn contains(self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Embedding => self.embedding,
            ParamGroup::Cell => self.cell,
            ParamGroup::Output => self.output,
        }
    }

    /// True when neither the embedding nor the recurrent cell can change, so
    /// hidden-state trajectories are fixed.
    pub fn recurrence_frozen(self) -> bool {
        !self.embedding && !self.cell
    }
}

impl fmt::Display for ParamMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.embedding, "embedding"), (self.cell, "cell"), (self.output, "output")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join("+"))
        }
    }
}

impl FromStr for ParamMask {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let mut mask = ParamMask::NONE;
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "all" => mask = ParamMask::ALL,
                "none" => {}
                "embedding" => mask.embedding = true,
                "cell" => mask.cell = true,
                "output" => mask.output = true,
                other => return Err(format!("unknown parameter group {other:?}")),
            }
        }
        Ok(mask)
    }
}

impl TryFrom<String> for ParamMask {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ParamMask> for String {
    fn from(m: ParamMask) -> String {
        m.to_string()
    }
}

/// All learnable tensors. Gates act on the concatenation `[v; h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    /// `embed_dim × n_input`
    pub w_emb: Array2<f64>,
    /// Update gate, `hidden × (embed + hidden)`.
    pub w_z: Array2<f64>,
    pub b_z: Array1<f64>,
    /// Reset gate.
    pub w_r: Array2<f64>,
    pub b_r: Array1<f64>,
    /// Candidate state; its hidden half reads `r ⊙ h`.
    pub w_n: Array2<f64>,
    pub b_n: Array1<f64>,
    /// `n_target × hidden`
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
}

/// Gradients mirror the parameter layout exactly.
pub type GradientSet = Parameters;

/// Read-only view of one tensor.
#[derive(Debug, Clone, Copy)]
pub struct TensorRef<'a> {
    pub name: &'static str,
    pub group: ParamGroup,
    pub data: &'a [f64],
}

impl Parameters {
    pub const TENSOR_NAMES: [&'static str; 9] = ["w_emb", "w_z", "b_z", "w_r", "b_r", "w_n", "b_n", "w_o", "b_o"];

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
        Self {
            w_emb: Array2::zeros((e, cfg.n_input)),
            w_z: Array2::zeros((h, e + h)),
            b_z: Array1::zeros(h),
            w_r: Array2::zeros((h, e + h)),
            b_r: Array1::zeros(h),
            w_n: Array2::zeros((h, e + h)),
            b_n: Array1::zeros(h),
            w_o: Array2::zeros((cfg.n_target, h)),
            b_o: Array1::zeros(cfg.n_target),
        }
    }

    /// Uniform `(-1/√fan_in, 1/√fan_in)` weights, zero biases.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut p = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        for w in [&mut p.w_emb, &mut p.w_z, &mut p.w_r, &mut p.w_n, &mut p.w_o] {
            let bound = 1.0 / (w.ncols() as f64).sqrt();
            w.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        p
    }

    pub fn tensors(&self) -> [TensorRef<'_>; 9] {
        use ParamGroup::*;
        [
            TensorRef { name: "w_emb", group: Embedding, data: self.w_emb.as_slice().unwrap() },
            TensorRef { name: "w_z", group: Cell, data: self.w_z.as_slice().unwrap() },
            TensorRef { name: "b_z", group: Cell, data: self.b_z.as_slice().unwrap() },
            TensorRef { name: "w_r", group: Cell, data: self.w_r.as_slice().unwrap() },
            TensorRef { name: "b_r", group: Cell, data: self.b_r.as_slice().unwrap() },
            TensorRef { name: "w_n", group: Cell, data: self.w_n.as_slice().unwrap() },
            TensorRef { name: "b_n", group: Cell, data: self.b_n.as_slice().unwrap() },
            TensorRef { name: "w_o", group: Output, data: self.w_o.as_slice().unwrap() },
            TensorRef { name: "b_o", group: Output, data: self.b_o.as_slice().unwrap() },
        ]
    }

    pub fn tensors_mut(&mut self) -> [(ParamGroup, &mut [f64]); 9] {
        use ParamGroup::*;
        [
            (Embedding, self.w_emb.as_slice_mut().unwrap()),
            (Cell, self.w_z.as_slice_mut().unwrap()),
            (Cell, self.b_z.as_slice_mut().unwrap()),
            (Cell, self.w_r.as_slice_mut().unwrap()),
            (Cell, self.b_r.as_slice_mut().unwrap()),
            (Cell, self.w_n.as_slice_mut().unwrap()),
            (Cell, self.b_n.as_slice_mut().unwrap()),
            (Output, self.w_o.as_slice_mut().unwrap()),
            (Output, self.b_o.as_slice_mut().unwrap()),
        ]
    }

    pub fn fill_zero(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.data.iter()).map(|x| x * x).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// `self += alpha · other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Parameters) {
        for ((_, a), b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b.data).for_each(|(x, y)| *x += alpha * y);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    fn shape_matches(&self, cfg: &ModelConfig) -> bool {
        let z = Self::zeros(cfg);
        self.tensors().iter().zip(z.tensors()).all(|(a, b)| a.data.len() == b.data.len())
            && self.w_emb.dim() == z.w_emb.dim()
            && self.w_o.dim() == z.w_o.dim()
            && self.w_z.dim() == z.w_z.dim()
    }
}

/// First and second moment estimates, with one step counter per group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Parameters,
    pub v: Parameters,
    pub steps: [u64; 3],
}

impl AdamState {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self { m: Parameters::zeros(cfg), v: Parameters::zeros(cfg), steps: [0; 3] }
    }

    pub fn steps(&self, group: ParamGroup) -> u64 {
        self.steps[group.slot()]
    }
}

/// One predictor instance: configuration, parameters and optimizer moments.
///
/// `Clone` is a deep copy; clones share no state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Parameters,
    pub adam: AdamState,
}

impl ModelState {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Parameters::init(&config);
        let adam = AdamState::new(&config);
        Ok(Self { config, params, adam })
    }

    /// Assembles a model from explicit parameters with fresh optimizer moments.
    pub fn from_parameters(config: ModelConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        if !params.shape_matches(&config) {
            return Err(ModelError::InvalidConfig("parameter shapes do not match config".into()));
        }
        let adam = AdamState::new(&config);
        Ok(Self { config, params, adam })
    }

    pub fn reset_optimizer(&mut self) {
        self.adam = AdamState::new(&self.config);
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn n_target(&self) -> usize {
        self.config.n_target
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.params.all_finite() {
            Ok(())
        } else {
            Err(ModelError::NonFinite("parameters"))
        }
    }

    /// True if every parameter of `group` is bit-identical in both models.
    pub fn group_bits_equal(&self, other: &ModelState, group: ParamGroup) -> bool {
        self.params
            .tensors()
            .iter()
            .zip(other.params.tensors())
            .filter(|(a, _)| a.group == group)
            .all(|(a, b)| a.data.len() == b.data.len() && a.data.iter().zip(b.data).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    /// Bit-exact equality of parameters (optimizer state excluded).
    pub fn params_bits_equal(&self, other: &ModelState) -> bool {
        ParamGroup::ALL.iter().all(|&g| self.group_bits_equal(other, g))
    }
}

/// Recurrent state `h_t`; zero at sequence start.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState(pub Array1<f64>);

impl HiddenState {
    pub fn zeros(hidden_dim: usize) -> Self {
        Self(Array1::zeros(hidden_dim))
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("hidden state is contiguous")
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
