use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::stream_rng;
use crate::{Error, Result};

/// Scalar type the network runs in (`f32` for training, `f64` for checks).
pub trait Scalar: Float + Send + Sync + std::fmt::Debug + 'static {}

impl<T: Float + Send + Sync + std::fmt::Debug + 'static> Scalar for T {}

/// Network dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Time steps per window (input slots).
    pub seq_len_in: usize,
    /// Width of each item feature row.
    pub feature_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    /// Size of the softmax, one unit per output item.
    pub n_outputs: usize,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seq_len_in: 11,
            feature_dim: 102,
            hidden1: 600,
            hidden2: 600,
            n_outputs: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.seq_len_in,
            self.feature_dim,
            self.hidden1,
            self.hidden2,
            self.n_outputs,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid(format!("all model dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.seq_len_in * self.feature_dim
    }
}

/// One LSTM layer. Gate blocks are stacked row-wise in the order
/// input, forget, output, candidate: `w` is `4H x input_dim`, `u` is
/// `4H x H`, `b` is `4H`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer<T> {
    pub input_dim: usize,
    pub hidden: usize,
    pub w: Vec<T>,
    pub u: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> LstmLayer<T> {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmLayer {
            input_dim,
            hidden,
            w: vec![T::zero(); 4 * hidden * input_dim],
            u: vec![T::zero(); 4 * hidden * hidden],
            b: vec![T::zero(); 4 * hidden],
        }
    }

    fn check(&self, name: &str) -> Result<()> {
        let h = self.hidden;
        if self.w.len() != 4 * h * self.input_dim || self.u.len() != 4 * h * h || self.b.len() != 4 * h {
            return Err(Error::shape(format!("{name}: parameter sizes disagree with dims")));
        }
        Ok(())
    }
}

/// Softmax output layer: `w` is `outputs x input_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub input_dim: usize,
    pub outputs: usize,
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(input_dim: usize, outputs: usize) -> Self {
        Dense {
            input_dim,
            outputs,
            w: vec![T::zero(); outputs * input_dim],
            b: vec![T::zero(); outputs],
        }
    }
}

/// All trainable parameters. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub layer1: LstmLayer<T>,
    pub layer2: LstmLayer<T>,
    pub output: Dense<T>,
}

/// Names of the tensors returned by [`Params::tensors`], in order.
pub const TENSOR_NAMES: [&str; 8] = [
    "lstm1.w", "lstm1.u", "lstm1.b", "lstm2.w", "lstm2.u", "lstm2.b", "dense.w", "dense.b",
];

impl<T: Scalar> Params<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Params {
            layer1: LstmLayer::zeros(cfg.feature_dim, cfg.hidden1),
            layer2: LstmLayer::zeros(cfg.hidden1, cfg.hidden2),
            output: Dense::zeros(cfg.hidden2, cfg.n_outputs),
        }
    }

    /// Glorot-uniform weights, forget-gate bias 1, other biases 0.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut p = Self::zeros(cfg);
        let mut rng = stream_rng(cfg.seed, 0);
        let mut glorot = |buf: &mut [T], fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in buf {
                *v = T::from(rng.random_range(-limit..limit)).expect("finite");
            }
        };
        for layer in [&mut p.layer1, &mut p.layer2] {
            let (h, d) = (layer.hidden, layer.input_dim);
            glorot(&mut layer.w, d, h);
            glorot(&mut layer.u, h, h);
            layer.b[h..2 * h].fill(T::one());
        }
        glorot(&mut p.output.w, cfg.hidden2, cfg.n_outputs);
        p
    }

    pub fn tensors(&self) -> [&[T]; 8] {
        [
            &self.layer1.w,
            &self.layer1.u,
            &self.layer1.b,
            &self.layer2.w,
            &self.layer2.u,
            &self.layer2.b,
            &self.output.w,
            &self.output.b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 8] {
        [
            &mut self.layer1.w,
            &mut self.layer1.u,
            &mut self.layer1.b,
            &mut self.layer2.w,
            &mut self.layer2.u,
            &mut self.layer2.b,
            &mut self.output.w,
            &mut self.output.b,
        ]
    }

    pub fn n_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Verifies every tensor matches `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Params::<T>::zeros(cfg);
        for ((name, a), b) in TENSOR_NAMES.iter().zip(self.tensors()).zip(expected.tensors()) {
            if a.len() != b.len() {
                return Err(Error::shape(format!(
                    "{name} has {} values, config implies {}",
                    a.len(),
                    b.len()
                )));
            }
        }
        self.layer1.check("lstm1")?;
        self.layer2.check("lstm2")?;
        if self.layer1.input_dim != cfg.feature_dim
            || self.layer1.hidden != cfg.hidden1
            || self.layer2.input_dim != cfg.hidden1
            || self.layer2.hidden != cfg.hidden2
            || self.output.input_dim != cfg.hidden2
            || self.output.outputs != cfg.n_outputs
        {
            return Err(Error::shape("layer dimensions disagree with config"));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(T::zero());
        }
    }

    pub fn add_assign(&mut self, other: &Params<T>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            for x in t {
                *x = *x * factor;
            }
        }
    }

    /// Element-wise conversion, e.g. to run an `f32` model in `f64`.
    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from(*x).expect("representable")).collect();
        Params {
            layer1: LstmLayer {
                input_dim: self.layer1.input_dim,
                hidden: self.layer1.hidden,
                w: conv(&self.layer1.w),
                u: conv(&self.layer1.u),
                b: conv(&self.layer1.b),
            },
            layer2: LstmLayer {
                input_dim: self.layer2.input_dim,
                hidden: self.layer2.hidden,
                w: conv(&self.layer2.w),
                u: conv(&self.layer2.u),
                b: conv(&self.layer2.b),
            },
            output: Dense {
                input_dim: self.output.input_dim,
                outputs: self.output.outputs,
                w: conv(&self.output.w),
                b: conv(&self.output.b),
            },
        }
    }
}
