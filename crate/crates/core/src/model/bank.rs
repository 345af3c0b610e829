//! Per-class auto-encoders and reconstruction-error classification.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{par_map_rows, uniform_init, ModelError};
use crate::numerics::{softmax, Graph, NumericsError, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderActivation {
    #[default]
    Tanh,
    Linear,
}

/// Distance used for the reconstruction error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorNorm {
    #[default]
    L2,
    SquaredL2,
}

/// `f(h) = tanh(W_f h + b_f)`, `g(z) = act(W_g z + b_g)`.
///
/// The encoder and decoder are the 1×1 convolutions of the method applied
/// to a 1×1 spatial map, which is exactly a linear layer on the feature
/// vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAutoEncoder {
    /// `l × d`
    pub enc_w: Tensor,
    /// `1 × l`
    pub enc_b: Tensor,
    /// `d × l`
    pub dec_w: Tensor,
    /// `1 × d`
    pub dec_b: Tensor,
}

impl ClassAutoEncoder {
    pub fn zeros(feature_dim: usize, latent_dim: usize) -> Self {
        Self {
            enc_w: Tensor::zeros(&[latent_dim, feature_dim]),
            enc_b: Tensor::zeros(&[1, latent_dim]),
            dec_w: Tensor::zeros(&[feature_dim, latent_dim]),
            dec_b: Tensor::zeros(&[1, feature_dim]),
        }
    }

    pub fn parameters(&self) -> [&Tensor; 4] {
        [&self.enc_w, &self.enc_b, &self.dec_w, &self.dec_b]
    }

    pub fn parameters_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.enc_w, &mut self.enc_b, &mut self.dec_w, &mut self.dec_b]
    }

    pub fn feature_dim(&self) -> usize {
        self.enc_w.cols()
    }

    pub fn latent_dim(&self) -> usize {
        self.enc_w.rows()
    }

    fn matvec(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
        (0..w.rows())
            .map(|i| w.row(i).iter().zip(x).fold(b.data()[i], |acc, (a, v)| acc + a * v))
            .collect()
    }

    /// Latent code of one feature vector.
    pub fn encode(&self, h: &[f64]) -> Result<Vec<f64>, ModelError> {
        if h.len() != self.feature_dim() {
            return Err(ModelError::DimMismatch {
                expected: self.feature_dim(),
                found: h.len(),
            });
        }
        Ok(Self::matvec(&self.enc_w, &self.enc_b, h).into_iter().map(f64::tanh).collect())
    }

    /// `h̃ = g(f(h))` for one feature vector.
    pub fn reconstruct(&self, h: &[f64], decoder: DecoderActivation) -> Result<Vec<f64>, ModelError> {
        let z = self.encode(h)?;
        let out = Self::matvec(&self.dec_w, &self.dec_b, &z);
        Ok(match decoder {
            DecoderActivation::Tanh => out.into_iter().map(f64::tanh).collect(),
            DecoderActivation::Linear => out,
        })
    }
}

/// One auto-encoder per seen class; index `i` is global class id `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoEncoderBank {
    pub autoencoders: Vec<ClassAutoEncoder>,
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub decoder: DecoderActivation,
    pub norm: ErrorNorm,
}

#[derive(Clone, Debug)]
pub struct BankVars {
    aes: Vec<[Var; 4]>,
    decoder: DecoderActivation,
    norm: ErrorNorm,
}

/// Forward products of the bank on a batch.
#[derive(Clone, Debug)]
pub struct BankOutput {
    /// `n × C` reconstruction errors.
    pub errors: Var,
    /// Per-class `n × l` latent codes, indexed by class id.
    pub latents: Vec<Var>,
}

impl AutoEncoderBank {
    pub fn new(feature_dim: usize, latent_dim: usize, decoder: DecoderActivation, norm: ErrorNorm) -> Self {
        Self {
            autoencoders: Vec::new(),
            feature_dim,
            latent_dim,
            decoder,
            norm,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.autoencoders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.autoencoders.is_empty()
    }

    /// Appends `n_new` freshly initialised auto-encoders; existing entries are untouched.
    ///
    /// Weights are uniform in `±1/√fan_in`, biases zero.
    pub fn append_classes(&mut self, n_new: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..n_new {
            self.autoencoders.push(ClassAutoEncoder {
                enc_w: uniform_init(self.latent_dim, self.feature_dim, &mut rng),
                enc_b: Tensor::zeros(&[1, self.latent_dim]),
                dec_w: uniform_init(self.feature_dim, self.latent_dim, &mut rng),
                dec_b: Tensor::zeros(&[1, self.feature_dim]),
            });
        }
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.autoencoders.iter().flat_map(ClassAutoEncoder::parameters).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.autoencoders.iter_mut().flat_map(ClassAutoEncoder::parameters_mut).collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BankVars {
        BankVars {
            aes: self
                .autoencoders
                .iter()
                .map(|ae| ae.parameters().map(|t| g.leaf(t.clone(), trainable)))
                .collect(),
            decoder: self.decoder,
            norm: self.norm,
        }
    }

    /// Wraps existing graph leaves, given in [`Self::parameters`] order.
    pub fn bind_leaves(&self, leaves: &[Var]) -> Result<BankVars, NumericsError> {
        if leaves.len() != 4 * self.num_classes() {
            return Err(NumericsError::InvalidArgument(format!(
                "expected {} bank leaves, got {}",
                4 * self.num_classes(),
                leaves.len()
            )));
        }
        Ok(BankVars {
            aes: leaves.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
            decoder: self.decoder,
            norm: self.norm,
        })
    }

    fn check_batch(&self, h: &Tensor) -> Result<(), ModelError> {
        if self.is_empty() {
            return Err(ModelError::EmptyBank);
        }
        if h.cols() != self.feature_dim {
            return Err(ModelError::DimMismatch {
                expected: self.feature_dim,
                found: h.cols(),
            });
        }
        Ok(())
    }

    /// `ε[n][i] = ‖h̃_i − h‖` for every sample and class.
    pub fn reconstruction_errors(&self, h: &Tensor) -> Result<Tensor, ModelError> {
        self.check_batch(h)?;
        par_map_rows(h, |chunk| {
            let mut g = Graph::new();
            let vars = self.bind(&mut g, false);
            let hv = g.constant(chunk);
            let out = vars.forward(&mut g, hv)?;
            Ok(g.value(out.errors).clone())
        })
    }

    /// `z = f_c(h)` in class `class_id`'s subspace.
    pub fn latent_codes(&self, h: &Tensor, class_id: usize) -> Result<Tensor, ModelError> {
        let ae = self.autoencoders.get(class_id).ok_or(ModelError::ClassOutOfRange {
            class: class_id,
            seen: self.num_classes(),
        })?;
        if h.cols() != self.feature_dim {
            return Err(ModelError::DimMismatch {
                expected: self.feature_dim,
                found: h.cols(),
            });
        }
        let mut rows = Vec::with_capacity(h.rows());
        for i in 0..h.rows() {
            rows.push(ae.encode(h.row(i))?);
        }
        let mut t = Tensor::from_rows(&rows)?;
        if rows.is_empty() {
            t = Tensor::zeros(&[0, self.latent_dim]);
        }
        Ok(t)
    }

    /// Predicted class per row: the smallest reconstruction error.
    pub fn classify(&self, h: &Tensor) -> Result<Vec<usize>, ModelError> {
        Ok(argmin_rows(&self.reconstruction_errors(h)?))
    }
}

impl BankVars {
    pub fn forward(&self, g: &mut Graph, h: Var) -> Result<BankOutput, NumericsError> {
        let mut errors = Vec::with_capacity(self.aes.len());
        let mut latents = Vec::with_capacity(self.aes.len());
        for &[enc_w, enc_b, dec_w, dec_b] in &self.aes {
            let z = g.matmul_nt(h, enc_w)?;
            let z = g.add_row(z, enc_b)?;
            let z = g.tanh(z)?;
            let r = g.matmul_nt(z, dec_w)?;
            let r = g.add_row(r, dec_b)?;
            let r = match self.decoder {
                DecoderActivation::Tanh => g.tanh(r)?,
                DecoderActivation::Linear => r,
            };
            let diff = g.sub(r, h)?;
            let sq = g.row_sum_sq(diff)?;
            let e = match self.norm {
                ErrorNorm::L2 => g.sqrt(sq)?,
                ErrorNorm::SquaredL2 => sq,
            };
            errors.push(e);
            latents.push(z);
        }
        Ok(BankOutput {
            errors: g.concat_cols(&errors)?,
            latents,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.aes.len()
    }

    /// Leaves in the same order as [`AutoEncoderBank::parameters`].
    pub fn vars(&self) -> Vec<Var> {
        self.aes.iter().flatten().copied().collect()
    }

    /// Leaves of auto-encoder `class`.
    pub fn class_vars(&self, class: usize) -> [Var; 4] {
        self.aes[class]
    }
}

/// Row-wise softmax of `−α ε`, max-shifted.
pub fn predict_proba(errors: &Tensor, alpha: f64) -> Result<Tensor, ModelError> {
    if !(alpha > 0.0) {
        return Err(ModelError::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if !errors.is_finite() {
        return Err(ModelError::Numerics(NumericsError::NonFinite { op: "predict_proba" }));
    }
    let mut data = Vec::with_capacity(errors.len());
    for i in 0..errors.rows() {
        let logits: Vec<f64> = errors.row(i).iter().map(|e| -alpha * e).collect();
        data.extend(softmax(&logits, None));
    }
    Ok(Tensor::new(errors.shape().to_vec(), data)?)
}

/// Index of the smallest entry of each row; ties go to the lowest index.
pub fn argmin_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            t.row(i)
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |(bi, bv), (j, &v)| if v < bv { (j, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            t.row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (j, &v)| if v > bv { (j, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
