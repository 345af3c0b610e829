//! The feature extractor `φ` and the classification head `θ`.
//!
//! The main head is an [`AutoEncoderBank`]; a [`LinearHead`] is kept for
//! the prototype (NME) baseline, which trains a plain softmax classifier
//! and predicts with class means of stored exemplars.

mod bank;
mod extractor;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Checkpoint, CheckpointError, Graph, NumericsError, Tensor, Var};

pub use bank::{
    argmax_rows, argmin_rows, predict_proba, AutoEncoderBank, BankOutput, BankVars, ClassAutoEncoder,
    DecoderActivation, ErrorNorm,
};
pub use extractor::{ExtractorVars, FeatureExtractor, Linear};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("the auto-encoder bank is empty")]
    EmptyBank,
    #[error("class {class} is out of range ({seen} classes seen)")]
    ClassOutOfRange { class: usize, seen: usize },
    #[error("input dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Uniform `±1/√fan_in` initialisation of an `out × in` matrix.
pub(crate) fn uniform_init(out: usize, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..out * fan_in).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::matrix(out, fan_in, data).expect("shape matches data")
}

const INFERENCE_CHUNK: usize = 256;

/// Applies `f` to row chunks of `x` in parallel and stacks the results in order.
pub(crate) fn par_map_rows<F>(x: &Tensor, f: F) -> Result<Tensor, ModelError>
where
    F: Fn(Tensor) -> Result<Tensor, NumericsError> + Sync,
{
    let n = x.rows();
    let starts: Vec<usize> = (0..n).step_by(INFERENCE_CHUNK).collect();
    let parts: Vec<Tensor> = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + INFERENCE_CHUNK).min(n)).collect();
            f(x.select_rows(&idx))
        })
        .collect::<Result<_, _>>()?;
    if parts.is_empty() {
        let probe = f(Tensor::zeros(&[0, x.cols()]))?;
        return Ok(probe);
    }
    let cols = parts[0].cols();
    let mut data = Vec::with_capacity(n * cols);
    for p in parts {
        data.extend(p.into_data());
    }
    Ok(Tensor::matrix(n, cols, data)?)
}

/// Softmax classifier `logits = h·Wᵀ + b`, grown one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub layer: Linear,
}

impl LinearHead {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            layer: Linear::zeros(feature_dim, 0),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.layer.output_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layer.input_dim()
    }

    pub fn append_classes(&mut self, n_new: usize, seed: u64) {
        let d = self.feature_dim();
        let c = self.num_classes();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fresh = uniform_init(n_new, d, &mut rng);
        let mut w = self.layer.weight.data().to_vec();
        w.extend_from_slice(fresh.data());
        let mut b = self.layer.bias.data().to_vec();
        b.extend(std::iter::repeat_n(0.0, n_new));
        self.layer.weight = Tensor::matrix(c + n_new, d, w).expect("shape");
        self.layer.bias = Tensor::matrix(1, c + n_new, b).expect("shape");
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    AutoEncoders(AutoEncoderBank),
    Linear(LinearHead),
}

#[derive(Clone, Debug)]
pub enum HeadVars {
    AutoEncoders(BankVars),
    Linear(Var, Var),
}

/// Head outputs on a batch.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    /// `n × C` logits; `−α ε` for the auto-encoder head.
    pub logits: Var,
    /// Reconstruction errors (auto-encoder head only).
    pub errors: Option<Var>,
    /// Per-class latent codes (auto-encoder head only).
    pub latents: Vec<Var>,
}

impl Head {
    pub fn num_classes(&self) -> usize {
        match self {
            Head::AutoEncoders(b) => b.num_classes(),
            Head::Linear(l) => l.num_classes(),
        }
    }

    pub fn append_classes(&mut self, n_new: usize, seed: u64) {
        match self {
            Head::AutoEncoders(b) => b.append_classes(n_new, seed),
            Head::Linear(l) => l.append_classes(n_new, seed),
        }
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        match self {
            Head::AutoEncoders(b) => b.parameters(),
            Head::Linear(l) => vec![&l.layer.weight, &l.layer.bias],
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Head::AutoEncoders(b) => b.parameters_mut(),
            Head::Linear(l) => vec![&mut l.layer.weight, &mut l.layer.bias],
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> HeadVars {
        match self {
            Head::AutoEncoders(b) => HeadVars::AutoEncoders(b.bind(g, trainable)),
            Head::Linear(l) => HeadVars::Linear(
                g.leaf(l.layer.weight.clone(), trainable),
                g.leaf(l.layer.bias.clone(), trainable),
            ),
        }
    }

    pub fn as_bank(&self) -> Option<&AutoEncoderBank> {
        match self {
            Head::AutoEncoders(b) => Some(b),
            Head::Linear(_) => None,
        }
    }
}

impl HeadVars {
    pub fn forward(&self, g: &mut Graph, h: Var, alpha: f64) -> Result<HeadOutput, NumericsError> {
        match self {
            HeadVars::AutoEncoders(bank) => {
                let out = bank.forward(g, h)?;
                let logits = g.scale(out.errors, -alpha)?;
                Ok(HeadOutput {
                    logits,
                    errors: Some(out.errors),
                    latents: out.latents,
                })
            }
            HeadVars::Linear(w, b) => {
                let z = g.matmul_nt(h, *w)?;
                let logits = g.add_row(z, *b)?;
                Ok(HeadOutput {
                    logits,
                    errors: None,
                    latents: Vec::new(),
                })
            }
        }
    }

    /// Leaves in the same order as [`Head::parameters`].
    pub fn vars(&self) -> Vec<Var> {
        match self {
            HeadVars::AutoEncoders(b) => b.vars(),
            HeadVars::Linear(w, b) => vec![*w, *b],
        }
    }
}

/// Parameter counts of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub backbone: usize,
    /// Head parameters including biases.
    pub head: usize,
    /// Head parameters counting weight matrices only.
    pub head_without_bias: usize,
    pub total: usize,
    pub total_without_bias: usize,
}

/// Auto-encoder bank size for `classes` classes: `C·(l·d + l + d·l + d)` with
/// biases or `C·2·l·d` without.
pub fn bank_param_count(classes: usize, feature_dim: usize, latent_dim: usize, with_bias: bool) -> usize {
    let per = if with_bias {
        2 * latent_dim * feature_dim + latent_dim + feature_dim
    } else {
        2 * latent_dim * feature_dim
    };
    classes * per
}

impl ParamCount {
    pub fn from_parts(backbone: usize, head: usize, head_without_bias: usize) -> Self {
        Self {
            backbone,
            head,
            head_without_bias,
            total: backbone + head,
            total_without_bias: backbone + head_without_bias,
        }
    }
}

pub fn param_count(extractor: &FeatureExtractor, head: &Head) -> ParamCount {
    let backbone = extractor.param_count();
    let (with, without) = match head {
        Head::AutoEncoders(b) => (
            bank_param_count(b.num_classes(), b.feature_dim, b.latent_dim, true),
            bank_param_count(b.num_classes(), b.feature_dim, b.latent_dim, false),
        ),
        Head::Linear(l) => {
            let c = l.num_classes();
            (c * (l.feature_dim() + 1), c * l.feature_dim())
        }
    };
    ParamCount::from_parts(backbone, with, without)
}

fn enum_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn parse_enum<T: for<'de> Deserialize<'de>>(s: &str, key: &str) -> Result<T, ModelError> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| ModelError::Checkpoint(CheckpointError::Invalid(format!("bad value `{s}` for `{key}`"))))
}

/// Writes the extractor and head under `extractor/<i>/{weight,bias}` and
/// `ae/<class>/{enc_w,enc_b,dec_w,dec_b}` (or `linear/{weight,bias}`).
pub fn write_model(ck: &mut Checkpoint, extractor: &FeatureExtractor, head: &Head) {
    ck.set_meta("extractor_layers", extractor.layers.len().to_string());
    for (i, l) in extractor.layers.iter().enumerate() {
        ck.insert(format!("extractor/{i}/weight"), l.weight.clone());
        ck.insert(format!("extractor/{i}/bias"), l.bias.clone());
    }
    match head {
        Head::AutoEncoders(b) => {
            ck.set_meta("head", "autoencoders");
            ck.set_meta("classes", b.num_classes().to_string());
            ck.set_meta("feature_dim", b.feature_dim.to_string());
            ck.set_meta("latent_dim", b.latent_dim.to_string());
            ck.set_meta("decoder_activation", enum_name(&b.decoder));
            ck.set_meta("error_norm", enum_name(&b.norm));
            for (c, ae) in b.autoencoders.iter().enumerate() {
                ck.insert(format!("ae/{c}/enc_w"), ae.enc_w.clone());
                ck.insert(format!("ae/{c}/enc_b"), ae.enc_b.clone());
                ck.insert(format!("ae/{c}/dec_w"), ae.dec_w.clone());
                ck.insert(format!("ae/{c}/dec_b"), ae.dec_b.clone());
            }
        }
        Head::Linear(l) => {
            ck.set_meta("head", "linear");
            ck.set_meta("classes", l.num_classes().to_string());
            ck.insert("linear/weight", l.layer.weight.clone());
            ck.insert("linear/bias", l.layer.bias.clone());
        }
    }
}

fn meta_usize(ck: &Checkpoint, key: &str) -> Result<usize, ModelError> {
    ck.meta(key)?
        .parse()
        .map_err(|_| ModelError::Checkpoint(CheckpointError::Invalid(format!("`{key}` is not an integer"))))
}

pub fn read_model(ck: &Checkpoint) -> Result<(FeatureExtractor, Head), ModelError> {
    let n_layers = meta_usize(ck, "extractor_layers")?;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        layers.push(Linear {
            weight: ck.tensor(&format!("extractor/{i}/weight"))?.clone(),
            bias: ck.tensor(&format!("extractor/{i}/bias"))?.clone(),
        });
    }
    let extractor = FeatureExtractor { layers };
    let classes = meta_usize(ck, "classes")?;
    let head = match ck.meta("head")? {
        "autoencoders" => {
            let mut bank = AutoEncoderBank::new(
                meta_usize(ck, "feature_dim")?,
                meta_usize(ck, "latent_dim")?,
                parse_enum(ck.meta("decoder_activation")?, "decoder_activation")?,
                parse_enum(ck.meta("error_norm")?, "error_norm")?,
            );
            for c in 0..classes {
                bank.autoencoders.push(ClassAutoEncoder {
                    enc_w: ck.tensor(&format!("ae/{c}/enc_w"))?.clone(),
                    enc_b: ck.tensor(&format!("ae/{c}/enc_b"))?.clone(),
                    dec_w: ck.tensor(&format!("ae/{c}/dec_w"))?.clone(),
                    dec_b: ck.tensor(&format!("ae/{c}/dec_b"))?.clone(),
                });
            }
            Head::AutoEncoders(bank)
        }
        "linear" => Head::Linear(LinearHead {
            layer: Linear {
                weight: ck.tensor("linear/weight")?.clone(),
                bias: ck.tensor("linear/bias")?.clone(),
            },
        }),
        other => {
            return Err(ModelError::Checkpoint(CheckpointError::Invalid(format!(
                "unknown head kind `{other}`"
            ))))
        }
    };
    Ok((extractor, head))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_two_parameter_count() {
        let head = bank_param_count(100, 512, 32, false);
        assert_eq!(head, 3_276_800);
        assert_eq!(bank_param_count(100, 512, 32, true), 3_331_200);
        assert_eq!(bank_param_count(0, 512, 32, true), 0);
        let total = ParamCount::from_parts(11_170_000, bank_param_count(100, 512, 32, true), head).total_without_bias;
        assert!((total as f64 / 1e6 - 14.44).abs() < 0.1);
    }

    #[test]
    fn param_count_matches_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = FeatureExtractor::new(10, &[8], 6, &mut rng);
        let mut bank = AutoEncoderBank::new(6, 3, DecoderActivation::Tanh, ErrorNorm::L2);
        bank.append_classes(4, 1);
        let head = Head::AutoEncoders(bank);
        let pc = param_count(&e, &head);
        assert_eq!(pc.backbone, 10 * 8 + 8 + 8 * 6 + 6);
        assert_eq!(pc.head, head.parameters().iter().map(|t| t.len()).sum::<usize>());
        assert_eq!(pc.total, pc.backbone + pc.head);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = FeatureExtractor::new(5, &[4], 3, &mut rng);
        let mut bank = AutoEncoderBank::new(3, 2, DecoderActivation::Linear, ErrorNorm::SquaredL2);
        bank.append_classes(3, 4);
        for head in [Head::AutoEncoders(bank), {
            let mut l = LinearHead::new(3);
            l.append_classes(2, 5);
            Head::Linear(l)
        }] {
            let mut ck = Checkpoint::new();
            write_model(&mut ck, &e, &head);
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            let (e2, h2) = read_model(&back).unwrap();
            assert_eq!(e2, e);
            assert_eq!(h2, head);
        }
    }

    #[test]
    fn linear_head_growth_keeps_old_rows() {
        let mut l = LinearHead::new(4);
        l.append_classes(2, 1);
        let old = l.layer.weight.clone();
        l.append_classes(3, 2);
        assert_eq!(l.num_classes(), 5);
        assert_eq!(&l.layer.weight.data()[..8], old.data());
    }
}
