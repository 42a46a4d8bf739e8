//! Implicit representations: learned constant tensors that are independent
//! of the network input, combined with activations through an operator.
//!
//! Three modeling schemes produce the constant: a directly-learned vector,
//! a linear generator applied to a latent prior, and a matrix
//! factorization of basis rows weighted by coefficients. All of them are
//! initialized so that a fresh combine is a near-no-op: the produced
//! representation starts at the operator's neutral element (0 for addition
//! and concatenation, 1 for multiplication) plus noise of standard
//! deviation at most sigma.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Operator merging an explicit (input-dependent) tensor with an implicit
/// (constant) representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineOp {
    Addition,
    Multiplication,
    Concatenation,
}

impl CombineOp {
    /// Constant that makes the combine a no-op.
    pub fn neutral<F: Scalar>(self) -> F {
        match self {
            CombineOp::Multiplication => F::one(),
            CombineOp::Addition | CombineOp::Concatenation => F::zero(),
        }
    }

    /// Mean of the initial prior distribution for this operator.
    pub fn init_mean(self) -> f64 {
        match self {
            CombineOp::Multiplication => 1.0,
            CombineOp::Addition | CombineOp::Concatenation => 0.0,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            CombineOp::Addition => "+",
            CombineOp::Multiplication => "x",
            CombineOp::Concatenation => "cat",
        }
    }
}

/// Modeling scheme for the implicit representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Vector,
    LinearNet,
    MatrixFactorization,
}

impl ModelKind {
    /// Single-letter tag used in ablation row labels.
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Vector => "i",
            ModelKind::LinearNet => "wi",
            ModelKind::MatrixFactorization => "ic",
        }
    }
}

/// Optional pointwise nonlinearity for the linear generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Sigmoid,
    Silu,
}

/// Initialization contract: priors are drawn close to the operator's
/// neutral element with a small standard deviation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct InitSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self { sigma: 0.02, seed: 0 }
    }
}

/// A learned observation-independent representation producing a
/// per-channel constant vector.
#[derive(Clone, Debug, PartialEq)]
pub enum ImplicitModel<F> {
    /// The prior vector used directly as the representation.
    Vector { z: Tensor<F> },
    /// `offset + nonlinearity(W z)`: latent prior `z` of dimension
    /// `d_prior`, generator matrix `[channels, d_prior]`. The constant
    /// offset realizes the operator-neutral mean for a zero-centered
    /// prior; with `W` the identity block and offset 0 this reduces to
    /// the plain vector model.
    LinearNet {
        z: Tensor<F>,
        weight: Tensor<F>,
        offset: F,
        nonlinearity: Option<Nonlinearity>,
    },
    /// `Z^T c`: basis rows `[k_basis, channels]` mixed by coefficients.
    /// With a one-hot coefficient vector this reduces to one basis row.
    MatrixFactorization { basis: Tensor<F>, coeff: Tensor<F> },
}

/// Builds a freshly initialized implicit model.
///
/// The prior dimension of the composite schemes defaults to twice the
/// channel count. The generator/basis parameters are drawn so that the
/// evaluated representation has mean equal to the operator's neutral
/// element and standard deviation at or below `sigma`.
pub fn init_implicit<F: Scalar>(
    kind: ModelKind,
    channels: usize,
    op: CombineOp,
    spec: InitSpec,
) -> Result<ImplicitModel<F>> {
    if spec.sigma <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "implicit init sigma must be positive, got {}",
            spec.sigma
        )));
    }
    if channels == 0 {
        return Err(Error::InvalidConfig("implicit model needs at least one channel".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mean = op.init_mean();
    Ok(match kind {
        ModelKind::Vector => ImplicitModel::Vector {
            z: Tensor::randn(&[channels], mean, spec.sigma, &mut rng),
        },
        ModelKind::LinearNet => {
            let d_prior = 2 * channels;
            // zero-centered prior; generator rows scaled so the output
            // std stays at or below sigma
            let z = Tensor::randn(&[d_prior], 0.0, spec.sigma, &mut rng);
            let w_std = (1.0 / (2 * d_prior) as f64).sqrt();
            let weight = Tensor::randn(&[channels, d_prior], 0.0, w_std, &mut rng);
            ImplicitModel::LinearNet {
                z,
                weight,
                offset: F::from_f64(mean),
                nonlinearity: None,
            }
        }
        ModelKind::MatrixFactorization => {
            let k_basis = 2 * channels;
            let basis = Tensor::randn(&[k_basis, channels], mean, spec.sigma, &mut rng);
            let coeff = Tensor::randn(
                &[k_basis],
                1.0 / k_basis as f64,
                spec.sigma / k_basis as f64,
                &mut rng,
            );
            ImplicitModel::MatrixFactorization { basis, coeff }
        }
    })
}

impl<F: Scalar> ImplicitModel<F> {
    pub fn kind(&self) -> ModelKind {
        match self {
            ImplicitModel::Vector { .. } => ModelKind::Vector,
            ImplicitModel::LinearNet { .. } => ModelKind::LinearNet,
            ImplicitModel::MatrixFactorization { .. } => ModelKind::MatrixFactorization,
        }
    }

    /// Channel count of the produced representation.
    pub fn channels(&self) -> usize {
        match self {
            ImplicitModel::Vector { z } => z.numel(),
            ImplicitModel::LinearNet { weight, .. } => weight.shape()[0],
            ImplicitModel::MatrixFactorization { basis, .. } => basis.shape()[1],
        }
    }

    /// Trainable tensors in a fixed order, with their role names.
    pub fn param_tensors(&self) -> Vec<(&'static str, &Tensor<F>)> {
        match self {
            ImplicitModel::Vector { z } => vec![("z", z)],
            ImplicitModel::LinearNet { z, weight, .. } => vec![("z", z), ("w", weight)],
            ImplicitModel::MatrixFactorization { basis, coeff } => {
                vec![("basis", basis), ("coeff", coeff)]
            }
        }
    }

    pub fn param_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<F>)> {
        match self {
            ImplicitModel::Vector { z } => vec![("z", z)],
            ImplicitModel::LinearNet { z, weight, .. } => vec![("z", z), ("w", weight)],
            ImplicitModel::MatrixFactorization { basis, coeff } => {
                vec![("basis", basis), ("coeff", coeff)]
            }
        }
    }

    /// Builds the evaluation graph from already-bound parameter leaves
    /// (ordered as in [`Self::param_tensors`]).
    pub fn graph_from_vars(&self, tape: &mut Tape<F>, vars: &[Var]) -> Result<Var> {
        match self {
            ImplicitModel::Vector { .. } => Ok(vars[0]),
            ImplicitModel::LinearNet {
                z,
                offset,
                nonlinearity,
                ..
            } => {
                let d = z.numel();
                let zc = tape.reshape(vars[0], &[d, 1])?;
                let prod = tape.matmul(vars[1], zc)?;
                let flat = tape.reshape(prod, &[self.channels()])?;
                let pre = match nonlinearity {
                    None => flat,
                    Some(Nonlinearity::Sigmoid) => tape.sigmoid(flat)?,
                    Some(Nonlinearity::Silu) => tape.silu(flat)?,
                };
                tape.affine(pre, F::one(), *offset)
            }
            ImplicitModel::MatrixFactorization { basis, .. } => {
                let k = basis.shape()[0];
                let bt = tape.transpose2d(vars[0])?;
                let cc = tape.reshape(vars[1], &[k, 1])?;
                let prod = tape.matmul(bt, cc)?;
                tape.reshape(prod, &[self.channels()])
            }
        }
    }

    /// Binds the parameters on the tape (trainable when asked) and builds
    /// the evaluation graph. Returns the representation var plus the
    /// parameter leaves in [`Self::param_tensors`] order.
    pub fn evaluate_on(
        &self,
        tape: &mut Tape<F>,
        trainable: bool,
    ) -> Result<(Var, Vec<(&'static str, Var)>)> {
        let leaves: Vec<(&'static str, Var)> = self
            .param_tensors()
            .into_iter()
            .map(|(name, t)| (name, tape.leaf(t.clone(), trainable)))
            .collect();
        let vars: Vec<Var> = leaves.iter().map(|&(_, v)| v).collect();
        let out = self.graph_from_vars(tape, &vars)?;
        Ok((out, leaves))
    }

    /// The constant representation. Observation-independent and pure:
    /// repeated calls without parameter updates return bit-identical
    /// tensors (it runs the same graph the training forward uses).
    pub fn evaluate(&self) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let (out, _) = self.evaluate_on(&mut tape, false)?;
        Ok(tape.value(out).clone())
    }

    /// Exact trainable-parameter count.
    pub fn parameter_count(&self) -> usize {
        self.param_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// FLOPs to materialize the representation. At inference the constant
    /// is cached, so evaluation costs nothing per forward.
    pub fn flop_count(&self, at_inference: bool) -> usize {
        if at_inference {
            return 0;
        }
        match self {
            ImplicitModel::Vector { .. } => 0,
            ImplicitModel::LinearNet { z, weight, .. } => 2 * weight.shape()[0] * z.numel(),
            ImplicitModel::MatrixFactorization { basis, .. } => {
                2 * basis.shape()[0] * basis.shape()[1]
            }
        }
    }

    /// Overwrites the parameters so the representation equals the
    /// operator's neutral element exactly (bitwise).
    pub fn force_neutral(&mut self, op: CombineOp) {
        let neutral: F = op.neutral();
        match self {
            ImplicitModel::Vector { z } => {
                for v in z.data_mut() {
                    *v = neutral;
                }
            }
            ImplicitModel::LinearNet { z, offset, .. } => {
                for v in z.data_mut() {
                    *v = F::zero();
                }
                *offset = neutral;
            }
            ImplicitModel::MatrixFactorization { basis, coeff } => {
                let cols = basis.shape()[1];
                for (i, v) in coeff.data_mut().iter_mut().enumerate() {
                    *v = if i == 0 { F::one() } else { F::zero() };
                }
                for (i, v) in basis.data_mut().iter_mut().enumerate() {
                    if i < cols {
                        *v = neutral;
                    }
                }
            }
        }
    }
}

fn check_channels(op: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::ChannelMismatch { op, expected, got });
    }
    Ok(())
}

/// Tiles a per-channel constant to the explicit tensor's layout and rank.
fn spread<F: Scalar>(tape: &mut Tape<F>, eval: Var, explicit_shape: &[usize]) -> Result<Var> {
    let c = tape.value(eval).numel();
    match explicit_shape.len() {
        4 => tape.reshape(eval, &[c, 1, 1]),
        2 => Ok(eval),
        _ => Err(Error::ShapeMismatch {
            op: "combine",
            lhs: explicit_shape.to_vec(),
            rhs: vec![c],
        }),
    }
}

/// Combines an explicit tensor with an already-evaluated implicit
/// representation var. Addition/multiplication broadcast the constant per
/// channel; concatenation tiles it over batch and spatial dims and appends
/// it on the channel axis.
pub fn combine_with<F: Scalar>(
    tape: &mut Tape<F>,
    explicit: Var,
    eval: Var,
    op: CombineOp,
) -> Result<Var> {
    let shape = tape.value(explicit).shape().to_vec();
    let channels = match shape.len() {
        4 | 2 => shape[1],
        _ => {
            return Err(Error::ShapeMismatch {
                op: "combine",
                lhs: shape,
                rhs: tape.value(eval).shape().to_vec(),
            })
        }
    };
    let c_impl = tape.value(eval).numel();
    match op {
        CombineOp::Addition => {
            check_channels("combine add", channels, c_impl)?;
            let imp = spread(tape, eval, &shape)?;
            tape.add(explicit, imp)
        }
        CombineOp::Multiplication => {
            check_channels("combine mul", channels, c_impl)?;
            let imp = spread(tape, eval, &shape)?;
            tape.mul(explicit, imp)
        }
        CombineOp::Concatenation => {
            let imp = spread(tape, eval, &shape)?;
            let tiled = if shape.len() == 4 {
                let ones = tape.constant(Tensor::ones(&[shape[0], 1, shape[2], shape[3]]));
                tape.mul(ones, imp)?
            } else {
                let ones = tape.constant(Tensor::ones(&[shape[0], 1]));
                tape.mul(ones, imp)?
            };
            tape.concat(explicit, tiled, 1)
        }
    }
}

/// Combine with a model, binding its parameters as trainable leaves so
/// gradients flow into them. Returns the combined var and the bound
/// parameter leaves.
pub fn combine<F: Scalar>(
    tape: &mut Tape<F>,
    explicit: Var,
    model: &ImplicitModel<F>,
    op: CombineOp,
) -> Result<(Var, Vec<(&'static str, Var)>)> {
    let (eval, leaves) = model.evaluate_on(tape, true)?;
    let out = combine_with(tape, explicit, eval, op)?;
    Ok((out, leaves))
}

/// Validates that `groups` is an exact partition (for addition and
/// multiplication) of `channels`.
pub fn check_partition(groups: &[usize], channels: usize) -> Result<()> {
    if groups.is_empty() || groups.iter().any(|&g| g == 0) || groups.iter().sum::<usize>() != channels
    {
        return Err(Error::BadPartition {
            groups: groups.to_vec(),
            channels,
        });
    }
    Ok(())
}

/// Builds the full-channel constant for a grouped combine: each group's
/// model is evaluated and the results are concatenated in channel order.
pub fn grouped_eval<F: Scalar>(
    tape: &mut Tape<F>,
    models: &[ImplicitModel<F>],
    groups: &[usize],
    trainable: bool,
) -> Result<(Var, Vec<(&'static str, Var)>)> {
    if models.len() != groups.len() {
        return Err(Error::InvalidConfig(format!(
            "grouped combine needs one model per group ({} models, {} groups)",
            models.len(),
            groups.len()
        )));
    }
    let mut leaves = Vec::new();
    let mut acc: Option<Var> = None;
    for (model, &g) in models.iter().zip(groups) {
        check_channels("grouped combine", g, model.channels())?;
        let (eval, mut ls) = model.evaluate_on(tape, trainable)?;
        leaves.append(&mut ls);
        acc = Some(match acc {
            None => eval,
            Some(prev) => tape.concat(prev, eval, 0)?,
        });
    }
    Ok((acc.expect("at least one group"), leaves))
}

/// Per-group combine: the channel axis is partitioned and each group is
/// merged with its own implicit representation. With the trivial
/// single-group partition this is exactly [`combine`].
pub fn grouped_combine<F: Scalar>(
    tape: &mut Tape<F>,
    explicit: Var,
    models: &[ImplicitModel<F>],
    groups: &[usize],
    op: CombineOp,
) -> Result<(Var, Vec<(&'static str, Var)>)> {
    let shape = tape.value(explicit).shape().to_vec();
    if matches!(op, CombineOp::Addition | CombineOp::Multiplication) {
        let channels = shape.get(1).copied().unwrap_or(0);
        check_partition(groups, channels)?;
    }
    let (eval, leaves) = grouped_eval(tape, models, groups, true)?;
    let out = combine_with(tape, explicit, eval, op)?;
    Ok((out, leaves))
}

/// Combine restricted to a subset of channel positions: the model covers
/// `positions.len()` channels and every other channel is left untouched
/// (the constant holds the operator's neutral element there).
/// Concatenation has no subset form.
pub fn masked_combine<F: Scalar>(
    tape: &mut Tape<F>,
    explicit: Var,
    model: &ImplicitModel<F>,
    positions: &[usize],
    op: CombineOp,
) -> Result<(Var, Vec<(&'static str, Var)>)> {
    if matches!(op, CombineOp::Concatenation) {
        return Err(Error::InvalidConfig(
            "subset-restricted combine is undefined for concatenation".into(),
        ));
    }
    if positions.is_empty() {
        return Err(Error::InvalidConfig("empty channel subset".into()));
    }
    let shape = tape.value(explicit).shape().to_vec();
    let channels = shape.get(1).copied().unwrap_or(0);
    check_channels("masked combine", positions.len(), model.channels())?;
    if let Some(&bad) = positions.iter().find(|&&p| p >= channels) {
        return Err(Error::ChannelMismatch {
            op: "masked combine",
            expected: channels,
            got: bad,
        });
    }
    let (eval, leaves) = model.evaluate_on(tape, true)?;
    let full = tape.scatter_flat(eval, positions.to_vec(), channels, op.neutral())?;
    let out = combine_with(tape, explicit, full, op)?;
    Ok((out, leaves))
}
