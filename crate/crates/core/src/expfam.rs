//! Exponential-family building blocks.
//!
//! Every family is written as `p(x) = exp(phi . t(x) - A(phi) + h(x))`:
//!
//! | family          | t(x)                 | phi                          |
//! |-----------------|----------------------|------------------------------|
//! | Gaussian(d)     | (x, x x^T)           | (Lambda mu, -Lambda/2)       |
//! | Gamma           | (x, ln x)            | (-b, a - 1)                  |
//! | Wishart(d)      | (Lambda, ln|Lambda|) | (-V/2, (n - d - 1)/2)        |
//! | Dirichlet(K)    | ln p                 | alpha - 1                    |
//! | Categorical(K)  | one-hot z            | log-probabilities            |
//!
//! The Wishart density is `|Lambda|^((n-d-1)/2) exp(-tr(V Lambda)/2)`, so
//! `E[Lambda] = n V^-1`. Only the Gaussian has a non-zero base measure,
//! `h(x) = -(d/2) ln(2 pi)`.
//!
//! Conjugate formulas are expressed as per-block [`Rule`]s: each output block
//! lists the parent/child moment blocks it reads. The graph evaluates rules
//! over plate fields, so a block that only depends on shared inputs stays
//! shared.

use std::f64::consts::{LN_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Gamma as GammaDist, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{self, SpdFactor};
use crate::plates::{apply, Field};
use crate::special::{digamma, ln_gamma, ln_multigamma, log_sum_exp, multidigamma, MIN_ARGUMENT};

/// Distribution family and its event dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FamilyId {
    Gaussian(usize),
    Gamma,
    Wishart(usize),
    Dirichlet(usize),
    Categorical(usize),
}

impl FamilyId {
    pub fn validate(&self) -> Result<()> {
        match *self {
            FamilyId::Gaussian(d) | FamilyId::Wishart(d) if d == 0 => Err(Error::DimensionMismatch(format!(
                "{} needs dimension >= 1",
                self.name()
            ))),
            FamilyId::Dirichlet(k) | FamilyId::Categorical(k) if k < 2 => Err(Error::DimensionMismatch(format!(
                "{} needs K >= 2, got {k}",
                self.name()
            ))),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FamilyId::Gaussian(_) => "gaussian",
            FamilyId::Gamma => "gamma",
            FamilyId::Wishart(_) => "wishart",
            FamilyId::Dirichlet(_) => "dirichlet",
            FamilyId::Categorical(_) => "categorical",
        }
    }

    /// Event dimension (d or K; 1 for Gamma).
    pub fn dim(&self) -> usize {
        match *self {
            FamilyId::Gaussian(d) | FamilyId::Wishart(d) => d,
            FamilyId::Dirichlet(k) | FamilyId::Categorical(k) => k,
            FamilyId::Gamma => 1,
        }
    }

    /// Shapes of the natural-parameter (and moment) blocks.
    pub fn block_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            FamilyId::Gaussian(d) => vec![vec![d], vec![d, d]],
            FamilyId::Gamma => vec![vec![], vec![]],
            FamilyId::Wishart(d) => vec![vec![d, d], vec![]],
            FamilyId::Dirichlet(k) | FamilyId::Categorical(k) => vec![vec![k]],
        }
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.block_shapes().iter().map(|s| s.iter().product()).collect()
    }

    /// Shape of one observed value: a d-vector, a scalar, a d x d matrix, a
    /// K-vector on the simplex, or a category index.
    pub fn value_shape(&self) -> Vec<usize> {
        match *self {
            FamilyId::Gaussian(d) => vec![d],
            FamilyId::Gamma | FamilyId::Categorical(_) => vec![],
            FamilyId::Wishart(d) => vec![d, d],
            FamilyId::Dirichlet(k) => vec![k],
        }
    }

    pub fn value_size(&self) -> usize {
        self.value_shape().iter().product()
    }

    /// Moment kind a node of this family exposes to its children.
    pub fn moment_kind(&self) -> MomentKind {
        match *self {
            FamilyId::Gaussian(d) => MomentKind::Gaussian(d),
            FamilyId::Gamma => MomentKind::Gamma,
            FamilyId::Wishart(d) => MomentKind::Wishart(d),
            FamilyId::Dirichlet(k) => MomentKind::Dirichlet(k),
            FamilyId::Categorical(k) => MomentKind::Categorical(k),
        }
    }

    /// Parent slots, in order.
    pub fn slots(&self) -> Vec<SlotKind> {
        match *self {
            FamilyId::Gaussian(d) => vec![SlotKind::Mean(d), SlotKind::Precision(d)],
            FamilyId::Gamma => vec![SlotKind::FixedScalar, SlotKind::Rate],
            FamilyId::Wishart(d) => vec![SlotKind::FixedScalar, SlotKind::FixedMatrix(d)],
            FamilyId::Dirichlet(k) => vec![SlotKind::FixedVector(k)],
            FamilyId::Categorical(k) => vec![SlotKind::Probabilities(k)],
        }
    }

    fn log_base_constant(&self) -> f64 {
        match *self {
            FamilyId::Gaussian(d) => -0.5 * d as f64 * (2.0 * PI).ln(),
            _ => 0.0,
        }
    }
}

/// What a parent slot consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlotKind {
    /// Gaussian-vector moments (E[x], E[x x^T]).
    Mean(usize),
    /// Wishart moments, or Gamma moments read as an isotropic precision.
    Precision(usize),
    /// Gamma moments (E[b], E[ln b]).
    Rate,
    /// Dirichlet moments E[ln p].
    Probabilities(usize),
    /// Hyperparameters that must be constants.
    FixedScalar,
    FixedVector(usize),
    FixedMatrix(usize),
}

impl SlotKind {
    pub fn is_fixed(&self) -> bool {
        matches!(
            self,
            SlotKind::FixedScalar | SlotKind::FixedVector(_) | SlotKind::FixedMatrix(_)
        )
    }

    /// Block sizes of the moments the slot reads.
    pub fn block_sizes(&self) -> Vec<usize> {
        match *self {
            SlotKind::Mean(d) => vec![d, d * d],
            SlotKind::Precision(d) => vec![d * d, 1],
            SlotKind::Rate => vec![1, 1],
            SlotKind::Probabilities(k) => vec![k],
            SlotKind::FixedScalar => vec![1],
            SlotKind::FixedVector(k) => vec![k],
            SlotKind::FixedMatrix(d) => vec![d * d],
        }
    }

    /// Whether a node exposing `kind` can fill the slot without conversion
    /// (the Gamma-as-precision case is reported separately).
    pub fn accepts(&self, kind: &MomentKind) -> bool {
        match (self, kind) {
            (SlotKind::Mean(d), MomentKind::Gaussian(e)) => d == e,
            (SlotKind::Precision(d), MomentKind::Wishart(e)) => d == e,
            (SlotKind::Precision(_), MomentKind::Gamma) => true,
            (SlotKind::Rate, MomentKind::Gamma) => true,
            (SlotKind::Probabilities(k), MomentKind::Dirichlet(j)) => k == j,
            (slot, MomentKind::Fixed(shape)) => slot.fixed_shape_ok(shape),
            _ => false,
        }
    }

    fn fixed_shape_ok(&self, shape: &[usize]) -> bool {
        let size: usize = shape.iter().product();
        match *self {
            SlotKind::FixedScalar | SlotKind::Rate => size == 1,
            SlotKind::FixedVector(k) | SlotKind::Probabilities(k) => shape == [k],
            SlotKind::FixedMatrix(d) => shape == [d, d],
            SlotKind::Mean(d) => shape == [d] || (d == 1 && size == 1),
            SlotKind::Precision(d) => shape == [d, d] || size == 1,
        }
    }

    /// Moments of a constant value placed in this slot.
    pub fn constant_moments(&self, raw: &[f64], shape: &[usize]) -> Result<Vec<Vec<f64>>> {
        if !self.fixed_shape_ok(shape) {
            return Err(Error::SlotMismatch(format!(
                "constant of shape {shape:?} cannot fill a {self:?} slot"
            )));
        }
        if raw.iter().any(|v| v.is_nan()) {
            return Err(Error::Domain("constant contains NaN".into()));
        }
        match *self {
            SlotKind::Mean(d) => {
                let mut xx = vec![0.0; d * d];
                linalg::outer(raw, raw, &mut xx);
                Ok(vec![raw.to_vec(), xx])
            }
            SlotKind::Precision(d) => {
                if raw.len() == 1 {
                    let t = raw[0];
                    if t <= 0.0 {
                        return Err(Error::Domain(format!("precision {t} must be positive")));
                    }
                    let mut m = linalg::identity(d);
                    m.iter_mut().for_each(|v| *v *= t);
                    Ok(vec![m, vec![d as f64 * t.ln()]])
                } else {
                    let f = SpdFactor::new(raw, d).map_err(|_| Error::Domain("precision matrix is not SPD".into()))?;
                    Ok(vec![raw.to_vec(), vec![f.log_det()]])
                }
            }
            SlotKind::Rate => {
                let b = raw[0];
                if b <= 0.0 {
                    return Err(Error::Domain(format!("rate {b} must be positive")));
                }
                Ok(vec![vec![b], vec![b.ln()]])
            }
            SlotKind::Probabilities(_) => {
                if raw.iter().any(|&p| p < 0.0) {
                    return Err(Error::Domain("probabilities must be non-negative".into()));
                }
                Ok(vec![raw.iter().map(|p| p.ln()).collect()])
            }
            SlotKind::FixedScalar | SlotKind::FixedVector(_) | SlotKind::FixedMatrix(_) => Ok(vec![raw.to_vec()]),
        }
    }
}

/// The conjugacy table entry for one (family, slot) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParentSlotSpec {
    pub family: FamilyId,
    pub slot: usize,
    pub accepts: SlotKind,
}

pub fn parent_slot_specs(family: FamilyId) -> Vec<ParentSlotSpec> {
    family
        .slots()
        .into_iter()
        .enumerate()
        .map(|(slot, accepts)| ParentSlotSpec { family, slot, accepts })
        .collect()
}

/// Family whose natural parameters a message into this slot is shaped like.
pub fn slot_parent_family(slot: SlotKind) -> Option<FamilyId> {
    match slot {
        SlotKind::Mean(d) => Some(FamilyId::Gaussian(d)),
        SlotKind::Precision(d) => Some(FamilyId::Wishart(d)),
        SlotKind::Rate => Some(FamilyId::Gamma),
        SlotKind::Probabilities(k) => Some(FamilyId::Dirichlet(k)),
        _ => None,
    }
}

/// Kind of a moment vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum MomentKind {
    Gaussian(usize),
    Gamma,
    Wishart(usize),
    Dirichlet(usize),
    Categorical(usize),
    /// Raw constant of the given value shape.
    Fixed(Vec<usize>),
}

/// Natural parameters of a single distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalParams {
    pub family: FamilyId,
    pub blocks: Vec<Vec<f64>>,
}

/// An additive contribution to a parent's natural parameters.
pub type Message = NaturalParams;

/// Expected sufficient statistics, block-aligned with [`NaturalParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MomentVector {
    pub kind: MomentKind,
    pub blocks: Vec<Vec<f64>>,
}

impl NaturalParams {
    pub fn new(family: FamilyId, blocks: Vec<Vec<f64>>) -> Result<Self> {
        check_block_sizes(&family.block_sizes(), &blocks)?;
        Ok(Self { family, blocks })
    }

    pub fn gaussian(mean: &[f64], precision: &[f64]) -> Self {
        let d = mean.len();
        let mut lm = vec![0.0; d];
        linalg::mat_vec(precision, mean, &mut lm);
        Self {
            family: FamilyId::Gaussian(d),
            blocks: vec![lm, precision.iter().map(|v| -0.5 * v).collect()],
        }
    }

    /// Gamma with shape `a` and rate `b`.
    pub fn gamma(a: f64, b: f64) -> Self {
        Self {
            family: FamilyId::Gamma,
            blocks: vec![vec![-b], vec![a - 1.0]],
        }
    }

    /// Wishart with degrees of freedom `n` and inverse scale `v`.
    pub fn wishart(n: f64, v: &[f64]) -> Self {
        let d = (v.len() as f64).sqrt() as usize;
        Self {
            family: FamilyId::Wishart(d),
            blocks: vec![v.iter().map(|x| -0.5 * x).collect(), vec![(n - d as f64 - 1.0) / 2.0]],
        }
    }

    pub fn dirichlet(alpha: &[f64]) -> Self {
        Self {
            family: FamilyId::Dirichlet(alpha.len()),
            blocks: vec![alpha.iter().map(|a| a - 1.0).collect()],
        }
    }

    pub fn categorical_from_probs(p: &[f64]) -> Self {
        Self {
            family: FamilyId::Categorical(p.len()),
            blocks: vec![p.iter().map(|v| v.ln()).collect()],
        }
    }

    fn views(&self) -> Vec<&[f64]> {
        self.blocks.iter().map(|b| b.as_slice()).collect()
    }
}

impl MomentVector {
    pub fn new(kind: MomentKind, blocks: Vec<Vec<f64>>) -> Self {
        Self { kind, blocks }
    }

    /// Exact moments of a constant.
    pub fn fixed(value: Vec<f64>, shape: Vec<usize>) -> Self {
        Self {
            kind: MomentKind::Fixed(shape),
            blocks: vec![value],
        }
    }
}

fn check_block_sizes(sizes: &[usize], blocks: &[Vec<f64>]) -> Result<()> {
    if sizes.len() != blocks.len() || sizes.iter().zip(blocks).any(|(s, b)| *s != b.len()) {
        return Err(Error::Shape(format!(
            "expected blocks of sizes {sizes:?}, got {:?}",
            blocks.iter().map(|b| b.len()).collect::<Vec<_>>()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Block rules
// ---------------------------------------------------------------------------

/// Where a rule input comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Dep {
    /// Block of the child's moments.
    Child(usize),
    /// (slot, block) of a parent's moments.
    Parent(usize, usize),
}

pub(crate) type Kernel = Box<dyn Fn(&[&[f64]], &mut [f64]) + Send + Sync>;

/// One output block computed from a list of input blocks.
pub(crate) struct Rule {
    pub deps: Vec<Dep>,
    pub event: usize,
    pub kernel: Kernel,
}

impl Rule {
    fn new(deps: Vec<Dep>, event: usize, kernel: impl Fn(&[&[f64]], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self {
            deps,
            event,
            kernel: Box::new(kernel),
        }
    }

    fn eval(&self, child: &[&[f64]], parents: &[Vec<&[f64]>]) -> Vec<f64> {
        let inputs: Vec<&[f64]> = self
            .deps
            .iter()
            .map(|d| match *d {
                Dep::Child(b) => child[b],
                Dep::Parent(s, b) => parents[s][b],
            })
            .collect();
        let mut out = vec![0.0; self.event];
        (self.kernel)(&inputs, &mut out);
        out
    }
}

use Dep::{Child, Parent};

/// Rules giving the natural parameters implied by the parents' moments.
pub(crate) fn prior_rules(family: FamilyId) -> Vec<Rule> {
    match family {
        FamilyId::Gaussian(d) => vec![
            Rule::new(vec![Parent(1, 0), Parent(0, 0)], d, |x, o| {
                linalg::mat_vec(x[0], x[1], o)
            }),
            Rule::new(vec![Parent(1, 0)], d * d, |x, o| {
                o.iter_mut().zip(x[0]).for_each(|(o, l)| *o = -0.5 * l)
            }),
        ],
        FamilyId::Gamma => vec![
            Rule::new(vec![Parent(1, 0)], 1, |x, o| o[0] = -x[0][0]),
            Rule::new(vec![Parent(0, 0)], 1, |x, o| o[0] = x[0][0] - 1.0),
        ],
        FamilyId::Wishart(d) => vec![
            Rule::new(vec![Parent(1, 0)], d * d, |x, o| {
                o.iter_mut().zip(x[0]).for_each(|(o, v)| *o = -0.5 * v)
            }),
            Rule::new(vec![Parent(0, 0)], 1, move |x, o| {
                o[0] = (x[0][0] - d as f64 - 1.0) / 2.0
            }),
        ],
        FamilyId::Dirichlet(k) => vec![Rule::new(vec![Parent(0, 0)], k, |x, o| {
            o.iter_mut().zip(x[0]).for_each(|(o, a)| *o = a - 1.0)
        })],
        FamilyId::Categorical(k) => vec![Rule::new(vec![Parent(0, 0)], k, |x, o| o.copy_from_slice(x[0]))],
    }
}

/// Rule for the parent-moment expectation of the log-partition function.
pub(crate) fn expected_log_partition_rule(family: FamilyId) -> Rule {
    match family {
        FamilyId::Gaussian(d) => Rule::new(vec![Parent(1, 0), Parent(0, 1), Parent(1, 1)], 1, move |x, o| {
            o[0] = 0.5 * linalg::trace_prod(x[0], x[1], d) - 0.5 * x[2][0]
        }),
        FamilyId::Gamma => Rule::new(vec![Parent(0, 0), Parent(1, 1)], 1, |x, o| {
            let a = x[0][0];
            o[0] = ln_gamma(a) - a * x[1][0]
        }),
        FamilyId::Wishart(d) => Rule::new(vec![Parent(0, 0), Parent(1, 0)], 1, move |x, o| {
            let n = x[0][0];
            let log_det_v = SpdFactor::new(x[1], d).map(|f| f.log_det()).unwrap_or(f64::NAN);
            o[0] = 0.5 * n * d as f64 * LN_2 - 0.5 * n * log_det_v + ln_multigamma(0.5 * n, d)
        }),
        FamilyId::Dirichlet(_) => Rule::new(vec![Parent(0, 0)], 1, |x, o| o[0] = dirichlet_log_partition(x[0])),
        FamilyId::Categorical(_) => Rule::new(vec![], 1, |_, o| o[0] = 0.0),
    }
}

/// Rules for the child-to-parent message into `slot`, shaped like the
/// natural parameters of [`slot_parent_family`].
pub(crate) fn message_rules(family: FamilyId, slot: usize) -> Result<Vec<Rule>> {
    let rules = match (family, slot) {
        (FamilyId::Gaussian(d), 0) => vec![
            Rule::new(vec![Parent(1, 0), Child(0)], d, |x, o| linalg::mat_vec(x[0], x[1], o)),
            Rule::new(vec![Parent(1, 0)], d * d, |x, o| {
                o.iter_mut().zip(x[0]).for_each(|(o, l)| *o = -0.5 * l)
            }),
        ],
        (FamilyId::Gaussian(d), 1) => vec![
            Rule::new(
                vec![Child(0), Child(1), Parent(0, 0), Parent(0, 1)],
                d * d,
                move |x, o| {
                    let (xm, xx, m, mm) = (x[0], x[1], x[2], x[3]);
                    for i in 0..d {
                        for j in 0..d {
                            let k = i * d + j;
                            o[k] = -0.5 * (xx[k] - xm[i] * m[j] - m[i] * xm[j] + mm[k]);
                        }
                    }
                },
            ),
            Rule::new(vec![], 1, |_, o| o[0] = 0.5),
        ],
        (FamilyId::Gamma, 1) => vec![
            Rule::new(vec![Child(0)], 1, |x, o| o[0] = -x[0][0]),
            Rule::new(vec![Parent(0, 0)], 1, |x, o| o[0] = x[0][0]),
        ],
        (FamilyId::Categorical(k), 0) => vec![Rule::new(vec![Child(0)], k, |x, o| o.copy_from_slice(x[0]))],
        _ => {
            return Err(Error::SlotMismatch(format!(
                "{} slot {slot} takes a constant and receives no messages",
                family.name()
            )))
        }
    };
    Ok(rules)
}

/// Gamma moments (E[t], E[ln t]) read as isotropic precision `t I`.
pub(crate) fn gamma_as_precision(m: &[&[f64]], d: usize, out0: &mut [f64], out1: &mut [f64]) {
    out0.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..d {
        out0[i * d + i] = m[0][0];
    }
    out1[0] = d as f64 * m[1][0];
}

/// Fold a Wishart-shaped message into the Gamma parent of an isotropic
/// precision.
pub(crate) fn precision_message_to_gamma(msg: &[&[f64]], d: usize, out0: &mut [f64], out1: &mut [f64]) {
    out0[0] = linalg::trace(msg[0], d);
    out1[0] = d as f64 * msg[1][0];
}

// ---------------------------------------------------------------------------
// Posterior quantities
// ---------------------------------------------------------------------------

fn dirichlet_log_partition(alpha: &[f64]) -> f64 {
    alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>() - ln_gamma(alpha.iter().sum())
}

/// Covariance and log-determinant of the precision `-2 phi2`.
fn gaussian_cov(phi2: &[f64], d: usize) -> Result<(Vec<f64>, f64)> {
    let prec: Vec<f64> = phi2.iter().map(|v| -2.0 * v).collect();
    let f = SpdFactor::new(&prec, d).map_err(|e| match e {
        Error::Numerical(m) => Error::Numerical(format!("Gaussian precision: {m}")),
        other => other,
    })?;
    Ok((f.inverse(), f.log_det()))
}

fn check_natural(family: FamilyId, b: &[&[f64]]) -> Result<()> {
    if b.iter().any(|blk| blk.iter().any(|v| v.is_nan())) {
        return Err(Error::Numerical(format!(
            "{} natural parameters contain NaN",
            family.name()
        )));
    }
    match family {
        FamilyId::Gamma => {
            if !(b[0][0] < 0.0) || b[1][0] + 1.0 < MIN_ARGUMENT || !b[1][0].is_finite() {
                return Err(Error::Domain(format!(
                    "gamma needs rate > 0 and shape > 0, got rate {} shape {}",
                    -b[0][0],
                    b[1][0] + 1.0
                )));
            }
        }
        FamilyId::Wishart(d) => {
            let n = 2.0 * b[1][0] + d as f64 + 1.0;
            if !(n > d as f64 - 1.0) || !n.is_finite() {
                return Err(Error::Domain(format!(
                    "wishart degrees of freedom {n} must exceed {}",
                    d - 1
                )));
            }
        }
        FamilyId::Dirichlet(_) => {
            if b[0].iter().any(|&p| !(p + 1.0 >= MIN_ARGUMENT) || !p.is_finite()) {
                return Err(Error::Domain("dirichlet concentrations must be positive".into()));
            }
        }
        FamilyId::Categorical(_) => {
            if b[0].contains(&f64::INFINITY) || b[0].iter().all(|&v| v == f64::NEG_INFINITY) {
                return Err(Error::Domain(
                    "categorical log-probabilities must be finite or -inf".into(),
                ));
            }
        }
        FamilyId::Gaussian(_) => {
            if b[0].iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("gaussian natural parameters must be finite".into()));
            }
        }
    }
    Ok(())
}

/// Moments and log-partition of one distribution. The output buffer holds
/// the moment blocks back to back followed by A(phi).
fn posterior_element(family: FamilyId, b: &[&[f64]], out: &mut [f64]) -> Result<()> {
    check_natural(family, b)?;
    match family {
        FamilyId::Gaussian(d) => {
            let (cov, log_det) = gaussian_cov(b[1], d)?;
            gaussian_from_cov(b[0], &cov, log_det, d, out);
        }
        FamilyId::Gamma => {
            let (rate, shape) = (-b[0][0], b[1][0] + 1.0);
            out[0] = shape / rate;
            out[1] = digamma(shape) - rate.ln();
            out[2] = ln_gamma(shape) - shape * rate.ln();
        }
        FamilyId::Wishart(d) => {
            let v: Vec<f64> = b[0].iter().map(|x| -2.0 * x).collect();
            let f = SpdFactor::new(&v, d).map_err(|_| Error::Domain("wishart scale is not SPD".into()))?;
            let n = 2.0 * b[1][0] + d as f64 + 1.0;
            let log_det_v = f.log_det();
            for (o, vi) in out[..d * d].iter_mut().zip(f.inverse()) {
                *o = n * vi;
            }
            let df = d as f64;
            out[d * d] = multidigamma(0.5 * n, d) + df * LN_2 - log_det_v;
            out[d * d + 1] = 0.5 * n * df * LN_2 - 0.5 * n * log_det_v + ln_multigamma(0.5 * n, d);
        }
        FamilyId::Dirichlet(k) => {
            let alpha: Vec<f64> = b[0].iter().map(|p| p + 1.0).collect();
            let total: f64 = alpha.iter().sum();
            let psi_total = digamma(total);
            for (o, a) in out[..k].iter_mut().zip(&alpha) {
                *o = digamma(*a) - psi_total;
            }
            out[k] = dirichlet_log_partition(&alpha);
        }
        FamilyId::Categorical(k) => {
            let lse = log_sum_exp(b[0]);
            let mut total = 0.0;
            for (o, v) in out[..k].iter_mut().zip(b[0]) {
                *o = (v - lse).exp();
                total += *o;
            }
            // Renormalize so the simplex constraint holds to rounding.
            out[..k].iter_mut().for_each(|v| *v /= total);
            out[k] = lse;
        }
    }
    Ok(())
}

fn gaussian_from_cov(phi1: &[f64], cov: &[f64], log_det_prec: f64, d: usize, out: &mut [f64]) {
    let (mean, rest) = out.split_at_mut(d);
    linalg::mat_vec(cov, phi1, mean);
    let second = &mut rest[..d * d];
    for i in 0..d {
        for j in 0..d {
            second[i * d + j] = cov[i * d + j] + mean[i] * mean[j];
        }
    }
    rest[d * d] = 0.5 * linalg::dot(phi1, mean) - 0.5 * log_det_prec;
}

/// Moments and log-partition over plate fields. For Gaussians the
/// covariance is factored once per element of the precision block, so a
/// shared precision is factored once; that covariance field is returned
/// alongside.
pub(crate) fn posterior_fields(
    family: FamilyId,
    natural: &[Field],
    frame: &[usize],
    expand: bool,
) -> Result<(Vec<Field>, Field, Option<Field>)> {
    let sizes = family.block_sizes();
    let total: usize = sizes.iter().sum::<usize>() + 1;
    let mut err: Option<Error> = None;
    let mut covariance = None;
    let packed = match family {
        FamilyId::Gaussian(d) => {
            let aux = apply(&[&natural[1]], frame, frame, expand, d * d + 1, |x, o| {
                if err.is_some() {
                    return;
                }
                match gaussian_cov(x[0], d) {
                    Ok((cov, ld)) => {
                        o[..d * d].copy_from_slice(&cov);
                        o[d * d] = ld;
                    }
                    Err(e) => err = Some(e),
                }
            });
            if let Some(e) = err.take() {
                return Err(e);
            }
            if natural[0].data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("gaussian natural parameters must be finite".into()));
            }
            let packed = apply(&[&natural[0], &aux], frame, frame, expand, total, |x, o| {
                gaussian_from_cov(x[0], &x[1][..d * d], x[1][d * d], d, o)
            });
            covariance = split_event(&aux, &[d * d, 1]).into_iter().next();
            packed
        }
        _ => {
            let inputs: Vec<&Field> = natural.iter().collect();
            apply(&inputs, frame, frame, expand, total, |x, o| {
                if err.is_some() {
                    return;
                }
                if let Err(e) = posterior_element(family, x, o) {
                    err = Some(e);
                }
            })
        }
    };
    if let Some(e) = err {
        return Err(e);
    }
    let mut fields = split_event(&packed, &sizes.iter().cloned().chain([1]).collect::<Vec<_>>());
    let log_partition = fields.pop().expect("log-partition block");
    Ok((fields, log_partition, covariance))
}

/// Split a packed event into consecutive blocks.
pub(crate) fn split_event(f: &Field, sizes: &[usize]) -> Vec<Field> {
    let n = f.len();
    let mut outs: Vec<Vec<f64>> = sizes.iter().map(|s| Vec::with_capacity(s * n)).collect();
    for e in f.elements().take(n) {
        let mut off = 0;
        for (o, s) in outs.iter_mut().zip(sizes) {
            o.extend_from_slice(&e[off..off + s]);
            off += s;
        }
    }
    outs.into_iter()
        .zip(sizes)
        .map(|(d, &s)| Field::new(f.shape().to_vec(), s, d))
        .collect()
}

/// Dot product treating `0 * inf` as zero, so impossible categories with
/// zero weight do not poison the sum.
pub(crate) fn weighted_dot(phi: &[f64], u: &[f64]) -> f64 {
    phi.iter()
        .zip(u)
        .map(|(p, m)| if *m == 0.0 { 0.0 } else { p * m })
        .sum()
}

/// Log base measure of an observed value (constant per family).
pub fn log_base_measure(family: FamilyId) -> f64 {
    family.log_base_constant()
}

/// Sufficient statistics of a single observed value, written into `out`
/// (moment blocks back to back).
pub(crate) fn statistics_into(family: FamilyId, x: &[f64], out: &mut [f64]) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Support(format!("non-finite {} value", family.name())));
    }
    match family {
        FamilyId::Gaussian(d) => {
            out[..d].copy_from_slice(x);
            linalg::outer(x, x, &mut out[d..d + d * d]);
        }
        FamilyId::Gamma => {
            if x[0] <= 0.0 {
                return Err(Error::Support(format!("gamma value {} is not positive", x[0])));
            }
            out[0] = x[0];
            out[1] = x[0].ln();
        }
        FamilyId::Wishart(d) => {
            let f = SpdFactor::new(x, d).map_err(|_| Error::Support("wishart value is not SPD".into()))?;
            out[..d * d].copy_from_slice(x);
            out[d * d] = f.log_det();
        }
        FamilyId::Dirichlet(k) => {
            let total: f64 = x.iter().sum();
            if x.iter().any(|&p| p <= 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::Support("dirichlet value must lie in the open simplex".into()));
            }
            for (o, p) in out[..k].iter_mut().zip(x) {
                *o = p.ln();
            }
        }
        FamilyId::Categorical(k) => {
            out[..k].iter_mut().for_each(|v| *v = 0.0);
            if x.len() == 1 {
                let idx = x[0];
                if idx < 0.0 || idx.fract() != 0.0 || idx as usize >= k {
                    return Err(Error::Support(format!("category index {idx} outside 0..{k}")));
                }
                out[idx as usize] = 1.0;
            } else {
                let ones = x.iter().filter(|&&v| v == 1.0).count();
                let zeros = x.iter().filter(|&&v| v == 0.0).count();
                if x.len() != k || ones != 1 || zeros != k - 1 {
                    return Err(Error::Support("categorical value is not one-hot".into()));
                }
                out[..k].copy_from_slice(x);
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Per-distribution API
// ---------------------------------------------------------------------------

fn posterior_packed(phi: &NaturalParams) -> Result<Vec<f64>> {
    phi.family.validate()?;
    check_block_sizes(&phi.family.block_sizes(), &phi.blocks)?;
    let total = phi.family.block_sizes().iter().sum::<usize>() + 1;
    let mut out = vec![0.0; total];
    posterior_element(phi.family, &phi.views(), &mut out)?;
    Ok(out)
}

fn unpack(packed: &[f64], sizes: &[usize]) -> Vec<Vec<f64>> {
    let mut off = 0;
    sizes
        .iter()
        .map(|s| {
            let b = packed[off..off + s].to_vec();
            off += s;
            b
        })
        .collect()
}

/// A(phi).
pub fn log_partition(phi: &NaturalParams) -> Result<f64> {
    let packed = posterior_packed(phi)?;
    let a = *packed.last().expect("packed output");
    if !a.is_finite() {
        return Err(Error::Numerical(format!(
            "{} log-partition overflowed",
            phi.family.name()
        )));
    }
    Ok(a)
}

/// u = E[t(x)] = grad A(phi).
pub fn moments_from_natural(phi: &NaturalParams) -> Result<MomentVector> {
    let packed = posterior_packed(phi)?;
    Ok(MomentVector::new(
        phi.family.moment_kind(),
        unpack(&packed, &phi.family.block_sizes()),
    ))
}

/// Exact statistics t(x) of an observed value and its log base measure h(x).
pub fn statistics_of_value(family: FamilyId, x: &[f64]) -> Result<(MomentVector, f64)> {
    family.validate()?;
    let ok_len = x.len() == family.value_size() || matches!(family, FamilyId::Categorical(k) if x.len() == k);
    if !ok_len {
        return Err(Error::Shape(format!("{} value has {} entries", family.name(), x.len())));
    }
    let sizes = family.block_sizes();
    let mut out = vec![0.0; sizes.iter().sum()];
    statistics_into(family, x, &mut out)?;
    Ok((
        MomentVector::new(family.moment_kind(), unpack(&out, &sizes)),
        log_base_measure(family),
    ))
}

/// Resolve parent moment vectors into the block layout each slot expects.
fn slot_inputs(family: FamilyId, parents: &[MomentVector]) -> Result<Vec<Vec<Vec<f64>>>> {
    let slots = family.slots();
    if parents.len() != slots.len() {
        return Err(Error::SlotMismatch(format!(
            "{} takes {} parents, got {}",
            family.name(),
            slots.len(),
            parents.len()
        )));
    }
    slots
        .iter()
        .zip(parents)
        .enumerate()
        .map(|(i, (slot, m))| {
            if !slot.accepts(&m.kind) {
                return Err(Error::SlotMismatch(format!(
                    "{} slot {i} expects {slot:?}, got {:?}",
                    family.name(),
                    m.kind
                )));
            }
            match (&m.kind, slot) {
                (MomentKind::Fixed(shape), _) => slot.constant_moments(&m.blocks[0], shape),
                (MomentKind::Gamma, SlotKind::Precision(d)) => {
                    let views: Vec<&[f64]> = m.blocks.iter().map(|b| b.as_slice()).collect();
                    let mut b0 = vec![0.0; d * d];
                    let mut b1 = vec![0.0];
                    gamma_as_precision(&views, *d, &mut b0, &mut b1);
                    Ok(vec![b0, b1])
                }
                _ => {
                    check_block_sizes(&slot.block_sizes(), &m.blocks)?;
                    Ok(m.blocks.clone())
                }
            }
        })
        .collect()
}

/// Expected natural parameters given independent parent moments.
pub fn natural_from_parent_moments(family: FamilyId, parents: &[MomentVector]) -> Result<NaturalParams> {
    family.validate()?;
    let inputs = slot_inputs(family, parents)?;
    let views: Vec<Vec<&[f64]>> = inputs
        .iter()
        .map(|s| s.iter().map(|b| b.as_slice()).collect())
        .collect();
    let blocks = prior_rules(family).iter().map(|r| r.eval(&[], &views)).collect();
    Ok(NaturalParams { family, blocks })
}

/// Parent-moment expectation of the log-partition of the child's
/// conditional density.
pub fn expected_log_partition(family: FamilyId, parents: &[MomentVector]) -> Result<f64> {
    family.validate()?;
    let inputs = slot_inputs(family, parents)?;
    let views: Vec<Vec<&[f64]>> = inputs
        .iter()
        .map(|s| s.iter().map(|b| b.as_slice()).collect())
        .collect();
    Ok(expected_log_partition_rule(family).eval(&[], &views)[0])
}

/// Child-to-parent message for `slot`. `coparents` lists the moments of
/// every slot in order; the entry at `slot` itself is ignored and may be any
/// placeholder.
pub fn message_to_parent(
    family: FamilyId,
    slot: usize,
    child: &MomentVector,
    coparents: &[MomentVector],
) -> Result<Message> {
    family.validate()?;
    let slots = family.slots();
    let slot_kind = *slots
        .get(slot)
        .ok_or_else(|| Error::SlotMismatch(format!("{} has no slot {slot}", family.name())))?;
    let target = slot_parent_family(slot_kind)
        .ok_or_else(|| Error::SlotMismatch(format!("{} slot {slot} is fixed", family.name())))?;
    if child.kind != family.moment_kind() && !matches!(child.kind, MomentKind::Fixed(_)) {
        return Err(Error::SlotMismatch(format!(
            "child moments {:?} are not {}",
            child.kind,
            family.name()
        )));
    }
    check_block_sizes(&family.block_sizes(), &child.blocks)?;
    // The target slot's own moments are never read by its message rules.
    let mut filled: Vec<MomentVector> = coparents.to_vec();
    if filled.len() != slots.len() {
        return Err(Error::SlotMismatch(format!(
            "expected {} co-parent entries",
            slots.len()
        )));
    }
    filled[slot] = placeholder_moments(slot_kind);
    let inputs = slot_inputs(family, &filled)?;
    let views: Vec<Vec<&[f64]>> = inputs
        .iter()
        .map(|s| s.iter().map(|b| b.as_slice()).collect())
        .collect();
    let child_views: Vec<&[f64]> = child.blocks.iter().map(|b| b.as_slice()).collect();
    let blocks = message_rules(family, slot)?
        .iter()
        .map(|r| r.eval(&child_views, &views))
        .collect();
    Ok(Message { family: target, blocks })
}

fn placeholder_moments(slot: SlotKind) -> MomentVector {
    let kind = match slot {
        SlotKind::Mean(d) => MomentKind::Gaussian(d),
        SlotKind::Precision(d) => MomentKind::Wishart(d),
        SlotKind::Rate => MomentKind::Gamma,
        SlotKind::Probabilities(k) => MomentKind::Dirichlet(k),
        SlotKind::FixedScalar => MomentKind::Fixed(vec![]),
        SlotKind::FixedVector(k) => MomentKind::Fixed(vec![k]),
        SlotKind::FixedMatrix(d) => MomentKind::Fixed(vec![d, d]),
    };
    MomentVector::new(kind, slot.block_sizes().iter().map(|&s| vec![0.0; s]).collect())
}

/// E_q[log p(x | parents)] = phi . u - E[A] + E[h].
pub fn expected_log_pdf(
    phi_from_parents: &NaturalParams,
    child: &MomentVector,
    expected_log_partition: f64,
    expected_log_base: f64,
) -> Result<f64> {
    check_block_sizes(&phi_from_parents.family.block_sizes(), &child.blocks)?;
    let dot: f64 = phi_from_parents
        .blocks
        .iter()
        .zip(&child.blocks)
        .map(|(p, u)| weighted_dot(p, u))
        .sum();
    let v = dot - expected_log_partition + expected_log_base;
    if !v.is_finite() {
        return Err(Error::Numerical(format!("expected log density is {v}")));
    }
    Ok(v)
}

/// Differential (or discrete) entropy -E_q[log q].
pub fn entropy(phi: &NaturalParams, u: &MomentVector) -> Result<f64> {
    check_block_sizes(&phi.family.block_sizes(), &u.blocks)?;
    let a = log_partition(phi)?;
    let dot: f64 = phi.blocks.iter().zip(&u.blocks).map(|(p, m)| weighted_dot(p, m)).sum();
    let h = a - dot - log_base_measure(phi.family);
    if !h.is_finite() {
        return Err(Error::Numerical(format!("entropy is {h}")));
    }
    // A one-hot categorical can come out as -0.0.
    Ok(h + 0.0)
}

/// Draw one value, deterministically for a given seed.
pub fn draw_sample(phi: &NaturalParams, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_with(phi, &mut rng)
}

/// Draw one value using the caller's generator.
pub fn draw_with<R: Rng + ?Sized>(phi: &NaturalParams, rng: &mut R) -> Result<Vec<f64>> {
    phi.family.validate()?;
    check_block_sizes(&phi.family.block_sizes(), &phi.blocks)?;
    check_natural(phi.family, &phi.views())?;
    match phi.family {
        FamilyId::Gaussian(d) => {
            let (cov, _) = gaussian_cov(&phi.blocks[1], d)?;
            let mut mean = vec![0.0; d];
            linalg::mat_vec(&cov, &phi.blocks[0], &mut mean);
            let l = SpdFactor::new(&cov, d)?.lower();
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            Ok((0..d)
                .map(|i| mean[i] + (0..=i).map(|j| l[i * d + j] * z[j]).sum::<f64>())
                .collect())
        }
        FamilyId::Gamma => {
            let (rate, shape) = (-phi.blocks[0][0], phi.blocks[1][0] + 1.0);
            let g = GammaDist::new(shape, 1.0 / rate).map_err(|e| Error::Domain(e.to_string()))?;
            // Tiny shapes can underflow to exactly zero.
            Ok(vec![g.sample(rng).max(f64::MIN_POSITIVE)])
        }
        FamilyId::Wishart(d) => {
            let v: Vec<f64> = phi.blocks[0].iter().map(|x| -2.0 * x).collect();
            let n = 2.0 * phi.blocks[1][0] + d as f64 + 1.0;
            let scale = SpdFactor::new(&v, d)?.inverse();
            let c = SpdFactor::new(&scale, d)?.lower();
            // Bartlett decomposition.
            let mut a = vec![0.0; d * d];
            for i in 0..d {
                let chi = ChiSquared::new(n - i as f64).map_err(|e| Error::Domain(e.to_string()))?;
                a[i * d + i] = chi.sample(rng).sqrt();
                for j in 0..i {
                    a[i * d + j] = rng.sample(StandardNormal);
                }
            }
            let mut ca = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    ca[i * d + j] = (0..d).map(|k| c[i * d + k] * a[k * d + j]).sum();
                }
            }
            let mut out = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    out[i * d + j] = (0..d).map(|k| ca[i * d + k] * ca[j * d + k]).sum();
                }
            }
            Ok(out)
        }
        FamilyId::Dirichlet(k) => {
            // Log-space gamma draws: G(a) = G(a + 1) U^(1/a) avoids underflow
            // for concentrations far below one.
            let mut logs = Vec::with_capacity(k);
            for &p in &phi.blocks[0] {
                let a = p + 1.0;
                let g = GammaDist::new(a + 1.0, 1.0).map_err(|e| Error::Domain(e.to_string()))?;
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                logs.push(g.sample(rng).ln() + u.ln() / a);
            }
            let lse = log_sum_exp(&logs);
            Ok(logs.iter().map(|l| (l - lse).exp()).collect())
        }
        FamilyId::Categorical(k) => {
            let lse = log_sum_exp(&phi.blocks[0]);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, v) in phi.blocks[0].iter().enumerate() {
                acc += (v - lse).exp();
                if u < acc {
                    return Ok(vec![i as f64]);
                }
            }
            // Rounding left u above the final cumulative sum.
            let last = (0..k)
                .rev()
                .find(|&i| phi.blocks[0][i] > f64::NEG_INFINITY)
                .unwrap_or(k - 1);
            Ok(vec![last as f64])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn log_partition_examples() {
        let g = NaturalParams::gaussian(&[0.0, 0.0], &linalg::identity(2));
        assert!(log_partition(&g).unwrap().abs() < 1e-15);
        let gam = NaturalParams::gamma(1.0, 1.0);
        assert!(log_partition(&gam).unwrap().abs() < 1e-15);
        let dir = NaturalParams::new(FamilyId::Dirichlet(3), vec![vec![0.0; 3]]).unwrap();
        assert!(close(log_partition(&dir).unwrap(), -std::f64::consts::LN_2, 1e-14));
    }

    #[test]
    fn log_partition_rejects_invalid() {
        let bad = NaturalParams::new(FamilyId::Gaussian(2), vec![vec![0.0; 2], vec![0.5, 0.0, 0.0, 0.5]]).unwrap();
        assert!(matches!(log_partition(&bad), Err(Error::Numerical(_))));
        let bad_gamma = NaturalParams::gamma(1.0, -1.0);
        assert!(matches!(log_partition(&bad_gamma), Err(Error::Domain(_))));
        let bad_dir = NaturalParams::dirichlet(&[1.0, 0.0]);
        assert!(matches!(log_partition(&bad_dir), Err(Error::Domain(_))));
    }

    #[test]
    fn moment_examples() {
        let g = NaturalParams::gaussian(&[0.0, 0.0], &linalg::identity(2));
        let m = moments_from_natural(&g).unwrap();
        assert_eq!(m.blocks[0], vec![0.0, 0.0]);
        assert_eq!(m.blocks[1], linalg::identity(2));

        let dir = NaturalParams::dirichlet(&[1.0, 1.0, 1.0]);
        for v in &moments_from_natural(&dir).unwrap().blocks[0] {
            assert!(close(*v, -1.5, 1e-14));
        }

        let gam = moments_from_natural(&NaturalParams::gamma(1.0, 1.0)).unwrap();
        assert!(close(gam.blocks[0][0], 1.0, 1e-15));
        assert!(close(gam.blocks[1][0], -EULER_GAMMA, 1e-14));
    }

    #[test]
    fn gamma_log_moment_matches_monte_carlo() {
        // E[ln x] for Gamma(1, 1) by sampling, independent of digamma.
        let phi = NaturalParams::gamma(1.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000_000;
        let mean: f64 = (0..n).map(|_| draw_with(&phi, &mut rng).unwrap()[0].ln()).sum::<f64>() / n as f64;
        let want = moments_from_natural(&phi).unwrap().blocks[1][0];
        assert!((mean - want).abs() < 1e-3, "{mean} vs {want}");
    }

    #[test]
    fn statistics_examples() {
        let (m, h) = statistics_of_value(FamilyId::Categorical(5), &[1.0]).unwrap();
        assert_eq!(m.blocks[0], vec![0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(h, 0.0);
        let (m, h) = statistics_of_value(FamilyId::Gaussian(2), &[2.0, 2.0]).unwrap();
        assert_eq!(m.blocks[1], vec![4.0, 4.0, 4.0, 4.0]);
        assert!(close(h, -(2.0 * PI).ln(), 1e-15));
        assert!(matches!(
            statistics_of_value(FamilyId::Gamma, &[0.0]),
            Err(Error::Support(_))
        ));
        assert!(matches!(
            statistics_of_value(FamilyId::Categorical(5), &[5.0]),
            Err(Error::Support(_))
        ));
    }

    #[test]
    fn observed_gaussian_has_zero_variance() {
        let (m, _) = statistics_of_value(FamilyId::Gaussian(3), &[0.3, -1.7, 2.2]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.blocks[1][i * 3 + j] - m.blocks[0][i] * m.blocks[0][j], 0.0);
            }
        }
    }

    fn fixed(v: Vec<f64>, shape: Vec<usize>) -> MomentVector {
        MomentVector::fixed(v, shape)
    }

    #[test]
    fn natural_from_parents_examples() {
        // Mean parent with zero mean, precision parent with E[Lambda] = I.
        let mean = MomentVector::new(MomentKind::Gaussian(2), vec![vec![0.0; 2], vec![0.3, 0.0, 0.0, 0.3]]);
        let prec = MomentVector::new(MomentKind::Wishart(2), vec![linalg::identity(2), vec![0.0]]);
        let phi = natural_from_parent_moments(FamilyId::Gaussian(2), &[mean, prec]).unwrap();
        assert_eq!(phi.blocks[0], vec![0.0, 0.0]);
        assert_eq!(phi.blocks[1], vec![-0.5, 0.0, 0.0, -0.5]);

        let dir = moments_from_natural(&NaturalParams::dirichlet(&[1.0; 3])).unwrap();
        let phi = natural_from_parent_moments(FamilyId::Categorical(3), &[dir]).unwrap();
        phi.blocks[0].iter().for_each(|v| assert!(close(*v, -1.5, 1e-14)));

        let phi = natural_from_parent_moments(
            FamilyId::Gaussian(2),
            &[fixed(vec![2.0, 2.0], vec![2]), fixed(linalg::identity(2), vec![2, 2])],
        )
        .unwrap();
        assert_eq!(phi.blocks[0], vec![2.0, 2.0]);
        assert_eq!(phi.blocks[1], vec![-0.5, 0.0, 0.0, -0.5]);
    }

    #[test]
    fn slot_mismatch_is_reported() {
        let gamma = moments_from_natural(&NaturalParams::gamma(2.0, 1.0)).unwrap();
        let prec = fixed(linalg::identity(2), vec![2, 2]);
        let err = natural_from_parent_moments(FamilyId::Gaussian(2), &[gamma, prec]);
        assert!(matches!(err, Err(Error::SlotMismatch(_))));
    }

    #[test]
    fn categorical_to_dirichlet_message_is_one_hot() {
        let (z, _) = statistics_of_value(FamilyId::Categorical(5), &[1.0]).unwrap();
        let p = moments_from_natural(&NaturalParams::dirichlet(&[1.0; 5])).unwrap();
        let msg = message_to_parent(FamilyId::Categorical(5), 0, &z, &[p]).unwrap();
        assert_eq!(msg.family, FamilyId::Dirichlet(5));
        assert_eq!(msg.blocks[0], vec![0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gaussian_to_mean_message() {
        let (y, _) = statistics_of_value(FamilyId::Gaussian(2), &[1.5, -0.5]).unwrap();
        let prec = MomentVector::new(MomentKind::Wishart(2), vec![linalg::identity(2), vec![0.0]]);
        let msg = message_to_parent(
            FamilyId::Gaussian(2),
            0,
            &y,
            &[placeholder_moments(SlotKind::Mean(2)), prec],
        )
        .unwrap();
        assert_eq!(msg.blocks[0], vec![1.5, -0.5]);
        assert_eq!(msg.blocks[1], vec![-0.5, 0.0, 0.0, -0.5]);
    }

    #[test]
    fn precision_message_folds_to_gamma() {
        let (y, _) = statistics_of_value(FamilyId::Gaussian(2), &[1.0, 2.0]).unwrap();
        let mean = fixed(vec![0.0, 0.0], vec![2]);
        let msg = message_to_parent(
            FamilyId::Gaussian(2),
            1,
            &y,
            &[mean, placeholder_moments(SlotKind::Precision(2))],
        )
        .unwrap();
        let views: Vec<&[f64]> = msg.blocks.iter().map(|b| b.as_slice()).collect();
        let (mut g0, mut g1) = ([0.0], [0.0]);
        precision_message_to_gamma(&views, 2, &mut g0, &mut g1);
        // -1/2 |y|^2 and d/2
        assert_eq!(g0[0], -2.5);
        assert_eq!(g1[0], 1.0);
    }

    #[test]
    fn expected_log_pdf_examples() {
        let phi = NaturalParams::gaussian(&[0.0], &[1.0]);
        let (x, h) = statistics_of_value(FamilyId::Gaussian(1), &[0.0]).unwrap();
        let v = expected_log_pdf(&phi, &x, 0.0, h).unwrap();
        assert!(close(v, -0.5 * (2.0 * PI).ln(), 1e-15));

        let cat = NaturalParams::new(FamilyId::Categorical(3), vec![vec![-1.5; 3]]).unwrap();
        let (z, _) = statistics_of_value(FamilyId::Categorical(3), &[0.0]).unwrap();
        assert_eq!(expected_log_pdf(&cat, &z, 0.0, 0.0).unwrap(), -1.5);

        let dead = NaturalParams::new(FamilyId::Categorical(3), vec![vec![f64::NEG_INFINITY, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            expected_log_pdf(&dead, &z, 0.0, 0.0),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn entropy_examples() {
        let g = NaturalParams::gaussian(&[0.3], &[1.0]);
        let u = moments_from_natural(&g).unwrap();
        let want = 0.5 * (2.0 * PI * std::f64::consts::E).ln();
        assert!(close(entropy(&g, &u).unwrap(), want, 1e-14));

        let c = NaturalParams::new(FamilyId::Categorical(4), vec![vec![0.0; 4]]).unwrap();
        let u = moments_from_natural(&c).unwrap();
        assert!(close(entropy(&c, &u).unwrap(), 4f64.ln(), 1e-14));

        let one_hot = NaturalParams::categorical_from_probs(&[0.0, 1.0, 0.0]);
        let u = moments_from_natural(&one_hot).unwrap();
        assert_eq!(entropy(&one_hot, &u).unwrap(), 0.0);
    }

    #[test]
    fn sampling_is_deterministic() {
        let g = NaturalParams::gaussian(&[1.0, -1.0], &[2.0, 0.3, 0.3, 1.0]);
        assert_eq!(draw_sample(&g, 5).unwrap(), draw_sample(&g, 5).unwrap());
        let c = NaturalParams::categorical_from_probs(&[1.0, 0.0, 0.0]);
        for seed in 0..50 {
            assert_eq!(draw_sample(&c, seed).unwrap(), vec![0.0]);
        }
        let d = NaturalParams::dirichlet(&[0.01; 5]);
        for seed in 0..20 {
            let p = draw_sample(&d, seed).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn wishart_sample_mean() {
        // n = 2, V = 2I: E[Lambda] = n V^-1 = I.
        let w = NaturalParams::wishart(2.0, &[2.0, 0.0, 0.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000;
        let mut acc = [0.0; 4];
        for _ in 0..n {
            let s = draw_with(&w, &mut rng).unwrap();
            acc.iter_mut().zip(&s).for_each(|(a, v)| *a += v);
        }
        let mean: Vec<f64> = acc.iter().map(|a| a / n as f64).collect();
        let want = moments_from_natural(&w).unwrap().blocks[0].clone();
        for (m, w) in mean.iter().zip(&want) {
            assert!((m - w).abs() < 5e-3, "{mean:?}");
        }
    }

    #[test]
    fn categorical_moments_normalized() {
        let c = NaturalParams::new(FamilyId::Categorical(4), vec![vec![700.0, -700.0, 3.0, 699.0]]).unwrap();
        let u = moments_from_natural(&c).unwrap();
        assert!((u.blocks[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
