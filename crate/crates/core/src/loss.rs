//! Temporal cross-correlation objectives.
//!
//! Embeddings from the two augmented views are compared through a
//! batch-normalized (uncentered) cross-correlation matrix. The three loss
//! modes differ only in which (path, timestep) pairs they sum over:
//! all distinct pairs (cross-temporal), first/last timesteps only
//! (boundary), or matched timesteps across paths (non-cross).

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Precision, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathId {
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// All distinct (path, timestep) pairs: T(2T-1) terms.
    CrossTemporal,
    /// Pairs among first and last timesteps of both paths: 6 terms (1 at T=1).
    Boundary,
    /// Matched timesteps across paths: T terms.
    NonCross,
}

impl LossMode {
    pub fn parse(s: &str) -> Result<LossMode> {
        match s {
            "ctl" | "cross" | "cross_temporal" => Ok(LossMode::CrossTemporal),
            "btl" | "boundary" | "boundary_temporal" => Ok(LossMode::Boundary),
            "ncl" | "non_cross" | "non_cross_temporal" => Ok(LossMode::NonCross),
            _ => Err(Error::Invalid(format!("unknown loss mode `{s}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossMode::CrossTemporal => "ctl",
            LossMode::Boundary => "btl",
            LossMode::NonCross => "ncl",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Off-diagonal trade-off weight.
    pub lambda: f64,
    /// Guard added to correlation denominators so dead (all-zero) feature
    /// columns yield zero correlation rows instead of an error.
    pub epsilon_norm: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { mode: LossMode::Boundary, lambda: 0.005, epsilon_norm: 1e-12 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda <= 0.0 {
            return Err(Error::Invalid(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if self.epsilon_norm <= 0.0 {
            return Err(Error::Invalid(format!(
                "epsilon_norm must be > 0, got {}",
                self.epsilon_norm
            )));
        }
        Ok(())
    }
}

/// One endpoint of a correlation pair: (path, 0-based timestep).
pub type PairKey = (PathId, usize);

/// The enumerated multiset of unordered embedding pairs for a loss mode.
#[derive(Clone, Debug)]
pub struct PairSet {
    pub mode: LossMode,
    pub pairs: Vec<(PairKey, PairKey)>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Enumerate the unordered distinct pairs a loss mode sums over.
pub fn enumerate_pairs(timesteps: usize, mode: LossMode) -> Result<PairSet> {
    if timesteps < 1 {
        return Err(Error::Invalid("pair enumeration needs at least one timestep".into()));
    }
    let t = timesteps;
    let pairs = match mode {
        LossMode::CrossTemporal => {
            let mut elements = Vec::with_capacity(2 * t);
            for step in 0..t {
                elements.push((PathId::A, step));
            }
            for step in 0..t {
                elements.push((PathId::B, step));
            }
            all_distinct_pairs(&elements)
        }
        LossMode::Boundary => {
            let elements: Vec<PairKey> = if t == 1 {
                vec![(PathId::A, 0), (PathId::B, 0)]
            } else {
                vec![(PathId::A, 0), (PathId::A, t - 1), (PathId::B, 0), (PathId::B, t - 1)]
            };
            all_distinct_pairs(&elements)
        }
        LossMode::NonCross => (0..t).map(|s| ((PathId::A, s), (PathId::B, s))).collect(),
    };
    Ok(PairSet { mode, pairs })
}

fn all_distinct_pairs(elements: &[PairKey]) -> Vec<(PairKey, PairKey)> {
    let mut pairs = Vec::with_capacity(elements.len() * (elements.len() - 1) / 2);
    for i in 0..elements.len() {
        for j in i + 1..elements.len() {
            pairs.push((elements[i], elements[j]));
        }
    }
    pairs
}

/// Loss-mode prefactor applied to the summed pair terms. At T=1 every mode
/// degenerates to the single A/B pair with weight 1, so the three losses
/// coincide there.
fn prefactor(timesteps: usize, mode: LossMode) -> f64 {
    match mode {
        LossMode::CrossTemporal | LossMode::NonCross => 1.0 / timesteps as f64,
        LossMode::Boundary => {
            if timesteps == 1 {
                1.0
            } else {
                0.5
            }
        }
    }
}

// ----------------------------------------------------------- tape graph

/// Batch-normalized cross-correlation matrix between two (B, D) embedding
/// matrices, recorded on the tape:
/// `C_ij = sum_b z1[b,i] z2[b,j] / (sqrt(sum_b z1[b,i]^2) sqrt(sum_b z2[b,j]^2) + eps)`.
/// Columns are not mean-centered.
pub fn cross_correlation_on(tape: &mut Tape, z1: Var, z2: Var, epsilon_norm: f64) -> Result<Var> {
    let s1 = tape.value(z1).shape().to_vec();
    let s2 = tape.value(z2).shape().to_vec();
    if s1.len() != 2 || s1 != s2 {
        return Err(Error::Shape(format!(
            "cross-correlation expects matching (batch, dim) matrices, got {s1:?} and {s2:?}"
        )));
    }
    let d = s1[1];
    let numer = tape.matmul_t(z1, z2, true, false)?;
    let sq1 = tape.square(z1)?;
    let sq2 = tape.square(z2)?;
    let ss1 = tape.sum_axis(sq1, 0)?;
    let ss2 = tape.sum_axis(sq2, 0)?;
    let n1 = tape.sqrt(ss1)?;
    let n2 = tape.sqrt(ss2)?;
    let col = tape.reshape(n1, vec![d, 1])?;
    let row = tape.reshape(n2, vec![1, d])?;
    let outer = tape.matmul(col, row)?;
    let denom = tape.affine(outer, 1.0, epsilon_norm)?;
    tape.div(numer, denom)
}

/// Redundancy-reduction term on a correlation matrix:
/// `sum_i (1 - C_ii^2) + lambda * sum_{i != j} C_ij^2`.
/// The squared diagonal makes the term invariant to a global sign flip.
pub fn barlow_term_on(tape: &mut Tape, c: Var, lambda: f64) -> Result<Var> {
    let shape = tape.value(c).shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Shape(format!("correlation matrix must be square, got {shape:?}")));
    }
    let d = shape[0];
    let csq = tape.square(c)?;
    let total = tape.sum(csq)?;
    let eye = tape.constant(Tensor::eye(d));
    let diag_only = tape.mul(csq, eye)?;
    let diag_sum = tape.sum(diag_only)?;
    let invariance = tape.affine(diag_sum, -1.0, d as f64)?;
    let off_sum = tape.sub(total, diag_sum)?;
    let redundancy = tape.scale(off_sum, lambda)?;
    tape.add(invariance, redundancy)
}

/// Scalar loss value plus the number of correlation terms evaluated.
pub struct LossOutput {
    pub value: Var,
    pub pairs_evaluated: usize,
}

/// The selected temporal loss over two embedding sequences, recorded on the
/// tape. `z_a` and `z_b` hold one (B, D) matrix per timestep.
pub fn temporal_loss_on(
    tape: &mut Tape,
    z_a: &[Var],
    z_b: &[Var],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    if z_a.is_empty() || z_a.len() != z_b.len() {
        return Err(Error::Invalid(format!(
            "embedding sequences must be non-empty and equal length, got {} and {}",
            z_a.len(),
            z_b.len()
        )));
    }
    let t = z_a.len();
    let select = |key: PairKey| -> Var {
        match key.0 {
            PathId::A => z_a[key.1],
            PathId::B => z_b[key.1],
        }
    };
    let pair_set = enumerate_pairs(t, cfg.mode)?;
    let mut evaluated = 0usize;
    let mut acc: Option<Var> = None;
    for (p, q) in &pair_set.pairs {
        let c = cross_correlation_on(tape, select(*p), select(*q), cfg.epsilon_norm)?;
        let term = barlow_term_on(tape, c, cfg.lambda)?;
        evaluated += 1;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, term)?,
            None => term,
        });
    }
    let total = acc.expect("pair set is never empty for t >= 1");
    let value = tape.scale(total, prefactor(t, cfg.mode))?;
    Ok(LossOutput { value, pairs_evaluated: evaluated })
}

// ---------------------------------------------------------- raw wrappers

/// Cross-correlation matrix as a plain tensor (scratch tape, full width).
pub fn cross_correlation(z1: &Tensor, z2: &Tensor, epsilon_norm: f64) -> Result<Tensor> {
    let mut tape = Tape::new(Precision::F64);
    let a = tape.constant(z1.clone());
    let b = tape.constant(z2.clone());
    let c = cross_correlation_on(&mut tape, a, b, epsilon_norm)?;
    Ok(tape.value(c).clone())
}

/// Redundancy-reduction term of a correlation matrix as a plain value.
pub fn barlow_term(c: &Tensor, lambda: f64) -> Result<f64> {
    let mut tape = Tape::new(Precision::F64);
    let cv = tape.constant(c.clone());
    let term = barlow_term_on(&mut tape, cv, lambda)?;
    Ok(tape.value(term).item())
}

/// Temporal loss value over raw embedding sequences. Returns the value and
/// the number of correlation terms evaluated.
pub fn temporal_loss_value(z_a: &[Tensor], z_b: &[Tensor], cfg: &LossConfig) -> Result<(f64, usize)> {
    let mut tape = Tape::new(Precision::F64);
    let va: Vec<Var> = z_a.iter().map(|z| tape.constant(z.clone())).collect();
    let vb: Vec<Var> = z_b.iter().map(|z| tape.constant(z.clone())).collect();
    let out = temporal_loss_on(&mut tape, &va, &vb, cfg)?;
    Ok((tape.value(out.value).item(), out.pairs_evaluated))
}
