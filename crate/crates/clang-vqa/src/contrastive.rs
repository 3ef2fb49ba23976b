//! Language-graph contrastive objectives.
//!
//! InfoNCE pulls each question embedding toward its own graph embedding
//! against every mismatched cross-modal pair in the batch; the KL term
//! aligns the two within-modality similarity distributions.

use crate::autodiff::{Real, Tape, Var};
use crate::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.1;
/// Keeps logs of renormalized similarity rows finite.
const KL_LOG_EPS: f64 = 1e-12;
/// Floor on similarity-row mass; rows otherwise normalize exactly so the
/// divergence cannot drift below zero.
const ROW_MASS_FLOOR: f64 = 1e-30;

/// InfoNCE from a precomputed cross-modal similarity matrix sim(q_i, g_j).
///
/// All K = n^2 - n mismatched pairs share every anchor's denominator, so
/// the loss is exactly mean_i -log( e_ii / (e_ii + sum_{j!=k} e_jk) ).
pub fn info_nce_from_sim<F: Real>(tape: &mut Tape<F>, sim: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::Contract(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let (n, n2) = tape.shape(sim);
    if n != n2 {
        return Err(Error::dim("info_nce", format!("{n}x{n2}"), "square"));
    }
    let logits = tape.scale(sim, F::from_f64(1.0 / tau));
    // detached max shift; the loss is shift-invariant so gradients are too
    let mut mx = f64::NEG_INFINITY;
    for &v in tape.value(logits) {
        mx = mx.max(v.to_f64());
    }
    let shifted = tape.add_scalar(logits, F::from_f64(-mx));
    let e = tape.exp(shifted);
    let pos = tape.diag(e)?;
    let total = tape.sum_all(e);
    let pos_mass = tape.sum_all(pos);
    let off_mass = tape.sub(total, pos_mass)?;
    let off_rows = tape.broadcast_row(off_mass, n)?;
    let den = tape.add(pos, off_rows)?;
    let ratio = tape.div(pos, den)?;
    let lr = tape.ln(ratio);
    let m = tape.mean_all(lr);
    Ok(tape.scale(m, -F::ONE))
}

/// InfoNCE over a batch of question rows Q and graph rows G (positive
/// pairs share the row index). Similarity is cosine.
pub fn info_nce<F: Real>(tape: &mut Tape<F>, q: Var, g: Var, tau: f64) -> Result<Var> {
    let sim = tape.pairwise_cosine(q, g)?;
    info_nce_from_sim(tape, sim, tau)
}

/// Mean over rows of KL(p_g || p_q) for two row-stochastic matrices.
/// Zero entries contribute zero mass; the tiny floor only keeps the logs
/// finite there.
pub fn kl_rows<F: Real>(tape: &mut Tape<F>, p_g: Var, p_q: Var) -> Result<Var> {
    let (n, k) = tape.shape(p_g);
    let (n2, k2) = tape.shape(p_q);
    if n != n2 || k != k2 {
        return Err(Error::dim(
            "kl_rows",
            format!("{n}x{k}"),
            format!("{n2}x{k2}"),
        ));
    }
    let eps = F::from_f64(KL_LOG_EPS);
    let g_safe = tape.add_scalar(p_g, eps);
    let q_safe = tape.add_scalar(p_q, eps);
    let lg = tape.ln(g_safe);
    let lq = tape.ln(q_safe);
    let diff = tape.sub(lg, lq)?;
    let weighted = tape.mul(p_g, diff)?;
    let total = tape.sum_all(weighted);
    Ok(tape.scale(total, F::from_f64(1.0 / n as f64)))
}

/// Within-modality similarity rows, mapped to [0,1], diagonal removed,
/// renormalized.
fn similarity_distribution<F: Real>(tape: &mut Tape<F>, x: Var) -> Result<Var> {
    let (n, _) = tape.shape(x);
    let sim = tape.pairwise_cosine(x, x)?;
    let shifted = tape.add_scalar(sim, F::ONE);
    let mapped = tape.scale(shifted, F::from_f64(0.5));
    let mut mask = vec![F::ONE; n * n];
    for i in 0..n {
        mask[i * n + i] = F::ZERO;
    }
    let mask = tape.constant(n, n, mask);
    let off = tape.mul(mapped, mask)?;
    let mass = tape.row_sum(off);
    let mass = tape.clamp(mass, F::from_f64(ROW_MASS_FLOOR), F::from_f64(1e30));
    let mass = tape.broadcast_col(mass, n)?;
    tape.div(off, mass)
}

/// KL alignment of the graph-side and question-side similarity
/// distributions.
pub fn kl_match<F: Real>(tape: &mut Tape<F>, q: Var, g: Var) -> Result<Var> {
    let (n, _) = tape.shape(q);
    if n < 2 {
        return Err(Error::Contract(format!(
            "kl_match needs at least two rows, got {n}"
        )));
    }
    let p_q = similarity_distribution(tape, q)?;
    let p_g = similarity_distribution(tape, g)?;
    kl_rows(tape, p_g, p_q)
}
