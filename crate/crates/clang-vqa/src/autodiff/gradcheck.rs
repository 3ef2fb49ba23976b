//! Central-difference gradient verification for f64 tapes.
//!
//! The builder closure records the loss on a fresh tape each call, so the
//! same computation is replayed for the analytic sweep and for every
//! perturbed forward evaluation.

use super::{ParamRef, Tape, Var};
use crate::Result;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Coordinates compared.
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub worst_coord: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// Compare analytic gradients against central differences on sampled
/// coordinates of each parameter. `coords_per_param` caps how many entries
/// of each tensor are perturbed; the rest are trusted by linearity.
pub fn check<B>(
    params: &[ParamRef<f64>],
    mut loss_of: B,
    coords_per_param: usize,
    seed: u64,
) -> Result<GradCheck>
where
    B: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    for p in params {
        p.borrow_mut().zero_grad();
    }

    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = loss_of(&mut tape, &leaves)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.borrow().grad.clone()).collect();

    let mut eval = |params: &[ParamRef<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
        let loss = loss_of(&mut tape, &leaves)?;
        Ok(tape.scalar_value(loss))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst_param: 0,
        worst_coord: 0,
    };

    for (pi, p) in params.iter().enumerate() {
        if !p.borrow().requires_grad {
            continue;
        }
        let len = p.borrow().len();
        let coords: Vec<usize> = if coords_per_param >= len {
            (0..len).collect()
        } else {
            sample(&mut rng, len, coords_per_param).into_vec()
        };
        for ci in coords {
            let orig = p.borrow().data[ci];
            p.borrow_mut().data[ci] = orig + STEP;
            let up = eval(params)?;
            p.borrow_mut().data[ci] = orig - STEP;
            let down = eval(params)?;
            p.borrow_mut().data[ci] = orig;

            let fd = (up - down) / (2.0 * STEP);
            let ad = analytic[pi][ci];
            let rel = (ad - fd).abs() / f64::max(1e-6, f64::max(ad.abs(), fd.abs()));
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = pi;
                report.worst_coord = ci;
            }
        }
    }
    Ok(report)
}
