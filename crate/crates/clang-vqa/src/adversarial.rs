//! Adversarial regularization of the final-level node representations.
//!
//! A small MLP discriminator is trained to tell prior samples from node
//! rows; the generator loss pushes node rows toward the prior. The two
//! losses run on separate tapes: the discriminator sees detached node
//! values, the generator sees a frozen discriminator.

use crate::autodiff::{param, ParamRef, Real, Tape, Var};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Probabilities are clamped to this band before every log.
pub const PROB_EPS: f64 = 1e-7;

/// Whether discriminator weights enter a tape as trainable leaves or as
/// frozen constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscMode {
    Train,
    Frozen,
}

/// Three affine maps d->d->d->1 with ReLU between and a sigmoid output.
pub struct Discriminator<F: Real> {
    pub w1: ParamRef<F>,
    pub b1: ParamRef<F>,
    pub w2: ParamRef<F>,
    pub b2: ParamRef<F>,
    pub w3: ParamRef<F>,
    pub b3: ParamRef<F>,
    pub d: usize,
}

impl<F: Real> Discriminator<F> {
    pub fn init(rng: &mut ChaCha8Rng, d: usize) -> Self {
        let mut dense = |rows: usize, cols: usize| {
            let s = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| F::from_f64(rng.gen_range(-s..s)))
                .collect();
            param(rows, cols, data)
        };
        Discriminator {
            w1: dense(d, d),
            b1: param(1, d, vec![F::ZERO; d]),
            w2: dense(d, d),
            b2: param(1, d, vec![F::ZERO; d]),
            w3: dense(d, 1),
            b3: param(1, 1, vec![F::ZERO]),
            d,
        }
    }

    pub fn named_params(&self) -> Vec<(String, ParamRef<F>)> {
        vec![
            ("disc.w1".into(), self.w1.clone()),
            ("disc.b1".into(), self.b1.clone()),
            ("disc.w2".into(), self.w2.clone()),
            ("disc.b2".into(), self.b2.clone()),
            ("disc.w3".into(), self.w3.clone()),
            ("disc.b3".into(), self.b3.clone()),
        ]
    }

    fn weight(&self, tape: &mut Tape<F>, p: &ParamRef<F>, mode: DiscMode) -> Var {
        match mode {
            DiscMode::Train => tape.leaf(p),
            DiscMode::Frozen => {
                let t = p.borrow();
                tape.constant(t.rows(), t.cols(), t.data.clone())
            }
        }
    }

    /// Probability that each input row came from the prior, n x 1.
    pub fn forward(&self, tape: &mut Tape<F>, x: Var, mode: DiscMode) -> Result<Var> {
        let (n, width) = tape.shape(x);
        if width != self.d {
            return Err(Error::dim("discriminator input", width, self.d));
        }
        let w1 = self.weight(tape, &self.w1, mode);
        let b1 = self.weight(tape, &self.b1, mode);
        let w2 = self.weight(tape, &self.w2, mode);
        let b2 = self.weight(tape, &self.b2, mode);
        let w3 = self.weight(tape, &self.w3, mode);
        let b3 = self.weight(tape, &self.b3, mode);

        let h = tape.matmul(x, w1)?;
        let b1b = tape.broadcast_row(b1, n)?;
        let h = tape.add(h, b1b)?;
        let h = tape.relu(h);
        let h2 = tape.matmul(h, w2)?;
        let b2b = tape.broadcast_row(b2, n)?;
        let h2 = tape.add(h2, b2b)?;
        let h2 = tape.relu(h2);
        let logit = tape.matmul(h2, w3)?;
        let b3b = tape.broadcast_row(b3, n)?;
        let logit = tape.add(logit, b3b)?;
        Ok(tape.sigmoid(logit))
    }
}

/// Seeded standard-normal source for the prior z ~ N(0, I).
pub struct PriorSampler {
    pub d: usize,
    rng: ChaCha8Rng,
}

impl PriorSampler {
    pub fn new(d: usize, seed: u64) -> Self {
        PriorSampler {
            d,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// n rows of d standard normals, row-major.
    pub fn sample_batch<F: Real>(&mut self, n: usize) -> Vec<F> {
        (0..n * self.d)
            .map(|_| F::from_f64(self.rng.sample(StandardNormal)))
            .collect()
    }
}

fn clamped_log<F: Real>(tape: &mut Tape<F>, p: Var) -> Var {
    let lo = F::from_f64(PROB_EPS);
    let hi = F::from_f64(1.0 - PROB_EPS);
    let c = tape.clamp(p, lo, hi);
    tape.ln(c)
}

/// Two-term cross-entropy from already-computed probabilities.
pub fn discriminator_loss_from_probs<F: Real>(
    tape: &mut Tape<F>,
    p_real: Var,
    p_fake: Var,
) -> Result<Var> {
    let real_term = clamped_log(tape, p_real);
    let real_term = tape.mean_all(real_term);
    let (fr, fc) = tape.shape(p_fake);
    let ones = tape.constant(fr, fc, vec![F::ONE; fr * fc]);
    let flipped = tape.sub(ones, p_fake)?;
    let fake_term = clamped_log(tape, flipped);
    let fake_term = tape.mean_all(fake_term);
    let s = tape.add(real_term, fake_term)?;
    Ok(tape.scale(s, -F::ONE))
}

/// Generator objective from probabilities: -0.5 mean log D(fake).
pub fn generator_loss_from_probs<F: Real>(tape: &mut Tape<F>, p_fake: Var) -> Result<Var> {
    let lg = clamped_log(tape, p_fake);
    let m = tape.mean_all(lg);
    Ok(tape.scale(m, F::from_f64(-0.5)))
}

/// Discriminator training loss. Both batches arrive as raw values: prior
/// samples from the sampler, node rows copied off the model tape so no
/// gradient can reach the generator from here.
pub fn loss_discriminator<F: Real>(
    tape: &mut Tape<F>,
    disc: &Discriminator<F>,
    real: &[F],
    fake: &[F],
) -> Result<Var> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Contract(
            "discriminator loss needs nonempty real and fake batches".into(),
        ));
    }
    let real = tape.constant(real.len() / disc.d, disc.d, real.to_vec());
    let fake = tape.constant(fake.len() / disc.d, disc.d, fake.to_vec());
    let p_real = disc.forward(tape, real, DiscMode::Train)?;
    let p_fake = disc.forward(tape, fake, DiscMode::Train)?;
    discriminator_loss_from_probs(tape, p_real, p_fake)
}

/// Generator regularizer on live node rows; the discriminator is frozen so
/// gradient reaches only the upstream stack.
pub fn loss_generator<F: Real>(
    tape: &mut Tape<F>,
    disc: &Discriminator<F>,
    fake: Var,
) -> Result<Var> {
    let (n, _) = tape.shape(fake);
    if n == 0 {
        return Err(Error::Contract("generator loss needs a nonempty batch".into()));
    }
    let p_fake = disc.forward(tape, fake, DiscMode::Frozen)?;
    generator_loss_from_probs(tape, p_fake)
}
