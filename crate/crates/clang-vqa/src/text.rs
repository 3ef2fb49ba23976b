//! Question and candidate-answer encoding plus the multi-choice head.
//!
//! A deliberately small stand-in for a pretrained language model: learned
//! token and position embeddings, mean pooling, and one or two
//! feed-forward layers. Capacity is the layer-count knob.

use crate::autodiff::{param, ParamRef, Real, Tape, Var};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const MAX_TEXT_LEN: usize = 32;
pub const DEFAULT_VOCAB_CAPACITY: usize = 128;

/// Fixed-capacity token table. Slot 0 is padding, slot 1 the unknown
/// token; everything else is dense in registration order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    capacity: usize,
}

impl Vocabulary {
    pub fn new(capacity: usize) -> Self {
        Vocabulary {
            tokens: vec!["<pad>".into(), "<unk>".into()],
            capacity,
        }
    }

    /// Register every word of `text` not yet present.
    pub fn absorb(&mut self, text: &str) -> Result<()> {
        for word in text.split_whitespace() {
            if self.tokens.iter().any(|t| t == word) {
                continue;
            }
            if self.tokens.len() == self.capacity {
                return Err(Error::Vocabulary(format!(
                    "table full at {} entries, cannot add {word:?}",
                    self.capacity
                )));
            }
            self.tokens.push(word.to_string());
        }
        Ok(())
    }

    pub fn id_of(&self, word: &str) -> usize {
        self.tokens
            .iter()
            .position(|t| t == word)
            .unwrap_or(UNK_ID)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id_of(w)).collect()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Table capacity, the embedding row count.
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub struct TextEncoder<F: Real> {
    pub embed: ParamRef<F>,
    pub pos: ParamRef<F>,
    pub ff1_w: ParamRef<F>,
    pub ff1_b: ParamRef<F>,
    /// Present in the two-layer configuration.
    pub ff2: Option<(ParamRef<F>, ParamRef<F>)>,
    pub vocab_capacity: usize,
    pub d: usize,
}

impl<F: Real> TextEncoder<F> {
    pub fn init(rng: &mut ChaCha8Rng, vocab_capacity: usize, d: usize, layers: usize) -> Self {
        assert!(layers == 1 || layers == 2, "encoder depth is 1 or 2");
        let table = |rng: &mut ChaCha8Rng, rows: usize, scale: f64| {
            let data = (0..rows * d)
                .map(|_| F::from_f64(rng.gen_range(-scale..scale)))
                .collect();
            param(rows, d, data)
        };
        let dense = |rng: &mut ChaCha8Rng| {
            let s = (6.0 / (2 * d) as f64).sqrt();
            let data = (0..d * d)
                .map(|_| F::from_f64(rng.gen_range(-s..s)))
                .collect();
            param(d, d, data)
        };
        TextEncoder {
            // Wider than the position rows: the encoder mean-pools before
            // the feed-forward stack, and the pooled vector has to stay
            // comparable to the graph embedding it is fused with.
            embed: table(rng, vocab_capacity, 0.5),
            pos: table(rng, MAX_TEXT_LEN, 0.1),
            ff1_w: dense(rng),
            ff1_b: param(1, d, vec![F::ZERO; d]),
            ff2: (layers == 2).then(|| (dense(rng), param(1, d, vec![F::ZERO; d]))),
            vocab_capacity,
            d,
        }
    }

    pub fn named_params(&self) -> Vec<(String, ParamRef<F>)> {
        let mut out = vec![
            ("text.embed".to_string(), self.embed.clone()),
            ("text.pos".to_string(), self.pos.clone()),
            ("text.ff1.w".to_string(), self.ff1_w.clone()),
            ("text.ff1.b".to_string(), self.ff1_b.clone()),
        ];
        if let Some((w, b)) = &self.ff2 {
            out.push(("text.ff2.w".to_string(), w.clone()));
            out.push(("text.ff2.b".to_string(), b.clone()));
        }
        out
    }

    /// Mean of token+position embeddings through the feed-forward stack,
    /// 1 x d.
    pub fn encode_text(&self, tape: &mut Tape<F>, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Contract("cannot encode an empty sequence".into()));
        }
        if tokens.len() > MAX_TEXT_LEN {
            return Err(Error::Contract(format!(
                "sequence of {} tokens exceeds the {MAX_TEXT_LEN}-token limit",
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_capacity) {
            return Err(Error::Vocabulary(format!(
                "token id {bad} outside table of {}",
                self.vocab_capacity
            )));
        }
        let embed = tape.leaf(&self.embed);
        let pos = tape.leaf(&self.pos);
        let tok_rows = tape.gather_rows(embed, tokens)?;
        let pos_ids: Vec<usize> = (0..tokens.len()).collect();
        let pos_rows = tape.gather_rows(pos, &pos_ids)?;
        let summed = tape.add(tok_rows, pos_rows)?;
        let pooled = tape.col_mean(summed);

        let w1 = tape.leaf(&self.ff1_w);
        let b1 = tape.leaf(&self.ff1_b);
        let h = tape.matmul(pooled, w1)?;
        let h = tape.add(h, b1)?;
        match &self.ff2 {
            None => Ok(h),
            Some((w2, b2)) => {
                let h = tape.relu(h);
                let w2 = tape.leaf(w2);
                let b2 = tape.leaf(b2);
                let h = tape.matmul(h, w2)?;
                tape.add(h, b2)
            }
        }
    }
}

/// Fusion map of the answer-scoring head: [X_g .* X_q, X_g, X_q] -> d.
pub struct AnswerHead<F: Real> {
    pub w: ParamRef<F>,
    pub d: usize,
}

impl<F: Real> AnswerHead<F> {
    pub fn init(rng: &mut ChaCha8Rng, d: usize) -> Self {
        let s = (6.0 / (4 * d) as f64).sqrt();
        let data = (0..3 * d * d)
            .map(|_| F::from_f64(rng.gen_range(-s..s)))
            .collect();
        AnswerHead {
            w: param(3 * d, d, data),
            d,
        }
    }

    pub fn named_params(&self) -> Vec<(String, ParamRef<F>)> {
        vec![("head.w".to_string(), self.w.clone())]
    }
}

/// One logit per candidate: dot(fused query, encoded candidate), 1 x C.
pub fn score_candidates<F: Real>(
    tape: &mut Tape<F>,
    encoder: &TextEncoder<F>,
    head: &AnswerHead<F>,
    x_g: Var,
    x_q: Var,
    candidates: &[Vec<usize>],
) -> Result<Var> {
    if candidates.len() < 2 {
        return Err(Error::Contract(format!(
            "need at least two candidates, got {}",
            candidates.len()
        )));
    }
    let prod = tape.mul(x_g, x_q)?;
    let f = tape.concat_cols(&[prod, x_g, x_q])?;
    let w = tape.leaf(&head.w);
    let f = tape.matmul(f, w)?;

    let rows: Vec<Var> = candidates
        .iter()
        .map(|c| encoder.encode_text(tape, c))
        .collect::<Result<_>>()?;
    let stacked = tape.concat_rows(&rows)?;
    let stacked_t = tape.transpose(stacked);
    tape.matmul(f, stacked_t)
}

/// Softmax cross-entropy against the gold candidate, in log-sum-exp form.
pub fn qa_loss<F: Real>(tape: &mut Tape<F>, logits: Var, gold: usize) -> Result<Var> {
    let (rows, c) = tape.shape(logits);
    if rows != 1 {
        return Err(Error::dim("qa_loss", format!("{rows}x{c}"), "1 row"));
    }
    if gold >= c {
        return Err(Error::Contract(format!(
            "gold index {gold} out of range for {c} candidates"
        )));
    }
    let mut mx = f64::NEG_INFINITY;
    for &v in tape.value(logits) {
        mx = mx.max(v.to_f64());
    }
    let shifted = tape.add_scalar(logits, F::from_f64(-mx));
    let e = tape.exp(shifted);
    let s = tape.sum_all(e);
    let lse = tape.ln(s);
    let lse = tape.add_scalar(lse, F::from_f64(mx));

    let mut onehot = vec![F::ZERO; c];
    onehot[gold] = F::ONE;
    let mask = tape.constant(1, c, onehot);
    let picked = tape.mul(logits, mask)?;
    let gold_logit = tape.sum_all(picked);
    tape.sub(lse, gold_logit)
}
