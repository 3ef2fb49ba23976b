//! Reference answerers over the latent scripts.
//!
//! `script_oracle` reads the whole script and must be right every time;
//! `single_entity_oracle` sees one entity's trajectory and is the measured
//! ceiling for single-object reasoning. The gap between the two is the
//! point of the benchmark: temporal and causal questions relate two
//! entities across clips, so one trajectory cannot settle them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::text::Vocabulary;

use super::script::{EventScript, QASample};
use super::{PREDICATE_NAMES, TYPE_NAMES};

/// Semantic reading of one candidate token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Answer {
    /// A bare type name.
    Type(u32),
    /// "the <type> <predicate>".
    Pair(u32, usize),
    Nothing,
}

fn word<'a>(vocab: &'a Vocabulary, id: usize, what: &str) -> Result<&'a str> {
    vocab
        .token(id)
        .ok_or_else(|| Error::Format(format!("{what} token {id} missing from vocabulary")))
}

fn type_gid(word: &str) -> Option<u32> {
    TYPE_NAMES.iter().position(|t| *t == word).map(|g| g as u32)
}

fn predicate_id(word: &str) -> Option<usize> {
    PREDICATE_NAMES.iter().position(|p| *p == word)
}

pub fn parse_candidate(tokens: &[usize], vocab: &Vocabulary) -> Result<Answer> {
    match tokens.len() {
        1 => {
            let w = word(vocab, tokens[0], "candidate")?;
            if w == "nothing" {
                return Ok(Answer::Nothing);
            }
            type_gid(w)
                .map(Answer::Type)
                .ok_or_else(|| Error::Format(format!("unrecognized candidate word {w:?}")))
        }
        3 => {
            let t = word(vocab, tokens[1], "candidate")?;
            let p = word(vocab, tokens[2], "candidate")?;
            match (type_gid(t), predicate_id(p)) {
                (Some(g), Some(p)) => Ok(Answer::Pair(g, p)),
                _ => Err(Error::Format(format!(
                    "unrecognized candidate pair {t:?} {p:?}"
                ))),
            }
        }
        n => Err(Error::Format(format!("candidate of {n} tokens"))),
    }
}

/// Semantic reading of one question.
#[derive(Clone, Copy, Debug)]
pub enum Question {
    /// why did the <type> <predicate>
    Why { gid: u32, predicate: usize },
    /// what happened after|before the <type> <predicate>
    Neighbor {
        after: bool,
        gid: u32,
        predicate: usize,
    },
    /// who <predicate>
    Who { predicate: usize },
}

pub fn parse_question(tokens: &[usize], vocab: &Vocabulary) -> Result<Question> {
    let w = |i: usize| -> Result<&str> {
        let id = *tokens
            .get(i)
            .ok_or_else(|| Error::Format(format!("question shorter than {} tokens", i + 1)))?;
        word(vocab, id, "question")
    };
    match w(0)? {
        "why" => Ok(Question::Why {
            gid: type_gid(w(3)?)
                .ok_or_else(|| Error::Format("why-question names no known type".into()))?,
            predicate: predicate_id(w(4)?)
                .ok_or_else(|| Error::Format("why-question names no known predicate".into()))?,
        }),
        "what" => Ok(Question::Neighbor {
            after: w(2)? == "after",
            gid: type_gid(w(4)?)
                .ok_or_else(|| Error::Format("what-question names no known type".into()))?,
            predicate: predicate_id(w(5)?)
                .ok_or_else(|| Error::Format("what-question names no known predicate".into()))?,
        }),
        "who" => Ok(Question::Who {
            predicate: predicate_id(w(1)?)
                .ok_or_else(|| Error::Format("who-question names no known predicate".into()))?,
        }),
        other => Err(Error::Format(format!("unknown question head {other:?}"))),
    }
}

fn entity_by_gid(script: &EventScript, gid: u32) -> Result<usize> {
    script
        .entity_types
        .iter()
        .position(|&t| t == gid)
        .ok_or_else(|| Error::Format(format!("no entity of type {gid} in script")))
}

fn answer_of(script: &EventScript, q: Question) -> Result<Answer> {
    let pair = |ev: &super::script::Event| Answer::Pair(script.entity_types[ev.subject], ev.predicate);
    match q {
        Question::Why { gid, predicate } => {
            let entity = entity_by_gid(script, gid)?;
            let idx = script
                .events
                .iter()
                .position(|ev| ev.subject == entity && ev.predicate == predicate)
                .ok_or_else(|| Error::Format("why-question matches no event".into()))?;
            let cause = script
                .cause_of(idx)
                .ok_or_else(|| Error::Format("effect event has no recorded cause".into()))?;
            Ok(pair(cause))
        }
        Question::Neighbor {
            after,
            gid,
            predicate,
        } => {
            let entity = entity_by_gid(script, gid)?;
            let ev = script
                .events
                .iter()
                .find(|ev| ev.subject == entity && ev.predicate == predicate)
                .ok_or_else(|| Error::Format("reference event missing".into()))?;
            let neighbor = if after {
                script.event_in_clip(ev.clip + 1)
            } else if ev.clip == 0 {
                None
            } else {
                script.event_in_clip(ev.clip - 1)
            };
            Ok(neighbor.map(pair).unwrap_or(Answer::Nothing))
        }
        Question::Who { predicate } => {
            let ev = script
                .events
                .iter()
                .find(|ev| ev.predicate == predicate)
                .ok_or_else(|| Error::Format("who-question matches no event".into()))?;
            Ok(Answer::Type(script.entity_types[ev.subject]))
        }
    }
}

/// Answer from the full script. Errors if the candidates do not contain the
/// derived answer exactly once; the generator owes us that invariant.
pub fn script_oracle(sample: &QASample, vocab: &Vocabulary) -> Result<usize> {
    let q = parse_question(&sample.question, vocab)?;
    let want = answer_of(&sample.script, q)?;
    let mut hit = None;
    for (i, cand) in sample.candidates.iter().enumerate() {
        if parse_candidate(cand, vocab)? == want {
            if hit.is_some() {
                return Err(Error::Format(format!(
                    "sample {} offers the answer twice",
                    sample.id
                )));
            }
            hit = Some(i);
        }
    }
    hit.ok_or_else(|| {
        Error::Format(format!(
            "sample {} offers no candidate matching {want:?}",
            sample.id
        ))
    })
}

/// Best effort with one entity's trajectory. The oracle sees the entity the
/// question names (a seeded random one for who-questions, which name none),
/// knows that entity's own events and the generator's regularities, rules
/// out what it can, and guesses uniformly among the rest.
pub fn single_entity_oracle(
    sample: &QASample,
    vocab: &Vocabulary,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let script = &sample.script;
    let q = parse_question(&sample.question, vocab)?;
    let parsed: Vec<Answer> = sample
        .candidates
        .iter()
        .map(|c| parse_candidate(c, vocab))
        .collect::<Result<_>>()?;

    let known = match q {
        Question::Why { gid, .. } | Question::Neighbor { gid, .. } => entity_by_gid(script, gid)?,
        Question::Who { .. } => rng.gen_range(0..script.entity_types.len()),
    };
    let known_gid = script.entity_types[known];
    let known_event = script.event_of_subject(known);

    // A pair candidate is impossible if it names the seen entity with a
    // predicate it never performed, or names another entity with one of the
    // seen entity's predicates (clip predicates are distinct per script).
    let impossible_pair = |gid: u32, pred: usize| {
        if gid == known_gid {
            known_event.map(|ev| ev.predicate != pred).unwrap_or(true)
        } else {
            known_event.map(|ev| ev.predicate == pred).unwrap_or(false)
        }
    };

    let viable: Vec<usize> = match q {
        Question::Who { predicate } => {
            if let Some(ev) = known_event.filter(|ev| ev.predicate == predicate) {
                let own = script.entity_types[ev.subject];
                (0..parsed.len())
                    .filter(|&i| parsed[i] == Answer::Type(own))
                    .collect()
            } else {
                // Not me; anyone else could be the actor.
                (0..parsed.len())
                    .filter(|&i| parsed[i] != Answer::Type(known_gid))
                    .collect()
            }
        }
        Question::Why { .. } => (0..parsed.len())
            .filter(|&i| match parsed[i] {
                Answer::Pair(g, p) => !impossible_pair(g, p),
                Answer::Type(_) | Answer::Nothing => false,
            })
            .collect(),
        Question::Neighbor { after, .. } => {
            let clip = known_event.map(|ev| ev.clip).unwrap_or(0);
            let k = script.events.len();
            let at_boundary = if after { clip + 1 >= k } else { clip == 0 };
            (0..parsed.len())
                .filter(|&i| match parsed[i] {
                    Answer::Nothing => at_boundary,
                    Answer::Pair(g, p) => !at_boundary && !impossible_pair(g, p),
                    Answer::Type(_) => false,
                })
                .collect()
        }
    };

    if viable.is_empty() {
        return Ok(rng.gen_range(0..parsed.len()));
    }
    Ok(viable[rng.gen_range(0..viable.len())])
}

/// Uniform guess over the candidate slots.
pub fn random_guess(candidates: usize, rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(0..candidates)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::super::base_vocabulary;
    use super::super::script::Event;
    use super::*;

    fn vocab() -> Vocabulary {
        base_vocabulary()
    }

    fn script() -> EventScript {
        // cat acts in clip 0, dog in 1, bird in 2, fish in 3
        EventScript {
            entity_types: vec![0, 1, 2, 3],
            homes: vec![[0.375, 0.375], [0.625, 0.375], [0.375, 0.625], [0.625, 0.625]],
            events: vec![
                Event { subject: 0, predicate: 0, objects: vec![], clip: 0 },
                Event { subject: 1, predicate: 4, objects: vec![], clip: 1 },
                Event { subject: 2, predicate: 6, objects: vec![], clip: 2 },
                Event { subject: 3, predicate: 2, objects: vec![], clip: 3 },
            ],
            causal: vec![[0, 1], [1, 2], [2, 3]],
        }
    }

    fn sample(question: &str, candidates: &[&str], gold: usize, qt: QuestionType) -> QASample {
        let v = vocab();
        QASample {
            id: 0,
            question_type: qt,
            question: v.encode(question),
            candidates: candidates.iter().map(|c| v.encode(c)).collect(),
            gold,
            script: script(),
            observations: Vec::new(),
        }
    }

    #[test]
    fn script_oracle_answers_each_template() {
        let v = vocab();
        // why did the dog grew -> the cat advanced
        let s = sample(
            "why did the dog grew",
            &["the bird shook", "the cat advanced", "the fish hopped", "the cat shrank"],
            1,
            QuestionType::Causal,
        );
        assert_eq!(script_oracle(&s, &v).unwrap(), 1);

        let s = sample(
            "what happened after the dog grew",
            &["the bird hopped", "nothing", "the fish advanced", "the cat descended"],
            0,
            QuestionType::Temporal,
        );
        assert_eq!(script_oracle(&s, &v).unwrap(), 0);

        let s = sample(
            "what happened after the fish ascended",
            &["the bird hopped", "nothing", "the cat advanced", "the dog descended"],
            1,
            QuestionType::Temporal,
        );
        assert_eq!(script_oracle(&s, &v).unwrap(), 1);

        let s = sample(
            "who hopped",
            &["cat", "dog", "bird", "fish"],
            2,
            QuestionType::Descriptive,
        );
        assert_eq!(script_oracle(&s, &v).unwrap(), 2);
    }

    #[test]
    fn script_oracle_rejects_missing_or_doubled_answers() {
        let v = vocab();
        let s = sample(
            "who hopped",
            &["cat", "dog", "fish", "crab"],
            0,
            QuestionType::Descriptive,
        );
        assert!(script_oracle(&s, &v).is_err());
        let s = sample(
            "who hopped",
            &["bird", "bird", "cat", "dog"],
            0,
            QuestionType::Descriptive,
        );
        assert!(script_oracle(&s, &v).is_err());
    }

    #[test]
    fn one_entity_detects_temporal_boundaries_and_nothing_else() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // fish acts in the last clip: "after" is provably nothing.
        let s = sample(
            "what happened after the fish ascended",
            &["the bird hopped", "nothing", "the cat advanced", "the dog descended"],
            1,
            QuestionType::Temporal,
        );
        for _ in 0..20 {
            assert_eq!(single_entity_oracle(&s, &v, &mut rng).unwrap(), 1);
        }
        // dog acts in clip 1: both neighbors exist, nothing is ruled out,
        // and the three pairs stay indistinguishable.
        let s = sample(
            "what happened after the dog grew",
            &["the bird hopped", "nothing", "the fish advanced", "the cat descended"],
            0,
            QuestionType::Temporal,
        );
        let mut seen = [0usize; 4];
        for _ in 0..600 {
            seen[single_entity_oracle(&s, &v, &mut rng).unwrap()] += 1;
        }
        assert_eq!(seen[1], 0, "nothing must be eliminated off-boundary");
        for (i, &c) in seen.iter().enumerate() {
            if i != 1 {
                assert!(c > 130, "slot {i} picked {c} of 600");
            }
        }
    }

    #[test]
    fn one_entity_is_chance_on_causal_questions() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = sample(
            "why did the dog grew",
            &["the bird shook", "the cat advanced", "the fish hopped", "the cat shrank"],
            1,
            QuestionType::Causal,
        );
        let mut seen = [0usize; 4];
        for _ in 0..800 {
            seen[single_entity_oracle(&s, &v, &mut rng).unwrap()] += 1;
        }
        for &c in &seen {
            assert!(c > 140, "distribution {seen:?} is not near-uniform");
        }
    }
}
