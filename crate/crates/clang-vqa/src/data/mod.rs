//! Synthetic multi-object event benchmark.
//!
//! Each sample is a short video of K clips over N object slots. One entity
//! acts per clip, clips form a causal chain, and a templated question asks
//! about a cause, a temporal neighbor, or an actor. Questions and candidate
//! answers are token sequences over a fixed vocabulary; the latent script
//! travels with every sample so oracles can grade answers exactly.
//!
//! Candidate construction is the delicate part. The gold slot is drawn
//! uniformly and independently of everything else, so any predictor blind
//! to the content scores 25 percent. Distractors for causal and temporal
//! questions never reuse the named entity's type or predicate, so watching
//! that one entity eliminates nothing; only the full event graph settles
//! which pair is right.

pub mod format;
pub mod oracle;
pub mod script;

pub use format::{read_samples, write_feature_file, Dataset, DatasetMeta};
pub use oracle::{random_guess, script_oracle, single_entity_oracle};
pub use script::{EventScript, QASample, QuestionType};

use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ObjectObservation;
use crate::text::Vocabulary;

use script::Event;

/// Global object types a script can draw entities from.
pub const TYPE_NAMES: [&str; 12] = [
    "cat", "dog", "bird", "fish", "car", "bus", "ball", "kite", "robot", "drone", "turtle",
    "crab",
];

/// Predicate names, index-aligned with `script::motion_offset` patterns.
pub const PREDICATE_NAMES: [&str; 8] = [
    "advanced",
    "retreated",
    "ascended",
    "descended",
    "grew",
    "shrank",
    "hopped",
    "shook",
];

/// Every sample offers this many candidate answers.
pub const CANDIDATE_COUNT: usize = 4;

pub const DEFAULT_VOCAB_CAPACITY: usize = 128;

const TEMPLATE_WORDS: &str = "why did the what happened after before who nothing";

/// The shared token table: templates, type names, predicate names. Every
/// question and candidate encodes without falling back to the unknown id.
pub fn base_vocabulary() -> Vocabulary {
    let mut vocab = Vocabulary::new(DEFAULT_VOCAB_CAPACITY);
    vocab
        .absorb(TEMPLATE_WORDS)
        .and_then(|_| vocab.absorb(&TYPE_NAMES.join(" ")))
        .and_then(|_| vocab.absorb(&PREDICATE_NAMES.join(" ")))
        .expect("base vocabulary exceeds its own capacity");
    vocab
}

/// Generator knobs. `e` entities share `n` slots across `k` clips of `l`
/// frames; ROI features are `d1`-dimensional type prototypes under noise
/// `sigma`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_samples: usize,
    pub k: usize,
    pub l: usize,
    pub n: usize,
    pub e: usize,
    pub predicates: usize,
    pub sigma: f64,
    pub d1: usize,
    pub train_count: Option<usize>,
    pub val_count: Option<usize>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_samples: 1000,
            k: 4,
            l: 8,
            n: 5,
            e: 4,
            predicates: 8,
            sigma: 0.1,
            d1: 16,
            train_count: None,
            val_count: None,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let spec = |msg: String| Err(Error::Spec(msg));
        if self.num_samples == 0 {
            return spec("num_samples must be positive".into());
        }
        if self.k < 2 {
            return spec(format!("k = {} but causal chains need at least 2 clips", self.k));
        }
        if self.l < 2 {
            return spec(format!("l = {} but motion needs at least 2 frames per clip", self.l));
        }
        if self.e < self.k {
            return spec(format!(
                "e = {} entities cannot act in {} clips once each",
                self.e, self.k
            ));
        }
        if self.e > TYPE_NAMES.len() {
            return spec(format!(
                "e = {} exceeds the {} distinct object types",
                self.e,
                TYPE_NAMES.len()
            ));
        }
        if self.n < self.e {
            return spec(format!(
                "n = {} slots cannot cover e = {} entities; every entity must stay visible",
                self.n, self.e
            ));
        }
        if self.predicates < 4 || self.predicates > PREDICATE_NAMES.len() {
            return spec(format!(
                "predicates = {} outside the supported 4..={}",
                self.predicates,
                PREDICATE_NAMES.len()
            ));
        }
        if self.predicates < self.k {
            return spec(format!(
                "predicates = {} cannot give {} clips distinct predicates",
                self.predicates, self.k
            ));
        }
        if self.d1 == 0 {
            return spec("d1 must be positive".into());
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return spec(format!("sigma = {} is not a nonnegative number", self.sigma));
        }
        match (self.train_count, self.val_count) {
            (Some(t), Some(v)) if t + v != self.num_samples => spec(format!(
                "train_count {t} + val_count {v} != num_samples {}",
                self.num_samples
            )),
            (Some(t), None) if t > self.num_samples => {
                spec(format!("train_count {t} exceeds num_samples {}", self.num_samples))
            }
            (None, Some(v)) if v > self.num_samples => {
                spec(format!("val_count {v} exceeds num_samples {}", self.num_samples))
            }
            _ => Ok(()),
        }
    }

    /// (train, val) sizes. Defaults to a rounded 85/15 split.
    pub fn splits(&self) -> (usize, usize) {
        let train = match (self.train_count, self.val_count) {
            (Some(t), _) => t,
            (None, Some(v)) => self.num_samples - v,
            (None, None) => (self.num_samples * 85 + 50) / 100,
        };
        (train, self.num_samples - train)
    }
}

/// Unit-norm ROI prototype per global type. Drawn once per dataset so type
/// identity is learnable across samples.
fn prototypes(rng: &mut ChaCha8Rng, d1: usize) -> Vec<Vec<f64>> {
    (0..TYPE_NAMES.len())
        .map(|_| {
            let mut v: Vec<f64> = (0..d1).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= norm);
            v
        })
        .collect()
}

/// Home positions on a jittered grid over the central half of the frame,
/// far enough from the borders that every motion pattern stays inside.
fn sample_homes(rng: &mut ChaCha8Rng, e: usize) -> Vec<[f32; 2]> {
    let g = (e as f64).sqrt().ceil() as usize;
    let step = 0.5 / g as f64;
    let mut cells: Vec<(usize, usize)> =
        (0..g).flat_map(|r| (0..g).map(move |c| (r, c))).collect();
    cells.shuffle(rng);
    cells
        .into_iter()
        .take(e)
        .map(|(r, c)| {
            let x = 0.25 + (c as f64 + 0.5) * step + rng.gen_range(-0.03..=0.03);
            let y = 0.25 + (r as f64 + 0.5) * step + rng.gen_range(-0.03..=0.03);
            [x as f32, y as f32]
        })
        .collect()
}

/// Distractor type pool for a question about `exclude`: the other scripted
/// types, padded with unused global types when the (type, predicate) space
/// is too small for four distinct pairs.
fn distractor_types(entity_types: &[u32], exclude: u32, pred_pool: usize) -> Vec<u32> {
    let mut pool: Vec<u32> = entity_types.iter().copied().filter(|&t| t != exclude).collect();
    let mut absent = (0..TYPE_NAMES.len() as u32).filter(|g| !entity_types.contains(g));
    while pool.len() * pred_pool.max(1) < CANDIDATE_COUNT {
        pool.push(absent.next().expect("global type space exhausted"));
    }
    pool
}

/// Draw `count` distinct (type, predicate) pairs from the pools, never the
/// gold pair.
fn distractor_pairs(
    rng: &mut ChaCha8Rng,
    types: &[u32],
    preds: &[usize],
    gold: Option<(u32, usize)>,
    count: usize,
) -> Vec<(u32, usize)> {
    let space: Vec<(u32, usize)> = types
        .iter()
        .flat_map(|&t| preds.iter().map(move |&p| (t, p)))
        .filter(|&pair| Some(pair) != gold)
        .collect();
    assert!(space.len() >= count, "distractor space exhausted");
    index::sample(rng, space.len(), count)
        .into_iter()
        .map(|i| space[i])
        .collect()
}

fn pair_text(gid: u32, pred: usize) -> String {
    format!("the {} {}", TYPE_NAMES[gid as usize], PREDICATE_NAMES[pred])
}

/// Shuffle the distractors and insert the gold answer at a uniform slot.
/// The slot is independent of every other draw, which pins gold-blind
/// predictors at exactly one in four.
fn place_gold(
    rng: &mut ChaCha8Rng,
    vocab: &Vocabulary,
    gold: String,
    mut others: Vec<String>,
) -> (Vec<Vec<usize>>, usize) {
    others.shuffle(rng);
    let slot = rng.gen_range(0..=others.len());
    others.insert(slot, gold);
    (others.iter().map(|c| vocab.encode(c)).collect(), slot)
}

/// Generate the full sample set in memory. One RNG stream drives every
/// draw, so a seed fixes the byte-exact output.
pub fn generate_samples(spec: &DatasetSpec, seed: u64) -> Result<Vec<QASample>> {
    spec.validate()?;
    let vocab = base_vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = prototypes(&mut rng, spec.d1);
    let (k, l, n, e, p) = (spec.k, spec.l, spec.n, spec.e, spec.predicates);

    let mut samples = Vec::with_capacity(spec.num_samples);
    for id in 0..spec.num_samples as u64 {
        let question_type = match rng.gen_range(0..3u32) {
            0 => QuestionType::Causal,
            1 => QuestionType::Temporal,
            _ => QuestionType::Descriptive,
        };
        let entity_types: Vec<u32> = index::sample(&mut rng, TYPE_NAMES.len(), e)
            .into_iter()
            .map(|g| g as u32)
            .collect();
        let homes = sample_homes(&mut rng, e);
        let actors = index::sample(&mut rng, e, k).into_vec();
        let preds = index::sample(&mut rng, p, k).into_vec();
        let events: Vec<Event> = (0..k)
            .map(|c| Event {
                subject: actors[c],
                predicate: preds[c],
                objects: Vec::new(),
                clip: c,
            })
            .collect();
        let causal: Vec<[usize; 2]> = (1..k).map(|c| [c - 1, c]).collect();
        let script = EventScript {
            entity_types,
            homes,
            events,
            causal,
        };

        let (question, candidates, gold) = match question_type {
            QuestionType::Causal => {
                let effect = rng.gen_range(1..k);
                let subject_gid = script.entity_types[actors[effect]];
                let question = format!(
                    "why did the {} {}",
                    TYPE_NAMES[subject_gid as usize], PREDICATE_NAMES[preds[effect]]
                );
                let gold_pair = (script.entity_types[actors[effect - 1]], preds[effect - 1]);
                let pred_pool: Vec<usize> = (0..p).filter(|&q| q != preds[effect]).collect();
                let type_pool = distractor_types(&script.entity_types, subject_gid, pred_pool.len());
                let others = distractor_pairs(&mut rng, &type_pool, &pred_pool, Some(gold_pair), 3)
                    .into_iter()
                    .map(|(t, q)| pair_text(t, q))
                    .collect();
                let (cands, slot) =
                    place_gold(&mut rng, &vocab, pair_text(gold_pair.0, gold_pair.1), others);
                (vocab.encode(&question), cands, slot)
            }
            QuestionType::Temporal => {
                let reference = rng.gen_range(0..k);
                let after = rng.gen_range(0..2u32) == 0;
                let ref_gid = script.entity_types[actors[reference]];
                let question = format!(
                    "what happened {} the {} {}",
                    if after { "after" } else { "before" },
                    TYPE_NAMES[ref_gid as usize],
                    PREDICATE_NAMES[preds[reference]]
                );
                let neighbor = if after {
                    (reference + 1 < k).then(|| reference + 1)
                } else {
                    reference.checked_sub(1)
                };
                let gold_pair =
                    neighbor.map(|c| (script.entity_types[actors[c]], preds[c]));
                let pred_pool: Vec<usize> = (0..p).filter(|&q| q != preds[reference]).collect();
                let type_pool = distractor_types(&script.entity_types, ref_gid, pred_pool.len());
                let wanted = if gold_pair.is_some() { 2 } else { 3 };
                let mut others: Vec<String> =
                    distractor_pairs(&mut rng, &type_pool, &pred_pool, gold_pair, wanted)
                        .into_iter()
                        .map(|(t, q)| pair_text(t, q))
                        .collect();
                let gold_text = match gold_pair {
                    Some((t, q)) => {
                        others.push("nothing".into());
                        pair_text(t, q)
                    }
                    None => "nothing".into(),
                };
                let (cands, slot) = place_gold(&mut rng, &vocab, gold_text, others);
                (vocab.encode(&question), cands, slot)
            }
            QuestionType::Descriptive => {
                let clip = rng.gen_range(0..k);
                let actor_gid = script.entity_types[actors[clip]];
                let question = format!("who {}", PREDICATE_NAMES[preds[clip]]);
                let mut pool: Vec<u32> = script
                    .entity_types
                    .iter()
                    .copied()
                    .filter(|&t| t != actor_gid)
                    .collect();
                let mut absent =
                    (0..TYPE_NAMES.len() as u32).filter(|g| !script.entity_types.contains(g));
                while pool.len() < CANDIDATE_COUNT - 1 {
                    pool.push(absent.next().expect("global type space exhausted"));
                }
                let others = index::sample(&mut rng, pool.len(), CANDIDATE_COUNT - 1)
                    .into_iter()
                    .map(|i| TYPE_NAMES[pool[i] as usize].to_string())
                    .collect();
                let (cands, slot) = place_gold(
                    &mut rng,
                    &vocab,
                    TYPE_NAMES[actor_gid as usize].to_string(),
                    others,
                );
                (vocab.encode(&question), cands, slot)
            }
        };

        let mut observations = Vec::with_capacity(k * l * n);
        for c in 0..k {
            for f in 0..l {
                let frame = c * l + f;
                for s in 0..n {
                    if s >= e {
                        observations.push(ObjectObservation::padding(spec.d1, frame, c));
                        continue;
                    }
                    let b = script.box_at(s, c, f, l);
                    let area = (b[2] - b[0]) * (b[3] - b[1]);
                    let proto = &protos[script.entity_types[s] as usize];
                    let roi = proto
                        .iter()
                        .map(|&v| {
                            let noise: f64 = rng.sample(StandardNormal);
                            (v + spec.sigma * noise) as f32
                        })
                        .collect();
                    observations.push(ObjectObservation {
                        roi,
                        bbox: vec![
                            b[0] as f32,
                            b[1] as f32,
                            b[2] as f32,
                            b[3] as f32,
                            area as f32,
                        ],
                        frame_index: frame,
                        clip_index: c,
                    });
                }
            }
        }

        samples.push(QASample {
            id,
            question_type,
            question,
            candidates,
            gold,
            script,
            observations,
        });
    }
    Ok(samples)
}

/// Generate, split, and write `train` and `val` feature files under
/// `out_dir`. Returns the two manifest paths.
pub fn generate_dataset(
    spec: &DatasetSpec,
    seed: u64,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let samples = generate_samples(spec, seed)?;
    let (train_n, _) = spec.splits();
    let meta = DatasetMeta {
        k: spec.k,
        l: spec.l,
        n: spec.n,
        e: spec.e,
        predicates: spec.predicates,
        d1: spec.d1,
        sigma: spec.sigma,
        seed,
        record_count: 0,
        blob: String::new(),
        vocab: base_vocabulary(),
    };
    let train = write_feature_file(out_dir, "train", &meta, &samples[..train_n])?;
    let val = write_feature_file(out_dir, "val", &meta, &samples[train_n..])?;
    Ok((train, val))
}
