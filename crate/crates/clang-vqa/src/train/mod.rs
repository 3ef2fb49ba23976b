//! End-to-end training loop.
//!
//! One iteration touches three tapes. Per-sample forwards run on worker
//! tapes (one per thread chunk) up to the points the batch terms need:
//! fused embeddings, question embeddings, logits, node rows. The batch
//! terms themselves, InfoNCE, the KL match, and the discriminator loss,
//! live on small main-thread tapes built from detached values, so the
//! batch math is identical no matter how the samples were chunked. The
//! backward pass retraces the worker tapes from seeds: the contrastive
//! gradients land on the embedding vars, the per-sample losses get their
//! 1/B weights, and the flushed parameter gradients are summed in chunk
//! order before one optimizer step.
//!
//! The discriminator steps on its own tape between the forward and the
//! main backward. The generator term froze the discriminator weights as
//! constants at forward time, so the main step still sees gradients taken
//! at the pre-step discriminator.

pub mod checkpoint;
pub mod optim;
pub mod report;

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{loss_discriminator, loss_generator, PriorSampler};
use crate::autodiff::{ParamRef, Tape, Var};
use crate::contrastive::{info_nce, kl_match};
use crate::data::{read_samples, Dataset, DatasetMeta, QASample};
use crate::error::{Error, Result};
use crate::model::{Model, ModelDims, ParamValues};

pub use checkpoint::CheckpointMeta;
pub use optim::{AdamW, OptimizerInfo};
pub use report::{emit_report, render_csv, render_svg, MetricsLog, MetricsRow, ReportFormat, Split};

/// Parameter init consumes the raw seed; every other random stream gets
/// its own salt so no two of them ever walk the same sequence.
const PRIOR_SALT: u64 = 0x9d39_247e_3377_6d41;
const EVAL_SALT: u64 = 0x8f14_02b9_0e32_a589;
const SHUFFLE_SALT: u64 = 0x61c8_8646_80b5_83eb;

/// Hyperparameters. The whole struct is echoed into checkpoints, so an
/// evaluation run can rebuild the exact geometry without the original
/// config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Hidden width shared by the graph stack, text encoder, and heads.
    pub d: usize,
    /// Cluster levels in the pooling pyramid; 0 bypasses it.
    pub p_layers: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// InfoNCE temperature.
    pub tau: f64,
    pub adv: bool,
    pub contrastive: bool,
    pub qa: bool,
    pub encoder_depth: usize,
    pub frame_tags: bool,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            d: 64,
            p_layers: 8,
            lr: 1e-5,
            batch: 32,
            epochs: 30,
            seed: 0,
            tau: 0.1,
            adv: true,
            contrastive: true,
            qa: true,
            encoder_depth: 2,
            frame_tags: true,
        }
    }
}

impl TrainConfig {
    /// Defaults tuned so a full run on the synthetic benchmark converges
    /// in minutes on one desktop core.
    pub fn desk_scale() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Contract("hidden width must be positive".into()));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Contract(
                "batch size and epoch count must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Contract(format!("bad learning rate {}", self.lr)));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Contract(format!("bad temperature {}", self.tau)));
        }
        if self.encoder_depth != 1 && self.encoder_depth != 2 {
            return Err(Error::Contract(format!(
                "encoder_depth {} is not 1 or 2",
                self.encoder_depth
            )));
        }
        if !self.qa && !self.contrastive && !self.adv {
            return Err(Error::Contract(
                "every loss term is switched off; nothing to train".into(),
            ));
        }
        Ok(())
    }

    /// Geometry for a dataset. The split metas agree whenever both came
    /// from one generation run, so either one works here.
    pub fn dims(&self, meta: &DatasetMeta) -> ModelDims {
        ModelDims {
            d: self.d,
            p: self.p_layers,
            d1: meta.d1,
            k: meta.k,
            l: meta.l,
            n: meta.n,
            encoder_depth: self.encoder_depth,
            frame_tags: self.frame_tags,
            vocab_capacity: meta.vocab.capacity(),
        }
    }
}

/// Per-iteration loss report. Disabled terms stay exactly 0, and `total`
/// is the field-order sum, so a report row can be audited by re-adding
/// the printed columns.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub l_d: f64,
    pub l_g: f64,
    pub l_n: f64,
    pub l_kl: f64,
    pub l_qa: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn assemble(l_d: f64, l_g: f64, l_n: f64, l_kl: f64, l_qa: f64) -> LossBundle {
        LossBundle {
            l_d,
            l_g,
            l_n,
            l_kl,
            l_qa,
            total: l_d + l_g + l_n + l_kl + l_qa,
        }
    }
}

/// Aborts the run at the first non-finite term, reported in field order.
pub fn nan_check(iteration: usize, bundle: &LossBundle) -> Result<()> {
    let terms = [
        ("l_d", bundle.l_d),
        ("l_g", bundle.l_g),
        ("l_n", bundle.l_n),
        ("l_kl", bundle.l_kl),
        ("l_qa", bundle.l_qa),
        ("total", bundle.total),
    ];
    for (term, value) in terms {
        if !value.is_finite() {
            return Err(Error::NanLoss { iteration, term });
        }
    }
    Ok(())
}

/// Worker threads per batch, from `CLANG_THREADS`. Unset means 1.
pub fn thread_count() -> Result<usize> {
    match std::env::var("CLANG_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(Error::Contract(format!("CLANG_THREADS: {e}"))),
        Ok(raw) => parse_thread_count(&raw),
    }
}

fn parse_thread_count(raw: &str) -> Result<usize> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Ok(1);
    }
    match trimmed.parse::<usize>() {
        Ok(0) => Err(Error::Contract("CLANG_THREADS must be at least 1".into())),
        Ok(n) => Ok(n),
        Err(e) => Err(Error::Contract(format!("CLANG_THREADS {trimmed:?}: {e}"))),
    }
}

/// Hit counters; `by_type` is indexed by `QuestionType as usize` and holds
/// (hits, asked) pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchCounts {
    pub correct: usize,
    pub total: usize,
    pub by_type: [(usize, usize); 3],
}

impl BatchCounts {
    fn merge(&mut self, other: &BatchCounts) {
        self.correct += other.correct;
        self.total += other.total;
        for (mine, theirs) in self.by_type.iter_mut().zip(&other.by_type) {
            mine.0 += theirs.0;
            mine.1 += theirs.1;
        }
    }
}

/// Optimizer state for one training step. Absent means evaluation.
pub struct StepRefs<'a> {
    pub main_opt: &'a mut AdamW,
    pub disc_opt: &'a mut AdamW,
    pub main_refs: &'a [ParamRef<f64>],
    pub disc_refs: &'a [ParamRef<f64>],
}

/// Detached per-sample values a worker ships to the main thread.
struct SampleOut {
    x_g: Vec<f64>,
    x_q: Vec<f64>,
    logits: Vec<f64>,
    l_qa: f64,
    l_g: f64,
    adv: Vec<f64>,
}

/// Tape handles a worker keeps for the backward pass.
struct ChunkVars {
    x_g: Var,
    x_q: Var,
    l_qa: Var,
    l_g: Option<Var>,
}

/// Backward seeds. `gx`/`gq` are per-sample rows of the contrastive
/// gradient, empty when that term is off; the scalar weights are 1/B or 0.
struct ChunkSeeds {
    gx: Vec<Vec<f64>>,
    gq: Vec<Vec<f64>>,
    qa_w: f64,
    g_w: f64,
}

enum WorkerMsg {
    Forward(Vec<SampleOut>),
    Grads(Vec<Vec<f64>>),
    Failed(Error),
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Forward pass for one contiguous chunk on one tape.
fn chunk_task(
    model: &Model,
    samples: &[&QASample],
    cfg: &TrainConfig,
) -> Result<(Tape<f64>, Vec<ChunkVars>, Vec<SampleOut>)> {
    let mut tape = Tape::new();
    let mut vars = Vec::with_capacity(samples.len());
    let mut outs = Vec::with_capacity(samples.len());
    for sample in samples {
        let fwd = model.forward_sample(&mut tape, sample)?;
        let l_g = if cfg.adv {
            Some(loss_generator(&mut tape, &model.disc, fwd.adv_nodes)?)
        } else {
            None
        };
        outs.push(SampleOut {
            x_g: tape.value(fwd.x_g).to_vec(),
            x_q: tape.value(fwd.x_q).to_vec(),
            logits: tape.value(fwd.logits).to_vec(),
            l_qa: tape.scalar_value(fwd.l_qa),
            l_g: l_g.map_or(0.0, |v| tape.scalar_value(v)),
            adv: if cfg.adv {
                tape.value(fwd.adv_nodes).to_vec()
            } else {
                Vec::new()
            },
        });
        vars.push(ChunkVars {
            x_g: fwd.x_g,
            x_q: fwd.x_q,
            l_qa: fwd.l_qa,
            l_g,
        });
    }
    Ok((tape, vars, outs))
}

/// Seeds the chunk tape with every enabled loss root in one pass and
/// flushes parameter gradients.
fn chunk_backward(tape: &mut Tape<f64>, vars: &[ChunkVars], seeds: &ChunkSeeds) -> Result<()> {
    let mut roots: Vec<(Var, Vec<f64>)> = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        if !seeds.gx.is_empty() {
            roots.push((v.x_g, seeds.gx[i].clone()));
            roots.push((v.x_q, seeds.gq[i].clone()));
        }
        if seeds.qa_w != 0.0 {
            roots.push((v.l_qa, vec![seeds.qa_w]));
        }
        if seeds.g_w != 0.0 {
            if let Some(l_g) = v.l_g {
                roots.push((l_g, vec![seeds.g_w]));
            }
        }
    }
    if roots.is_empty() {
        return Err(Error::Contract(
            "no loss term reaches this batch; check the loss switches".into(),
        ));
    }
    tape.backward_seeded(&roots)?;
    tape.flush_leaf_grads();
    Ok(())
}

struct ContrastiveTerms {
    l_n: f64,
    l_kl: f64,
    gx: Vec<Vec<f64>>,
    gq: Vec<Vec<f64>>,
}

/// Batch contrastive terms on a fresh tape over detached embeddings.
/// When learning, returns the gradient rows the sample tapes need.
fn contrastive_terms(
    outs: &[SampleOut],
    d: usize,
    tau: f64,
    learn: bool,
) -> Result<ContrastiveTerms> {
    let b = outs.len();
    let mut q_rows = Vec::with_capacity(b * d);
    let mut g_rows = Vec::with_capacity(b * d);
    for out in outs {
        q_rows.extend_from_slice(&out.x_q);
        g_rows.extend_from_slice(&out.x_g);
    }
    let mut tape = Tape::new();
    let q = tape.input(b, d, q_rows);
    let g = tape.input(b, d, g_rows);
    let l_n = info_nce(&mut tape, q, g, tau)?;
    let l_kl = kl_match(&mut tape, q, g)?;
    let mut terms = ContrastiveTerms {
        l_n: tape.scalar_value(l_n),
        l_kl: tape.scalar_value(l_kl),
        gx: Vec::new(),
        gq: Vec::new(),
    };
    if !learn {
        return Ok(terms);
    }
    tape.backward_seeded(&[(l_n, vec![1.0]), (l_kl, vec![1.0])])?;
    let gq_flat = tape.grad(q).expect("inputs carry gradients");
    let gx_flat = tape.grad(g).expect("inputs carry gradients");
    terms.gq = gq_flat.chunks(d).map(<[f64]>::to_vec).collect();
    terms.gx = gx_flat.chunks(d).map(<[f64]>::to_vec).collect();
    Ok(terms)
}

/// Discriminator loss over prior rows and detached node rows, plus the
/// mean generator term. Steps the discriminator when asked.
fn adversarial_terms(
    model: &Model,
    outs: &[SampleOut],
    prior: &mut PriorSampler,
    step: Option<(&mut AdamW, &[ParamRef<f64>])>,
) -> Result<(f64, f64)> {
    let d = model.dims.d;
    let mut fake = Vec::new();
    for out in outs {
        fake.extend_from_slice(&out.adv);
    }
    let real: Vec<f64> = prior.sample_batch(fake.len() / d);
    let mut tape = Tape::new();
    let l_d = loss_discriminator(&mut tape, &model.disc, &real, &fake)?;
    let l_d_value = tape.scalar_value(l_d);
    if let Some((opt, refs)) = step {
        tape.backward(l_d)?;
        opt.step(refs)?;
    }
    let l_g = outs.iter().map(|o| o.l_g).sum::<f64>() / outs.len() as f64;
    Ok((l_d_value, l_g))
}

/// Everything after the per-sample forwards: accuracy counts, batch loss
/// terms, the discriminator step, and the backward seeds. Runs on the
/// main thread over detached values, so results do not depend on how the
/// batch was chunked.
fn finish_batch(
    model: &Model,
    batch: &[&QASample],
    cfg: &TrainConfig,
    prior: &mut PriorSampler,
    outs: &[SampleOut],
    step: Option<&mut StepRefs<'_>>,
) -> Result<(LossBundle, BatchCounts, Option<ChunkSeeds>)> {
    let b = batch.len() as f64;
    let learn = step.is_some();

    let mut counts = BatchCounts::default();
    for (sample, out) in batch.iter().zip(outs) {
        let hit = usize::from(argmax(&out.logits) == sample.gold);
        counts.correct += hit;
        counts.total += 1;
        let slot = &mut counts.by_type[sample.question_type as usize];
        slot.0 += hit;
        slot.1 += 1;
    }

    let l_qa = if cfg.qa {
        outs.iter().map(|o| o.l_qa).sum::<f64>() / b
    } else {
        0.0
    };

    let (mut l_n, mut l_kl) = (0.0, 0.0);
    let (mut gx, mut gq) = (Vec::new(), Vec::new());
    if cfg.contrastive && outs.len() >= 2 {
        let terms = contrastive_terms(outs, cfg.d, cfg.tau, learn)?;
        l_n = terms.l_n;
        l_kl = terms.l_kl;
        gx = terms.gx;
        gq = terms.gq;
    }

    let (mut l_d, mut l_g) = (0.0, 0.0);
    if cfg.adv {
        let disc_step = step.map(|s| (&mut *s.disc_opt, s.disc_refs));
        let (d_term, g_term) = adversarial_terms(model, outs, prior, disc_step)?;
        l_d = d_term;
        l_g = g_term;
    }

    let bundle = LossBundle::assemble(l_d, l_g, l_n, l_kl, l_qa);
    let seeds = learn.then(|| ChunkSeeds {
        gx,
        gq,
        qa_w: if cfg.qa { 1.0 / b } else { 0.0 },
        g_w: if cfg.adv { 1.0 / b } else { 0.0 },
    });
    Ok((bundle, counts, seeds))
}

/// One batch: forward, batch terms, and, when `step` is present, the
/// discriminator and main optimizer steps. Loss values are assembled on
/// the main thread from detached values in sample order, so the bundle is
/// identical for every worker count; summed parameter gradients can
/// differ from single-threaded runs only in final-ulp rounding.
pub fn run_batch(
    model: &Model,
    batch: &[&QASample],
    cfg: &TrainConfig,
    prior: &mut PriorSampler,
    threads: usize,
    mut step: Option<StepRefs<'_>>,
) -> Result<(LossBundle, BatchCounts)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let workers = threads.clamp(1, batch.len());
    if workers == 1 {
        let (mut tape, vars, outs) = chunk_task(model, batch, cfg)?;
        let (bundle, counts, seeds) = finish_batch(model, batch, cfg, prior, &outs, step.as_mut())?;
        if let Some(seeds) = seeds {
            let step = step.as_mut().expect("seeds imply a step context");
            chunk_backward(&mut tape, &vars, &seeds)?;
            step.main_opt.step(step.main_refs)?;
        }
        return Ok((bundle, counts));
    }
    run_batch_threaded(model, batch, cfg, prior, workers, step)
}

fn chunk_bounds(total: usize, workers: usize) -> Vec<Range<usize>> {
    let workers = workers.clamp(1, total.max(1));
    let base = total / workers;
    let extra = total % workers;
    let mut bounds = Vec::with_capacity(workers);
    let mut start = 0;
    for i in 0..workers {
        let len = base + usize::from(i < extra);
        bounds.push(start..start + len);
        start += len;
    }
    bounds
}

fn run_batch_threaded(
    model: &Model,
    batch: &[&QASample],
    cfg: &TrainConfig,
    prior: &mut PriorSampler,
    workers: usize,
    mut step: Option<StepRefs<'_>>,
) -> Result<(LossBundle, BatchCounts)> {
    let snapshot = model.snapshot();
    let dims = model.dims.clone();
    let bounds = chunk_bounds(batch.len(), workers);

    std::thread::scope(|scope| {
        let mut seed_txs = Vec::with_capacity(bounds.len());
        let mut out_rxs = Vec::with_capacity(bounds.len());
        for range in &bounds {
            let (seed_tx, seed_rx) = mpsc::channel::<Option<ChunkSeeds>>();
            let (out_tx, out_rx) = mpsc::channel::<WorkerMsg>();
            let chunk = &batch[range.clone()];
            let snapshot = &snapshot;
            let dims = &dims;
            scope.spawn(move || {
                let view = match Model::from_snapshot(dims, snapshot) {
                    Ok(view) => view,
                    Err(e) => {
                        let _ = out_tx.send(WorkerMsg::Failed(e));
                        return;
                    }
                };
                let (mut tape, vars, outs) = match chunk_task(&view, chunk, cfg) {
                    Ok(built) => built,
                    Err(e) => {
                        let _ = out_tx.send(WorkerMsg::Failed(e));
                        return;
                    }
                };
                if out_tx.send(WorkerMsg::Forward(outs)).is_err() {
                    return;
                }
                let seeds = match seed_rx.recv() {
                    Ok(Some(seeds)) => seeds,
                    _ => return,
                };
                if let Err(e) = chunk_backward(&mut tape, &vars, &seeds) {
                    let _ = out_tx.send(WorkerMsg::Failed(e));
                    return;
                }
                let grads: Vec<Vec<f64>> = view
                    .main_params()
                    .into_iter()
                    .map(|(_, p)| p.borrow().grad.clone())
                    .collect();
                let _ = out_tx.send(WorkerMsg::Grads(grads));
            });
            seed_txs.push(seed_tx);
            out_rxs.push(out_rx);
        }

        let mut outs = Vec::with_capacity(batch.len());
        for rx in &out_rxs {
            match rx.recv() {
                Ok(WorkerMsg::Forward(chunk_outs)) => outs.extend(chunk_outs),
                Ok(WorkerMsg::Failed(e)) => return Err(e),
                Ok(WorkerMsg::Grads(_)) => unreachable!("gradients before seeds"),
                Err(_) => return Err(Error::Contract("worker exited before forward".into())),
            }
        }

        let (bundle, counts, seeds) = finish_batch(model, batch, cfg, prior, &outs, step.as_mut())?;
        let Some(seeds) = seeds else {
            for tx in &seed_txs {
                let _ = tx.send(None);
            }
            return Ok((bundle, counts));
        };

        for (tx, range) in seed_txs.iter().zip(&bounds) {
            let chunk_seeds = ChunkSeeds {
                gx: if seeds.gx.is_empty() {
                    Vec::new()
                } else {
                    seeds.gx[range.clone()].to_vec()
                },
                gq: if seeds.gq.is_empty() {
                    Vec::new()
                } else {
                    seeds.gq[range.clone()].to_vec()
                },
                qa_w: seeds.qa_w,
                g_w: seeds.g_w,
            };
            if tx.send(Some(chunk_seeds)).is_err() {
                return Err(Error::Contract("worker exited before seeds".into()));
            }
        }

        let step = step.as_mut().expect("seeds imply a step context");
        for rx in &out_rxs {
            match rx.recv() {
                Ok(WorkerMsg::Grads(grads)) => {
                    if grads.len() != step.main_refs.len() {
                        return Err(Error::Contract(
                            "worker gradient list does not match the parameter list".into(),
                        ));
                    }
                    for (param, grad) in step.main_refs.iter().zip(&grads) {
                        let mut tensor = param.borrow_mut();
                        if tensor.grad.len() != grad.len() {
                            return Err(Error::Contract("worker gradient size mismatch".into()));
                        }
                        for (dst, src) in tensor.grad.iter_mut().zip(grad) {
                            *dst += *src;
                        }
                    }
                }
                Ok(WorkerMsg::Failed(e)) => return Err(e),
                Ok(WorkerMsg::Forward(_)) => unreachable!("forward sent twice"),
                Err(_) => return Err(Error::Contract("worker exited before gradients".into())),
            }
        }
        step.main_opt.step(step.main_refs)?;
        Ok((bundle, counts))
    })
}

/// Index ranges for batching `total` samples in order. A trailing batch
/// of one is folded into its predecessor so the contrastive terms always
/// see at least two samples whenever the split has two.
fn batch_ranges(total: usize, batch: usize) -> Vec<Range<usize>> {
    let mut ranges = Vec::new();
    let mut start = 0;
    while start < total {
        let end = (start + batch).min(total);
        ranges.push(start..end);
        start = end;
    }
    if ranges.len() >= 2 && ranges.last().map_or(false, |r| r.len() == 1) {
        let last = ranges.pop().expect("nonempty");
        let prev = ranges.pop().expect("len checked");
        ranges.push(prev.start..last.end);
    }
    ranges
}

fn acc_of(pair: (usize, usize)) -> f64 {
    if pair.1 == 0 {
        0.0
    } else {
        pair.0 as f64 / pair.1 as f64
    }
}

fn metrics_row(epoch: usize, split: Split, counts: &BatchCounts, losses: &LossBundle) -> MetricsRow {
    MetricsRow {
        epoch,
        split,
        acc_all: acc_of((counts.correct, counts.total)),
        acc_causal: acc_of(counts.by_type[0]),
        acc_temporal: acc_of(counts.by_type[1]),
        acc_descriptive: acc_of(counts.by_type[2]),
        l_d: losses.l_d,
        l_g: losses.l_g,
        l_n: losses.l_n,
        l_kl: losses.l_kl,
        l_qa: losses.l_qa,
        total: losses.total,
        wall_secs: 0.0,
    }
}

/// Sample-weighted mean of per-batch bundles, re-assembled so the total
/// equals the field-order sum of the averaged terms.
struct LossMeter {
    sums: [f64; 5],
    samples: usize,
}

impl LossMeter {
    fn new() -> LossMeter {
        LossMeter {
            sums: [0.0; 5],
            samples: 0,
        }
    }

    fn add(&mut self, bundle: &LossBundle, weight: usize) {
        let w = weight as f64;
        self.sums[0] += bundle.l_d * w;
        self.sums[1] += bundle.l_g * w;
        self.sums[2] += bundle.l_n * w;
        self.sums[3] += bundle.l_kl * w;
        self.sums[4] += bundle.l_qa * w;
        self.samples += weight;
    }

    fn mean(&self) -> LossBundle {
        let n = self.samples as f64;
        LossBundle::assemble(
            self.sums[0] / n,
            self.sums[1] / n,
            self.sums[2] / n,
            self.sums[3] / n,
            self.sums[4] / n,
        )
    }
}

/// Pure evaluation pass. No parameter reads are mutated, the prior noise
/// comes from an evaluation-only stream, and `wall_secs` stays 0, so two
/// calls over the same model and samples return identical rows.
pub fn evaluate_model(
    model: &Model,
    samples: &[QASample],
    cfg: &TrainConfig,
    split: Split,
    threads: usize,
) -> Result<MetricsRow> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluation needs at least one sample".into()));
    }
    let mut prior = PriorSampler::new(cfg.d, cfg.seed ^ EVAL_SALT);
    let mut counts = BatchCounts::default();
    let mut meter = LossMeter::new();
    for range in batch_ranges(samples.len(), cfg.batch) {
        let refs: Vec<&QASample> = samples[range].iter().collect();
        let (bundle, batch_counts) = run_batch(model, &refs, cfg, &mut prior, threads, None)?;
        meter.add(&bundle, refs.len());
        counts.merge(&batch_counts);
    }
    Ok(metrics_row(0, split, &counts, &meter.mean()))
}

/// Result of a training run. `best_values` is the parameter snapshot from
/// the epoch with the highest validation accuracy; ties keep the earlier
/// epoch.
#[derive(Debug)]
pub struct TrainOutcome {
    pub log: MetricsLog,
    pub bundles: Vec<LossBundle>,
    pub best_val_acc: f64,
    pub final_val_acc: f64,
    pub best_values: ParamValues,
    pub dims: ModelDims,
    pub checkpoint: Option<PathBuf>,
}

/// Trains on in-memory splits. With `out_dir` set, writes the best-epoch
/// checkpoint, the metrics log, and the CSV and SVG reports there.
pub fn train_on(
    cfg: &TrainConfig,
    train_data: &Dataset,
    val_data: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.samples.is_empty() || val_data.samples.is_empty() {
        return Err(Error::Contract(
            "training needs nonempty train and val splits".into(),
        ));
    }
    let threads = thread_count()?;
    let dims = cfg.dims(&train_data.meta);
    let model = Model::init(&dims, cfg.seed)?;
    let main_refs: Vec<ParamRef<f64>> =
        model.main_params().into_iter().map(|(_, p)| p).collect();
    let disc_refs: Vec<ParamRef<f64>> =
        model.disc_params().into_iter().map(|(_, p)| p).collect();
    let mut main_opt = AdamW::new(cfg.lr, &main_refs);
    let mut disc_opt = AdamW::new(cfg.lr, &disc_refs);
    let mut prior = PriorSampler::new(cfg.d, cfg.seed ^ PRIOR_SALT);

    let mut log = MetricsLog::default();
    let mut bundles = Vec::new();
    let mut best_val_acc = f64::NEG_INFINITY;
    let mut best_values = model.snapshot();
    let mut iteration = 0usize;

    for epoch in 0..cfg.epochs {
        let tick = Instant::now();
        let mut order: Vec<usize> = (0..train_data.samples.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ SHUFFLE_SALT ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        order.shuffle(&mut shuffle_rng);

        let mut counts = BatchCounts::default();
        let mut meter = LossMeter::new();
        for range in batch_ranges(order.len(), cfg.batch) {
            let refs: Vec<&QASample> = order[range]
                .iter()
                .map(|&i| &train_data.samples[i])
                .collect();
            let step = StepRefs {
                main_opt: &mut main_opt,
                disc_opt: &mut disc_opt,
                main_refs: &main_refs,
                disc_refs: &disc_refs,
            };
            let (bundle, batch_counts) =
                run_batch(&model, &refs, cfg, &mut prior, threads, Some(step))?;
            nan_check(iteration, &bundle)?;
            meter.add(&bundle, refs.len());
            counts.merge(&batch_counts);
            bundles.push(bundle);
            iteration += 1;
        }
        let mut train_row = metrics_row(epoch, Split::Train, &counts, &meter.mean());
        train_row.wall_secs = tick.elapsed().as_secs_f64();
        log.rows.push(train_row);

        let tick = Instant::now();
        let mut val_row = evaluate_model(&model, &val_data.samples, cfg, Split::Val, threads)?;
        val_row.epoch = epoch;
        val_row.wall_secs = tick.elapsed().as_secs_f64();
        if val_row.acc_all > best_val_acc {
            best_val_acc = val_row.acc_all;
            best_values = model.snapshot();
        }
        log.rows.push(val_row);
    }

    let final_val_acc = log
        .rows
        .last()
        .map(|row| row.acc_all)
        .expect("epochs >= 1 so the log is nonempty");
    let checkpoint = match out_dir {
        Some(dir) => Some(write_artifacts(
            dir,
            cfg,
            &dims,
            main_opt.info,
            &best_values,
            &log,
        )?),
        None => None,
    };
    Ok(TrainOutcome {
        log,
        bundles,
        best_val_acc,
        final_val_acc,
        best_values,
        dims,
        checkpoint,
    })
}

/// Trains from `train.manifest.jsonl` and `val.manifest.jsonl` in
/// `data_dir`.
pub fn train(cfg: &TrainConfig, data_dir: &Path, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let train_data = read_samples(&data_dir.join("train.manifest.jsonl"))?;
    let val_data = read_samples(&data_dir.join("val.manifest.jsonl"))?;
    train_on(cfg, &train_data, &val_data, out_dir)
}

fn write_artifacts(
    dir: &Path,
    cfg: &TrainConfig,
    dims: &ModelDims,
    optimizer: OptimizerInfo,
    values: &ParamValues,
    log: &MetricsLog,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let meta = CheckpointMeta {
        config: cfg.clone(),
        dims: dims.clone(),
        optimizer,
    };
    let path = dir.join("checkpoint.clgc");
    checkpoint::save(&path, &meta, values)?;
    let mut json = serde_json::to_string_pretty(log)?;
    json.push('\n');
    fs::write(dir.join("metrics.json"), json)?;
    emit_report(log, dir, &[ReportFormat::Csv, ReportFormat::Svg])?;
    Ok(path)
}

/// Evaluates a saved checkpoint against one split of a dataset directory.
pub fn evaluate(checkpoint_path: &Path, data_dir: &Path, split: Split) -> Result<MetricsRow> {
    let (meta, values) = checkpoint::load(checkpoint_path)?;
    let manifest = data_dir.join(format!("{}.manifest.jsonl", split.as_str()));
    let data = read_samples(&manifest)?;
    let dims = meta.config.dims(&data.meta);
    if dims != meta.dims {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained at {:?} but the dataset implies {:?}",
            meta.dims, dims
        )));
    }
    let model = Model::from_snapshot(&meta.dims, &values)?;
    evaluate_model(&model, &data.samples, &meta.config, split, thread_count()?)
}
