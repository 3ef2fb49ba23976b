//! Multi-layer GNN-cluster hierarchy.
//!
//! Each layer embeds the current graph with one GAT, assigns nodes to
//! n_next clusters with a second GAT plus row softmax, coarsens X and A
//! through the assignment, refines the coarse graph with two GraphSage
//! passes, and mean-pools the refined nodes into one vector per layer.
//! The per-layer vectors are fused by single-head self-attention into the
//! graph embedding X_g.

use crate::autodiff::{param, ParamRef, Real, Tape, Var};
use crate::gnn::{gat_forward, sage_forward, GatLayer, SageLayer};
use crate::graph::EventGraph;
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Which half of the hourglass a cluster step sits in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolPhase {
    Shrink,
    Expand,
}

/// Everything one cluster step leaves on the tape.
///
/// `x_next` is the raw coarsening S'Z; `x_refined` is what the two Sage
/// passes make of it and is what the next layer and the pooling read.
#[derive(Debug)]
pub struct ClusterLevel {
    pub z: Var,
    pub s: Var,
    pub x_next: Var,
    pub a_next: Var,
    pub x_refined: Var,
    pub pooled: Var,
}

pub struct FusedGraphEmbedding {
    /// 1 x d graph representation.
    pub x_g: Var,
    /// P x P attention rows over the layer-pooled vectors.
    pub layer_weights: Var,
}

/// Trainable pieces of one cluster layer.
pub struct LevelParams<F: Real> {
    pub gat_embed: GatLayer<F>,
    pub gat_pool: GatLayer<F>,
    pub sage_a: SageLayer<F>,
    pub sage_b: SageLayer<F>,
    pub n_next: usize,
}

impl<F: Real> LevelParams<F> {
    /// `n_prev` is the incoming node count. Near-uniform assignments give
    /// the coarsening S'Z column masses of about n_prev/n_next, so the
    /// first Sage carries the inverse as an init gain; without it the
    /// shrink half of the schedule compounds the factor until the pool
    /// softmax saturates.
    pub fn init(rng: &mut ChaCha8Rng, d: usize, n_prev: usize, n_next: usize) -> Self {
        LevelParams {
            gat_embed: GatLayer::init(rng, d, d),
            gat_pool: GatLayer::init(rng, d, n_next),
            sage_a: SageLayer::init_gained(rng, d, d, n_next as f64 / n_prev as f64),
            sage_b: SageLayer::init(rng, d, d),
            n_next,
        }
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, ParamRef<F>)>) {
        out.push((format!("{prefix}.embed.w"), self.gat_embed.w.clone()));
        out.push((format!("{prefix}.embed.attn"), self.gat_embed.attn.clone()));
        out.push((format!("{prefix}.pool.w"), self.gat_pool.w.clone()));
        out.push((format!("{prefix}.pool.attn"), self.gat_pool.attn.clone()));
        out.push((format!("{prefix}.sage_a.self"), self.sage_a.w_self.clone()));
        out.push((format!("{prefix}.sage_a.neigh"), self.sage_a.w_neigh.clone()));
        out.push((format!("{prefix}.sage_b.self"), self.sage_b.w_self.clone()));
        out.push((format!("{prefix}.sage_b.neigh"), self.sage_b.w_neigh.clone()));
    }
}

/// Query/key/value maps of the fusion attention.
pub struct FuseParams<F: Real> {
    pub wq: ParamRef<F>,
    pub wk: ParamRef<F>,
    pub wv: ParamRef<F>,
    pub d: usize,
}

impl<F: Real> FuseParams<F> {
    pub fn init(rng: &mut ChaCha8Rng, d: usize) -> Self {
        let mut mk = || {
            let s = (6.0 / (2 * d) as f64).sqrt();
            let data = (0..d * d)
                .map(|_| F::from_f64(rng.gen_range(-s..s)))
                .collect();
            param(d, d, data)
        };
        FuseParams {
            wq: mk(),
            wk: mk(),
            wv: mk(),
            d,
        }
    }
}

/// Shrink-then-expand cluster sizes, length `p`, ending back at `m`.
///
/// First half halves with floor 2; the second half mirrors the first in
/// reverse (n_l = n_{p-l}), which for odd `p` keeps the middle layer at
/// the minimum reached.
pub fn layer_schedule(m: usize, p: usize) -> Vec<usize> {
    assert!(m >= 2, "schedule needs at least two nodes");
    let mut sizes = vec![m];
    for _ in 0..p / 2 {
        let prev = *sizes.last().unwrap();
        sizes.push(usize::max(prev.div_ceil(2), 2));
    }
    let mut out = sizes[1..].to_vec();
    for l in p / 2 + 1..=p {
        out.push(sizes[p - l]);
    }
    out
}

/// One coarsening step. `phase` guards against a widening assignment while
/// the schedule is still shrinking.
pub fn gnn_cluster_step<F: Real>(
    tape: &mut Tape<F>,
    params: &LevelParams<F>,
    a: Var,
    x: Var,
    n_next: usize,
    phase: PoolPhase,
) -> Result<ClusterLevel> {
    let (n_l, _) = tape.shape(x);
    if phase == PoolPhase::Shrink && n_next > n_l {
        return Err(Error::Schedule(format!(
            "shrink step cannot widen {n_l} nodes to {n_next}"
        )));
    }
    let pool_logits = gat_forward(tape, &params.gat_pool, a, x)?;
    let s = tape.row_softmax(pool_logits)?;
    finish_cluster_step(tape, params, a, x, s)
}

/// Test hook: run the step with a caller-supplied assignment matrix.
pub fn cluster_step_with_fixed_assignment<F: Real>(
    tape: &mut Tape<F>,
    params: &LevelParams<F>,
    a: Var,
    x: Var,
    s: Var,
) -> Result<ClusterLevel> {
    finish_cluster_step(tape, params, a, x, s)
}

fn finish_cluster_step<F: Real>(
    tape: &mut Tape<F>,
    params: &LevelParams<F>,
    a: Var,
    x: Var,
    s: Var,
) -> Result<ClusterLevel> {
    let z = gat_forward(tape, &params.gat_embed, a, x)?;
    let st = tape.transpose(s);
    let x_next = tape.matmul(st, z)?;
    let sa = tape.matmul(st, a)?;
    let a_next = tape.matmul(sa, s)?;
    let refined = sage_forward(tape, &params.sage_a, a_next, x_next)?;
    let x_refined = sage_forward(tape, &params.sage_b, a_next, refined)?;
    let pooled = tape.col_mean(x_refined);
    Ok(ClusterLevel {
        z,
        s,
        x_next,
        a_next,
        x_refined,
        pooled,
    })
}

/// Scaled dot-product self-attention over the stacked pooled vectors,
/// then a mean over the attended rows.
pub fn multi_scale_fuse<F: Real>(
    tape: &mut Tape<F>,
    params: &FuseParams<F>,
    pooled: Var,
) -> Result<FusedGraphEmbedding> {
    let wq = tape.leaf(&params.wq);
    let wk = tape.leaf(&params.wk);
    let wv = tape.leaf(&params.wv);
    let q = tape.matmul(pooled, wq)?;
    let k = tape.matmul(pooled, wk)?;
    let v = tape.matmul(pooled, wv)?;
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, F::from_f64(1.0 / (params.d as f64).sqrt()));
    let weights = tape.row_softmax(scores)?;
    let attended = tape.matmul(weights, v)?;
    let x_g = tape.col_mean(attended);
    Ok(FusedGraphEmbedding {
        x_g,
        layer_weights: weights,
    })
}

/// The whole pooling stack.
pub struct HierParams<F: Real> {
    /// Input projection, (d1+5) x d.
    pub w_in: ParamRef<F>,
    /// Per-frame additive tags, K*L x d. Node features alone carry no
    /// ordering, so without these every temporal question collapses to
    /// chance.
    pub frame_embed: Option<ParamRef<F>>,
    pub levels: Vec<LevelParams<F>>,
    pub fuse: FuseParams<F>,
    pub schedule: Vec<usize>,
    pub d: usize,
}

impl<F: Real> HierParams<F> {
    pub fn init(
        rng: &mut ChaCha8Rng,
        in_dim: usize,
        frames: usize,
        m: usize,
        p: usize,
        d: usize,
        frame_tags: bool,
    ) -> Self {
        let w_in = {
            let s = (6.0 / (in_dim + d) as f64).sqrt();
            let data = (0..in_dim * d)
                .map(|_| F::from_f64(rng.gen_range(-s..s)))
                .collect();
            param(in_dim, d, data)
        };
        let frame_embed = frame_tags.then(|| {
            let s = 0.1;
            let data = (0..frames * d)
                .map(|_| F::from_f64(rng.gen_range(-s..s)))
                .collect();
            param(frames, d, data)
        });
        let schedule = layer_schedule(m, p);
        let mut n_prev = m;
        let levels = schedule
            .iter()
            .map(|&n_next| {
                let level = LevelParams::init(rng, d, n_prev, n_next);
                n_prev = n_next;
                level
            })
            .collect();
        HierParams {
            w_in,
            frame_embed,
            levels,
            fuse: FuseParams::init(rng, d),
            schedule,
            d,
        }
    }

    pub fn named_params(&self) -> Vec<(String, ParamRef<F>)> {
        let mut out = vec![("hier.w_in".to_string(), self.w_in.clone())];
        if let Some(fe) = &self.frame_embed {
            out.push(("hier.frame_embed".to_string(), fe.clone()));
        }
        for (l, level) in self.levels.iter().enumerate() {
            level.named(&format!("hier.level{l}"), &mut out);
        }
        out.push(("hier.fuse.wq".to_string(), self.fuse.wq.clone()));
        out.push(("hier.fuse.wk".to_string(), self.fuse.wk.clone()));
        out.push(("hier.fuse.wv".to_string(), self.fuse.wv.clone()));
        out
    }
}

pub struct HierOutput {
    pub fused: FusedGraphEmbedding,
    pub levels: Vec<ClusterLevel>,
    /// Projected input nodes, M x d; the adversarial target when P=0.
    pub projected: Var,
}

impl HierOutput {
    /// Node matrix handed to the discriminator: the last refined level,
    /// or the projected inputs when the hierarchy is bypassed.
    pub fn adversarial_nodes(&self) -> Var {
        self.levels
            .last()
            .map(|l| l.x_refined)
            .unwrap_or(self.projected)
    }
}

/// Project the graph features, run the scheduled cluster layers, and fuse.
/// With P=0 the hierarchy is bypassed and X_g is the plain node mean.
pub fn forward_hierarchy<F: Real>(
    tape: &mut Tape<F>,
    params: &HierParams<F>,
    graph: &EventGraph<F>,
) -> Result<HierOutput> {
    let m = graph.nodes;
    let x_raw = tape.constant(m, graph.node_dim, graph.x.clone());
    let a0 = tape.constant(m, m, graph.a.clone());
    let w_in = tape.leaf(&params.w_in);
    let mut x = tape.matmul(x_raw, w_in)?;
    if let Some(fe) = &params.frame_embed {
        let table = tape.leaf(fe);
        let tags = tape.gather_rows(table, &graph.frame_of)?;
        x = tape.add(x, tags)?;
    }
    let projected = x;

    let p = params.schedule.len();
    if p == 0 {
        let x_g = tape.col_mean(projected);
        let layer_weights = tape.constant(0, 0, Vec::new());
        return Ok(HierOutput {
            fused: FusedGraphEmbedding { x_g, layer_weights },
            levels: Vec::new(),
            projected,
        });
    }

    let mut a = a0;
    let mut levels = Vec::with_capacity(p);
    for (l, level) in params.levels.iter().enumerate() {
        let phase = if l < p / 2 {
            PoolPhase::Shrink
        } else {
            PoolPhase::Expand
        };
        let step = gnn_cluster_step(tape, level, a, x, level.n_next, phase)?;
        a = step.a_next;
        x = step.x_refined;
        levels.push(step);
    }
    let pooled_vars: Vec<Var> = levels.iter().map(|l| l.pooled).collect();
    let stacked = tape.concat_rows(&pooled_vars)?;
    let fused = multi_scale_fuse(tape, &params.fuse, stacked)?;
    Ok(HierOutput {
        fused,
        levels,
        projected,
    })
}
