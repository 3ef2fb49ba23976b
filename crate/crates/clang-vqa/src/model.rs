//! Assembly of the full pipeline: graph hierarchy, discriminator, text
//! encoder, and answer head behind one parameter namespace.
//!
//! Training code moves parameters between threads as plain value
//! snapshots, so everything here is built to round-trip through
//! `snapshot` / `load_values` exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::Discriminator;
use crate::autodiff::{ParamRef, Tape, Var};
use crate::data::QASample;
use crate::error::{Error, Result};
use crate::graph::{build_graph, BOX_DIM};
use crate::pool::{forward_hierarchy, HierParams};
use crate::text::{qa_loss, score_candidates, AnswerHead, TextEncoder};

/// Geometry the checkpoint echoes back; everything a fresh process needs
/// to rebuild identical parameter shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Width of every hidden representation.
    pub d: usize,
    /// Cluster layers; 0 bypasses the hierarchy.
    pub p: usize,
    pub d1: usize,
    pub k: usize,
    pub l: usize,
    pub n: usize,
    pub encoder_depth: usize,
    pub frame_tags: bool,
    pub vocab_capacity: usize,
}

impl ModelDims {
    pub fn nodes(&self) -> usize {
        self.k * self.l * self.n
    }

    pub fn frames(&self) -> usize {
        self.k * self.l
    }

    pub fn in_dim(&self) -> usize {
        self.d1 + BOX_DIM
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d1 == 0 || self.k == 0 || self.l == 0 || self.n == 0 {
            return Err(Error::Contract("model dims must be positive".into()));
        }
        if self.encoder_depth != 1 && self.encoder_depth != 2 {
            return Err(Error::Contract(format!(
                "encoder_depth {} is not 1 or 2",
                self.encoder_depth
            )));
        }
        if self.vocab_capacity < 2 {
            return Err(Error::Contract(
                "vocabulary capacity below the reserved tokens".into(),
            ));
        }
        Ok(())
    }
}

/// Snapshot entry: name, rows, cols, values. Plain data, safe to move
/// across threads.
pub type ParamValues = Vec<(String, usize, usize, Vec<f64>)>;

pub struct Model {
    pub dims: ModelDims,
    pub hier: HierParams<f64>,
    pub disc: Discriminator<f64>,
    pub text: TextEncoder<f64>,
    pub head: AnswerHead<f64>,
}

/// Per-sample forward results the trainer stitches into batch losses.
pub struct SampleForward {
    /// 1 x d fused graph embedding.
    pub x_g: Var,
    /// 1 x d question embedding.
    pub x_q: Var,
    /// 1 x C candidate logits.
    pub logits: Var,
    pub l_qa: Var,
    /// Node matrix the discriminator judges.
    pub adv_nodes: Var,
}

impl Model {
    /// All parameters from one seeded stream, in a fixed module order, so
    /// a (dims, seed) pair pins every initial value.
    pub fn init(dims: &ModelDims, seed: u64) -> Result<Model> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hier = HierParams::init(
            &mut rng,
            dims.in_dim(),
            dims.frames(),
            dims.nodes(),
            dims.p,
            dims.d,
            dims.frame_tags,
        );
        let disc = Discriminator::init(&mut rng, dims.d);
        let text = TextEncoder::init(&mut rng, dims.vocab_capacity, dims.d, dims.encoder_depth);
        let head = AnswerHead::init(&mut rng, dims.d);
        Ok(Model {
            dims: dims.clone(),
            hier,
            disc,
            text,
            head,
        })
    }

    pub fn named_params(&self) -> Vec<(String, ParamRef<f64>)> {
        let mut out = self.hier.named_params();
        out.extend(self.disc.named_params());
        out.extend(self.text.named_params());
        out.extend(self.head.named_params());
        out
    }

    /// Everything the main objective trains: hierarchy, text, head.
    pub fn main_params(&self) -> Vec<(String, ParamRef<f64>)> {
        self.named_params()
            .into_iter()
            .filter(|(name, _)| !name.starts_with("disc."))
            .collect()
    }

    /// The discriminator's own parameters, stepped by a separate optimizer.
    pub fn disc_params(&self) -> Vec<(String, ParamRef<f64>)> {
        self.disc.named_params()
    }

    pub fn snapshot(&self) -> ParamValues {
        self.named_params()
            .into_iter()
            .map(|(name, p)| {
                let t = p.borrow();
                (name, t.rows(), t.cols(), t.data.clone())
            })
            .collect()
    }

    /// Overwrite parameter values from a snapshot. Names, order, and shapes
    /// must match this model exactly.
    pub fn load_values(&self, values: &ParamValues) -> Result<()> {
        let params = self.named_params();
        if params.len() != values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                params.len(),
                values.len()
            )));
        }
        for ((name, p), (got_name, rows, cols, data)) in params.iter().zip(values) {
            if name != got_name {
                return Err(Error::Checkpoint(format!(
                    "parameter {got_name} where {name} was expected"
                )));
            }
            let mut t = p.borrow_mut();
            if t.rows() != *rows || t.cols() != *cols || t.data.len() != data.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} is {}x{} here but {rows}x{cols} in the snapshot",
                    t.rows(),
                    t.cols()
                )));
            }
            t.data.copy_from_slice(data);
        }
        Ok(())
    }

    /// Identical architecture with the snapshot's values. The worker-side
    /// entry point for batch parallelism.
    pub fn from_snapshot(dims: &ModelDims, values: &ParamValues) -> Result<Model> {
        let model = Model::init(dims, 0)?;
        model.load_values(values)?;
        Ok(model)
    }

    /// Run one sample through graph building, pooling, text encoding, and
    /// answer scoring on the given tape.
    pub fn forward_sample(&self, tape: &mut Tape<f64>, sample: &QASample) -> Result<SampleForward> {
        let observations = sample.observations_f64();
        let graph = build_graph(&observations, self.dims.k, self.dims.l, self.dims.n)?;
        let hier = forward_hierarchy(tape, &self.hier, &graph)?;
        let x_q = self.text.encode_text(tape, &sample.question)?;
        let logits = score_candidates(
            tape,
            &self.text,
            &self.head,
            hier.fused.x_g,
            x_q,
            &sample.candidates,
        )?;
        let l_qa = qa_loss(tape, logits, sample.gold)?;
        Ok(SampleForward {
            x_g: hier.fused.x_g,
            x_q,
            logits,
            l_qa,
            adv_nodes: hier.adversarial_nodes(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::data::{generate_samples, DatasetSpec};

    fn tiny_dims() -> ModelDims {
        ModelDims {
            d: 6,
            p: 2,
            d1: 4,
            k: 2,
            l: 2,
            n: 3,
            encoder_depth: 2,
            frame_tags: true,
            vocab_capacity: 32,
        }
    }

    fn tiny_sample() -> QASample {
        let spec = DatasetSpec {
            num_samples: 1,
            k: 2,
            l: 2,
            n: 3,
            e: 2,
            predicates: 4,
            d1: 4,
            ..DatasetSpec::default()
        };
        generate_samples(&spec, 5).unwrap().remove(0)
    }

    #[test]
    fn init_is_deterministic_in_dims_and_seed() {
        let dims = tiny_dims();
        let a = Model::init(&dims, 3).unwrap();
        let b = Model::init(&dims, 3).unwrap();
        assert_eq!(a.snapshot(), b.snapshot());
        let c = Model::init(&dims, 4).unwrap();
        assert_ne!(a.snapshot(), c.snapshot());
    }

    #[test]
    fn snapshot_round_trips_through_a_fresh_model() {
        let dims = tiny_dims();
        let a = Model::init(&dims, 3).unwrap();
        let b = Model::from_snapshot(&dims, &a.snapshot()).unwrap();
        assert_eq!(a.snapshot(), b.snapshot());
    }

    #[test]
    fn load_values_rejects_renames_and_reshapes() {
        let dims = tiny_dims();
        let a = Model::init(&dims, 3).unwrap();
        let mut renamed = a.snapshot();
        renamed[0].0 = "hier.w_out".into();
        assert!(matches!(a.load_values(&renamed), Err(Error::Checkpoint(_))));
        let mut reshaped = a.snapshot();
        reshaped[0].1 += 1;
        assert!(matches!(a.load_values(&reshaped), Err(Error::Checkpoint(_))));
        let truncated = a.snapshot()[1..].to_vec();
        assert!(matches!(a.load_values(&truncated), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn parameter_partition_is_disjoint_and_complete() {
        let model = Model::init(&tiny_dims(), 3).unwrap();
        let all = model.named_params();
        let main = model.main_params();
        let disc = model.disc_params();
        assert_eq!(main.len() + disc.len(), all.len());
        assert!(disc.iter().all(|(n, _)| n.starts_with("disc.")));
        assert!(main.iter().all(|(n, _)| !n.starts_with("disc.")));
        let mut names: Vec<&str> = all.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), all.len(), "parameter names collide");
    }

    #[test]
    fn forward_sample_has_the_contracted_shapes() {
        let dims = tiny_dims();
        let model = Model::init(&dims, 3).unwrap();
        let sample = tiny_sample();
        let mut tape = Tape::new();
        let fwd = model.forward_sample(&mut tape, &sample).unwrap();
        assert_eq!(tape.shape(fwd.x_g), (1, dims.d));
        assert_eq!(tape.shape(fwd.x_q), (1, dims.d));
        assert_eq!(tape.shape(fwd.logits), (1, sample.candidates.len()));
        assert_eq!(tape.shape(fwd.l_qa), (1, 1));
        assert_eq!(tape.shape(fwd.adv_nodes).1, dims.d);
        assert!(tape.scalar_value(fwd.l_qa).is_finite());
    }

    #[test]
    fn whole_pipeline_gradients_match_finite_differences() {
        let dims = tiny_dims();
        let model = Model::init(&dims, 3).unwrap();
        let sample = tiny_sample();
        let params: Vec<ParamRef<f64>> =
            model.main_params().into_iter().map(|(_, p)| p).collect();
        let report = gradcheck::check(
            &params,
            |tape, _| {
                let fwd = model.forward_sample(tape, &sample)?;
                let sq = tape.mul(fwd.x_g, fwd.x_q)?;
                let probe = tape.mean_all(sq);
                Ok(tape.add(fwd.l_qa, probe)?)
            },
            3,
            11,
        )
        .unwrap();
        assert!(report.checked > 0);
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }
}
