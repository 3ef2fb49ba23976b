//! Multi-object event graph over K clips of L frames with N object slots.
//!
//! Nodes are roi‖box feature rows; edges carry mapped cosine scores in
//! [0,1]. Same-frame pairs are spatial relations, cross-frame pairs are
//! temporal relations; both use the same similarity, the split exists so
//! callers can reason about the two families separately.

use crate::autodiff::{cosine, Real};
use crate::{Error, Result};

/// Box geometry layout: x1, y1, x2, y2, area, all normalized to [0,1].
pub const BOX_DIM: usize = 5;

/// One detected object in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectObservation<F: Real> {
    pub roi: Vec<F>,
    pub bbox: Vec<F>,
    /// Global frame index in 0..K*L.
    pub frame_index: usize,
    pub clip_index: usize,
}

impl<F: Real> ObjectObservation<F> {
    /// Zero-padded slot for a frame with fewer than N detections.
    pub fn padding(d1: usize, frame_index: usize, clip_index: usize) -> Self {
        ObjectObservation {
            roi: vec![F::ZERO; d1],
            bbox: vec![F::ZERO; BOX_DIM],
            frame_index,
            clip_index,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bbox.len() != BOX_DIM {
            return Err(Error::dim("observation box", self.bbox.len(), BOX_DIM));
        }
        let b: Vec<f64> = self.bbox.iter().map(|v| v.to_f64()).collect();
        let in_unit = b.iter().all(|&v| (0.0..=1.0).contains(&v));
        if !in_unit || b[0] > b[2] || b[1] > b[3] {
            return Err(Error::Layout(format!(
                "box [{:.4},{:.4},{:.4},{:.4},{:.4}] violates corner ordering or unit range",
                b[0], b[1], b[2], b[3], b[4]
            )));
        }
        Ok(())
    }
}

/// Dense spatio-temporal graph: X is M x (d1+5), A is M x M.
#[derive(Debug, Clone)]
pub struct EventGraph<F: Real> {
    pub x: Vec<F>,
    pub a: Vec<F>,
    pub node_dim: usize,
    pub nodes: usize,
    pub frame_of: Vec<usize>,
    pub clip_of: Vec<usize>,
}

impl<F: Real> EventGraph<F> {
    pub fn node(&self, i: usize) -> &[F] {
        &self.x[i * self.node_dim..(i + 1) * self.node_dim]
    }

    fn mapped_cosine(&self, i: usize, j: usize) -> F {
        let c = cosine(self.node(i), self.node(j)).expect("graph rows share a length");
        (c + F::ONE) * F::from_f64(0.5)
    }

    /// Relation score for two distinct nodes in the same frame.
    pub fn spatial_score(&self, i: usize, j: usize) -> Result<F> {
        if i == j {
            return Err(Error::Contract(format!(
                "spatial_score needs two distinct nodes, got {i} twice"
            )));
        }
        if self.frame_of[i] != self.frame_of[j] {
            return Err(Error::Contract(format!(
                "spatial_score expects one frame, got frames {} and {}",
                self.frame_of[i], self.frame_of[j]
            )));
        }
        Ok(self.mapped_cosine(i, j))
    }

    /// Relation score for two nodes in different frames.
    pub fn temporal_score(&self, i: usize, j: usize) -> Result<F> {
        if self.frame_of[i] == self.frame_of[j] {
            return Err(Error::Contract(format!(
                "temporal_score expects distinct frames, both nodes sit in frame {}",
                self.frame_of[i]
            )));
        }
        Ok(self.mapped_cosine(i, j))
    }
}

/// Stack observations into the node matrix, validating the clip-major,
/// frame-second, object-minor layout.
pub fn init_nodes<F: Real>(
    observations: &[ObjectObservation<F>],
    k: usize,
    l: usize,
    n: usize,
) -> Result<Vec<F>> {
    let m = k * l * n;
    if observations.len() != m {
        return Err(Error::Layout(format!(
            "expected {m} observations for K={k} L={l} N={n}, got {}",
            observations.len()
        )));
    }
    let d1 = observations[0].roi.len();
    let dim = d1 + BOX_DIM;
    let mut x = Vec::with_capacity(m * dim);
    for (row, obs) in observations.iter().enumerate() {
        if obs.roi.len() != d1 {
            return Err(Error::dim("observation roi", obs.roi.len(), d1));
        }
        if obs.bbox.len() != BOX_DIM {
            return Err(Error::dim("observation box", obs.bbox.len(), BOX_DIM));
        }
        let (want_clip, want_frame) = (row / (l * n), row / n);
        if obs.clip_index != want_clip || obs.frame_index != want_frame {
            return Err(Error::Layout(format!(
                "observation {row} carries clip {} frame {}, layout expects clip {want_clip} frame {want_frame}",
                obs.clip_index, obs.frame_index
            )));
        }
        x.extend_from_slice(&obs.roi);
        x.extend_from_slice(&obs.bbox);
    }
    Ok(x)
}

/// Build the dense event graph. a_ij is the mapped cosine of the node rows,
/// a_ii = 1; the upper triangle is mirrored so symmetry is exact.
pub fn build_graph<F: Real>(
    observations: &[ObjectObservation<F>],
    k: usize,
    l: usize,
    n: usize,
) -> Result<EventGraph<F>> {
    let x = init_nodes(observations, k, l, n)?;
    let m = k * l * n;
    let dim = x.len() / m;
    let mut graph = EventGraph {
        x,
        a: vec![F::ZERO; m * m],
        node_dim: dim,
        nodes: m,
        frame_of: observations.iter().map(|o| o.frame_index).collect(),
        clip_of: observations.iter().map(|o| o.clip_index).collect(),
    };
    for i in 0..m {
        graph.a[i * m + i] = F::ONE;
        for j in i + 1..m {
            let s = graph.mapped_cosine(i, j);
            graph.a[i * m + j] = s;
            graph.a[j * m + i] = s;
        }
    }
    Ok(graph)
}
