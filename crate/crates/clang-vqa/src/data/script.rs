//! Event scripts: the generator's latent ground truth.
//!
//! A script places E entities at fixed home positions and lets exactly one
//! of them act in each clip. Every question is derived from the script
//! alone, so an oracle that reads it answers perfectly; the rendered
//! features only make the same structure observable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ObjectObservation;

/// Question taxonomy shared by the generator and the metrics reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Causal,
    Temporal,
    Descriptive,
}

impl QuestionType {
    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::Causal => "causal",
            QuestionType::Temporal => "temporal",
            QuestionType::Descriptive => "descriptive",
        }
    }
}

/// One action: `subject` performs `predicate` through the frames of `clip`.
/// `objects` lists further participants; the current templates leave it
/// empty because the predicates are intransitive motion patterns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub subject: usize,
    pub predicate: usize,
    #[serde(default)]
    pub objects: Vec<usize>,
    pub clip: usize,
}

impl Event {
    /// Half-open frame interval covered by the event.
    pub fn interval(&self, l: usize) -> (usize, usize) {
        (self.clip * l, (self.clip + 1) * l)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventScript {
    /// Global type id per entity, distinct within one script. The
    /// appearance prototype of entity i is the unit vector for
    /// `entity_types[i]`.
    pub entity_types: Vec<u32>,
    /// Home box centers per entity; trajectories are derived from these
    /// plus the per-clip motion patterns, so storing the centers keeps the
    /// full trajectory reconstructible.
    pub homes: Vec<[f32; 2]>,
    pub events: Vec<Event>,
    /// (cause index, effect index) pairs into `events`.
    pub causal: Vec<[usize; 2]>,
}

/// Largest center displacement any motion pattern produces.
pub const MOTION_AMP: f64 = 0.1;
/// Base box half-size; `grew` scales it up to 1.8x, which together with
/// MOTION_AMP and the home grid keeps every box inside the unit square.
pub const BASE_HALF: f64 = 0.08;

/// Center offset (dx, dy) and size scale of pattern `predicate` at phase
/// t in [0, 1]. Patterns 0..8 are the named predicates; anything else is
/// treated as standing still.
pub fn motion_offset(predicate: usize, t: f64) -> (f64, f64, f64) {
    use std::f64::consts::PI;
    match predicate {
        0 => (MOTION_AMP * t, 0.0, 1.0),
        1 => (-MOTION_AMP * t, 0.0, 1.0),
        2 => (0.0, -MOTION_AMP * t, 1.0),
        3 => (0.0, MOTION_AMP * t, 1.0),
        4 => (0.0, 0.0, 1.0 + 0.8 * t),
        5 => (0.0, 0.0, 1.0 - 0.6 * t),
        6 => (0.0, -MOTION_AMP * (2.0 * PI * t).sin().abs(), 1.0),
        7 => (MOTION_AMP * (2.0 * PI * t).sin(), 0.0, 1.0),
        _ => (0.0, 0.0, 1.0),
    }
}

impl EventScript {
    /// Structural integrity of the script against the declared geometry.
    pub fn validate(&self, k: usize, l: usize) -> Result<()> {
        let e = self.entity_types.len();
        if self.homes.len() != e {
            return Err(Error::Format(format!(
                "script lists {e} entities but {} homes",
                self.homes.len()
            )));
        }
        for (i, ev) in self.events.iter().enumerate() {
            let (lo, hi) = ev.interval(l);
            if ev.clip >= k || hi > k * l || lo >= hi {
                return Err(Error::Format(format!(
                    "event {i} covers frames {lo}..{hi}, outside 0..{}",
                    k * l
                )));
            }
            if ev.subject >= e || ev.objects.iter().any(|&o| o >= e) {
                return Err(Error::Format(format!(
                    "event {i} references an entity outside 0..{e}"
                )));
            }
        }
        for link in &self.causal {
            if link[0] >= self.events.len() || link[1] >= self.events.len() {
                return Err(Error::Format(format!(
                    "causal link {link:?} references a missing event"
                )));
            }
        }
        Ok(())
    }

    pub fn event_in_clip(&self, clip: usize) -> Option<&Event> {
        self.events.iter().find(|ev| ev.clip == clip)
    }

    pub fn event_of_subject(&self, entity: usize) -> Option<&Event> {
        self.events.iter().find(|ev| ev.subject == entity)
    }

    /// Event that the given event index is caused by, via the causal links.
    pub fn cause_of(&self, effect_index: usize) -> Option<&Event> {
        self.causal
            .iter()
            .find(|link| link[1] == effect_index)
            .map(|link| &self.events[link[0]])
    }

    /// Box of `entity` at frame `frame_in_clip` of `clip`. Non-acting
    /// entities sit still at their home; the clip's actor follows its
    /// predicate's motion pattern.
    pub fn box_at(&self, entity: usize, clip: usize, frame_in_clip: usize, l: usize) -> [f64; 4] {
        let [hx, hy] = self.homes[entity];
        let (mut cx, mut cy) = (hx as f64, hy as f64);
        let mut half = BASE_HALF;
        if let Some(ev) = self.event_in_clip(clip) {
            if ev.subject == entity {
                let t = if l > 1 {
                    frame_in_clip as f64 / (l - 1) as f64
                } else {
                    0.0
                };
                let (dx, dy, s) = motion_offset(ev.predicate, t);
                cx += dx;
                cy += dy;
                half *= s;
            }
        }
        [cx - half, cy - half, cx + half, cy + half]
    }
}

/// One benchmark sample: rendered observations plus the question, the four
/// candidates, and the script the answer is derived from.
#[derive(Clone, Debug, PartialEq)]
pub struct QASample {
    pub id: u64,
    pub question_type: QuestionType,
    pub question: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    pub gold: usize,
    pub script: EventScript,
    pub observations: Vec<ObjectObservation<f32>>,
}

impl QASample {
    /// Observations widened for the f64 training path. Exact: every f32
    /// is representable.
    pub fn observations_f64(&self) -> Vec<ObjectObservation<f64>> {
        self.observations
            .iter()
            .map(|o| ObjectObservation {
                roi: o.roi.iter().map(|&v| v as f64).collect(),
                bbox: o.bbox.iter().map(|&v| v as f64).collect(),
                frame_index: o.frame_index,
                clip_index: o.clip_index,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn script() -> EventScript {
        EventScript {
            entity_types: vec![2, 5, 7, 11],
            homes: vec![[0.375, 0.375], [0.625, 0.375], [0.375, 0.625], [0.625, 0.625]],
            events: vec![
                Event { subject: 1, predicate: 0, objects: vec![], clip: 0 },
                Event { subject: 3, predicate: 4, objects: vec![], clip: 1 },
                Event { subject: 0, predicate: 6, objects: vec![], clip: 2 },
                Event { subject: 2, predicate: 2, objects: vec![], clip: 3 },
            ],
            causal: vec![[0, 1], [1, 2], [2, 3]],
        }
    }

    #[test]
    fn every_pattern_stays_inside_the_unit_square() {
        // Worst case home: grid corner plus the full jitter the generator
        // allows, 0.75 + 0.03.
        for pred in 0..9 {
            for step in 0..=32 {
                let t = step as f64 / 32.0;
                let (dx, dy, s) = motion_offset(pred, t);
                let half = BASE_HALF * s;
                for &(hx, hy) in &[(0.78, 0.78), (0.22, 0.22)] {
                    let (cx, cy) = (hx + dx, hy + dy);
                    assert!(cx - half > 0.0 && cx + half < 1.0, "pred {pred} t {t}");
                    assert!(cy - half > 0.0 && cy + half < 1.0, "pred {pred} t {t}");
                }
            }
        }
    }

    #[test]
    fn boxes_are_ordered_and_shrink_under_shrank() {
        let s = script();
        let b0 = s.box_at(3, 1, 0, 8);
        let b7 = s.box_at(3, 1, 7, 8);
        assert!(b0[0] < b0[2] && b0[1] < b0[3]);
        // predicate 4 is grew
        assert!(b7[2] - b7[0] > b0[2] - b0[0]);
        let still = s.box_at(3, 0, 5, 8);
        assert_eq!(still, s.box_at(3, 2, 0, 8));
    }

    #[test]
    fn interval_and_lookup_agree() {
        let s = script();
        assert_eq!(s.events[1].interval(8), (8, 16));
        assert_eq!(s.event_in_clip(2).unwrap().subject, 0);
        assert_eq!(s.event_of_subject(2).unwrap().clip, 3);
        assert_eq!(s.cause_of(2).unwrap().clip, 1);
        assert!(s.cause_of(0).is_none());
        assert!(s.validate(4, 8).is_ok());
    }

    #[test]
    fn validate_rejects_out_of_range_pieces() {
        let mut s = script();
        s.events[0].clip = 4;
        assert!(matches!(s.validate(4, 8), Err(Error::Format(_))));
        let mut s = script();
        s.events[2].subject = 9;
        assert!(s.validate(4, 8).is_err());
        let mut s = script();
        s.causal.push([0, 11]);
        assert!(s.validate(4, 8).is_err());
        let mut s = script();
        s.homes.pop();
        assert!(s.validate(4, 8).is_err());
    }
}
