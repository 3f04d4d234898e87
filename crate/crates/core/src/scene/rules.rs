//! Geometric labelling rules for the synthetic vocabulary.
//!
//! Rules are evaluated as a cascade so each ordered pair receives at most
//! one predicate: same-as, then standing-on, then attached-to, then the
//! dominant directional relation among nearby pairs.

use serde::{Deserialize, Serialize};

use crate::geometry::Aabb;

use super::taxonomy::fine;
use super::PredicateTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Predicate {
    Left,
    Right,
    Front,
    Behind,
    HigherThan,
    LowerThan,
    StandingOn,
    AttachedTo,
    SameAs,
}

impl Predicate {
    pub const ALL: [Predicate; 9] = [
        Self::Left,
        Self::Right,
        Self::Front,
        Self::Behind,
        Self::HigherThan,
        Self::LowerThan,
        Self::StandingOn,
        Self::AttachedTo,
        Self::SameAs,
    ];

    /// Position in the synthetic predicate list.
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Thresholds of the labelling rules, in meters unless noted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredicateRules {
    /// Face distance counted as touching.
    pub contact_tol: f64,
    /// Largest box gap for which a directional relation is emitted.
    pub near_radius: f64,
    /// Minimum center offset along the dominant axis, as a fraction of the
    /// mean extent of the two boxes on that axis.
    pub directional_ratio: f64,
    /// Per-axis extent tolerance for same-as.
    pub same_tol: f64,
    /// Largest table-chair gap counted as a seat at the table.
    pub seat_adjacency: f64,
}

impl Default for PredicateRules {
    fn default() -> Self {
        Self {
            contact_tol: 0.05,
            near_radius: 0.5,
            directional_ratio: 0.5,
            same_tol: 0.04,
            seat_adjacency: 0.35,
        }
    }
}

/// Positive when the boxes are separated on axis `d`, negative when they
/// overlap.
fn separation(a: &Aabb<f64>, b: &Aabb<f64>, d: usize) -> f64 {
    (a.min[d] - b.max[d]).max(b.min[d] - a.max[d])
}

fn same_as(a: &Aabb<f64>, fa: usize, b: &Aabb<f64>, fb: usize, r: &PredicateRules) -> bool {
    let (ea, eb) = (a.extent(), b.extent());
    fa == fb && (0..3).all(|d| (ea[d] - eb[d]).abs() <= r.same_tol)
}

fn standing_on(a: &Aabb<f64>, b: &Aabb<f64>, r: &PredicateRules) -> bool {
    let c = a.center();
    (a.min[2] - b.max[2]).abs() <= r.contact_tol
        && c[2] > b.center()[2]
        && (0..2).all(|d| b.min[d] <= c[d] && c[d] <= b.max[d])
}

fn attached_to(a: &Aabb<f64>, b: &Aabb<f64>, r: &PredicateRules) -> bool {
    if a.volume() >= b.volume() || separation(a, b, 2) >= 0.0 {
        return false;
    }
    (0..2).any(|d| {
        let other = 1 - d;
        separation(a, b, d).abs() <= r.contact_tol && separation(a, b, other) < 0.0
    })
}

fn directional(a: &Aabb<f64>, b: &Aabb<f64>, r: &PredicateRules) -> Option<Predicate> {
    if a.gap(b) > r.near_radius {
        return None;
    }
    let (ca, cb) = (a.center(), b.center());
    let (ea, eb) = (a.extent(), b.extent());
    let mut best: Option<(usize, f64)> = None;
    for d in 0..3 {
        let mean = 0.5 * (ea[d] + eb[d]);
        if mean <= 0.0 {
            continue;
        }
        let ratio = (ca[d] - cb[d]).abs() / mean;
        if ratio > r.directional_ratio && best.is_none_or(|(_, b)| ratio > b) {
            best = Some((d, ratio));
        }
    }
    let (d, _) = best?;
    let below = ca[d] < cb[d];
    Some(match (d, below) {
        (0, true) => Predicate::Left,
        (0, false) => Predicate::Right,
        (1, true) => Predicate::Front,
        (1, false) => Predicate::Behind,
        (_, true) => Predicate::LowerThan,
        (_, false) => Predicate::HigherThan,
    })
}

/// The single predicate holding from subject `a` to object `b`, if any.
pub fn relation_between(
    a: &Aabb<f64>,
    fine_a: usize,
    b: &Aabb<f64>,
    fine_b: usize,
    rules: &PredicateRules,
) -> Option<Predicate> {
    if same_as(a, fine_a, b, fine_b, rules) {
        Some(Predicate::SameAs)
    } else if standing_on(a, b, rules) {
        Some(Predicate::StandingOn)
    } else if attached_to(a, b, rules) {
        Some(Predicate::AttachedTo)
    } else {
        directional(a, b, rules)
    }
}

/// Relabels every table-shaped object: "dining table" when at least two
/// chairs are within `seat_adjacency`, "table" otherwise.
pub fn resolve_context_labels(boxes: &[Aabb<f64>], fine_ids: &mut [usize], rules: &PredicateRules) {
    let chairs: Vec<usize> = (0..boxes.len())
        .filter(|&k| fine_ids[k] == fine::CHAIR)
        .collect();
    for t in 0..boxes.len() {
        if fine_ids[t] != fine::TABLE && fine_ids[t] != fine::DINING_TABLE {
            continue;
        }
        let seats = chairs
            .iter()
            .filter(|&&c| boxes[c].gap(&boxes[t]) <= rules.seat_adjacency)
            .count();
        fine_ids[t] = if seats >= 2 {
            fine::DINING_TABLE
        } else {
            fine::TABLE
        };
    }
}

/// Labels every ordered pair of a scene with the rule cascade.
pub fn derive_predicates(
    boxes: &[Aabb<f64>],
    fine_ids: &[usize],
    rules: &PredicateRules,
) -> PredicateTensor {
    let n = boxes.len();
    let mut p = PredicateTensor::zeros(n, Predicate::ALL.len());
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if let Some(pred) = relation_between(&boxes[i], fine_ids[i], &boxes[j], fine_ids[j], rules) {
                p.set(i, j, pred.index(), true);
            }
        }
    }
    p
}
