//! Axis-aligned box geometry for relation regions.
//!
//! Two boxes are classified per axis as disjoint when the distance between
//! their centers is at least half the sum of their extents on that axis.
//! The interaction space of a pair starts from the union box; on every
//! disjoint axis its interval shrinks to the span between the two centers,
//! and when no axis is disjoint it is the corner-wise midpoint between the
//! intersection box and the union box.

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box coordinate is NaN")]
    NaN,
    #[error("box min exceeds max on axis {0}")]
    Inverted(usize),
    #[error("intersection requested for boxes disjoint on axes {0:?}")]
    Disjoint(Vec<Axis>),
    #[error("cannot bound an empty point set")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb<T> {
    pub min: [T; 3],
    pub max: [T; 3],
}

impl<T: Float> Aabb<T> {
    pub fn new(min: [T; 3], max: [T; 3]) -> Result<Self, GeometryError> {
        for d in 0..3 {
            if min[d].is_nan() || max[d].is_nan() {
                return Err(GeometryError::NaN);
            }
            if min[d] > max[d] {
                return Err(GeometryError::Inverted(d));
            }
        }
        Ok(Self { min, max })
    }

    /// Tight bounds of a non-empty point set.
    pub fn from_points(points: &[[T; 3]]) -> Result<Self, GeometryError> {
        let first = points.first().ok_or(GeometryError::Empty)?;
        let (mut min, mut max) = (*first, *first);
        for p in points {
            for d in 0..3 {
                if p[d].is_nan() {
                    return Err(GeometryError::NaN);
                }
                min[d] = min[d].min(p[d]);
                max[d] = max[d].max(p[d]);
            }
        }
        Self::new(min, max)
    }

    pub fn center(&self) -> [T; 3] {
        let two = T::one() + T::one();
        [0, 1, 2].map(|d| (self.min[d] + self.max[d]) / two)
    }

    /// Side lengths `(l, w, h)`.
    pub fn extent(&self) -> [T; 3] {
        [0, 1, 2].map(|d| self.max[d] - self.min[d])
    }

    pub fn volume(&self) -> T {
        let e = self.extent();
        e[0] * e[1] * e[2]
    }

    /// Closed containment test.
    pub fn contains_point(&self, p: &[T; 3]) -> bool {
        (0..3).all(|d| self.min[d] <= p[d] && p[d] <= self.max[d])
    }

    pub fn contains_box(&self, other: &Self) -> bool {
        (0..3).all(|d| self.min[d] <= other.min[d] && other.max[d] <= self.max[d])
    }

    /// Euclidean distance between the closest points of two boxes.
    pub fn gap(&self, other: &Self) -> T {
        let mut s = T::zero();
        for d in 0..3 {
            let g = (other.min[d] - self.max[d])
                .max(self.min[d] - other.max[d])
                .max(T::zero());
            s = s + g * g;
        }
        s.sqrt()
    }

    pub fn cast<U: Float>(&self) -> Aabb<U> {
        let c = |x: T| U::from(x).expect("float conversion");
        Aabb {
            min: self.min.map(c),
            max: self.max.map(c),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntersectKind {
    Inclusive,
    Overlap,
    NotApplicable,
}

/// Per-axis disjointness plus, for intersecting pairs, whether one box
/// contains the other.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelativePosition {
    pub disjoint: [bool; 3],
    pub intersect_kind: IntersectKind,
}

impl RelativePosition {
    pub fn disjoint_axes(&self) -> Vec<Axis> {
        Axis::ALL
            .into_iter()
            .filter(|a| self.disjoint[a.index()])
            .collect()
    }

    pub fn is_intersectant(&self) -> bool {
        !self.disjoint.iter().any(|&d| d)
    }

    /// Short case label: `inclusive`, `overlap`, or the disjoint axes
    /// (`x`, `xy`, `xyz`, ...).
    pub fn label(&self) -> String {
        match self.intersect_kind {
            IntersectKind::Inclusive => "inclusive".into(),
            IntersectKind::Overlap => "overlap".into(),
            IntersectKind::NotApplicable => {
                let mut s = String::new();
                for (d, c) in ['x', 'y', 'z'].into_iter().enumerate() {
                    if self.disjoint[d] {
                        s.push(c);
                    }
                }
                s
            }
        }
    }
}

fn half<T: Float>() -> T {
    T::one() / (T::one() + T::one())
}

pub fn classify_relative_position<T: Float>(a: &Aabb<T>, b: &Aabb<T>) -> RelativePosition {
    let (ca, cb) = (a.center(), b.center());
    let (ea, eb) = (a.extent(), b.extent());
    let disjoint = [0, 1, 2].map(|d| (ca[d] - cb[d]).abs() >= (ea[d] + eb[d]) * half());
    let intersect_kind = if disjoint.iter().any(|&x| x) {
        IntersectKind::NotApplicable
    } else if a.contains_box(b) || b.contains_box(a) {
        IntersectKind::Inclusive
    } else {
        IntersectKind::Overlap
    };
    RelativePosition {
        disjoint,
        intersect_kind,
    }
}

pub fn union_box<T: Float>(a: &Aabb<T>, b: &Aabb<T>) -> Aabb<T> {
    Aabb {
        min: [0, 1, 2].map(|d| a.min[d].min(b.min[d])),
        max: [0, 1, 2].map(|d| a.max[d].max(b.max[d])),
    }
}

/// Intersection of two boxes that are not disjoint on any axis.
pub fn intersection_box<T: Float>(a: &Aabb<T>, b: &Aabb<T>) -> Result<Aabb<T>, GeometryError> {
    let rel = classify_relative_position(a, b);
    if !rel.is_intersectant() {
        return Err(GeometryError::Disjoint(rel.disjoint_axes()));
    }
    Ok(Aabb {
        min: [0, 1, 2].map(|d| a.min[d].max(b.min[d])),
        max: [0, 1, 2].map(|d| a.max[d].min(b.max[d])),
    })
}

/// Relation region of a pair; symmetric in its arguments and always
/// contained in the union box.
pub fn interaction_space<T: Float>(a: &Aabb<T>, b: &Aabb<T>) -> Aabb<T> {
    let rel = classify_relative_position(a, b);
    let mut space = union_box(a, b);
    if rel.is_intersectant() {
        let inter = Aabb {
            min: [0, 1, 2].map(|d| a.min[d].max(b.min[d])),
            max: [0, 1, 2].map(|d| a.max[d].min(b.max[d])),
        };
        for d in 0..3 {
            space.min[d] = (inter.min[d] + space.min[d]) * half();
            space.max[d] = (inter.max[d] + space.max[d]) * half();
        }
    } else {
        let (ca, cb) = (a.center(), b.center());
        for d in 0..3 {
            if rel.disjoint[d] {
                space.min[d] = ca[d].min(cb[d]);
                space.max[d] = ca[d].max(cb[d]);
            }
        }
    }
    space
}

/// Union-normalized corners in subject-object order:
/// `[min_i, max_i, min_j, max_j]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionVector<T>(pub [T; 12]);

impl<T: Float> PositionVector<T> {
    pub fn values(&self) -> &[T; 12] {
        &self.0
    }

    /// Object-subject order: the two halves exchanged.
    pub fn swapped(&self) -> Self {
        let mut out = self.0;
        out[..6].copy_from_slice(&self.0[6..]);
        out[6..].copy_from_slice(&self.0[..6]);
        Self(out)
    }
}

/// Normalizes both boxes into their union; an axis on which the union has
/// zero extent maps to 0.
pub fn position_vector<T: Float>(subject: &Aabb<T>, object: &Aabb<T>) -> PositionVector<T> {
    let u = union_box(subject, object);
    let ext = u.extent();
    let norm = |v: T, d: usize| {
        if ext[d] > T::zero() {
            (v - u.min[d]) / ext[d]
        } else {
            T::zero()
        }
    };
    let mut out = [T::zero(); 12];
    for (k, corner) in [subject.min, subject.max, object.min, object.max]
        .iter()
        .enumerate()
    {
        for d in 0..3 {
            out[k * 3 + d] = norm(corner[d], d);
        }
    }
    PositionVector(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(c: [f64; 3]) -> Aabb<f64> {
        Aabb::new(c.map(|x| x - 0.5), c.map(|x| x + 0.5)).unwrap()
    }

    fn bx(min: [f64; 3], max: [f64; 3]) -> Aabb<f64> {
        Aabb::new(min, max).unwrap()
    }

    #[test]
    fn classification_examples() {
        let r = classify_relative_position(&cube([0.0; 3]), &cube([3.0, 0.0, 0.0]));
        assert_eq!(r.disjoint, [true, false, false]);
        assert_eq!(r.intersect_kind, IntersectKind::NotApplicable);

        let r = classify_relative_position(&cube([0.0; 3]), &cube([0.0; 3]));
        assert!(r.is_intersectant());
        assert_eq!(r.intersect_kind, IntersectKind::Inclusive);

        let r = classify_relative_position(&cube([0.0; 3]), &cube([3.0; 3]));
        assert_eq!(r.disjoint, [true; 3]);
        assert_eq!(r.label(), "xyz");
    }

    #[test]
    fn touching_faces_count_as_disjoint() {
        let r = classify_relative_position(&cube([0.0; 3]), &cube([1.0, 0.0, 0.0]));
        assert_eq!(r.disjoint, [true, false, false]);
    }

    #[test]
    fn overlap_versus_inclusive() {
        let a = bx([0.0; 3], [2.0; 3]);
        let b = bx([1.0; 3], [3.0; 3]);
        assert_eq!(classify_relative_position(&a, &b).intersect_kind, IntersectKind::Overlap);
        let inner = bx([0.5; 3], [1.0; 3]);
        assert_eq!(
            classify_relative_position(&inner, &a).intersect_kind,
            IntersectKind::Inclusive
        );
    }

    #[test]
    fn nan_and_inverted_boxes_are_rejected() {
        assert_eq!(Aabb::new([f64::NAN, 0.0, 0.0], [1.0; 3]), Err(GeometryError::NaN));
        assert_eq!(Aabb::new([2.0, 0.0, 0.0], [1.0; 3]), Err(GeometryError::Inverted(0)));
        assert!(Aabb::new([0.0; 3], [0.0, 1.0, 1.0]).is_ok());
    }

    #[test]
    fn union_examples() {
        let a = bx([0.0; 3], [1.0; 3]);
        let b = bx([1.0, 0.0, 0.0], [2.0, 1.0, 1.0]);
        assert_eq!(union_box(&a, &b), bx([0.0; 3], [2.0, 1.0, 1.0]));
        assert_eq!(union_box(&a, &a), a);
        assert_eq!(union_box(&a, &b), union_box(&b, &a));
    }

    #[test]
    fn intersection_examples() {
        let a = bx([0.0; 3], [2.0; 3]);
        let b = bx([1.0; 3], [3.0; 3]);
        assert_eq!(intersection_box(&a, &b).unwrap(), bx([1.0; 3], [2.0; 3]));
        assert_eq!(intersection_box(&a, &a).unwrap(), a);
        let inner = bx([0.5; 3], [1.0; 3]);
        assert_eq!(intersection_box(&inner, &a).unwrap(), inner);
        let far = cube([5.0; 3]);
        assert!(matches!(
            intersection_box(&a, &far),
            Err(GeometryError::Disjoint(_))
        ));
    }

    #[test]
    fn interaction_space_examples() {
        let ins = interaction_space(&cube([0.0; 3]), &cube([3.0, 0.0, 0.0]));
        assert_eq!(ins, bx([0.0, -0.5, -0.5], [3.0, 0.5, 0.5]));

        let a = bx([0.0; 3], [2.0; 3]);
        let b = bx([1.0; 3], [3.0; 3]);
        assert_eq!(interaction_space(&a, &b), bx([0.5; 3], [2.5; 3]));
        assert_eq!(interaction_space(&b, &a), interaction_space(&a, &b));
    }

    #[test]
    fn z_disjoint_uses_z_centers() {
        let low = bx([0.0; 3], [1.0; 3]);
        let high = bx([0.2, 0.2, 3.0], [0.8, 0.8, 4.0]);
        let ins = interaction_space(&low, &high);
        assert_eq!(ins.min[2], 0.5);
        assert_eq!(ins.max[2], 3.5);
        assert_eq!((ins.min[0], ins.max[0]), (0.0, 1.0));
    }

    #[test]
    fn position_vector_examples() {
        let a = bx([0.0; 3], [1.0; 3]);
        let b = bx([1.0, 0.0, 0.0], [2.0, 1.0, 1.0]);
        let expect = [0.0, 0.0, 0.0, 0.5, 1.0, 1.0, 0.5, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(position_vector(&a, &b).0, expect);
        assert_eq!(
            position_vector(&a, &a).0,
            [0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
        );
        assert_eq!(position_vector(&b, &a), position_vector(&a, &b).swapped());
    }

    #[test]
    fn flat_union_axis_normalizes_to_zero() {
        let a = bx([0.0, 0.0, 1.0], [1.0, 1.0, 1.0]);
        let b = bx([2.0, 0.0, 1.0], [3.0, 1.0, 1.0]);
        let v = position_vector(&a, &b).0;
        for k in 0..4 {
            assert_eq!(v[k * 3 + 2], 0.0);
        }
    }

    #[test]
    fn gap_between_boxes() {
        assert_eq!(cube([0.0; 3]).gap(&cube([3.0, 0.0, 0.0])), 2.0);
        assert_eq!(cube([0.0; 3]).gap(&cube([0.5, 0.0, 0.0])), 0.0);
    }

    #[test]
    fn works_in_single_precision() {
        let a = Aabb::<f32>::new([0.0; 3], [2.0; 3]).unwrap();
        let b = Aabb::<f32>::new([1.0; 3], [3.0; 3]).unwrap();
        assert_eq!(interaction_space(&a, &b).min, [0.5; 3]);
    }
}
