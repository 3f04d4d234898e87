//! Scene graph data model, label taxonomy, scene files and the synthetic
//! scene generator.

mod generator;
mod io;
mod rules;
mod taxonomy;

use std::path::Path;

use thiserror::Error;

use crate::geometry::{Aabb, GeometryError};

pub use generator::{generate_scene, scene_seed, GeneratorConfig, ObjectSpec, SceneBuilder, Shape};
pub use io::{load_scene, save_scene, scene_from_json, scene_to_json, SCENE_VERSION};
pub use rules::{derive_predicates, relation_between, resolve_context_labels, Predicate, PredicateRules};
pub use taxonomy::{fine, Taxonomy, TAXONOMY_VERSION};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("schema: {0}")]
    Schema(String),
    #[error("taxonomy mismatch: scene has {found}, expected {expected}")]
    TaxonomyMismatch { expected: String, found: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl SceneError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Maps a serde_json error to a byte offset into `text`. Syntax
    /// errors become [`SceneError::Parse`]; type errors become schema errors.
    pub(crate) fn from_json(text: &str, e: &serde_json::Error) -> Self {
        use serde_json::error::Category;
        let offset = byte_offset(text, e.line(), e.column());
        match e.classify() {
            Category::Syntax | Category::Eof | Category::Io => Self::Parse {
                offset,
                message: e.to_string(),
            },
            Category::Data => Self::Schema(format!("at byte {offset}: {e}")),
        }
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len());
        }
        offset += l.len();
    }
    text.len()
}

/// One segmented object: its points and their tight bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: u32,
    pub points: Vec<[f64; 3]>,
    pub aabb: Aabb<f64>,
}

impl Instance {
    pub fn new(id: u32, points: Vec<[f64; 3]>) -> Result<Self, SceneError> {
        let aabb = Aabb::from_points(&points)?;
        Ok(Self { id, points, aabb })
    }
}

/// Multi-hot predicate labels for every ordered pair, `n x n x m`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredicateTensor {
    n: usize,
    m: usize,
    bits: Vec<bool>,
}

impl PredicateTensor {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            bits: vec![false; n * n * m],
        }
    }

    pub fn num_entities(&self) -> usize {
        self.n
    }

    pub fn num_predicates(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize, c: usize) -> bool {
        self.bits[(i * self.n + j) * self.m + c]
    }

    pub fn set(&mut self, i: usize, j: usize, c: usize, v: bool) {
        self.bits[(i * self.n + j) * self.m + c] = v;
    }

    /// Label vector of the ordered pair `(i, j)`.
    pub fn pair(&self, i: usize, j: usize) -> &[bool] {
        let s = (i * self.n + j) * self.m;
        &self.bits[s..s + self.m]
    }

    /// All set `(subject, object, predicate)` triplets in index order.
    pub fn triplets(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in 0..self.n {
                for c in 0..self.m {
                    if self.get(i, j, c) {
                        out.push((i, j, c));
                    }
                }
            }
        }
        out
    }
}

/// Unlabeled edge-existence matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Skeleton {
    n: usize,
    bits: Vec<bool>,
}

impl Skeleton {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            bits: vec![false; n * n],
        }
    }

    pub fn num_entities(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.n + j] = v;
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in 0..self.n {
                if self.get(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Or-reduction over the predicate axis with the diagonal cleared.
pub fn derive_skeleton(predicates: &PredicateTensor) -> Skeleton {
    let n = predicates.num_entities();
    let mut s = Skeleton::zeros(n);
    for i in 0..n {
        for j in 0..n {
            if i != j && predicates.pair(i, j).iter().any(|&b| b) {
                s.set(i, j, true);
            }
        }
    }
    s
}

/// Ordered pairs `(i, j)`, `i != j`, in row-major order. Pair index `k`
/// in every per-pair array of the pipeline refers to this order.
pub fn ordered_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out.push((i, j));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub instances: Vec<Instance>,
    pub gt_fine: Vec<usize>,
    pub gt_coarse: Vec<usize>,
    pub predicates: PredicateTensor,
    pub skeleton: Skeleton,
}

impl SceneSample {
    /// Derives coarse labels and the skeleton, then validates.
    pub fn new(
        instances: Vec<Instance>,
        gt_fine: Vec<usize>,
        predicates: PredicateTensor,
        taxonomy: &Taxonomy,
    ) -> Result<Self, SceneError> {
        let gt_coarse = gt_fine
            .iter()
            .map(|&f| {
                taxonomy
                    .fine_to_coarse
                    .get(f)
                    .copied()
                    .ok_or_else(|| SceneError::Invariant(format!("fine id {f} out of range")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let skeleton = derive_skeleton(&predicates);
        let s = Self {
            instances,
            gt_fine,
            gt_coarse,
            predicates,
            skeleton,
        };
        s.validate(taxonomy)?;
        Ok(s)
    }

    pub fn num_entities(&self) -> usize {
        self.instances.len()
    }

    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<(), SceneError> {
        let n = self.instances.len();
        let inv = |m: String| Err(SceneError::Invariant(m));
        if n == 0 {
            return inv("scene has no instances".into());
        }
        if self.gt_fine.len() != n || self.gt_coarse.len() != n {
            return inv(format!(
                "{n} instances but {} fine / {} coarse labels",
                self.gt_fine.len(),
                self.gt_coarse.len()
            ));
        }
        for (k, inst) in self.instances.iter().enumerate() {
            if inst.points.is_empty() {
                return inv(format!("instance {k} has no points"));
            }
            if Aabb::from_points(&inst.points)? != inst.aabb {
                return inv(format!("instance {k} box is not the tight bound of its points"));
            }
            let f = self.gt_fine[k];
            if f >= taxonomy.num_fine() {
                return inv(format!("instance {k} fine id {f} out of range"));
            }
            if taxonomy.fine_to_coarse[f] != self.gt_coarse[k] {
                return inv(format!("instance {k} coarse label disagrees with the taxonomy"));
            }
        }
        if self.predicates.num_entities() != n
            || self.predicates.num_predicates() != taxonomy.num_predicates()
        {
            return inv("predicate tensor shape does not match the scene".into());
        }
        for i in 0..n {
            if self.predicates.pair(i, i).iter().any(|&b| b) {
                return inv(format!("self relation on instance {i}"));
            }
        }
        if derive_skeleton(&self.predicates) != self.skeleton {
            return inv("skeleton inconsistent with predicates".into());
        }
        Ok(())
    }

    /// All points of the scene in instance order.
    pub fn all_points(&self) -> Vec<[f64; 3]> {
        self.instances
            .iter()
            .flat_map(|i| i.points.iter().copied())
            .collect()
    }

    pub fn boxes(&self) -> Vec<Aabb<f64>> {
        self.instances.iter().map(|i| i.aabb).collect()
    }
}
