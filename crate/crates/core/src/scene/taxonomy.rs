use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SceneError;

pub const TAXONOMY_VERSION: u32 = 1;

/// Two-level object label tree plus the predicate vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    pub coarse_classes: Vec<String>,
    pub fine_classes: Vec<String>,
    /// Indexed by fine id.
    pub fine_to_coarse: Vec<usize>,
    pub predicate_classes: Vec<String>,
}

/// On-disk form: the fine-to-coarse relation is keyed by names.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaxonomyFile {
    version: u32,
    coarse_classes: Vec<String>,
    fine_classes: Vec<String>,
    fine_to_coarse: BTreeMap<String, String>,
    predicate_classes: Vec<String>,
}

fn check_unique(kind: &str, names: &[String]) -> Result<(), SceneError> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(SceneError::Schema(format!("duplicate {kind} class {n:?}")));
        }
    }
    Ok(())
}

impl Taxonomy {
    pub fn new(
        coarse_classes: Vec<String>,
        fine_classes: Vec<String>,
        fine_to_coarse: Vec<usize>,
        predicate_classes: Vec<String>,
    ) -> Result<Self, SceneError> {
        let t = Self {
            coarse_classes,
            fine_classes,
            fine_to_coarse,
            predicate_classes,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        check_unique("coarse", &self.coarse_classes)?;
        check_unique("fine", &self.fine_classes)?;
        check_unique("predicate", &self.predicate_classes)?;
        if self.predicate_classes.is_empty() {
            return Err(SceneError::Schema("taxonomy needs at least one predicate".into()));
        }
        if self.fine_classes.is_empty() {
            return Err(SceneError::Schema("taxonomy needs at least one fine class".into()));
        }
        if self.fine_to_coarse.len() != self.fine_classes.len() {
            return Err(SceneError::Schema("fine_to_coarse must cover every fine class".into()));
        }
        let mut used = vec![false; self.coarse_classes.len()];
        for &c in &self.fine_to_coarse {
            if c >= self.coarse_classes.len() {
                return Err(SceneError::Schema(format!("coarse id {c} out of range")));
            }
            used[c] = true;
        }
        if let Some(c) = used.iter().position(|u| !u) {
            return Err(SceneError::Schema(format!(
                "coarse class {:?} has no fine class",
                self.coarse_classes[c]
            )));
        }
        Ok(())
    }

    pub fn num_coarse(&self) -> usize {
        self.coarse_classes.len()
    }

    pub fn num_fine(&self) -> usize {
        self.fine_classes.len()
    }

    pub fn num_predicates(&self) -> usize {
        self.predicate_classes.len()
    }

    pub fn fine_id(&self, name: &str) -> Option<usize> {
        self.fine_classes.iter().position(|n| n == name)
    }

    pub fn predicate_id(&self, name: &str) -> Option<usize> {
        self.predicate_classes.iter().position(|n| n == name)
    }

    fn to_file(&self) -> TaxonomyFile {
        TaxonomyFile {
            version: TAXONOMY_VERSION,
            coarse_classes: self.coarse_classes.clone(),
            fine_classes: self.fine_classes.clone(),
            fine_to_coarse: self
                .fine_classes
                .iter()
                .zip(&self.fine_to_coarse)
                .map(|(f, &c)| (f.clone(), self.coarse_classes[c].clone()))
                .collect(),
            predicate_classes: self.predicate_classes.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("taxonomy serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        let f: TaxonomyFile =
            serde_json::from_str(text).map_err(|e| SceneError::from_json(text, &e))?;
        if f.version != TAXONOMY_VERSION {
            return Err(SceneError::Schema(format!(
                "unsupported taxonomy version {}",
                f.version
            )));
        }
        let mut map = Vec::with_capacity(f.fine_classes.len());
        for fine in &f.fine_classes {
            let coarse = f
                .fine_to_coarse
                .get(fine)
                .ok_or_else(|| SceneError::Schema(format!("fine class {fine:?} has no coarse parent")))?;
            let c = f
                .coarse_classes
                .iter()
                .position(|n| n == coarse)
                .ok_or_else(|| SceneError::Schema(format!("unknown coarse class {coarse:?}")))?;
            map.push(c);
        }
        if f.fine_to_coarse.len() != f.fine_classes.len() {
            return Err(SceneError::Schema("fine_to_coarse names an unknown fine class".into()));
        }
        Self::new(f.coarse_classes, f.fine_classes, map, f.predicate_classes)
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let text = std::fs::read_to_string(path).map_err(|e| SceneError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), SceneError> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| SceneError::io(path, e))
    }

    /// Short content hash of the canonical serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&self.to_file()).expect("taxonomy serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }

    /// The 4-coarse / 12-fine / 9-predicate vocabulary of the synthetic
    /// generator.
    pub fn synthetic() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Self::new(
            s(&["furniture", "structure", "appliance", "item"]),
            s(&FINE_NAMES),
            vec![0, 0, 0, 0, 1, 1, 2, 2, 2, 3, 3, 3],
            s(&PREDICATE_NAMES),
        )
        .expect("synthetic taxonomy is valid")
    }
}

/// Fine class ids of the synthetic taxonomy.
pub mod fine {
    pub const TABLE: usize = 0;
    pub const DINING_TABLE: usize = 1;
    pub const CHAIR: usize = 2;
    pub const CABINET: usize = 3;
    pub const WALL: usize = 4;
    pub const PILLAR: usize = 5;
    pub const REFRIGERATOR: usize = 6;
    pub const LAMP: usize = 7;
    pub const TV: usize = 8;
    pub const CUP: usize = 9;
    pub const BOOK: usize = 10;
    pub const BOX: usize = 11;
}

pub(crate) const FINE_NAMES: [&str; 12] = [
    "table",
    "dining table",
    "chair",
    "cabinet",
    "wall",
    "pillar",
    "refrigerator",
    "lamp",
    "tv",
    "cup",
    "book",
    "box",
];

pub(crate) const PREDICATE_NAMES: [&str; 9] = [
    "left",
    "right",
    "front",
    "behind",
    "higher than",
    "lower than",
    "standing on",
    "attached to",
    "same as",
];
