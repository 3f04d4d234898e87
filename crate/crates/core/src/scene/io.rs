//! Versioned JSON scene files.
//!
//! Labels are stored sparsely as `(subject, object, predicate)` triplets.
//! The skeleton is written out as well and checked against the triplets on
//! load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{derive_skeleton, Instance, PredicateTensor, SceneError, SceneSample, Taxonomy};

pub const SCENE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    version: u32,
    taxonomy_hash: String,
    instances: Vec<InstanceRecord>,
    triplets: Vec<[usize; 3]>,
    skeleton: Vec<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    id: u32,
    fine: usize,
    coarse: usize,
    points: Vec<f64>,
}

pub fn scene_to_json(sample: &SceneSample, taxonomy: &Taxonomy) -> String {
    let file = SceneFile {
        version: SCENE_VERSION,
        taxonomy_hash: taxonomy.hash(),
        instances: sample
            .instances
            .iter()
            .enumerate()
            .map(|(k, inst)| InstanceRecord {
                id: inst.id,
                fine: sample.gt_fine[k],
                coarse: sample.gt_coarse[k],
                points: inst.points.iter().flatten().copied().collect(),
            })
            .collect(),
        triplets: sample
            .predicates
            .triplets()
            .into_iter()
            .map(|(i, j, c)| [i, j, c])
            .collect(),
        skeleton: sample
            .skeleton
            .edges()
            .into_iter()
            .map(|(i, j)| [i, j])
            .collect(),
    };
    serde_json::to_string(&file).expect("scene serializes")
}

pub fn scene_from_json(text: &str, taxonomy: &Taxonomy) -> Result<SceneSample, SceneError> {
    let file: SceneFile = serde_json::from_str(text).map_err(|e| SceneError::from_json(text, &e))?;
    if file.version != SCENE_VERSION {
        return Err(SceneError::Schema(format!(
            "unsupported scene version {}",
            file.version
        )));
    }
    let expected = taxonomy.hash();
    if file.taxonomy_hash != expected {
        return Err(SceneError::TaxonomyMismatch {
            expected,
            found: file.taxonomy_hash,
        });
    }
    let n = file.instances.len();
    let m = taxonomy.num_predicates();
    let mut instances = Vec::with_capacity(n);
    let mut gt_fine = Vec::with_capacity(n);
    let mut gt_coarse = Vec::with_capacity(n);
    for rec in file.instances {
        if rec.points.len() % 3 != 0 {
            return Err(SceneError::Schema(format!(
                "instance {} has {} coordinates, not a multiple of 3",
                rec.id,
                rec.points.len()
            )));
        }
        if rec.points.is_empty() {
            return Err(SceneError::Invariant(format!("instance {} has no points", rec.id)));
        }
        let pts = rec.points.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        instances.push(Instance::new(rec.id, pts)?);
        gt_fine.push(rec.fine);
        gt_coarse.push(rec.coarse);
    }
    let mut predicates = PredicateTensor::zeros(n, m);
    for [i, j, c] in file.triplets {
        if i >= n || j >= n || c >= m {
            return Err(SceneError::Invariant(format!("triplet ({i}, {j}, {c}) out of range")));
        }
        predicates.set(i, j, c, true);
    }
    let skeleton = derive_skeleton(&predicates);
    let mut listed: Vec<(usize, usize)> = file.skeleton.iter().map(|&[i, j]| (i, j)).collect();
    listed.sort_unstable();
    listed.dedup();
    if listed != skeleton.edges() || listed.len() != file.skeleton.len() {
        return Err(SceneError::Invariant("skeleton inconsistent with predicates".into()));
    }
    let sample = SceneSample {
        instances,
        gt_fine,
        gt_coarse,
        predicates,
        skeleton,
    };
    sample.validate(taxonomy)?;
    Ok(sample)
}

pub fn load_scene(path: &Path, taxonomy: &Taxonomy) -> Result<SceneSample, SceneError> {
    let text = std::fs::read_to_string(path).map_err(|e| SceneError::io(path, e))?;
    scene_from_json(&text, taxonomy)
}

pub fn save_scene(sample: &SceneSample, taxonomy: &Taxonomy, path: &Path) -> Result<(), SceneError> {
    std::fs::write(path, scene_to_json(sample, taxonomy) + "\n").map_err(|e| SceneError::io(path, e))
}
