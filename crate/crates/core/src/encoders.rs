//! Initial node features of the fully connected scene graph.
//!
//! Entities are encoded from their own points. Each ordered pair `(i, j)`
//! is encoded from the scene points inside its interaction space, joined
//! with an encoding of the 12-d relative position vector.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{interaction_space, position_vector, union_box, Aabb};
use crate::mix_seed;
use crate::numeric::{Graph, Mlp, NumericError, ParamStore, PointEncoder, Scalar, Tensor, Var};
use crate::scene::{ordered_pairs, SceneSample};

/// Widths and switches of the feature encoders.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Layer widths of the shared per-point MLP after the 3 input channels.
    pub point_widths: Vec<usize>,
    /// Layer widths of the position MLP after the 12 input channels.
    pub position_widths: Vec<usize>,
    /// Points per encoded set after resampling.
    pub sample_size: usize,
    /// Relation points come from the interaction space when set, from the
    /// union box otherwise.
    pub use_interaction_space: bool,
    /// When unset the position half of the relation feature is zero.
    pub use_position: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            point_widths: vec![64, 128, 256],
            position_widths: vec![64, 64],
            sample_size: 256,
            use_interaction_space: true,
            use_position: true,
        }
    }
}

impl EncoderConfig {
    pub fn entity_dim(&self) -> usize {
        self.point_widths.last().copied().unwrap_or(0)
    }

    pub fn position_dim(&self) -> usize {
        self.position_widths.last().copied().unwrap_or(0)
    }

    pub fn relation_dim(&self) -> usize {
        self.entity_dim() + self.position_dim()
    }

    pub fn validate(&self) -> Result<(), NumericError> {
        let bad = |m: &str| Err(NumericError::InvalidArgument(m.into()));
        if self.point_widths.is_empty() || self.point_widths.contains(&0) {
            return bad("point_widths must be non-empty and positive");
        }
        if self.position_widths.is_empty() || self.position_widths.contains(&0) {
            return bad("position_widths must be non-empty and positive");
        }
        if self.sample_size == 0 {
            return bad("sample_size must be positive");
        }
        Ok(())
    }
}

/// Geometry-derived encoder inputs of one scene. Building them is the only
/// random step of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureInputs {
    pub num_entities: usize,
    pub pairs: Vec<(usize, usize)>,
    /// `n * P x 3`, each entity's resampled points centered on its box.
    pub entity_points: Tensor<f64>,
    /// `k * P x 3` for the `k` unordered pairs whose region holds any
    /// point.
    pub region_points: Tensor<f64>,
    /// Per ordered pair, its block in `region_points`, `None` for empty
    /// regions. Both orders of a pair share a block.
    pub region_index: Vec<Option<usize>>,
    /// `pairs x 12`.
    pub positions: Tensor<f64>,
}

/// Draws exactly `size` rows: a subset when `points` has enough, otherwise
/// every point once plus uniform draws with replacement.
pub fn resample(points: &[[f64; 3]], size: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let n = points.len();
    assert!(n > 0, "resample of an empty point set");
    if n >= size {
        let mut ix = index::sample(rng, n, size).into_vec();
        ix.sort_unstable();
        ix.into_iter().map(|i| points[i]).collect()
    } else {
        let mut out = points.to_vec();
        out.extend((n..size).map(|_| points[rng.random_range(0..n)]));
        out
    }
}

fn centered(points: &[[f64; 3]], c: [f64; 3], out: &mut Vec<f64>) {
    for p in points {
        out.extend([p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
    }
}

/// Region whose points describe the pair `(a, b)`.
pub fn relation_region(a: &Aabb<f64>, b: &Aabb<f64>, use_interaction_space: bool) -> Aabb<f64> {
    if use_interaction_space {
        interaction_space(a, b)
    } else {
        union_box(a, b)
    }
}

/// Resamples and centers every point set of `sample`. Random streams are
/// keyed by instance ids, so reordering instances reorders the inputs
/// without changing them.
pub fn prepare_inputs(sample: &SceneSample, cfg: &EncoderConfig, seed: u64) -> FeatureInputs {
    let n = sample.num_entities();
    let p = cfg.sample_size;
    let entity_seed = mix_seed(seed, 0);
    let pair_seed = mix_seed(seed, 1);
    let mut entity = Vec::with_capacity(n * p * 3);
    for inst in &sample.instances {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(entity_seed, inst.id as u64));
        let pts = resample(&inst.points, p, &mut rng);
        centered(&pts, inst.aabb.center(), &mut entity);
    }
    let pairs = ordered_pairs(n);
    let scene_points = sample.all_points();
    let mut positions = Vec::with_capacity(pairs.len() * 12);
    for &(i, j) in &pairs {
        let (a, b) = (&sample.instances[i].aabb, &sample.instances[j].aabb);
        positions.extend_from_slice(position_vector(a, b).values());
    }
    // Both region kinds are symmetric in the pair, so (i, j) and (j, i)
    // share one resampled point set, drawn from a stream keyed by the
    // unordered id pair.
    let mut block = vec![None; n * n];
    let mut region = Vec::new();
    let mut filled = 0;
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&sample.instances[i], &sample.instances[j]);
            let rbox = relation_region(&a.aabb, &b.aabb, cfg.use_interaction_space);
            let inside: Vec<[f64; 3]> = scene_points
                .iter()
                .filter(|q| rbox.contains_point(q))
                .copied()
                .collect();
            if inside.is_empty() {
                continue;
            }
            let key = mix_seed(a.id.min(b.id) as u64, a.id.max(b.id) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(pair_seed, key));
            let pts = resample(&inside, p, &mut rng);
            centered(&pts, rbox.center(), &mut region);
            block[i * n + j] = Some(filled);
            block[j * n + i] = Some(filled);
            filled += 1;
        }
    }
    let region_index = pairs.iter().map(|&(i, j)| block[i * n + j]).collect();
    let t = |rows, data| Tensor::from_vec(vec![rows, 3], data).expect("point tensor shape");
    FeatureInputs {
        num_entities: n,
        entity_points: t(n * p, entity),
        region_points: t(filled * p, region),
        region_index,
        positions: Tensor::from_vec(vec![pairs.len(), 12], positions).expect("position tensor shape"),
        pairs,
    }
}

/// Entity features `n x E` and relation features `pairs x (E + D_pos)`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureGraph {
    pub entities: Var,
    pub relations: Var,
}

#[derive(Clone, Debug)]
pub struct Encoders {
    pub config: EncoderConfig,
    pub entity: PointEncoder,
    pub relation: PointEncoder,
    pub position: Mlp,
}

impl Encoders {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        config: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self, NumericError> {
        config.validate()?;
        let mut point_dims = vec![3];
        point_dims.extend(&config.point_widths);
        let mut pos_dims = vec![12];
        pos_dims.extend(&config.position_widths);
        Ok(Self {
            config: config.clone(),
            entity: PointEncoder::new(store, "enc_entity", &point_dims, rng)?,
            relation: PointEncoder::new(store, "enc_relation", &point_dims, rng)?,
            position: Mlp::new(store, "enc_position", &pos_dims, true, rng)?,
        })
    }

    /// One row per point set; `points` stacks sets of `sample_size` rows.
    pub fn encode_entities<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        points: Var,
    ) -> Result<Var, NumericError> {
        self.entity
            .encode_sets(g, store, points, self.config.sample_size)
    }

    pub fn encode_regions<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        points: Var,
    ) -> Result<Var, NumericError> {
        self.relation
            .encode_sets(g, store, points, self.config.sample_size)
    }

    /// `v` is `rows x 12` with entries in `[0, 1]`.
    pub fn encode_position<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        v: Var,
    ) -> Result<Var, NumericError> {
        debug_assert!(
            g.value(v)
                .data()
                .iter()
                .all(|&x| x >= T::zero() && x <= T::one()),
            "position vector outside [0, 1]"
        );
        self.position.forward(g, store, v)
    }

    /// Encodes every entity and ordered pair of a prepared scene.
    pub fn build_feature_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        inputs: &FeatureInputs,
    ) -> Result<FeatureGraph, NumericError> {
        let pts = g.input(inputs.entity_points.cast());
        let entities = self.encode_entities(g, store, pts)?;
        let pairs = inputs.pairs.len();
        let region_dim = self.config.entity_dim();
        let regions = if inputs.region_points.rows() > 0 {
            let rp = g.input(inputs.region_points.cast());
            let enc = self.encode_regions(g, store, rp)?;
            g.index_rows(enc, &inputs.region_index)?
        } else {
            g.input(Tensor::zeros(&[pairs, region_dim]))
        };
        let pos = if self.config.use_position && pairs > 0 {
            let v = g.input(inputs.positions.cast());
            self.encode_position(g, store, v)?
        } else {
            g.input(Tensor::zeros(&[pairs, self.config.position_dim()]))
        };
        let relations = g.concat_cols(&[regions, pos])?;
        Ok(FeatureGraph { entities, relations })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, GeneratorConfig, Instance, PredicateTensor, Taxonomy};

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            point_widths: vec![8, 16],
            position_widths: vec![6],
            sample_size: 32,
            ..Default::default()
        }
    }

    fn encoders(cfg: &EncoderConfig) -> (Encoders, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let e = Encoders::new(&mut store, cfg, &mut rng).unwrap();
        (e, store)
    }

    #[test]
    fn resample_sizes_and_coverage() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts: Vec<[f64; 3]> = (0..5).map(|i| [i as f64, 0.0, 0.0]).collect();
        let r = resample(&pts, 12, &mut rng);
        assert_eq!(r.len(), 12);
        for p in &pts {
            assert!(r.contains(p));
        }
        let many: Vec<[f64; 3]> = (0..100).map(|i| [i as f64, 0.0, 0.0]).collect();
        let r = resample(&many, 10, &mut rng);
        let mut xs: Vec<i64> = r.iter().map(|p| p[0] as i64).collect();
        xs.dedup();
        assert_eq!(xs.len(), 10);
    }

    #[test]
    fn feature_graph_shapes() {
        let cfg = small_config();
        let (enc, store) = encoders(&cfg);
        let s = generate_scene(3, &GeneratorConfig::default()).unwrap();
        let n = s.num_entities();
        let inputs = prepare_inputs(&s, &cfg, 5);
        let mut g = Graph::new();
        let fg = enc.build_feature_graph(&mut g, &store, &inputs).unwrap();
        assert_eq!(g.shape(fg.entities), &[n, 16]);
        assert_eq!(g.shape(fg.relations), &[n * (n - 1), 22]);
    }

    #[test]
    fn single_entity_has_no_relations() {
        let cfg = small_config();
        let (enc, store) = encoders(&cfg);
        let t = Taxonomy::synthetic();
        let inst = Instance::new(0, vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]).unwrap();
        let s = SceneSample::new(vec![inst], vec![3], PredicateTensor::zeros(1, 9), &t).unwrap();
        let inputs = prepare_inputs(&s, &cfg, 0);
        let mut g = Graph::new();
        let fg = enc.build_feature_graph(&mut g, &store, &inputs).unwrap();
        assert_eq!(g.shape(fg.relations), &[0, 22]);
    }

    #[test]
    fn empty_region_gives_zero_point_block() {
        let cfg = small_config();
        let (enc, store) = encoders(&cfg);
        let t = Taxonomy::synthetic();
        // Both boxes are disjoint on every axis, so the region spans the
        // two centers; every point lies outside it on some axis.
        let a = Instance::new(0, vec![[0.0, 0.0, 0.2], [0.2, 0.2, 0.0]]).unwrap();
        let b = Instance::new(1, vec![[2.2, 2.2, 2.0], [2.0, 2.0, 2.2]]).unwrap();
        let s = SceneSample::new(vec![a, b], vec![11, 11], PredicateTensor::zeros(2, 9), &t).unwrap();
        let inputs = prepare_inputs(&s, &cfg, 0);
        assert_eq!(inputs.region_index, vec![None, None]);
        let mut g = Graph::new();
        let fg = enc.build_feature_graph(&mut g, &store, &inputs).unwrap();
        let r = g.value(fg.relations);
        for row in 0..2 {
            assert!(r.row(row)[..16].iter().all(|&x| x == 0.0));
            assert!(r.row(row)[16..].iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn inputs_are_deterministic() {
        let cfg = small_config();
        let s = generate_scene(9, &GeneratorConfig::default()).unwrap();
        assert_eq!(prepare_inputs(&s, &cfg, 1), prepare_inputs(&s, &cfg, 1));
        assert_ne!(prepare_inputs(&s, &cfg, 1), prepare_inputs(&s, &cfg, 2));
    }
}
