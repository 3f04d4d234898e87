//! Checks shared by the focused test files and the acceptance run. Each
//! returns its measured quantities so callers can assert or report them.

#![allow(dead_code)]

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgg_core::encoders::prepare_inputs;
use sgg_core::evaluation::{evaluate, EvalConfig, Outcome};
use sgg_core::geometry::{
    classify_relative_position, interaction_space, Aabb, IntersectKind, RelativePosition,
};
use sgg_core::numeric::{
    gate_value, grad_check, grad_check_params, GradCheckConfig, Graph, Gru, NumericError,
    ParamStore, Tensor, Var,
};
use sgg_core::reasoning::{Model, ModelConfig, Prediction};
use sgg_core::scene::{
    generate_scene, scene_seed, GeneratorConfig, ObjectSpec, PredicateTensor, SceneBuilder,
    SceneSample, Shape, Skeleton, Taxonomy,
};
use sgg_core::training::{loss_total, train, TrainConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- geometry

/// Coordinates on a quarter-metre grid half of the time, so touching
/// faces, shared planes and exact containment occur.
pub fn random_box(r: &mut ChaCha8Rng) -> Aabb<f64> {
    let grid = r.random_bool(0.5);
    let coord = |r: &mut ChaCha8Rng| {
        if grid {
            r.random_range(0..16) as f64 * 0.25
        } else {
            r.random_range(0.0..4.0)
        }
    };
    let mut min = [0.0; 3];
    let mut max = [0.0; 3];
    for d in 0..3 {
        let (a, b) = (coord(r), coord(r));
        min[d] = a.min(b);
        max[d] = a.max(b);
    }
    Aabb::new(min, max).unwrap()
}

fn mid(a: f64, b: f64) -> f64 {
    (a + b) / 2.0
}

/// Per-axis separation test written from the definition: centers at
/// least half the summed side lengths apart.
pub fn oracle_disjoint(a: &Aabb<f64>, b: &Aabb<f64>) -> [bool; 3] {
    let mut out = [false; 3];
    for d in 0..3 {
        let gap = (mid(a.min[d], a.max[d]) - mid(b.min[d], b.max[d])).abs();
        let reach = ((a.max[d] - a.min[d]) + (b.max[d] - b.min[d])) * 0.5;
        out[d] = gap >= reach;
    }
    out
}

pub fn oracle_relative_position(a: &Aabb<f64>, b: &Aabb<f64>) -> RelativePosition {
    let disjoint = oracle_disjoint(a, b);
    let inside = |p: &Aabb<f64>, q: &Aabb<f64>| {
        (0..3).all(|d| q.min[d] <= p.min[d]) && (0..3).all(|d| p.max[d] <= q.max[d])
    };
    let intersect_kind = if disjoint.contains(&true) {
        IntersectKind::NotApplicable
    } else if inside(a, b) || inside(b, a) {
        IntersectKind::Inclusive
    } else {
        IntersectKind::Overlap
    };
    RelativePosition {
        disjoint,
        intersect_kind,
    }
}

pub fn oracle_interaction_space(a: &Aabb<f64>, b: &Aabb<f64>) -> Aabb<f64> {
    let disjoint = oracle_disjoint(a, b);
    let any = disjoint.contains(&true);
    let mut min = [0.0; 3];
    let mut max = [0.0; 3];
    for d in 0..3 {
        let (lo, hi) = (a.min[d].min(b.min[d]), a.max[d].max(b.max[d]));
        if !any {
            let (ilo, ihi) = (a.min[d].max(b.min[d]), a.max[d].min(b.max[d]));
            min[d] = (ilo + lo) * 0.5;
            max[d] = (ihi + hi) * 0.5;
        } else if disjoint[d] {
            let (ca, cb) = (mid(a.min[d], a.max[d]), mid(b.min[d], b.max[d]));
            min[d] = ca.min(cb);
            max[d] = ca.max(cb);
        } else {
            min[d] = lo;
            max[d] = hi;
        }
    }
    Aabb { min, max }
}

pub struct GeometryOracleResult {
    pub pairs: usize,
    pub mismatches: usize,
    pub membership_mismatches: usize,
    pub seconds: f64,
}

/// Compares classification, interaction space and point membership with
/// the oracles over `pairs` random pairs and `points` random points each.
pub fn geometry_oracle(seed: u64, pairs: usize, points: usize) -> GeometryOracleResult {
    let start = Instant::now();
    let mut r = rng(seed);
    let (mut mismatches, mut membership_mismatches) = (0, 0);
    for _ in 0..pairs {
        let (a, b) = (random_box(&mut r), random_box(&mut r));
        let rel = classify_relative_position(&a, &b);
        let space = interaction_space(&a, &b);
        let oracle = oracle_interaction_space(&a, &b);
        if rel != oracle_relative_position(&a, &b) || space != oracle {
            mismatches += 1;
        }
        for _ in 0..points {
            let p = [0, 1, 2].map(|_| r.random_range(-0.5..4.5));
            let inside = (0..3).all(|d| oracle.min[d] <= p[d] && p[d] <= oracle.max[d]);
            if space.contains_point(&p) != inside {
                membership_mismatches += 1;
            }
        }
    }
    GeometryOracleResult {
        pairs,
        mismatches,
        membership_mismatches,
        seconds: start.elapsed().as_secs_f64(),
    }
}

// ----------------------------------------------------------------- gating

/// Grid points where the gate differs from the three-branch formula, and
/// the values at the two breakpoints.
pub fn gate_grid(alpha: f64, beta: f64, points: usize) -> (usize, f64, f64) {
    let hi = 1.0 / alpha + beta;
    let formula = |x: f64| {
        if x <= beta {
            0.0
        } else if x >= hi {
            1.0
        } else {
            alpha * x - alpha * beta
        }
    };
    let mut bad = 0;
    for i in 0..points {
        let x = i as f64 / (points - 1) as f64;
        if gate_value(x, alpha, beta).to_bits() != formula(x).to_bits() {
            bad += 1;
        }
    }
    (bad, gate_value(beta, alpha, beta), gate_value(hi, alpha, beta))
}

// -------------------------------------------------------------- gradients

pub type Build = fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericError>;

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values at least `margin` away from zero.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = r.random_range(margin..1.0);
            if r.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// coordinate carries a distinct adjoint.
fn weighted(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var, NumericError> {
    let mut r = rng(seed ^ 0xabcd);
    let w = uniform(&mut r, g.shape(out), -1.0, 1.0);
    let w = g.input(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

pub struct GradResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

fn check_inputs(
    name: &str,
    seed: u64,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericError>,
) -> GradResult {
    let report = grad_check(
        |g, v| {
            let out = f(g, v)?;
            weighted(g, out, seed)
        },
        &inputs,
        GradCheckConfig::default(),
    )
    .unwrap();
    GradResult {
        name: name.to_string(),
        max_rel_err: report.max_rel_err(),
        tolerance: 1e-5,
    }
}

/// Finite-difference checks of every graph primitive for one seed.
pub fn primitive_gradients(seed: u64) -> Vec<GradResult> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let u = |r: &mut ChaCha8Rng, s: &[usize]| uniform(r, s, -1.0, 1.0);
    let a34 = u(&mut r, &[3, 4]);
    let b34 = u(&mut r, &[3, 4]);
    out.push(check_inputs("matmul", seed, vec![a34.clone(), u(&mut r, &[4, 2])], |g, v| {
        g.matmul(v[0], v[1])
    }));
    out.push(check_inputs("add", seed, vec![a34.clone(), b34.clone()], |g, v| g.add(v[0], v[1])));
    out.push(check_inputs("sub", seed, vec![a34.clone(), b34.clone()], |g, v| g.sub(v[0], v[1])));
    out.push(check_inputs("mul", seed, vec![a34.clone(), b34.clone()], |g, v| g.mul(v[0], v[1])));
    out.push(check_inputs("add_row", seed, vec![a34.clone(), u(&mut r, &[1, 4])], |g, v| {
        g.add_row(v[0], v[1])
    }));
    let (x, w, b) = (u(&mut r, &[3, 4]), u(&mut r, &[4, 5]), u(&mut r, &[1, 5]));
    out.push(check_inputs("affine", seed, vec![x.clone(), w.clone(), b.clone()], |g, v| {
        g.affine(v[0], v[1], v[2], false)
    }));
    // Pre-activations kept away from the ReLU kink.
    let mut xr = x.clone();
    loop {
        let pre = xr.matmul(&w).unwrap();
        let near = (0..3).any(|i| (0..5).any(|j| (pre.row(i)[j] + b.data()[j]).abs() < 1e-3));
        if !near {
            break;
        }
        xr = u(&mut r, &[3, 4]);
    }
    out.push(check_inputs("affine_relu", seed, vec![xr, w, b], |g, v| g.affine(v[0], v[1], v[2], true)));
    out.push(check_inputs("scale_rows", seed, vec![a34.clone(), u(&mut r, &[3, 1])], |g, v| {
        g.scale_rows(v[0], v[1])
    }));
    out.push(check_inputs("scale", seed, vec![a34.clone()], |g, v| Ok(g.scale(v[0], 0.7))));
    out.push(check_inputs("relu", seed, vec![away_from_zero(&mut r, &[3, 4], 1e-3)], |g, v| {
        Ok(g.relu(v[0]))
    }));
    out.push(check_inputs("sigmoid", seed, vec![u(&mut r, &[3, 4]).map(|x| 3.0 * x)], |g, v| {
        Ok(g.sigmoid(v[0]))
    }));
    out.push(check_inputs("tanh", seed, vec![u(&mut r, &[3, 4]).map(|x| 2.0 * x)], |g, v| {
        Ok(g.tanh(v[0]))
    }));
    out.push(check_inputs("softmax_rows", seed, vec![u(&mut r, &[3, 4]).map(|x| 3.0 * x)], |g, v| {
        g.softmax_rows(v[0])
    }));
    out.push(check_inputs("segment_max", seed, vec![u(&mut r, &[6, 4])], |g, v| g.segment_max(v[0], 3)));
    out.push(check_inputs("max_pool_rows", seed, vec![u(&mut r, &[5, 3])], |g, v| g.max_pool_rows(v[0])));
    out.push(check_inputs("concat_cols", seed, vec![u(&mut r, &[3, 2]), u(&mut r, &[3, 3])], |g, v| {
        g.concat_cols(&[v[0], v[1]])
    }));
    out.push(check_inputs("slice_cols", seed, vec![u(&mut r, &[3, 5])], |g, v| g.slice_cols(v[0], 1, 3)));
    out.push(check_inputs("index_rows", seed, vec![a34.clone()], |g, v| {
        g.index_rows(v[0], &[Some(2), None, Some(0), Some(2)])
    }));
    out.push(check_inputs("gather_rows", seed, vec![a34.clone()], |g, v| g.gather_rows(v[0], &[1, 1, 0])));
    out.push(check_inputs("scatter_add_rows", seed, vec![u(&mut r, &[4, 3])], |g, v| {
        g.scatter_add_rows(v[0], &[0, 2, 2, 1], 3)
    }));
    out.push(check_inputs("sum", seed, vec![a34.clone()], |g, v| Ok(g.sum(v[0]))));
    out.push(check_inputs("mean", seed, vec![a34.clone()], |g, v| Ok(g.mean(v[0]))));
    out.push(check_inputs("cross_entropy", seed, vec![u(&mut r, &[4, 5]).map(|x| 2.0 * x)], |g, v| {
        g.cross_entropy(v[0], &[0, 3, 4, 3])
    }));
    let targets: Vec<f64> = (0..12).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let t2 = targets.clone();
    out.push(check_inputs("per_class_bce", seed, vec![u(&mut r, &[3, 4]).map(|x| 2.0 * x)], move |g, v| {
        g.per_class_bce(v[0], &targets)
    }));
    out.push(check_inputs("bce", seed, vec![uniform(&mut r, &[3, 4], 0.05, 0.95)], move |g, v| {
        g.bce(v[0], &t2, 1e-7)
    }));
    // Gate inputs on all three branches, away from both breakpoints.
    let (alpha, beta) = (r.random_range(1.2..3.0), r.random_range(0.05..0.2));
    let hi = 1.0 / alpha + beta;
    let mut xs = Vec::new();
    while xs.len() < 9 {
        let x: f64 = r.random_range(0.0..1.0);
        if (x - beta).abs() > 1e-3 && (x - hi).abs() > 1e-3 {
            xs.push(x);
        }
    }
    xs[0] = beta * 0.5;
    xs[1] = (beta + hi) * 0.5;
    xs[2] = (hi + 1.0) * 0.5;
    out.push(check_inputs(
        "gate",
        seed,
        vec![
            Tensor::from_vec(vec![9, 1], xs).unwrap(),
            Tensor::scalar(alpha),
            Tensor::scalar(beta),
        ],
        |g, v| g.gate(v[0], v[1], v[2]),
    ));
    out
}

/// GRU cell gradients with respect to its parameters and both inputs.
pub fn gru_gradients(seed: u64) -> Vec<GradResult> {
    let mut r = rng(seed);
    let mut store = ParamStore::<f64>::new();
    let gru = Gru::new(&mut store, "gru", 4, 5, &mut r).unwrap();
    let h = uniform(&mut r, &[3, 5], -1.0, 1.0);
    let m = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let params = {
        let (h, m) = (h.clone(), m.clone());
        let report = grad_check_params(
            |g, s| {
                let (hv, mv) = (g.input(h.clone()), g.input(m.clone()));
                let out = gru.forward(g, s, hv, mv)?;
                weighted(g, out, seed)
            },
            &store,
            GradCheckConfig::default(),
            1,
        )
        .unwrap();
        report.max_rel_err()
    };
    let inputs = grad_check(
        |g, v| {
            let out = gru.forward(g, &store, v[0], v[1])?;
            weighted(g, out, seed)
        },
        &[h, m],
        GradCheckConfig::default(),
    )
    .unwrap()
    .max_rel_err();
    vec![
        GradResult {
            name: "gru_cell params".into(),
            max_rel_err: params,
            tolerance: 1e-5,
        },
        GradResult {
            name: "gru_cell inputs".into(),
            max_rel_err: inputs,
            tolerance: 1e-5,
        },
    ]
}

pub fn tiny_model_config() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.encoder.point_widths = vec![6, 8];
    c.encoder.position_widths = vec![4];
    c.encoder.sample_size = 8;
    c.gsl_hidden = vec![6, 4];
    c.iterations = 2;
    c
}

/// Adds small noise to every network weight and bias. Freshly
/// initialized biases are exactly zero, so a layer fed by an all-zero row
/// (a dead ReLU layer, an empty region block) sits exactly on a ReLU kink
/// where finite differences are meaningless.
pub fn jitter(store: &mut ParamStore<f64>, model: &Model, seed: u64) {
    let mut r = rng(seed ^ 0x5eed);
    let ids: Vec<_> = store.ids().filter(|&id| id != model.alpha && id != model.beta).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += r.random_range(-0.1..0.1);
        }
    }
}

/// Skeleton classifier plus gate, with respect to its weights, `alpha`,
/// `beta` and the relation features. `alpha` is lowered so the sampled
/// probabilities fall on the linear branch.
pub fn gsl_gate_gradients(seed: u64) -> Vec<GradResult> {
    let mut r = rng(seed);
    let cfg = tiny_model_config();
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(&mut store, &cfg, seed).unwrap();
    jitter(&mut store, &model, seed);
    store.set(model.alpha, Tensor::scalar(1.0)).unwrap();
    let rel = uniform(&mut r, &[5, cfg.relation_dim()], -1.0, 1.0);
    let params = grad_check_params(
        |g, s| {
            let x = g.input(rel.clone());
            let (_, gated) = model.gsl_gate(g, s, x)?;
            weighted(g, gated, seed)
        },
        &store,
        GradCheckConfig::default(),
        1,
    )
    .unwrap()
    .inputs
    .iter()
    .filter(|i| i.name.starts_with("gsl"))
    .map(|i| i.max_rel_err)
    .fold(0.0, f64::max);
    let inputs = grad_check(
        |g, v| {
            let (_, gated) = model.gsl_gate(g, &store, v[0])?;
            weighted(g, gated, seed)
        },
        &[rel],
        GradCheckConfig::default(),
    )
    .unwrap()
    .max_rel_err();
    vec![
        GradResult {
            name: "gsl_gate params".into(),
            max_rel_err: params,
            tolerance: 1e-5,
        },
        GradResult {
            name: "gsl_gate inputs".into(),
            max_rel_err: inputs,
            tolerance: 1e-5,
        },
    ]
}

/// A table with a cup standing on it.
pub fn two_entity_scene(seed: u64) -> SceneSample {
    let mut b = SceneBuilder::new();
    b.add(ObjectSpec {
        fine: sgg_core::scene::fine::TABLE,
        shape: Shape::Slab,
        min: [1.0, 1.0, 0.0],
        max: [2.2, 1.8, 0.75],
    });
    b.add(ObjectSpec {
        fine: sgg_core::scene::fine::CUP,
        shape: Shape::Cylinder,
        min: [1.4, 1.2, 0.75],
        max: [1.5, 1.3, 0.87],
    });
    let cfg = GeneratorConfig {
        min_points: 40,
        max_points: 60,
        ..GeneratorConfig::default()
    };
    b.build(&cfg, &mut rng(seed)).unwrap()
}

/// Whole loss of the tiny model on a two-entity scene with respect to
/// every parameter.
pub fn full_loss_gradient(seed: u64) -> GradResult {
    let cfg = tiny_model_config();
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(&mut store, &cfg, seed).unwrap();
    jitter(&mut store, &model, seed);
    let sample = two_entity_scene(seed);
    let inputs = prepare_inputs(&sample, &cfg.encoder, seed);
    let weights = TrainConfig::default().loss_weights();
    let report = grad_check_params(
        |g, s| {
            let fp = model.forward(g, s, &inputs, None)?;
            Ok(loss_total(g, &fp, &sample, &inputs.pairs, &weights)?.total)
        },
        &store,
        GradCheckConfig::default(),
        1,
    )
    .unwrap();
    GradResult {
        name: "full loss".into(),
        max_rel_err: report.max_rel_err(),
        tolerance: 1e-4,
    }
}

pub fn gradient_suite(seed: u64) -> Vec<GradResult> {
    let mut all = primitive_gradients(seed);
    all.extend(gru_gradients(seed));
    all.extend(gsl_gate_gradients(seed));
    all.push(full_loss_gradient(seed));
    all
}

// --------------------------------------------------------------- reasoning

/// Largest change of any final entity state when the relation feature of
/// edge `edge` is replaced by noise while its rule is 0.
pub fn blocked_edge_change(seed: u64) -> f64 {
    let mut r = rng(seed);
    let cfg = tiny_model_config();
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(&mut store, &cfg, seed).unwrap();
    let n = r.random_range(3..6);
    let pairs = sgg_core::scene::ordered_pairs(n);
    let edge = r.random_range(0..pairs.len());
    let ents = uniform(&mut r, &[n, cfg.entity_dim()], -1.0, 1.0);
    let rels = uniform(&mut r, &[pairs.len(), cfg.relation_dim()], -1.0, 1.0);
    let mut rules: Vec<f64> = (0..pairs.len()).map(|_| r.random_range(0.0..1.0)).collect();
    rules[edge] = 0.0;
    let final_entities = |rels: &Tensor<f64>| {
        let mut g = Graph::new();
        let features = sgg_core::encoders::FeatureGraph {
            entities: g.input(ents.clone()),
            relations: g.input(rels.clone()),
        };
        let rv = g.input(Tensor::from_vec(vec![pairs.len(), 1], rules.clone()).unwrap());
        let (he, _) = model
            .run_message_passing(&mut g, &store, &features, rv, &pairs, cfg.iterations)
            .unwrap();
        g.value(*he.last().unwrap()).clone()
    };
    let base = final_entities(&rels);
    let mut noisy = rels.clone();
    for v in noisy.row_mut(edge) {
        *v += r.random_range(-5.0..5.0);
    }
    let moved = final_entities(&noisy);
    base.data()
        .iter()
        .zip(moved.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

// ----------------------------------------------------------------- metrics

fn quantized(r: &mut ChaCha8Rng) -> f64 {
    // Coarse values make ties common.
    r.random_range(0..9) as f64 / 8.0
}

/// Random scene labels and predictions with `n` entities.
pub fn random_case(r: &mut ChaCha8Rng, tax: &Taxonomy) -> (SceneSample, Prediction) {
    let n = r.random_range(3..6);
    let (nf, np) = (tax.num_fine(), tax.num_predicates());
    let gt_fine: Vec<usize> = (0..n).map(|_| r.random_range(0..nf)).collect();
    let mut predicates = PredicateTensor::zeros(n, np);
    for i in 0..n {
        for j in 0..n {
            if i != j && r.random_bool(0.4) {
                for c in 0..np {
                    if r.random_bool(0.2) {
                        predicates.set(i, j, c, true);
                    }
                }
            }
        }
    }
    let sample = SceneSample {
        instances: Vec::new(),
        gt_coarse: gt_fine.iter().map(|&f| tax.fine_to_coarse[f]).collect(),
        gt_fine,
        predicates,
        skeleton: Skeleton::zeros(n),
    };
    let pairs = sgg_core::scene::ordered_pairs(n);
    let fine = Tensor::from_vec(vec![n, nf], (0..n * nf).map(|_| quantized(r)).collect()).unwrap();
    let pred = Tensor::from_vec(
        vec![pairs.len(), np],
        (0..pairs.len() * np).map(|_| quantized(r)).collect(),
    )
    .unwrap();
    let prediction = Prediction {
        pairs: pairs.clone(),
        coarse_probs: None,
        fine_probs: fine,
        predicate_probs: pred,
        pre_gate: vec![0.5; pairs.len()],
        rules: vec![1.0; pairs.len()],
    };
    (sample, prediction)
}

/// Position of `target` after sorting by descending score, lower index
/// first among equals.
fn oracle_rank(scores: &[f64], target: usize) -> usize {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.iter().position(|&i| i == target).unwrap()
}

pub fn oracle_object(p: &Prediction, s: &SceneSample, k: usize) -> Vec<Outcome> {
    (0..s.gt_fine.len())
        .map(|i| Outcome {
            class: s.gt_fine[i],
            hit: oracle_rank(p.fine_probs.row(i), s.gt_fine[i]) < k,
        })
        .collect()
}

pub fn oracle_predicate(p: &Prediction, s: &SceneSample, k: usize) -> Vec<Outcome> {
    let mut out = Vec::new();
    for (r, &(i, j)) in p.pairs.iter().enumerate() {
        for c in 0..s.predicates.num_predicates() {
            if s.predicates.get(i, j, c) {
                out.push(Outcome {
                    class: c,
                    hit: oracle_rank(p.predicate_probs.row(r), c) < k,
                });
            }
        }
    }
    out
}

/// Enumerates all n(n-1)m triplets, sorts them and matches ground truth.
pub fn oracle_relationship(p: &Prediction, s: &SceneSample, k: usize) -> Vec<Outcome> {
    let n = s.gt_fine.len();
    let m = s.predicates.num_predicates();
    let top = |i: usize| {
        let row = p.fine_probs.row(i);
        (0..row.len()).find(|&c| oracle_rank(row, c) == 0).unwrap()
    };
    let mut cands = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let r = p.pairs.iter().position(|&q| q == (i, j)).unwrap();
            let (ci, cj) = (top(i), top(j));
            for c in 0..m {
                let score = p.fine_probs.row(i)[ci] * p.predicate_probs.row(r)[c] * p.fine_probs.row(j)[cj];
                cands.push((score, i, j, c, ci, cj));
            }
        }
    }
    cands.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for c in 0..m {
                if i != j && s.predicates.get(i, j, c) {
                    let hit = cands[..k.min(cands.len())].iter().any(|t| {
                        (t.1, t.2, t.3) == (i, j, c) && t.4 == s.gt_fine[i] && t.5 == s.gt_fine[j]
                    });
                    out.push(Outcome { class: c, hit });
                }
            }
        }
    }
    out
}

pub fn oracle_recall(o: &[Outcome]) -> Option<f64> {
    if o.is_empty() {
        None
    } else {
        Some(100.0 * o.iter().filter(|x| x.hit).count() as f64 / o.len() as f64)
    }
}

pub fn oracle_mean_recall(o: &[Outcome], classes: usize) -> Option<f64> {
    let mut per = Vec::new();
    for c in 0..classes {
        let of: Vec<Outcome> = o.iter().copied().filter(|x| x.class == c).collect();
        if let Some(v) = oracle_recall(&of) {
            per.push(v);
        }
    }
    if per.is_empty() {
        None
    } else {
        Some(per.iter().sum::<f64>() / per.len() as f64)
    }
}

fn sort_outcomes(mut o: Vec<Outcome>) -> Vec<(usize, bool)> {
    let mut v: Vec<(usize, bool)> = o.drain(..).map(|x| (x.class, x.hit)).collect();
    v.sort();
    v
}

/// Scenes whose per-instance outcomes, recalls, mean recalls or the
/// aggregated report differ from the oracles.
pub fn metric_oracle_mismatches(seed: u64, scenes: usize) -> usize {
    use sgg_core::evaluation::{
        mean_recall, object_outcomes, predicate_outcomes, recall, relationship_outcomes,
    };
    let tax = Taxonomy::synthetic();
    let mut r = rng(seed);
    let mut bad = 0;
    let mut samples = Vec::new();
    let mut preds = Vec::new();
    for _ in 0..scenes {
        let (s, p) = random_case(&mut r, &tax);
        let mut ok = true;
        for k in [1, 2, 3, 5, 10, 50] {
            let pairs = [
                (object_outcomes(&p.fine_probs, &s.gt_fine, k).unwrap(), oracle_object(&p, &s, k), tax.num_fine()),
                (
                    predicate_outcomes(&p.predicate_probs, &p.pairs, &s, k).unwrap(),
                    oracle_predicate(&p, &s, k),
                    tax.num_predicates(),
                ),
                (relationship_outcomes(&p, &s, k).unwrap(), oracle_relationship(&p, &s, k), tax.num_predicates()),
            ];
            for (got, want, classes) in pairs {
                ok &= sort_outcomes(got.clone()) == sort_outcomes(want.clone());
                ok &= recall(&got) == oracle_recall(&want);
                ok &= mean_recall(&got, classes) == oracle_mean_recall(&want, classes);
            }
        }
        if !ok {
            bad += 1;
        }
        samples.push(s);
        preds.push(p);
    }
    // Scene-averaged recall and pooled mean recall of the full report.
    let report = evaluate(&preds, &samples, &tax, &EvalConfig::default(), None).unwrap();
    for &k in &EvalConfig::default().relationship_ks {
        let per_scene: Vec<f64> = preds
            .iter()
            .zip(&samples)
            .filter_map(|(p, s)| oracle_recall(&oracle_relationship(p, s, k)))
            .collect();
        let want = (!per_scene.is_empty()).then(|| per_scene.iter().sum::<f64>() / per_scene.len() as f64);
        let pooled: Vec<Outcome> = preds
            .iter()
            .zip(&samples)
            .flat_map(|(p, s)| oracle_relationship(p, s, k))
            .collect();
        if report.relationship.recall[&k] != want
            || report.relationship.mean_recall[&k] != oracle_mean_recall(&pooled, tax.num_predicates())
        {
            bad += 1;
        }
    }
    bad
}

// -------------------------------------------------------------- corpora

pub fn corpus(base_seed: u64, count: usize) -> Vec<SceneSample> {
    let cfg = GeneratorConfig::default();
    (0..count)
        .map(|i| generate_scene(scene_seed(base_seed, i as u64), &cfg).unwrap())
        .collect()
}

/// All files of `dir`, by name, with contents.
pub fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

// ------------------------------------------------------------ experiments

pub struct ExperimentResult {
    pub object_r1: f64,
    pub predicate_r1: f64,
    pub relationship_r50: f64,
    pub seconds: f64,
}

/// Trains in single precision on `train_set` and evaluates on `test_set`.
/// Single precision halves the step time of these long runs; gradient
/// checks stay in f64.
pub fn train_and_evaluate(
    train_set: &[SceneSample],
    test_set: &[SceneSample],
    config: &TrainConfig,
) -> ExperimentResult {
    let start = Instant::now();
    let tax = Taxonomy::synthetic();
    let trained = train::<f32>(train_set, &tax, config, |_| {}).unwrap();
    let preds: Vec<Prediction> = test_set
        .iter()
        .map(|s| trained.model.predict(&trained.store, s, 0).unwrap())
        .collect();
    let report = evaluate(&preds, test_set, &tax, &EvalConfig::default(), None).unwrap();
    ExperimentResult {
        object_r1: report.object.recall[&1].unwrap_or(0.0),
        predicate_r1: report.predicate.recall[&1].unwrap_or(0.0),
        relationship_r50: report.relationship.recall[&50].unwrap_or(0.0),
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Full model, 300 epochs, scored on its own 20 training scenes.
pub fn overfit_experiment() -> ExperimentResult {
    let data = corpus(0, 20);
    let config = TrainConfig {
        epochs: 300,
        seed: 0,
        ..TrainConfig::default()
    };
    train_and_evaluate(&data, &data, &config)
}

pub const ABLATION_EPOCHS: usize = 20;

/// Full model and the union-region baseline without gating or the
/// hierarchy heads, on 200 training and 50 test scenes drawn from `seed`.
pub fn ablation_experiment(seed: u64) -> (ExperimentResult, ExperimentResult) {
    use sgg_core::mix_seed;
    let train_set = corpus(mix_seed(seed, 1), 200);
    let test_set = corpus(mix_seed(seed, 2), 50);
    let full = TrainConfig {
        epochs: ABLATION_EPOCHS,
        seed,
        ..TrainConfig::default()
    };
    let baseline = TrainConfig {
        use_ins: false,
        use_gsl: false,
        use_hol: false,
        ..full.clone()
    };
    (
        train_and_evaluate(&train_set, &test_set, &full),
        train_and_evaluate(&train_set, &test_set, &baseline),
    )
}

// ------------------------------------------------------------------ cli

pub fn sgg(args: &[&str]) -> i32 {
    let mut all = vec!["sgg"];
    all.extend_from_slice(args);
    sgg_core::cli::run(all)
}

/// Runs gen, train and eval into a fresh directory and returns every
/// output file.
pub fn pipeline_outputs(root: &Path) -> Vec<(String, Vec<u8>)> {
    let (data, model, eval) = (root.join("data"), root.join("model"), root.join("eval"));
    let config = root.join("train.toml");
    std::fs::write(
        &config,
        "epochs = 2\nseed = 3\nlr = 0.001\npoint_widths = [8, 16]\nposition_widths = [8]\nsample_size = 32\ngsl_hidden = [8]\niterations = 2\n",
    )
    .unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    assert_eq!(sgg(&["gen", "--scenes", "3", "--seed", "5", "--out", &s(&data)]), 0);
    assert_eq!(
        sgg(&["train", "--data", &s(&data), "--config", &s(&config), "--out", &s(&model)]),
        0
    );
    let report = eval.join("report.json");
    std::fs::create_dir_all(&eval).unwrap();
    assert_eq!(
        sgg(&["eval", "--model", &s(&model), "--data", &s(&data), "--report", &s(&report)]),
        0
    );
    let mut out = Vec::new();
    for (dir, name) in [(&data, "data"), (&model, "model"), (&eval, "eval")] {
        for (f, bytes) in dir_bytes(dir) {
            out.push((format!("{name}/{f}"), bytes));
        }
    }
    out
}

/// Output files that differ between two pipeline runs in separate
/// directories.
pub fn determinism_differences() -> Vec<String> {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (x, y) = (pipeline_outputs(a.path()), pipeline_outputs(b.path()));
    let mut diff = Vec::new();
    if x.len() != y.len() {
        diff.push("file sets differ".to_string());
    }
    for ((na, ba), (nb, bb)) in x.iter().zip(&y) {
        if na != nb || ba != bb {
            diff.push(na.clone());
        }
    }
    diff
}
