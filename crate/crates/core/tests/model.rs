//! Encoders and message passing against brute-force re-computations.

mod common;

use common::{rng, tiny_model_config};
use rand::seq::SliceRandom;
use rand::Rng;
use sgg_core::numeric::{Graph, ParamStore, PointEncoder, Tensor};
use sgg_core::reasoning::Model;
use sgg_core::scene::ordered_pairs;

fn random(r: &mut impl Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_vec(vec![rows, cols], (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn encode(enc: &PointEncoder, store: &ParamStore<f64>, points: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let x = g.input(points.clone());
    let out = enc.encode(&mut g, store, x).unwrap();
    g.value(out).clone()
}

fn point_encoder() -> (PointEncoder, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let enc = PointEncoder::new(&mut store, "enc", &[3, 16, 32], &mut rng(4)).unwrap();
    (enc, store)
}

#[test]
fn point_encoder_ignores_order_and_duplicates() {
    let (enc, store) = point_encoder();
    let mut r = rng(1);
    let pts = random(&mut r, 40, 3);
    let base = encode(&enc, &store, &pts);

    let mut order: Vec<usize> = (0..40).collect();
    order.shuffle(&mut r);
    let rows: Vec<Vec<f64>> = order.iter().map(|&i| pts.row(i).to_vec()).collect();
    assert_eq!(encode(&enc, &store, &Tensor::from_rows(&rows).unwrap()), base);

    let doubled: Vec<Vec<f64>> = (0..80).map(|i| pts.row(i % 40).to_vec()).collect();
    assert_eq!(encode(&enc, &store, &Tensor::from_rows(&doubled).unwrap()), base);
}

#[test]
fn repeated_point_encodes_to_its_mlp_output() {
    let (enc, store) = point_encoder();
    let p = vec![0.3, -0.2, 0.9];
    let many = Tensor::from_rows(&vec![p.clone(); 7]).unwrap();
    let mut g = Graph::new();
    let x = g.input(Tensor::from_rows(&[p]).unwrap());
    let single = enc.mlp.forward(&mut g, &store, x).unwrap();
    assert_eq!(encode(&enc, &store, &many).data(), g.value(single).data());
}

fn model() -> (Model, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let m = Model::new(&mut store, &tiny_model_config(), 8).unwrap();
    (m, store)
}

fn apply(mlp: &sgg_core::numeric::Mlp, store: &ParamStore<f64>, row: Vec<f64>) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_rows(&[row]).unwrap());
    let y = mlp.forward(&mut g, store, x).unwrap();
    g.value(y).data().to_vec()
}

fn scaled(row: &[f64], s: f64) -> Vec<f64> {
    row.iter().map(|v| v * s).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn entity_messages_match_brute_force() {
    let (m, store) = model();
    let cfg = tiny_model_config();
    let mut r = rng(2);
    let n = 3;
    let pairs = ordered_pairs(n);
    let hp = random(&mut r, pairs.len(), cfg.relation_dim());
    let rules: Vec<f64> = (0..pairs.len()).map(|_| r.random_range(0.0..1.0)).collect();

    let mut g = Graph::new();
    let (hv, rv) = (g.input(hp.clone()), g.input(Tensor::from_vec(vec![pairs.len(), 1], rules.clone()).unwrap()));
    let me = m.message_to_entities(&mut g, &store, hv, rv, &pairs, n).unwrap();
    let got = g.value(me).clone();

    for i in 0..n {
        let mut sum = vec![0.0; cfg.entity_dim()];
        let mut count = 0;
        for (e, &(s, o)) in pairs.iter().enumerate() {
            if s == i || o == i {
                let msg = apply(&m.to_entity, &store, scaled(hp.row(e), rules[e]));
                sum.iter_mut().zip(&msg).for_each(|(a, b)| *a += b);
                count += 1;
            }
        }
        assert_eq!(count, 2 * (n - 1));
        let want: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
        assert!(max_diff(got.row(i), &want) <= 1e-12);
    }
}

#[test]
fn predicate_messages_match_brute_force() {
    let (m, store) = model();
    let cfg = tiny_model_config();
    let mut r = rng(3);
    let n = 4;
    let pairs = ordered_pairs(n);
    let he = random(&mut r, n, cfg.entity_dim());
    let rules: Vec<f64> = (0..pairs.len()).map(|_| r.random_range(0.0..1.0)).collect();

    let mut g = Graph::new();
    let (hv, rv) = (g.input(he.clone()), g.input(Tensor::from_vec(vec![pairs.len(), 1], rules.clone()).unwrap()));
    let mp = m.message_to_predicates(&mut g, &store, hv, rv, &pairs).unwrap();
    let got = g.value(mp).clone();

    for (e, &(s, o)) in pairs.iter().enumerate() {
        let a = apply(&m.to_predicate_subject, &store, scaled(he.row(s), rules[e]));
        let b = apply(&m.to_predicate_object, &store, scaled(he.row(o), rules[e]));
        let want: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y) * 0.5).collect();
        assert!(max_diff(got.row(e), &want) <= 1e-12);
    }
}

#[test]
fn degenerate_neighborhoods() {
    let (m, store) = model();
    let cfg = tiny_model_config();
    let mut g = Graph::new();
    let hp = g.input(Tensor::zeros(&[0, cfg.relation_dim()]));
    let rv = g.input(Tensor::zeros(&[0, 1]));
    let me = m.message_to_entities(&mut g, &store, hp, rv, &[], 1).unwrap();
    assert_eq!(g.value(me).shape(), &[1, cfg.entity_dim()]);
    assert!(g.value(me).data().iter().all(|&v| v == 0.0));

    // Two entities with both rules closed receive the message of a zero
    // predicate state, whatever the states are.
    let pairs = ordered_pairs(2);
    let mut r = rng(5);
    let mut g = Graph::new();
    let hp = g.input(random(&mut r, 2, cfg.relation_dim()));
    let rv = g.input(Tensor::zeros(&[2, 1]));
    let me = m.message_to_entities(&mut g, &store, hp, rv, &pairs, 2).unwrap();
    let constant = apply(&m.to_entity, &store, vec![0.0; cfg.relation_dim()]);
    for i in 0..2 {
        assert!(max_diff(g.value(me).row(i), &constant) <= 1e-12);
    }
}

#[test]
fn relabeling_entities_permutes_the_states() {
    let (m, store) = model();
    let cfg = tiny_model_config();
    let mut r = rng(6);
    let n = 4;
    let pairs = ordered_pairs(n);
    let he = random(&mut r, n, cfg.entity_dim());
    let hp = random(&mut r, pairs.len(), cfg.relation_dim());
    let rules: Vec<f64> = (0..pairs.len()).map(|_| r.random_range(0.0..1.0)).collect();
    let perm = [2usize, 0, 3, 1];

    let run = |he: &Tensor<f64>, hp: &Tensor<f64>, rules: &[f64]| {
        let mut g = Graph::new();
        let fg = sgg_core::encoders::FeatureGraph {
            entities: g.input(he.clone()),
            relations: g.input(hp.clone()),
        };
        let rv = g.input(Tensor::from_vec(vec![rules.len(), 1], rules.to_vec()).unwrap());
        let (e, p) = m.run_message_passing(&mut g, &store, &fg, rv, &pairs, 2).unwrap();
        (g.value(*e.last().unwrap()).clone(), g.value(*p.last().unwrap()).clone())
    };
    let (e0, p0) = run(&he, &hp, &rules);

    // Entity i moves to position perm[i]; edges follow their endpoints.
    let mut he2 = vec![vec![]; n];
    for i in 0..n {
        he2[perm[i]] = he.row(i).to_vec();
    }
    let edge = |s: usize, o: usize| pairs.iter().position(|&q| q == (s, o)).unwrap();
    let mut hp2 = vec![vec![]; pairs.len()];
    let mut rules2 = vec![0.0; pairs.len()];
    for (e, &(s, o)) in pairs.iter().enumerate() {
        let k = edge(perm[s], perm[o]);
        hp2[k] = hp.row(e).to_vec();
        rules2[k] = rules[e];
    }
    let (e1, p1) = run(&Tensor::from_rows(&he2).unwrap(), &Tensor::from_rows(&hp2).unwrap(), &rules2);
    for i in 0..n {
        assert!(max_diff(e0.row(i), e1.row(perm[i])) <= 1e-12);
    }
    for (e, &(s, o)) in pairs.iter().enumerate() {
        assert!(max_diff(p0.row(e), p1.row(edge(perm[s], perm[o]))) <= 1e-12);
    }
}

#[test]
fn closed_edge_ignores_its_relation_feature() {
    for seed in 0..5 {
        assert!(common::blocked_edge_change(seed) <= 1e-12);
    }
}
