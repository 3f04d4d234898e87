//! Contextual reasoning over the feature graph: skeleton gating, gated
//! bipartite message passing between entity and predicate nodes, and the
//! coarse, fine and predicate heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{prepare_inputs, EncoderConfig, Encoders, FeatureGraph, FeatureInputs};
use crate::numeric::{Graph, Gru, Mlp, NumericError, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::scene::SceneSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Hidden widths of the skeleton classifier.
    pub gsl_hidden: Vec<usize>,
    /// Message passing rounds.
    pub iterations: usize,
    pub alpha_init: f64,
    pub beta_init: f64,
    pub num_coarse: usize,
    pub num_fine: usize,
    pub num_predicates: usize,
    /// When unset every edge weight is 1.
    pub use_gating: bool,
    /// When unset the coarse head is dropped.
    pub use_hierarchy: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            gsl_hidden: vec![160, 80],
            iterations: 3,
            alpha_init: 2.2,
            beta_init: 0.025,
            num_coarse: 4,
            num_fine: 12,
            num_predicates: 9,
            use_gating: true,
            use_hierarchy: true,
        }
    }
}

impl ModelConfig {
    pub fn entity_dim(&self) -> usize {
        self.encoder.entity_dim()
    }

    pub fn relation_dim(&self) -> usize {
        self.encoder.relation_dim()
    }

    pub fn validate(&self) -> Result<(), NumericError> {
        self.encoder.validate()?;
        let bad = |m: &str| Err(NumericError::InvalidArgument(m.into()));
        if self.num_coarse == 0 || self.num_fine == 0 || self.num_predicates == 0 {
            return bad("class counts must be positive");
        }
        if self.gsl_hidden.contains(&0) {
            return bad("gsl_hidden widths must be positive");
        }
        if !(0.1..=10.0).contains(&self.alpha_init) || !(0.0..=0.5).contains(&self.beta_init) {
            return bad("gate parameters must satisfy 0.1 <= alpha <= 10 and 0 <= beta <= 0.5");
        }
        Ok(())
    }
}

/// Output head of widths `[in, in/2, in/4, classes]`.
fn head<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    input: usize,
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Mlp, NumericError> {
    let dims = [input, (input / 2).max(1), (input / 4).max(1), classes];
    Mlp::new(store, name, &dims, false, rng)
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoders: Encoders,
    pub gsl: Mlp,
    pub alpha: ParamId,
    pub beta: ParamId,
    pub to_predicate_subject: Mlp,
    pub to_predicate_object: Mlp,
    pub to_entity: Mlp,
    pub entity_gru: Gru,
    pub predicate_gru: Gru,
    pub coarse_head: Mlp,
    pub fine_head: Mlp,
    pub predicate_head: Mlp,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub features: FeatureGraph,
    /// Positive-class skeleton probability per pair, `pairs x 1`.
    pub pre_gate: Var,
    /// Edge weights used by message passing, `pairs x 1`.
    pub rules: Var,
    /// Entity states for iterations `0..=u`.
    pub entity_states: Vec<Var>,
    /// Predicate states for iterations `0..=u`.
    pub predicate_states: Vec<Var>,
    pub coarse_logits: Option<Var>,
    pub fine_logits: Var,
    pub predicate_logits: Var,
}

/// Hidden state trajectories as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates<T> {
    pub entities: Vec<Tensor<T>>,
    pub predicates: Vec<Tensor<T>>,
}

/// Probabilities for one scene. Pair rows follow `pairs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub pairs: Vec<(usize, usize)>,
    pub coarse_probs: Option<Tensor<f64>>,
    pub fine_probs: Tensor<f64>,
    pub predicate_probs: Tensor<f64>,
    pub pre_gate: Vec<f64>,
    pub rules: Vec<f64>,
}

fn pair_index(pairs: &[(usize, usize)]) -> (Vec<usize>, Vec<usize>) {
    pairs.iter().copied().unzip()
}

impl Model {
    /// Registers every parameter in `store`; initialization is determined
    /// by `seed`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        config: &ModelConfig,
        seed: u64,
    ) -> Result<Self, NumericError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = config.entity_dim();
        let r = config.relation_dim();
        let encoders = Encoders::new(store, &config.encoder, &mut rng)?;
        let mut gsl_dims = vec![r];
        gsl_dims.extend(&config.gsl_hidden);
        gsl_dims.push(2);
        let gsl = Mlp::new(store, "gsl", &gsl_dims, false, &mut rng)?;
        let alpha = store.register("gsl.alpha", Tensor::scalar(T::c(config.alpha_init)))?;
        let beta = store.register("gsl.beta", Tensor::scalar(T::c(config.beta_init)))?;
        Ok(Self {
            config: config.clone(),
            encoders,
            gsl,
            alpha,
            beta,
            to_predicate_subject: Mlp::new(store, "msg_subject", &[e, r, r], false, &mut rng)?,
            to_predicate_object: Mlp::new(store, "msg_object", &[e, r, r], false, &mut rng)?,
            to_entity: Mlp::new(store, "msg_entity", &[r, e, e], false, &mut rng)?,
            entity_gru: Gru::new(store, "gru_entity", e, e, &mut rng)?,
            predicate_gru: Gru::new(store, "gru_predicate", r, r, &mut rng)?,
            coarse_head: head(store, "head_coarse", e, config.num_coarse, &mut rng)?,
            fine_head: head(store, "head_fine", e, config.num_fine, &mut rng)?,
            predicate_head: head(store, "head_predicate", r, config.num_predicates, &mut rng)?,
        })
    }

    /// Skeleton probability and gated weight per pair, both `pairs x 1`.
    pub fn gsl_gate<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        relations: Var,
    ) -> Result<(Var, Var), NumericError> {
        let logits = self.gsl.forward(g, store, relations)?;
        let probs = g.softmax_rows(logits)?;
        let x = g.slice_cols(probs, 1, 1)?;
        let (a, b) = (g.param(store, self.alpha), g.param(store, self.beta));
        let r = g.gate(x, a, b)?;
        Ok((x, r))
    }

    /// Per pair `(i, j)`: the average of the subject and object messages
    /// computed from `r_ij`-scaled entity states.
    pub fn message_to_predicates<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        entities: Var,
        rules: Var,
        pairs: &[(usize, usize)],
    ) -> Result<Var, NumericError> {
        let (subj, obj) = pair_index(pairs);
        let hs = g.gather_rows(entities, &subj)?;
        let hs = g.scale_rows(hs, rules)?;
        let ho = g.gather_rows(entities, &obj)?;
        let ho = g.scale_rows(ho, rules)?;
        let ms = self.to_predicate_subject.forward(g, store, hs)?;
        let mo = self.to_predicate_object.forward(g, store, ho)?;
        let sum = g.add(ms, mo)?;
        Ok(g.scale(sum, T::c(0.5)))
    }

    /// Per entity: the mean of the messages of every pair it takes part
    /// in, as subject or object, `2 (n - 1)` contributions in all. Zero
    /// when the scene has a single entity.
    pub fn message_to_entities<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        predicates: Var,
        rules: Var,
        pairs: &[(usize, usize)],
        n: usize,
    ) -> Result<Var, NumericError> {
        let e = self.config.entity_dim();
        if n < 2 {
            return Ok(g.input(Tensor::zeros(&[n, e])));
        }
        let (subj, obj) = pair_index(pairs);
        let hp = g.scale_rows(predicates, rules)?;
        let m = self.to_entity.forward(g, store, hp)?;
        let as_subject = g.scatter_add_rows(m, &subj, n)?;
        let as_object = g.scatter_add_rows(m, &obj, n)?;
        let sum = g.add(as_subject, as_object)?;
        Ok(g.scale(sum, T::c(1.0 / (2 * (n - 1)) as f64)))
    }

    /// Synchronous rounds: all messages of round `t` are computed from the
    /// round-`t` states before any node is updated. Returns the states of
    /// rounds `0..=iterations`.
    pub fn run_message_passing<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: &FeatureGraph,
        rules: Var,
        pairs: &[(usize, usize)],
        iterations: usize,
    ) -> Result<(Vec<Var>, Vec<Var>), NumericError> {
        let n = g.value(features.entities).rows();
        let mut he = vec![features.entities];
        let mut hp = vec![features.relations];
        for _ in 0..iterations {
            let (e, p) = (*he.last().expect("state"), *hp.last().expect("state"));
            let mp = self.message_to_predicates(g, store, e, rules, pairs)?;
            let me = self.message_to_entities(g, store, p, rules, pairs, n)?;
            he.push(self.entity_gru.forward(g, store, e, me)?);
            hp.push(self.predicate_gru.forward(g, store, p, mp)?);
        }
        Ok((he, hp))
    }

    /// Full forward pass. `rules_override` replaces the gated edge weights
    /// (`pairs` values), which the skeleton classifier still computes.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        inputs: &FeatureInputs,
        rules_override: Option<&[T]>,
    ) -> Result<ForwardPass, NumericError> {
        let features = self.encoders.build_feature_graph(g, store, inputs)?;
        let pairs = &inputs.pairs;
        let k = pairs.len();
        let (pre_gate, gated) = if k > 0 {
            self.gsl_gate(g, store, features.relations)?
        } else {
            let z = g.input(Tensor::zeros(&[0, 1]));
            (z, z)
        };
        let rules = match rules_override {
            Some(r) => {
                if r.len() != k {
                    return Err(NumericError::ShapeMismatch {
                        op: "rules_override",
                        lhs: vec![k, 1],
                        rhs: vec![r.len()],
                    });
                }
                g.input(Tensor::from_vec(vec![k, 1], r.to_vec())?)
            }
            None if self.config.use_gating => gated,
            None => g.input(Tensor::full(&[k, 1], T::one())),
        };
        let (entity_states, predicate_states) =
            self.run_message_passing(g, store, &features, rules, pairs, self.config.iterations)?;
        let coarse_logits = if self.config.use_hierarchy {
            Some(self.coarse_head.forward(g, store, entity_states[0])?)
        } else {
            None
        };
        let last_e = *entity_states.last().expect("state");
        let last_p = *predicate_states.last().expect("state");
        let fine_logits = self.fine_head.forward(g, store, last_e)?;
        let predicate_logits = self.predicate_head.forward(g, store, last_p)?;
        Ok(ForwardPass {
            features,
            pre_gate,
            rules,
            entity_states,
            predicate_states,
            coarse_logits,
            fine_logits,
            predicate_logits,
        })
    }

    /// Hidden state trajectories for prepared inputs.
    pub fn hidden_states<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        inputs: &FeatureInputs,
        rules_override: Option<&[T]>,
    ) -> Result<HiddenStates<T>, NumericError> {
        let mut g = Graph::new();
        let fp = self.forward(&mut g, store, inputs, rules_override)?;
        Ok(HiddenStates {
            entities: fp.entity_states.iter().map(|&v| g.value(v).clone()).collect(),
            predicates: fp.predicate_states.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }

    /// Class probabilities for prepared inputs.
    pub fn predict_inputs<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        inputs: &FeatureInputs,
        rules_override: Option<&[T]>,
    ) -> Result<Prediction, NumericError> {
        let mut g = Graph::new();
        let fp = self.forward(&mut g, store, inputs, rules_override)?;
        let coarse = match fp.coarse_logits {
            Some(c) => Some(g.softmax_rows(c)?),
            None => None,
        };
        let fine = g.softmax_rows(fp.fine_logits)?;
        let pred = g.sigmoid(fp.predicate_logits);
        let col = |t: &Tensor<T>| t.data().iter().map(|x| x.to_f64_exact()).collect::<Vec<_>>();
        Ok(Prediction {
            pairs: inputs.pairs.clone(),
            coarse_probs: coarse.map(|c| g.value(c).cast()),
            fine_probs: g.value(fine).cast(),
            predicate_probs: g.value(pred).cast(),
            pre_gate: col(g.value(fp.pre_gate)),
            rules: col(g.value(fp.rules)),
        })
    }

    /// Resamples `sample` with `seed` and predicts.
    pub fn predict<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        sample: &SceneSample,
        seed: u64,
    ) -> Result<Prediction, NumericError> {
        let inputs = prepare_inputs(sample, &self.config.encoder, seed);
        self.predict_inputs(store, &inputs, None)
    }
}
