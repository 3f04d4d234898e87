//! Composite loss, the per-scene training loop and model checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{prepare_inputs, EncoderConfig, FeatureInputs};
use crate::mix_seed;
use crate::numeric::{
    adam_step, clip_grad_norm, restore_optimizer, restore_params, snapshot_optimizer, snapshot_params,
    AdamConfig, AdamState, Graph, NumericError, OptimizerRecord, ParamRecord, ParamStore, Scalar, Tensor,
    Var,
};
use crate::reasoning::{ForwardPass, Model, ModelConfig};
use crate::scene::{SceneError, SceneSample, Taxonomy};

/// Clamp applied to skeleton probabilities before the log.
pub const GSL_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub lr: f64,
    pub lambda_coarse: f64,
    pub lambda_fine: f64,
    /// Message passing rounds.
    pub iterations: usize,
    /// Relation points from the interaction space instead of the union box.
    pub use_ins: bool,
    /// Relative position encoding in the relation feature.
    pub use_pos: bool,
    /// Skeleton gating and its loss term.
    pub use_gsl: bool,
    /// Coarse head on the initial entity features and its loss term.
    pub use_hol: bool,
    /// Global gradient norm cap; unset means no clipping.
    pub clip_norm: Option<f64>,
    /// Step loss above which training stops as diverged; unset disables
    /// the check. Non-finite losses always stop training.
    pub divergence_loss: Option<f64>,
    pub point_widths: Vec<usize>,
    pub position_widths: Vec<usize>,
    pub sample_size: usize,
    pub gsl_hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            epochs: 300,
            seed: 0,
            lr: 1e-4,
            lambda_coarse: 0.1,
            lambda_fine: 0.1,
            iterations: m.iterations,
            use_ins: true,
            use_pos: true,
            use_gsl: true,
            use_hol: true,
            clip_norm: None,
            divergence_loss: Some(1e6),
            point_widths: m.encoder.point_widths,
            position_widths: m.encoder.position_widths,
            sample_size: m.encoder.sample_size,
            gsl_hidden: m.gsl_hidden,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lambda_coarse >= 0.0 && self.lambda_fine >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm must be positive".into());
            }
        }
        if let Some(d) = self.divergence_loss {
            if !(d > 0.0) {
                return bad("divergence_loss must be positive".into());
            }
        }
        Ok(())
    }

    pub fn model_config(&self, taxonomy: &Taxonomy) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                point_widths: self.point_widths.clone(),
                position_widths: self.position_widths.clone(),
                sample_size: self.sample_size,
                use_interaction_space: self.use_ins,
                use_position: self.use_pos,
            },
            gsl_hidden: self.gsl_hidden.clone(),
            iterations: self.iterations,
            num_coarse: taxonomy.num_coarse(),
            num_fine: taxonomy.num_fine(),
            num_predicates: taxonomy.num_predicates(),
            use_gating: self.use_gsl,
            use_hierarchy: self.use_hol,
            ..ModelConfig::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_coarse: self.lambda_coarse,
            lambda_fine: self.lambda_fine,
            use_gsl: self.use_gsl,
            use_hol: self.use_hol,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    /// Short content hash of the canonical serialization.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("non-finite value at epoch {epoch}, step {step} (scene {scene}): {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        scene: usize,
        detail: String,
    },
    #[error("training diverged at epoch {epoch}, step {step} (scene {scene}): loss {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        scene: usize,
        loss: f64,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_coarse: f64,
    pub lambda_fine: f64,
    pub use_gsl: bool,
    pub use_hol: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_coarse: 0.1,
            lambda_fine: 0.1,
            use_gsl: true,
            use_hol: true,
        }
    }
}

/// Unweighted loss terms and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub gsl: f64,
    pub predicate: f64,
    pub coarse: f64,
    pub fine: f64,
}

impl LossBreakdown {
    /// Weighted total of the given terms; disabled terms contribute 0.
    pub fn from_terms(gsl: f64, predicate: f64, coarse: f64, fine: f64, w: &LossWeights) -> Self {
        let gsl = if w.use_gsl { gsl } else { 0.0 };
        let coarse = if w.use_hol { coarse } else { 0.0 };
        Self {
            total: gsl + predicate + w.lambda_coarse * coarse + w.lambda_fine * fine,
            gsl,
            predicate,
            coarse,
            fine,
        }
    }
}

/// Mean clamped BCE of per-pair skeleton probabilities (`pairs x 1`).
pub fn loss_gsl<T: Scalar>(g: &mut Graph<T>, pre_gate: Var, skeleton: &[T]) -> Result<Var, NumericError> {
    g.bce(pre_gate, skeleton, T::c(GSL_EPS))
}

/// Per-pair targets in pair order: skeleton bits and flattened predicate
/// bits.
fn pair_targets<T: Scalar>(sample: &SceneSample, pairs: &[(usize, usize)]) -> (Vec<T>, Vec<T>) {
    let bit = |b: bool| if b { T::one() } else { T::zero() };
    let skeleton = pairs.iter().map(|&(i, j)| bit(sample.skeleton.get(i, j))).collect();
    let predicates = pairs
        .iter()
        .flat_map(|&(i, j)| sample.predicates.pair(i, j).iter().map(|&b| bit(b)))
        .collect();
    (skeleton, predicates)
}

/// Graph nodes of the composite loss.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub gsl: Var,
    pub predicate: Var,
    pub coarse: Var,
    pub fine: Var,
}

/// `L_gsl + L_p + lambda_c L_c + lambda_f L_f` with disabled terms left
/// out of the total.
pub fn loss_total<T: Scalar>(
    g: &mut Graph<T>,
    fp: &ForwardPass,
    sample: &SceneSample,
    pairs: &[(usize, usize)],
    w: &LossWeights,
) -> Result<LossNodes, NumericError> {
    let (skel, preds) = pair_targets::<T>(sample, pairs);
    let zero = g.input(Tensor::scalar(T::zero()));
    let gsl = if w.use_gsl { loss_gsl(g, fp.pre_gate, &skel)? } else { zero };
    let predicate = g.per_class_bce(fp.predicate_logits, &preds)?;
    let coarse = match (w.use_hol, fp.coarse_logits) {
        (true, Some(c)) => g.cross_entropy(c, &sample.gt_coarse)?,
        _ => zero,
    };
    let fine = g.cross_entropy(fp.fine_logits, &sample.gt_fine)?;
    let wc = g.scale(coarse, T::c(w.lambda_coarse));
    let wf = g.scale(fine, T::c(w.lambda_fine));
    let a = g.add(gsl, predicate)?;
    let b = g.add(wc, wf)?;
    let total = g.add(a, b)?;
    Ok(LossNodes {
        total,
        gsl,
        predicate,
        coarse,
        fine,
    })
}

/// Loss value of every term.
pub fn read_breakdown<T: Scalar>(g: &Graph<T>, nodes: &LossNodes) -> LossBreakdown {
    let v = |x: Var| g.value(x).data()[0].to_f64_exact();
    LossBreakdown {
        total: v(nodes.total),
        gsl: v(nodes.gsl),
        predicate: v(nodes.predicate),
        coarse: v(nodes.coarse),
        fine: v(nodes.fine),
    }
}

/// Seed of the resampling done for scene `scene` in epoch `epoch`.
pub fn step_seed(seed: u64, epoch: usize, scene: usize) -> u64 {
    mix_seed(mix_seed(seed, epoch as u64), scene as u64)
}

/// Visiting order of epoch `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed ^ 0x5eed_0f0e_de12_0001, epoch as u64));
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Mean over the epoch's steps.
    pub loss: LossBreakdown,
    /// Object top-1 recall on the training scenes, from the forward passes
    /// of this epoch.
    pub train_object_r1: f64,
}

/// A model with its parameters and optimizer state.
#[derive(Clone, Debug)]
pub struct Trained<T> {
    pub model: Model,
    pub store: ParamStore<T>,
    pub optimizer: AdamState<T>,
    pub adam: AdamConfig,
    pub logs: Vec<EpochLog>,
}

/// Loss and gradients of one scene.
pub struct StepResult<T> {
    pub loss: LossBreakdown,
    pub grads: Vec<Option<Tensor<T>>>,
    pub fine_correct: usize,
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

/// Forward and backward pass on one prepared scene.
pub fn compute_step<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    sample: &SceneSample,
    inputs: &FeatureInputs,
    w: &LossWeights,
) -> Result<StepResult<T>, StepError> {
    let mut g = Graph::new();
    let fp = model.forward(&mut g, store, inputs, None)?;
    let nodes = loss_total(&mut g, &fp, sample, &inputs.pairs, w)?;
    let loss = read_breakdown(&g, &nodes);
    if let Some(nf) = g.non_finite() {
        return Err(StepError::NonFinite(format!("forward op {} at node {}", nf.op, nf.node)));
    }
    let fine = g.value(fp.fine_logits);
    let fine_correct = (0..fine.rows())
        .filter(|&r| argmax(fine.row(r)) == sample.gt_fine[r])
        .count();
    let mut grads_all = g.backward(nodes.total);
    if let Some(nf) = g.non_finite() {
        return Err(StepError::NonFinite(format!(
            "backward through op {} at node {}",
            nf.op, nf.node
        )));
    }
    let grads = store
        .ids()
        .map(|id| g.param_var(id).and_then(|v| grads_all.take(v)))
        .collect();
    Ok(StepResult {
        loss,
        grads,
        fine_correct,
    })
}

/// Index of the largest entry; the first one on ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

/// Keeps the gate well formed: `alpha` in `[0.1, 10]`, `beta` in `[0, 0.5]`.
pub fn project_gate<T: Scalar>(model: &Model, store: &mut ParamStore<T>) {
    let a = &mut store.get_mut(model.alpha).data_mut()[0];
    *a = a.max(T::c(0.1)).min(T::c(10.0));
    let b = &mut store.get_mut(model.beta).data_mut()[0];
    *b = b.max(T::zero()).min(T::c(0.5));
}

/// Trains a fresh model on `dataset`, one scene per Adam step.
/// `on_epoch` sees every epoch record as soon as it is complete.
pub fn train<T: Scalar>(
    dataset: &[SceneSample],
    taxonomy: &Taxonomy,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Trained<T>, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for s in dataset {
        s.validate(taxonomy)?;
    }
    let model_cfg = config.model_config(taxonomy);
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, &model_cfg, mix_seed(config.seed, 0x1417))?;
    let adam = config.adam();
    let mut optimizer = AdamState::zeros_like(&store);
    let weights = config.loss_weights();
    let entity_total: usize = dataset.iter().map(|s| s.num_entities()).sum();
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut sum = LossBreakdown::default();
        let mut correct = 0;
        let order = epoch_order(config.seed, epoch, dataset.len());
        for (step, &k) in order.iter().enumerate() {
            let sample = &dataset[k];
            let inputs = prepare_inputs(sample, &model_cfg.encoder, step_seed(config.seed, epoch, k));
            let mut res = compute_step(&model, &store, sample, &inputs, &weights).map_err(|e| match e {
                StepError::NonFinite(detail) => TrainError::NonFinite {
                    epoch,
                    step,
                    scene: k,
                    detail,
                },
                StepError::Numeric(e) => TrainError::Numeric(e),
            })?;
            if !res.loss.total.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    step,
                    scene: k,
                    detail: format!("loss {:?}", res.loss),
                });
            }
            if config.divergence_loss.is_some_and(|d| res.loss.total > d) {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    scene: k,
                    loss: res.loss.total,
                });
            }
            if let Some(c) = config.clip_norm {
                clip_grad_norm(&mut res.grads, c);
            }
            adam_step(&mut store, &res.grads, &mut optimizer, &adam)?;
            project_gate(&model, &mut store);
            sum.total += res.loss.total;
            sum.gsl += res.loss.gsl;
            sum.predicate += res.loss.predicate;
            sum.coarse += res.loss.coarse;
            sum.fine += res.loss.fine;
            correct += res.fine_correct;
        }
        let n = dataset.len() as f64;
        let log = EpochLog {
            epoch,
            steps: dataset.len(),
            loss: LossBreakdown {
                total: sum.total / n,
                gsl: sum.gsl / n,
                predicate: sum.predicate / n,
                coarse: sum.coarse / n,
                fine: sum.fine / n,
            },
            train_object_r1: 100.0 * correct as f64 / entity_total as f64,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} (gsl {:.5}, pred {:.5}, coarse {:.5}, fine {:.5}), object R@1 {:.1}",
            log.loss.total,
            log.loss.gsl,
            log.loss.predicate,
            log.loss.coarse,
            log.loss.fine,
            log.train_object_r1
        );
        on_epoch(&log);
        logs.push(log);
    }
    Ok(Trained {
        model,
        store,
        optimizer,
        adam,
        logs,
    })
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model: architecture, weights and optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub taxonomy_hash: String,
    pub model_config: ModelConfig,
    pub epochs: usize,
    pub params: Vec<ParamRecord>,
    pub optimizer: Option<OptimizerRecord>,
}

impl Checkpoint {
    pub fn from_trained<T: Scalar>(trained: &Trained<T>, taxonomy: &Taxonomy) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            taxonomy_hash: taxonomy.hash(),
            model_config: trained.model.config.clone(),
            epochs: trained.logs.len(),
            params: snapshot_params(&trained.store),
            optimizer: Some(snapshot_optimizer(&trained.optimizer, &trained.adam)),
        }
    }

    /// Rebuilds the model and loads its weights.
    pub fn restore<T: Scalar>(&self) -> Result<(Model, ParamStore<T>), TrainError> {
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, &self.model_config, 0)?;
        restore_params(&mut store, &self.params)?;
        Ok((model, store))
    }

    pub fn restore_optimizer<T: Scalar>(&self, store: &ParamStore<T>) -> Result<Option<AdamState<T>>, TrainError> {
        match &self.optimizer {
            Some(rec) => Ok(Some(restore_optimizer(store, rec)?)),
            None => Ok(None),
        }
    }

    /// Refuses checkpoints trained on a different label vocabulary.
    pub fn check_taxonomy(&self, taxonomy: &Taxonomy) -> Result<(), TrainError> {
        let h = taxonomy.hash();
        if self.taxonomy_hash != h {
            return Err(TrainError::Checkpoint(format!(
                "model taxonomy {} does not match data taxonomy {h}",
                self.taxonomy_hash
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let c: Self = serde_json::from_str(text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported version {}", c.version)));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_json() + "\n").map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}
