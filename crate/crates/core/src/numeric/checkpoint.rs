//! Parameter and optimizer snapshots.
//!
//! Values are stored widened to `f64`, row-major, one record per
//! parameter in registration order. JSON numbers are written in shortest
//! round-trip form, so a snapshot reloads bit-exactly and re-serializes to
//! identical bytes.

use serde::{Deserialize, Serialize};

use super::{AdamConfig, AdamState, NumericError, ParamStore, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub kind: String,
    pub step: u64,
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

fn widen<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|x| x.to_f64_exact()).collect()
}

fn narrow<T: Scalar>(shape: &[usize], values: &[f64]) -> Result<Tensor<T>, NumericError> {
    Tensor::from_vec(shape.to_vec(), values.iter().map(|&x| T::c(x)).collect())
}

pub fn snapshot_params<T: Scalar>(store: &ParamStore<T>) -> Vec<ParamRecord> {
    store
        .iter()
        .map(|(_, name, t)| ParamRecord {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            values: widen(t),
        })
        .collect()
}

/// Loads records into an already-built store. Names, order and shapes
/// must match the architecture exactly.
pub fn restore_params<T: Scalar>(
    store: &mut ParamStore<T>,
    records: &[ParamRecord],
) -> Result<(), NumericError> {
    if records.len() != store.len() {
        return Err(NumericError::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            records.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, rec) in ids.into_iter().zip(records) {
        if store.name(id) != rec.name {
            return Err(NumericError::Checkpoint(format!(
                "parameter {} is named {:?} in the checkpoint, {:?} in the model",
                id.index(),
                rec.name,
                store.name(id)
            )));
        }
        let t = narrow(&rec.shape, &rec.values)
            .map_err(|e| NumericError::Checkpoint(format!("{}: {e}", rec.name)))?;
        store
            .set(id, t)
            .map_err(|e| NumericError::Checkpoint(format!("{}: {e}", rec.name)))?;
    }
    Ok(())
}

pub fn snapshot_optimizer<T: Scalar>(state: &AdamState<T>, config: &AdamConfig) -> OptimizerRecord {
    OptimizerRecord {
        kind: "adam".into(),
        step: state.step,
        config: *config,
        m: state.m.iter().map(widen).collect(),
        v: state.v.iter().map(widen).collect(),
    }
}

pub fn restore_optimizer<T: Scalar>(
    store: &ParamStore<T>,
    rec: &OptimizerRecord,
) -> Result<AdamState<T>, NumericError> {
    if rec.kind != "adam" {
        return Err(NumericError::Checkpoint(format!("unknown optimizer {:?}", rec.kind)));
    }
    if rec.m.len() != store.len() || rec.v.len() != store.len() {
        return Err(NumericError::Checkpoint("optimizer moment count mismatch".into()));
    }
    let mut state = AdamState::zeros_like(store);
    state.step = rec.step;
    for (i, (_, _, t)) in store.iter().enumerate() {
        state.m[i] = narrow(t.shape(), &rec.m[i])?;
        state.v[i] = narrow(t.shape(), &rec.v[i])?;
    }
    Ok(state)
}
