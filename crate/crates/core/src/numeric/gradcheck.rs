//! Finite-difference verification of reverse-mode gradients.

use super::{Graph, NumericError, ParamStore, Scalar, Tensor, Var};

/// Step and error normalization for central differences.
///
/// The relative error of one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub h: f64,
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-5, floor: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_coord: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }
}

struct Tracker {
    rel: f64,
    abs: f64,
    worst: usize,
    count: usize,
}

impl Tracker {
    fn new() -> Self {
        Self {
            rel: 0.0,
            abs: 0.0,
            worst: 0,
            count: 0,
        }
    }

    fn record(&mut self, coord: usize, analytic: f64, numeric: f64, floor: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
        if rel > self.rel || !rel.is_finite() {
            self.rel = if rel.is_finite() { rel } else { f64::INFINITY };
            self.worst = coord;
        }
        self.abs = self.abs.max(abs);
        self.count += 1;
    }

    fn finish(self, name: String) -> InputReport {
        InputReport {
            name,
            coords_checked: self.count,
            max_rel_err: self.rel,
            max_abs_err: self.abs,
            worst_coord: self.worst,
        }
    }
}

fn scalar_of<T: Scalar>(g: &Graph<T>, v: Var) -> Result<f64, NumericError> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(NumericError::InvalidArgument(format!(
            "grad_check needs a scalar output, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0].to_f64_exact())
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against
/// central differences for every coordinate of every input.
pub fn grad_check<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport, NumericError>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, NumericError>,
{
    let eval = |xs: &[Tensor<T>]| -> Result<f64, NumericError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.variable(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out);

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut tr = Tracker::new();
        for c in 0..inputs[k].len() {
            let x0 = inputs[k].data()[c];
            work[k].data_mut()[c] = x0 + T::c(cfg.h);
            let up = eval(&work)?;
            work[k].data_mut()[c] = x0 - T::c(cfg.h);
            let down = eval(&work)?;
            work[k].data_mut()[c] = x0;
            let numeric = (up - down) / (2.0 * cfg.h);
            tr.record(c, analytic.data()[c].to_f64_exact(), numeric, cfg.floor);
        }
        report.inputs.push(tr.finish(format!("input{k}")));
    }
    Ok(report)
}

/// Same comparison against every stored parameter. `f` builds the whole
/// forward pass from `store`. When `stride > 1` only every `stride`-th
/// coordinate of each parameter is perturbed (the first is always checked).
pub fn grad_check_params<T, F>(
    f: F,
    store: &ParamStore<T>,
    cfg: GradCheckConfig,
    stride: usize,
) -> Result<GradCheckReport, NumericError>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var, NumericError>,
{
    let eval = |s: &ParamStore<T>| -> Result<f64, NumericError> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out);

    let stride = stride.max(1);
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for (id, name, value) in store.iter() {
        let analytic = g
            .param_var(id)
            .and_then(|v| grads.get(v).cloned())
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        let mut tr = Tracker::new();
        for c in (0..value.len()).step_by(stride) {
            let x0 = value.data()[c];
            work.get_mut(id).data_mut()[c] = x0 + T::c(cfg.h);
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[c] = x0 - T::c(cfg.h);
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[c] = x0;
            let numeric = (up - down) / (2.0 * cfg.h);
            tr.record(c, analytic.data()[c].to_f64_exact(), numeric, cfg.floor);
        }
        report.inputs.push(tr.finish(name.to_string()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_at_three() {
        let x = Tensor::scalar(3.0f64);
        let report = grad_check(
            |g, v| Ok(g.mul(v[0], v[0])?),
            &[x.clone()],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.inputs[0].max_abs_err <= 1e-7);

        let mut g = Graph::new();
        let v = g.variable(x);
        let y = g.mul(v, v).unwrap();
        let grads = g.backward(y);
        assert_eq!(grads.get(v).unwrap().data()[0], 6.0);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::<f64>::zeros(&[2, 2]);
        let r = grad_check(|_, v| Ok(v[0]), &[x], GradCheckConfig::default());
        assert!(r.is_err());
    }
}
