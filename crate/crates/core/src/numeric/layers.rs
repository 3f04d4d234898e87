//! Layer kinds built on the autodiff graph: affine layers, ReLU stacks,
//! the shared-MLP point encoder and the GRU cell.

use rand::Rng;

use super::{Graph, NumericError, ParamId, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self, NumericError> {
        let weight = store.register_weight(&format!("{name}.weight"), in_dim, out_dim, rng)?;
        let bias = store.register(&format!("{name}.bias"), Tensor::zeros(&[1, out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var, NumericError> {
        self.forward_act(g, store, x, false)
    }

    /// Affine map followed by a ReLU when `relu`.
    pub fn forward_act<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        relu: bool,
    ) -> Result<Var, NumericError> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.affine(x, w, b, relu)
    }
}

/// Affine layers with ReLU between them, and optionally after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub final_relu: bool,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        final_relu: bool,
        rng: &mut R,
    ) -> Result<Self, NumericError> {
        if dims.len() < 2 {
            return Err(NumericError::InvalidArgument(format!(
                "mlp {name} needs at least input and output widths"
            )));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect::<Result<_, _>>()?;
        Ok(Self { layers, final_relu })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mut x: Var,
    ) -> Result<Var, NumericError> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward_act(g, store, x, i < last || self.final_relu)?;
        }
        Ok(x)
    }
}

/// Shared per-point MLP followed by a column-wise max over the points of
/// each set. Permutation invariant within a set by construction.
#[derive(Clone, Debug)]
pub struct PointEncoder {
    pub mlp: Mlp,
}

impl PointEncoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        rng: &mut R,
    ) -> Result<Self, NumericError> {
        Ok(Self {
            mlp: Mlp::new(store, name, dims, true, rng)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    /// Encodes `points.rows() / set_size` point sets stacked row-wise,
    /// each of exactly `set_size` points, into one row per set.
    pub fn encode_sets<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        points: Var,
        set_size: usize,
    ) -> Result<Var, NumericError> {
        let h = self.mlp.forward(g, store, points)?;
        g.segment_max(h, set_size)
    }

    /// Encodes one point set of any size.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        points: Var,
    ) -> Result<Var, NumericError> {
        let h = self.mlp.forward(g, store, points)?;
        g.max_pool_rows(h)
    }
}

/// Gated recurrent unit, batched over rows:
///
/// ```text
/// z  = sigmoid(m Wz + h Uz + bz)
/// r  = sigmoid(m Wr + h Ur + br)
/// h~ = tanh(m Wh + (r * h) Uh + bh)
/// h' = h + z * (h~ - h)            == (1 - z) * h + z * h~
/// ```
#[derive(Clone, Debug)]
pub struct Gru {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
}

impl Gru {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self, NumericError> {
        let k = 1.0 / (hidden_dim.max(1) as f64).sqrt();
        let mut w = |s: &str, rows: usize, store: &mut ParamStore<T>| {
            store.register_uniform(&format!("{name}.{s}"), &[rows, hidden_dim], k, rng)
        };
        let w_z = w("w_z", input_dim, store)?;
        let u_z = w("u_z", hidden_dim, store)?;
        let w_r = w("w_r", input_dim, store)?;
        let u_r = w("u_r", hidden_dim, store)?;
        let w_h = w("w_h", input_dim, store)?;
        let u_h = w("u_h", hidden_dim, store)?;
        let b_z = store.register(&format!("{name}.b_z"), Tensor::zeros(&[1, hidden_dim]))?;
        let b_r = store.register(&format!("{name}.b_r"), Tensor::zeros(&[1, hidden_dim]))?;
        let b_h = store.register(&format!("{name}.b_h"), Tensor::zeros(&[1, hidden_dim]))?;
        Ok(Self {
            input_dim,
            hidden_dim,
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_h,
            u_h,
            b_h,
        })
    }

    fn affine2<T: Scalar>(
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        w: ParamId,
        h: Var,
        u: ParamId,
        b: ParamId,
    ) -> Result<Var, NumericError> {
        let (w, u, b) = (g.param(store, w), g.param(store, u), g.param(store, b));
        let a = g.affine(x, w, b, false)?;
        let c = g.matmul(h, u)?;
        g.add(a, c)
    }

    /// One update of hidden states `h` (rows x hidden) with messages `m`
    /// (rows x input).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h: Var,
        m: Var,
    ) -> Result<Var, NumericError> {
        let (hs, ms) = (g.shape(h).to_vec(), g.shape(m).to_vec());
        let h_cols = hs.last().copied().unwrap_or(0);
        let m_cols = ms.last().copied().unwrap_or(0);
        if h_cols != self.hidden_dim || m_cols != self.input_dim || g.value(h).rows() != g.value(m).rows() {
            return Err(NumericError::ShapeMismatch {
                op: "gru_cell",
                lhs: hs,
                rhs: ms,
            });
        }
        let z = Self::affine2(g, store, m, self.w_z, h, self.u_z, self.b_z)?;
        let z = g.sigmoid(z);
        let r = Self::affine2(g, store, m, self.w_r, h, self.u_r, self.b_r)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let cand = Self::affine2(g, store, m, self.w_h, rh, self.u_h, self.b_h)?;
        let cand = g.tanh(cand);
        let diff = g.sub(cand, h)?;
        let step = g.mul(z, diff)?;
        g.add(h, step)
    }
}
