//! Single-layer LSTM cell shared by the generator and the reward encoder.
//!
//! Gate weights act on `x = [input ; h_prev]`:
//!
//! ```text
//! i = sigmoid(x W_i + b_i)    f = sigmoid(x W_f + b_f)
//! o = sigmoid(x W_o + b_o)    g = tanh(x W_c + b_c)
//! c = f * c_prev + i * g      h = o * tanh(c)
//! ```

use rand::Rng;

use crate::numerics::{sigmoid, Mat, ParamStore};
use crate::Result;

pub(crate) const GATES: [&str; 4] = ["i", "f", "o", "c"];

pub(crate) fn weight_name(prefix: &str, gate: &str) -> String {
    format!("{prefix}.w_{gate}")
}

pub(crate) fn bias_name(prefix: &str, gate: &str) -> String {
    format!("{prefix}.b_{gate}")
}

/// Adds zero-initialized cell parameters under `prefix`.
pub(crate) fn insert_zero_cell(store: &mut ParamStore, prefix: &str, d_in: usize, d_hid: usize) -> Result<()> {
    for gate in GATES {
        store.insert(weight_name(prefix, gate), Mat::zeros(d_in + d_hid, d_hid))?;
        store.insert(bias_name(prefix, gate), Mat::zeros(1, d_hid))?;
    }
    Ok(())
}

/// Overwrites every entry of `store` (in name order) with draws from `draw`,
/// then sets forget-gate biases under `lstm_prefix` to `forget_bias`.
pub(crate) fn fill_store<R: Rng, F: FnMut(&mut R) -> f64>(
    store: &mut ParamStore,
    rng: &mut R,
    mut draw: F,
    lstm_prefix: &str,
    forget_bias: Option<f64>,
) {
    for (_, m) in store.iter_mut() {
        for x in m.as_mut_slice() {
            *x = draw(rng);
        }
    }
    if let Some(fb) = forget_bias {
        for x in store.expect_mut(&bias_name(lstm_prefix, "f")).as_mut_slice() {
            *x = fb;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct CellState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl CellState {
    pub fn zeros(d_hid: usize) -> Self {
        Self {
            h: vec![0.0; d_hid],
            c: vec![0.0; d_hid],
        }
    }
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    x: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Borrowed view of one cell's weights.
pub(crate) struct Cell<'a> {
    w: [&'a Mat; 4],
    b: [&'a Mat; 4],
    d_in: usize,
    d_hid: usize,
}

impl<'a> Cell<'a> {
    pub fn new(store: &'a ParamStore, prefix: &str) -> Self {
        let w = GATES.map(|g| store.expect(&weight_name(prefix, g)));
        let b = GATES.map(|g| store.expect(&bias_name(prefix, g)));
        let d_hid = w[0].cols();
        Self {
            w,
            b,
            d_in: w[0].rows() - d_hid,
            d_hid,
        }
    }

    fn preactivations(&self, x: &[f64]) -> [Vec<f64>; 4] {
        std::array::from_fn(|k| {
            let mut a = self.b[k].as_slice().to_vec();
            self.w[k].accumulate_vec_mat(x, &mut a);
            a
        })
    }

    fn concat(&self, input: &[f64], h: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.d_in);
        let mut x = Vec::with_capacity(self.d_in + self.d_hid);
        x.extend_from_slice(input);
        x.extend_from_slice(h);
        x
    }

    /// Forward step without caching.
    pub fn step(&self, input: &[f64], state: &CellState) -> CellState {
        let x = self.concat(input, &state.h);
        let [ai, af, ao, ag] = self.preactivations(&x);
        let mut h = vec![0.0; self.d_hid];
        let mut c = vec![0.0; self.d_hid];
        for j in 0..self.d_hid {
            let (i, f, o, g) = (sigmoid(ai[j]), sigmoid(af[j]), sigmoid(ao[j]), ag[j].tanh());
            c[j] = f * state.c[j] + i * g;
            h[j] = o * c[j].tanh();
        }
        CellState { h, c }
    }

    /// Forward step that records what [`Cell::backward`] needs.
    pub fn step_cached(&self, input: &[f64], state: &CellState) -> (CellState, StepCache) {
        let x = self.concat(input, &state.h);
        let [ai, af, ao, ag] = self.preactivations(&x);
        let i: Vec<f64> = ai.iter().map(|&v| sigmoid(v)).collect();
        let f: Vec<f64> = af.iter().map(|&v| sigmoid(v)).collect();
        let o: Vec<f64> = ao.iter().map(|&v| sigmoid(v)).collect();
        let g: Vec<f64> = ag.iter().map(|v| v.tanh()).collect();
        let c: Vec<f64> = (0..self.d_hid).map(|j| f[j] * state.c[j] + i[j] * g[j]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let h: Vec<f64> = (0..self.d_hid).map(|j| o[j] * tanh_c[j]).collect();
        let cache = StepCache {
            x,
            i,
            f,
            o,
            g,
            c_prev: state.c.clone(),
            tanh_c,
        };
        (CellState { h, c }, cache)
    }

    /// Backpropagates `dh`, `dc` (gradients w.r.t. this step's outputs) into
    /// `grads`. Returns `(d_input, dh_prev, dc_prev)`.
    pub fn backward(
        &self,
        cache: &StepCache,
        dh: &[f64],
        dc: &[f64],
        grads: &mut CellGrads,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.d_hid;
        let mut da: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n]);
        let mut dc_prev = vec![0.0; n];
        for j in 0..n {
            let (i, f, o, g, tc) = (cache.i[j], cache.f[j], cache.o[j], cache.g[j], cache.tanh_c[j]);
            let dct = dc[j] + dh[j] * o * (1.0 - tc * tc);
            let d_o = dh[j] * tc;
            let d_i = dct * g;
            let d_g = dct * i;
            let d_f = dct * cache.c_prev[j];
            dc_prev[j] = dct * f;
            da[0][j] = d_i * i * (1.0 - i);
            da[1][j] = d_f * f * (1.0 - f);
            da[2][j] = d_o * o * (1.0 - o);
            da[3][j] = d_g * (1.0 - g * g);
        }
        let mut dx = vec![0.0; self.d_in + n];
        for k in 0..4 {
            grads.w[k].accumulate_outer(&cache.x, &da[k]);
            for (b, d) in grads.b[k].as_mut_slice().iter_mut().zip(&da[k]) {
                *b += d;
            }
            self.w[k].accumulate_mat_vec(&da[k], &mut dx);
        }
        let dh_prev = dx.split_off(self.d_in);
        (dx, dh_prev, dc_prev)
    }
}

/// Gradient accumulators for one cell.
pub(crate) struct CellGrads {
    w: [Mat; 4],
    b: [Mat; 4],
}

impl CellGrads {
    pub fn zeros(cell: &Cell<'_>) -> Self {
        Self {
            w: std::array::from_fn(|k| Mat::zeros(cell.w[k].rows(), cell.w[k].cols())),
            b: std::array::from_fn(|_| Mat::zeros(1, cell.d_hid)),
        }
    }

    /// Adds the accumulated gradients into `store` under `prefix`.
    pub fn add_into(&self, store: &mut ParamStore, prefix: &str) {
        for (k, gate) in GATES.iter().enumerate() {
            store.expect_mut(&weight_name(prefix, gate)).add_scaled(&self.w[k], 1.0);
            store.expect_mut(&bias_name(prefix, gate)).add_scaled(&self.b[k], 1.0);
        }
    }
}
