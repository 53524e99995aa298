//! The LSTM text generator `pi_theta(a_t | s_t)`.
//!
//! The state `s_t` is the prefix `a_1..a_{t-1}`, summarized by an LSTM fed
//! the embedding of the previous token (BOS at `t = 1`, zero initial state).
//! The next-token distribution is `softmax(h_t W + b)` restricted to the
//! tokens allowed by the [`SeqMode`].

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::lstm::{self, Cell, CellGrads, CellState, StepCache};
use crate::numerics::{logsumexp, Mat, ParamStore, RngStream};
use crate::{Error, Result, BOS, EOS, NUM_RESERVED};

const LSTM: &str = "lstm";
const EMBED: &str = "embed";
const OUT_W: &str = "out.w";
const OUT_B: &str = "out.b";

/// Sequences per gradient work unit. Fixed so that the summation order of
/// gradients does not depend on the thread count.
pub(crate) const GRAD_CHUNK: usize = 8;

/// How sequences end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeqMode {
    /// Exactly `max_len` content tokens; BOS and EOS have probability 0.
    FixedLength,
    /// Stops after sampling EOS or at `max_len`; only BOS is masked.
    EosTerminated,
}

impl SeqMode {
    #[inline]
    pub fn is_masked(self, token: usize) -> bool {
        token == BOS || (token == EOS && self == SeqMode::FixedLength)
    }

    /// Checks that `tokens` is a sequence this mode can produce.
    pub fn validate(self, tokens: &[usize], v_total: usize) -> Result<()> {
        for (t, &a) in tokens.iter().enumerate() {
            if a >= v_total {
                return Err(Error::arg(format!("token {a} at position {t} is out of range (V = {v_total})")));
            }
            if self.is_masked(a) {
                return Err(Error::arg(format!("reserved token {a} at position {t} in {self:?} mode")));
            }
            if a == EOS && t + 1 != tokens.len() {
                return Err(Error::arg(format!("EOS at position {t} is not the last token")));
            }
        }
        Ok(())
    }
}

/// Layer sizes of the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorDims {
    /// Vocabulary size including the reserved BOS/EOS ids.
    pub v_total: usize,
    pub d_emb: usize,
    pub d_hid: usize,
}

impl GeneratorDims {
    pub fn new(v_total: usize, d_emb: usize, d_hid: usize) -> Result<Self> {
        if v_total <= NUM_RESERVED {
            return Err(Error::arg(format!("vocabulary of {v_total} ids has no content tokens")));
        }
        if d_emb == 0 || d_hid == 0 {
            return Err(Error::arg("generator dimensions must be >= 1"));
        }
        Ok(Self { v_total, d_emb, d_hid })
    }

    /// Dimensions for `v_content` content tokens plus the reserved ids.
    pub fn with_content(v_content: usize, d_emb: usize, d_hid: usize) -> Result<Self> {
        Self::new(v_content + NUM_RESERVED, d_emb, d_hid)
    }

    pub fn v_content(&self) -> usize {
        self.v_total - NUM_RESERVED
    }
}

/// Generator weights `theta`: embedding, LSTM cell and output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    dims: GeneratorDims,
    store: ParamStore,
}

impl GeneratorParams {
    pub fn zeros(dims: GeneratorDims) -> Self {
        let mut store = ParamStore::new();
        store.insert(EMBED, Mat::zeros(dims.v_total, dims.d_emb)).expect("fresh store");
        lstm::insert_zero_cell(&mut store, LSTM, dims.d_emb, dims.d_hid).expect("fresh store");
        store.insert(OUT_W, Mat::zeros(dims.d_hid, dims.v_total)).expect("fresh store");
        store.insert(OUT_B, Mat::zeros(1, dims.v_total)).expect("fresh store");
        Self { dims, store }
    }

    /// Uniform(-scale, scale) weights with the forget-gate bias set to
    /// `forget_bias`.
    pub fn init_uniform(dims: GeneratorDims, scale: f64, forget_bias: f64, rng: &RngStream) -> Self {
        let mut p = Self::zeros(dims);
        let dist = Uniform::new_inclusive(-scale, scale).expect("valid range");
        let mut r = rng.rng();
        lstm::fill_store(&mut p.store, &mut r, |r| dist.sample(r), LSTM, Some(forget_bias));
        p
    }

    /// The default small-LSTM initialization: U(-0.08, 0.08), forget bias 1.
    pub fn init_default(dims: GeneratorDims, rng: &RngStream) -> Self {
        Self::init_uniform(dims, 0.08, 1.0, rng)
    }

    /// Every entry i.i.d. Normal(mean, std), biases included.
    pub fn init_normal(dims: GeneratorDims, mean: f64, std: f64, rng: &RngStream) -> Self {
        let mut p = Self::zeros(dims);
        let dist = Normal::new(mean, std).expect("valid normal");
        let mut r = rng.rng();
        lstm::fill_store(&mut p.store, &mut r, |r| dist.sample(r), LSTM, None);
        p
    }

    /// Wraps an existing store after checking its layout against `dims`.
    pub fn from_store(dims: GeneratorDims, store: ParamStore) -> Result<Self> {
        let template = Self::zeros(dims);
        template.store.check_layout(&store, "generator parameters")?;
        Ok(Self { dims, store })
    }

    pub fn dims(&self) -> GeneratorDims {
        self.dims
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    pub(crate) fn view(&self) -> Policy<'_> {
        Policy::new(&self.store, self.dims)
    }
}

/// Hidden and cell vectors of the generator LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl LstmState {
    pub fn zeros(d_hid: usize) -> Self {
        Self {
            hidden: vec![0.0; d_hid],
            cell: vec![0.0; d_hid],
        }
    }
}

impl From<CellState> for LstmState {
    fn from(s: CellState) -> Self {
        Self { hidden: s.h, cell: s.c }
    }
}

impl From<&LstmState> for CellState {
    fn from(s: &LstmState) -> Self {
        Self {
            h: s.hidden.clone(),
            c: s.cell.clone(),
        }
    }
}

/// A generated sequence with the per-step log-probabilities it was drawn with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub tokens: Vec<usize>,
    pub step_logps: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `log q_theta(tau)`.
    pub fn total_logp(&self) -> f64 {
        self.step_logps.iter().sum()
    }
}

/// Borrowed, lookup-free view of the generator weights.
pub(crate) struct Policy<'a> {
    embed: &'a Mat,
    cell: Cell<'a>,
    out_w: &'a Mat,
    out_b: &'a Mat,
    dims: GeneratorDims,
}

impl<'a> Policy<'a> {
    fn new(store: &'a ParamStore, dims: GeneratorDims) -> Self {
        Self {
            embed: store.expect(EMBED),
            cell: Cell::new(store, LSTM),
            out_w: store.expect(OUT_W),
            out_b: store.expect(OUT_B),
            dims,
        }
    }

    pub fn initial_state(&self) -> CellState {
        CellState::zeros(self.dims.d_hid)
    }

    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        let mut z = self.out_b.as_slice().to_vec();
        self.out_w.accumulate_vec_mat(h, &mut z);
        z
    }

    /// Consumes `prev` and returns the new state with the next-token logits.
    pub fn step(&self, state: &CellState, prev: usize) -> (CellState, Vec<f64>) {
        let next = self.cell.step(self.embed.row(prev), state);
        let logits = self.logits(&next.h);
        (next, logits)
    }

    /// Samples `steps` more tokens after having consumed everything up to
    /// `prev`. Stops early on EOS in eos-terminated mode.
    pub fn continue_sampling<R: Rng>(
        &self,
        mut state: CellState,
        mut prev: usize,
        steps: usize,
        mode: SeqMode,
        rng: &mut R,
        out: &mut Trajectory,
    ) {
        for _ in 0..steps {
            let (next, logits) = self.step(&state, prev);
            let logp = masked_log_softmax(&logits, mode);
            let a = sample_index(&logp, rng);
            out.tokens.push(a);
            out.step_logps.push(logp[a]);
            if a == EOS {
                break;
            }
            state = next;
            prev = a;
        }
    }

    /// States after consuming BOS, a_1, ..., a_{T-1} (the states from which
    /// each token was emitted), plus the per-step log-probabilities.
    pub fn score(&self, tokens: &[usize], mode: SeqMode) -> (Vec<CellState>, Vec<f64>) {
        let mut state = self.initial_state();
        let mut prev = BOS;
        let mut states = Vec::with_capacity(tokens.len());
        let mut logps = Vec::with_capacity(tokens.len());
        for &a in tokens {
            let (next, logits) = self.step(&state, prev);
            logps.push(masked_log_softmax(&logits, mode)[a]);
            states.push(next.clone());
            state = next;
            prev = a;
        }
        (states, logps)
    }

    /// Accumulates `grad_theta sum_t coeffs[t] * log pi(a_t | s_t)` into
    /// `grads` and returns the per-step log-probabilities.
    pub fn score_grad(&self, tokens: &[usize], mode: SeqMode, coeffs: &[f64], grads: &mut ParamStore) -> Vec<f64> {
        debug_assert_eq!(tokens.len(), coeffs.len());
        let d_hid = self.dims.d_hid;
        let mut state = self.initial_state();
        let mut prev = BOS;
        let mut caches: Vec<(usize, StepCache)> = Vec::with_capacity(tokens.len());
        let mut dh_out: Vec<Vec<f64>> = Vec::with_capacity(tokens.len());
        let mut logps = Vec::with_capacity(tokens.len());

        let mut d_out_w = Mat::zeros(d_hid, self.dims.v_total);
        let mut d_out_b = vec![0.0; self.dims.v_total];

        for (&a, &coef) in tokens.iter().zip(coeffs) {
            let (next, cache) = self.cell.step_cached(self.embed.row(prev), &state);
            let logits = self.logits(&next.h);
            let logp = masked_log_softmax(&logits, mode);
            logps.push(logp[a]);

            // d(coef * log p_a)/d logits = coef * (onehot(a) - p), zero on masked ids.
            let dlogits: Vec<f64> = logp
                .iter()
                .enumerate()
                .map(|(k, &lp)| {
                    let p = if lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() };
                    coef * (f64::from(u8::from(k == a)) - p)
                })
                .collect();
            d_out_w.accumulate_outer(&next.h, &dlogits);
            for (b, d) in d_out_b.iter_mut().zip(&dlogits) {
                *b += d;
            }
            let mut dh = vec![0.0; d_hid];
            self.out_w.accumulate_mat_vec(&dlogits, &mut dh);
            dh_out.push(dh);

            caches.push((prev, cache));
            state = next;
            prev = a;
        }

        let mut cell_grads = CellGrads::zeros(&self.cell);
        let mut d_embed = Mat::zeros(self.dims.v_total, self.dims.d_emb);
        let mut dh_next = vec![0.0; d_hid];
        let mut dc_next = vec![0.0; d_hid];
        for (t, (input, cache)) in caches.iter().enumerate().rev() {
            let dh: Vec<f64> = dh_out[t].iter().zip(&dh_next).map(|(a, b)| a + b).collect();
            let (d_in, dh_prev, dc_prev) = self.cell.backward(cache, &dh, &dc_next, &mut cell_grads);
            for (e, d) in d_embed.row_mut(*input).iter_mut().zip(&d_in) {
                *e += d;
            }
            dh_next = dh_prev;
            dc_next = dc_prev;
        }

        cell_grads.add_into(grads, LSTM);
        grads.expect_mut(EMBED).add_scaled(&d_embed, 1.0);
        grads.expect_mut(OUT_W).add_scaled(&d_out_w, 1.0);
        for (b, d) in grads.expect_mut(OUT_B).as_mut_slice().iter_mut().zip(&d_out_b) {
            *b += d;
        }
        logps
    }
}

/// `log softmax` over the ids allowed by `mode`; masked ids get `-inf`.
pub(crate) fn masked_log_softmax(logits: &[f64], mode: SeqMode) -> Vec<f64> {
    let mut z: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(k, &x)| if mode.is_masked(k) { f64::NEG_INFINITY } else { x })
        .collect();
    let lse = logsumexp(&z);
    for x in &mut z {
        *x -= lse;
    }
    z
}

/// Inverse-CDF draw from a log-probability vector.
pub(crate) fn sample_index<R: Rng>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &lp) in logp.iter().enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        acc += lp.exp();
        last = k;
        if u < acc {
            return k;
        }
    }
    // Rounding left u above the accumulated mass.
    last
}

fn check_token(token: usize, v_total: usize) -> Result<()> {
    if token >= v_total {
        return Err(Error::arg(format!("token {token} is out of range (V = {v_total})")));
    }
    Ok(())
}

/// One LSTM step followed by the output projection.
pub fn forward_step(params: &GeneratorParams, state: &LstmState, prev_token: usize) -> Result<(LstmState, Vec<f64>)> {
    check_token(prev_token, params.dims.v_total)?;
    if state.hidden.len() != params.dims.d_hid || state.cell.len() != params.dims.d_hid {
        return Err(Error::arg("LSTM state has the wrong dimension"));
    }
    let (next, logits) = params.view().step(&state.into(), prev_token);
    Ok((next.into(), logits))
}

/// Draws one sequence from the policy, starting from BOS and a zero state.
pub fn sample_trajectory(params: &GeneratorParams, max_len: usize, mode: SeqMode, rng: &RngStream) -> Result<Trajectory> {
    if max_len == 0 {
        return Err(Error::arg("max_len must be >= 1"));
    }
    let view = params.view();
    let mut out = Trajectory {
        tokens: Vec::with_capacity(max_len),
        step_logps: Vec::with_capacity(max_len),
    };
    view.continue_sampling(view.initial_state(), BOS, max_len, mode, &mut rng.rng(), &mut out);
    Ok(out)
}

/// `m` independent trajectories; trajectory `j` uses `rng.child(j)`.
pub fn sample_batch(params: &GeneratorParams, m: usize, max_len: usize, mode: SeqMode, rng: &RngStream) -> Result<Vec<Trajectory>> {
    (0..m)
        .into_par_iter()
        .map(|j| sample_trajectory(params, max_len, mode, &rng.child(j)))
        .collect()
}

/// Exact `log q_theta(tokens)` and its per-step terms.
pub fn log_prob(params: &GeneratorParams, tokens: &[usize], mode: SeqMode) -> Result<(f64, Vec<f64>)> {
    mode.validate(tokens, params.dims.v_total)?;
    let (_, per_step) = params.view().score(tokens, mode);
    Ok((per_step.iter().sum(), per_step))
}

/// Gradient of `sum_i sum_t coeffs[i][t] * log pi(a_t | s_t)` over a batch,
/// accumulated in a fixed order.
pub(crate) fn batch_score_grad(
    params: &GeneratorParams,
    seqs: &[&[usize]],
    coeffs: &[Vec<f64>],
    mode: SeqMode,
) -> (ParamStore, Vec<Vec<f64>>) {
    let view = params.view();
    let idx: Vec<usize> = (0..seqs.len()).collect();
    let parts: Vec<(ParamStore, Vec<Vec<f64>>)> = idx
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = params.store.zeros_like();
            let logps = chunk
                .iter()
                .map(|&i| view.score_grad(seqs[i], mode, &coeffs[i], &mut g))
                .collect();
            (g, logps)
        })
        .collect();
    let mut grads = params.store.zeros_like();
    let mut all_logps = Vec::with_capacity(seqs.len());
    for (g, logps) in parts {
        grads.add_scaled(&g, 1.0).expect("same layout");
        all_logps.extend(logps);
    }
    (grads, all_logps)
}

/// Teacher-forced mean negative log-likelihood per token and its exact
/// gradient (of the loss, not of the likelihood).
pub fn mle_loss_and_grad(params: &GeneratorParams, batch: &[Vec<usize>], mode: SeqMode) -> Result<(f64, ParamStore)> {
    if batch.is_empty() {
        return Err(Error::arg("MLE batch is empty"));
    }
    for s in batch {
        mode.validate(s, params.dims.v_total)?;
    }
    let n_tokens: usize = batch.iter().map(Vec::len).sum();
    if n_tokens == 0 {
        return Err(Error::arg("MLE batch has no tokens"));
    }
    let scale = -1.0 / n_tokens as f64;
    let seqs: Vec<&[usize]> = batch.iter().map(Vec::as_slice).collect();
    let coeffs: Vec<Vec<f64>> = batch.iter().map(|s| vec![scale; s.len()]).collect();
    let (grads, logps) = batch_score_grad(params, &seqs, &coeffs, mode);
    let loss = -logps.iter().flatten().sum::<f64>() / n_tokens as f64;
    Ok((loss, grads))
}

/// Monte Carlo entropy estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

impl Estimate {
    pub(crate) fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std_err: (var / n).sqrt(),
        }
    }
}

/// `H(q_theta) ~ -mean log q_theta(tau)` over `n_samples` sampled sequences.
pub fn entropy_estimate(params: &GeneratorParams, n_samples: usize, max_len: usize, mode: SeqMode, rng: &RngStream) -> Result<f64> {
    Ok(entropy_estimate_detailed(params, n_samples, max_len, mode, rng)?.mean)
}

/// [`entropy_estimate`] plus the Monte Carlo standard error.
pub fn entropy_estimate_detailed(
    params: &GeneratorParams,
    n_samples: usize,
    max_len: usize,
    mode: SeqMode,
    rng: &RngStream,
) -> Result<Estimate> {
    if n_samples == 0 {
        return Err(Error::arg("entropy estimate needs at least one sample"));
    }
    let trajs = sample_batch(params, n_samples, max_len, mode, rng)?;
    let neg: Vec<f64> = trajs.iter().map(|t| -t.total_logp()).collect();
    Ok(Estimate::from_samples(&neg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{compare_grads, finite_diff_grad};

    fn small(v_content: usize, d: usize, seed: u64, scale: f64) -> GeneratorParams {
        let dims = GeneratorDims::with_content(v_content, d, d).unwrap();
        GeneratorParams::init_uniform(dims, scale, 0.5, &RngStream::new(seed))
    }

    /// All sequences of length `t` over the content ids of `v_total`.
    fn enumerate(v_total: usize, t: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..t {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (NUM_RESERVED..v_total).map(move |a| {
                        let mut q = p.clone();
                        q.push(a);
                        q
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn zero_params_give_uniform_logits() {
        let p = GeneratorParams::zeros(GeneratorDims::with_content(3, 2, 2).unwrap());
        let (_, logits) = forward_step(&p, &LstmState::zeros(2), 3).unwrap();
        assert!(logits.iter().all(|&x| x == logits[0]));
    }

    #[test]
    fn forward_step_is_deterministic_and_checks_range() {
        let p = small(4, 3, 1, 0.5);
        let s = LstmState::zeros(3);
        assert_eq!(forward_step(&p, &s, 2).unwrap(), forward_step(&p, &s, 2).unwrap());
        assert!(forward_step(&p, &s, 6).is_err());
    }

    #[test]
    fn scalar_lstm_matches_hand_derivation() {
        // D_emb = D_hid = 1, V = 2 (reserved only is not allowed, so use the raw
        // store). All weights 1: x = [e, h] = [1, 0] for the first step.
        let dims = GeneratorDims { v_total: 2, d_emb: 1, d_hid: 1 };
        let mut p = GeneratorParams::zeros(dims);
        for (_, m) in p.store_mut().iter_mut() {
            for x in m.as_mut_slice() {
                *x = 1.0;
            }
        }
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        // step 1: pre-activation = e*1 + h*1 + 1 = 2 for every gate.
        let c1 = sig(2.0) * 0.0 + sig(2.0) * 2f64.tanh();
        let h1 = sig(2.0) * c1.tanh();
        // step 2: pre-activation = 1 + h1 + 1.
        let a2 = 2.0 + h1;
        let c2 = sig(a2) * c1 + sig(a2) * a2.tanh();
        let h2 = sig(a2) * c2.tanh();

        let (s1, l1) = forward_step(&p, &LstmState::zeros(1), 0).unwrap();
        assert!((s1.hidden[0] - h1).abs() < 1e-15);
        assert!((s1.cell[0] - c1).abs() < 1e-15);
        assert!((l1[0] - (h1 + 1.0)).abs() < 1e-15);
        let (s2, _) = forward_step(&p, &s1, 1).unwrap();
        assert!((s2.hidden[0] - h2).abs() < 1e-15);
    }

    #[test]
    fn zero_params_sample_uniform_content() {
        let p = GeneratorParams::zeros(GeneratorDims::with_content(2, 3, 3).unwrap());
        let tr = sample_trajectory(&p, 6, SeqMode::FixedLength, &RngStream::new(3)).unwrap();
        assert_eq!(tr.len(), 6);
        for (a, lp) in tr.tokens.iter().zip(&tr.step_logps) {
            assert!(*a >= NUM_RESERVED);
            assert!((lp - 0.5f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let p = small(5, 4, 9, 0.5);
        let rng = RngStream::new(77);
        for mode in [SeqMode::FixedLength, SeqMode::EosTerminated] {
            let a = sample_trajectory(&p, 10, mode, &rng).unwrap();
            let b = sample_trajectory(&p, 10, mode, &rng).unwrap();
            assert_eq!(a, b);
        }
        assert!(sample_trajectory(&p, 0, SeqMode::FixedLength, &rng).is_err());
    }

    #[test]
    fn single_step_frequencies_match_distribution() {
        // Output bias log(0.1), log(0.9) on the two content ids.
        let dims = GeneratorDims::with_content(2, 1, 1).unwrap();
        let mut p = GeneratorParams::zeros(dims);
        let b = p.store_mut().get_mut(OUT_B).unwrap();
        b.set(0, 2, 0.1f64.ln());
        b.set(0, 3, 0.9f64.ln());
        let root = RngStream::new(5);
        let n = 100_000;
        let hits = (0..n)
            .filter(|&i| sample_trajectory(&p, 1, SeqMode::FixedLength, &root.child(i as u64)).unwrap().tokens[0] == 2)
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.1).abs() < 0.01, "{freq}");
    }

    #[test]
    fn eos_mode_stops_at_eos() {
        // Make EOS overwhelmingly likely.
        let dims = GeneratorDims::with_content(3, 2, 2).unwrap();
        let mut p = GeneratorParams::zeros(dims);
        p.store_mut().get_mut(OUT_B).unwrap().set(0, EOS, 50.0);
        let tr = sample_trajectory(&p, 10, SeqMode::EosTerminated, &RngStream::new(1)).unwrap();
        assert_eq!(tr.tokens, vec![EOS]);
        let fixed = sample_trajectory(&p, 4, SeqMode::FixedLength, &RngStream::new(1)).unwrap();
        assert_eq!(fixed.len(), 4);
        assert!(fixed.tokens.iter().all(|&a| a >= NUM_RESERVED));
    }

    #[test]
    fn log_prob_reproduces_sampled_logps() {
        let p = small(4, 3, 2, 0.6);
        for mode in [SeqMode::FixedLength, SeqMode::EosTerminated] {
            for i in 0..20u64 {
                let tr = sample_trajectory(&p, 7, mode, &RngStream::new(i)).unwrap();
                let (total, per) = log_prob(&p, &tr.tokens, mode).unwrap();
                for (a, b) in per.iter().zip(&tr.step_logps) {
                    assert!((a - b).abs() < 1e-12);
                }
                assert!((total - per.iter().sum::<f64>()).abs() < 1e-15);
                assert!(tr.step_logps.iter().all(|&x| x <= 0.0));
            }
        }
    }

    #[test]
    fn log_prob_uniform_and_invalid_tokens() {
        let p = GeneratorParams::zeros(GeneratorDims::with_content(2, 2, 2).unwrap());
        let (total, _) = log_prob(&p, &[2, 3, 2], SeqMode::FixedLength).unwrap();
        assert!((total - 3.0 * 0.5f64.ln()).abs() < 1e-15);
        assert!(log_prob(&p, &[2, EOS], SeqMode::FixedLength).is_err());
        assert!(log_prob(&p, &[BOS, 2], SeqMode::EosTerminated).is_err());
        assert!(log_prob(&p, &[EOS, 2], SeqMode::EosTerminated).is_err());
        assert!(log_prob(&p, &[2, 9], SeqMode::EosTerminated).is_err());
        assert!(log_prob(&p, &[2, EOS], SeqMode::EosTerminated).is_ok());
    }

    #[test]
    fn brute_force_normalization() {
        for seed in 0..5 {
            for (vc, t) in [(3usize, 3usize), (2, 4), (4, 2)] {
                let p = small(vc, 3, seed, 1.0);
                let z: f64 = enumerate(vc + NUM_RESERVED, t)
                    .iter()
                    .map(|s| log_prob(&p, s, SeqMode::FixedLength).unwrap().0.exp())
                    .sum();
                assert!((z - 1.0).abs() < 1e-10, "{z}");
            }
        }
    }

    #[test]
    fn eos_mode_normalization() {
        // Sequences that end in EOS before max_len, plus every EOS-free
        // sequence of exactly max_len, carry all the mass.
        let p = small(2, 3, 4, 1.0);
        let max_len = 3;
        let mut total = 0.0;
        for len in 0..=max_len {
            for body in enumerate(4, len) {
                if len < max_len {
                    let mut s = body.clone();
                    s.push(EOS);
                    total += log_prob(&p, &s, SeqMode::EosTerminated).unwrap().0.exp();
                } else {
                    total += log_prob(&p, &body, SeqMode::EosTerminated).unwrap().0.exp();
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-10, "{total}");
    }

    #[test]
    fn fixed_mode_never_assigns_mass_to_reserved() {
        let p = small(3, 3, 8, 2.0);
        let view = p.view();
        let (_, logits) = view.step(&view.initial_state(), BOS);
        let lp = masked_log_softmax(&logits, SeqMode::FixedLength);
        assert_eq!(lp[BOS].exp(), 0.0);
        assert_eq!(lp[EOS].exp(), 0.0);
    }

    #[test]
    fn mle_loss_uniform_is_ln2() {
        let p = GeneratorParams::zeros(GeneratorDims::with_content(2, 3, 3).unwrap());
        let (loss, _) = mle_loss_and_grad(&p, &[vec![2, 3, 3], vec![3]], SeqMode::FixedLength).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert!(mle_loss_and_grad(&p, &[], SeqMode::FixedLength).is_err());
    }

    #[test]
    fn mle_grad_matches_finite_differences() {
        // V = 5 content ids, D = 3, T = 4.
        let p = small(5, 3, 11, 0.5);
        let batch = vec![vec![2, 5, 6, 3], vec![4, 4, 2, 6], vec![6, 5, 4, 3]];
        for mode in [SeqMode::FixedLength, SeqMode::EosTerminated] {
            let (_, g) = mle_loss_and_grad(&p, &batch, mode).unwrap();
            let dims = p.dims();
            let num = finite_diff_grad(
                |s| {
                    let q = GeneratorParams::from_store(dims, s.clone()).unwrap();
                    mle_loss_and_grad(&q, &batch, mode).unwrap().0
                },
                p.store(),
                1e-5,
            )
            .unwrap();
            if let Err(m) = compare_grads(&g, &num, 1e-4, 1e-8) {
                panic!("{mode:?}: {m:?}");
            }
        }
    }

    #[test]
    fn mle_overfits_single_sequence() {
        let mut p = small(5, 8, 3, 0.08);
        let seq = vec![vec![2, 4, 6, 3, 5, 2]];
        let mut st = crate::AdamState::new(p.store());
        let cfg = crate::AdamConfig::with_lr(0.05);
        let mut loss = f64::INFINITY;
        for _ in 0..200 {
            let (l, mut g) = mle_loss_and_grad(&p, &seq, SeqMode::FixedLength).unwrap();
            loss = l;
            g.scale(-1.0);
            crate::numerics::adam_step(p.store_mut(), &g, &mut st, &cfg).unwrap();
        }
        let (final_loss, _) = mle_loss_and_grad(&p, &seq, SeqMode::FixedLength).unwrap();
        assert!(final_loss < 0.05, "loss {loss} -> {final_loss}");
    }

    fn exact_entropy(p: &GeneratorParams, t: usize) -> f64 {
        enumerate(p.dims().v_total, t)
            .iter()
            .map(|s| {
                let lq = log_prob(p, s, SeqMode::FixedLength).unwrap().0;
                -lq.exp() * lq
            })
            .sum()
    }

    #[test]
    fn entropy_of_uniform_policy() {
        let p = GeneratorParams::zeros(GeneratorDims::with_content(2, 2, 2).unwrap());
        let est = entropy_estimate_detailed(&p, 500, 5, SeqMode::FixedLength, &RngStream::new(1)).unwrap();
        // Every sequence has the same probability, so the estimate is exact.
        assert!((est.mean - 5.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_of_deterministic_policy() {
        let dims = GeneratorDims::with_content(3, 2, 2).unwrap();
        let mut p = GeneratorParams::zeros(dims);
        p.store_mut().get_mut(OUT_B).unwrap().set(0, 3, 1e9);
        let h = entropy_estimate(&p, 50, 4, SeqMode::FixedLength, &RngStream::new(2)).unwrap();
        assert!(h.abs() < 1e-9, "{h}");
    }

    #[test]
    fn entropy_matches_enumeration() {
        for seed in 0..3 {
            let p = small(3, 3, 100 + seed, 1.5);
            let exact = exact_entropy(&p, 3);
            let est = entropy_estimate_detailed(&p, 4000, 3, SeqMode::FixedLength, &RngStream::new(seed)).unwrap();
            assert!((est.mean - exact).abs() < 3.0 * est.std_err, "{} vs {exact} (se {})", est.mean, est.std_err);
        }
    }
}
