//! The reward approximator `r_phi(s_t, a_t)` and the r-step gradient.
//!
//! An LSTM encoder (independent of the generator) reads `BOS, a_1, ...,
//! a_{t-1}` to produce `h_t`; the step reward is a one-hidden-layer tanh MLP
//! on `[h_t ; embed(a_t)]` with a linear scalar output. `R_phi(tau)` is the sum
//! of step rewards. The partition function is never computed: the r-step
//! gradient uses self-normalized importance weights over generated samples.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::lstm::{self, Cell, CellGrads, CellState, StepCache};
use crate::numerics::{Mat, ParamStore, RngStream};
use crate::policy::{Trajectory, GRAD_CHUNK};
use crate::{Error, Result, BOS};

const ENC: &str = "enc";
const EMBED: &str = "embed";
const W1: &str = "mlp.w1";
const B1: &str = "mlp.b1";
const W2: &str = "mlp.w2";
const B2: &str = "mlp.b2";

/// Layer sizes of the reward approximator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardDims {
    pub v_total: usize,
    pub d_emb: usize,
    pub d_hid: usize,
    pub d_mlp: usize,
}

impl RewardDims {
    pub fn new(v_total: usize, d_emb: usize, d_hid: usize, d_mlp: usize) -> Result<Self> {
        if v_total <= crate::NUM_RESERVED || d_emb == 0 || d_hid == 0 || d_mlp == 0 {
            return Err(Error::arg("reward dimensions must be >= 1 with a non-empty vocabulary"));
        }
        Ok(Self { v_total, d_emb, d_hid, d_mlp })
    }
}

/// Reward weights `phi` plus the dropout keep-probability used in r-steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardParams {
    dims: RewardDims,
    keep_prob: f64,
    store: ParamStore,
}

/// Inverted-dropout multipliers for the MLP hidden layer of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask(pub Vec<f64>);

impl RewardParams {
    pub fn zeros(dims: RewardDims, keep_prob: f64) -> Result<Self> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::arg(format!("keep probability must be in (0, 1], got {keep_prob}")));
        }
        let mut store = ParamStore::new();
        store.insert(EMBED, Mat::zeros(dims.v_total, dims.d_emb))?;
        lstm::insert_zero_cell(&mut store, ENC, dims.d_emb, dims.d_hid)?;
        store.insert(W1, Mat::zeros(dims.d_hid + dims.d_emb, dims.d_mlp))?;
        store.insert(B1, Mat::zeros(1, dims.d_mlp))?;
        store.insert(W2, Mat::zeros(dims.d_mlp, 1))?;
        store.insert(B2, Mat::zeros(1, 1))?;
        Ok(Self { dims, keep_prob, store })
    }

    /// Uniform(-scale, scale) weights, encoder forget bias `forget_bias`.
    pub fn init_uniform(dims: RewardDims, keep_prob: f64, scale: f64, forget_bias: f64, rng: &RngStream) -> Result<Self> {
        let mut p = Self::zeros(dims, keep_prob)?;
        let dist = Uniform::new_inclusive(-scale, scale).expect("valid range");
        let mut r = rng.rng();
        lstm::fill_store(&mut p.store, &mut r, |r| dist.sample(r), ENC, Some(forget_bias));
        Ok(p)
    }

    pub fn init_default(dims: RewardDims, keep_prob: f64, rng: &RngStream) -> Result<Self> {
        Self::init_uniform(dims, keep_prob, 0.08, 1.0, rng)
    }

    pub fn from_store(dims: RewardDims, keep_prob: f64, store: ParamStore) -> Result<Self> {
        let template = Self::zeros(dims, keep_prob)?;
        template.store.check_layout(&store, "reward parameters")?;
        Ok(Self { dims, keep_prob, store })
    }

    pub fn dims(&self) -> RewardDims {
        self.dims
    }

    pub fn keep_prob(&self) -> f64 {
        self.keep_prob
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

    /// Draws a hidden-layer mask, or `None` when dropout is disabled.
    pub fn draw_mask(&self, rng: &RngStream) -> Option<DropoutMask> {
        if self.keep_prob >= 1.0 {
            return None;
        }
        let mut r = rng.rng();
        let scale = 1.0 / self.keep_prob;
        Some(DropoutMask(
            (0..self.dims.d_mlp)
                .map(|_| if r.random::<f64>() < self.keep_prob { scale } else { 0.0 })
                .collect(),
        ))
    }

    pub(crate) fn view(&self) -> Scorer<'_> {
        Scorer {
            embed: self.store.expect(EMBED),
            cell: Cell::new(&self.store, ENC),
            w1: self.store.expect(W1),
            b1: self.store.expect(B1),
            w2: self.store.expect(W2),
            b2: self.store.expect(B2).get(0, 0),
            dims: self.dims,
        }
    }

    fn validate(&self, tokens: &[usize]) -> Result<()> {
        for (t, &a) in tokens.iter().enumerate() {
            if a >= self.dims.v_total || a == BOS {
                return Err(Error::arg(format!("invalid token {a} at position {t}")));
            }
        }
        Ok(())
    }
}

struct MlpCache {
    z: Vec<f64>,
    u: Vec<f64>,
}

/// Borrowed view of the reward weights.
pub(crate) struct Scorer<'a> {
    embed: &'a Mat,
    cell: Cell<'a>,
    w1: &'a Mat,
    b1: &'a Mat,
    w2: &'a Mat,
    b2: f64,
    dims: RewardDims,
}

impl<'a> Scorer<'a> {
    pub fn initial_state(&self) -> CellState {
        CellState::zeros(self.dims.d_hid)
    }

    fn mlp(&self, h: &[f64], action: usize, mask: Option<&DropoutMask>) -> (f64, MlpCache) {
        let mut z = Vec::with_capacity(self.dims.d_hid + self.dims.d_emb);
        z.extend_from_slice(h);
        z.extend_from_slice(self.embed.row(action));
        let mut a = self.b1.as_slice().to_vec();
        self.w1.accumulate_vec_mat(&z, &mut a);
        let mut u: Vec<f64> = a.iter().map(|x| x.tanh()).collect();
        if let Some(DropoutMask(m)) = mask {
            for (x, k) in u.iter_mut().zip(m) {
                *x *= k;
            }
        }
        let r = self.b2 + u.iter().zip(self.w2.as_slice()).map(|(x, w)| x * w).sum::<f64>();
        (r, MlpCache { z, u })
    }

    /// Consumes `prev` into the encoder, then scores `action` from the new
    /// state. Returns the new state and `r(s_t, a_t)`.
    pub fn step(&self, state: &CellState, prev: usize, action: usize, mask: Option<&DropoutMask>) -> (CellState, f64) {
        let next = self.cell.step(self.embed.row(prev), state);
        let (r, _) = self.mlp(&next.h, action, mask);
        (next, r)
    }

    pub fn rewards(&self, tokens: &[usize], mask: Option<&DropoutMask>) -> Vec<f64> {
        let mut state = self.initial_state();
        let mut prev = BOS;
        tokens
            .iter()
            .map(|&a| {
                let (next, r) = self.step(&state, prev, a, mask);
                state = next;
                prev = a;
                r
            })
            .collect()
    }

    /// Encoder states after consuming `BOS, a_1, ..., a_{t-1}` for each t.
    pub fn states(&self, tokens: &[usize]) -> Vec<CellState> {
        let mut state = self.initial_state();
        let mut prev = BOS;
        tokens
            .iter()
            .map(|&a| {
                state = self.cell.step(self.embed.row(prev), &state);
                prev = a;
                state.clone()
            })
            .collect()
    }

    /// Accumulates `scale * grad_phi R_phi(tokens)` into `grads`; returns
    /// `R_phi(tokens)`.
    pub fn reward_grad(&self, tokens: &[usize], mask: Option<&DropoutMask>, scale: f64, grads: &mut ParamStore) -> f64 {
        let d_hid = self.dims.d_hid;
        let mut state = self.initial_state();
        let mut prev = BOS;
        let mut steps: Vec<(usize, usize, StepCache, MlpCache)> = Vec::with_capacity(tokens.len());
        let mut total = 0.0;
        for &a in tokens {
            let (next, cache) = self.cell.step_cached(self.embed.row(prev), &state);
            let (r, mc) = self.mlp(&next.h, a, mask);
            total += r;
            steps.push((prev, a, cache, mc));
            state = next;
            prev = a;
        }

        let mut d_embed = Mat::zeros(self.dims.v_total, self.dims.d_emb);
        let mut d_w1 = Mat::zeros(self.w1.rows(), self.w1.cols());
        let mut d_b1 = vec![0.0; self.dims.d_mlp];
        let mut d_w2 = vec![0.0; self.dims.d_mlp];
        let mut d_b2 = 0.0;
        let mut cell_grads = CellGrads::zeros(&self.cell);
        let mut dh_next = vec![0.0; d_hid];
        let mut dc_next = vec![0.0; d_hid];

        for (prev, a, cache, mc) in steps.iter().rev() {
            // r = b2 + w2 . (m * tanh(z W1 + b1))
            d_b2 += scale;
            let mut da = vec![0.0; self.dims.d_mlp];
            for j in 0..self.dims.d_mlp {
                d_w2[j] += scale * mc.u[j];
                let keep = mask.map_or(1.0, |m| m.0[j]);
                // u = keep * tanh(.), so d tanh/d pre = 1 - (u / keep)^2.
                let t = if keep == 0.0 { 0.0 } else { mc.u[j] / keep };
                da[j] = scale * self.w2.as_slice()[j] * keep * (1.0 - t * t);
            }
            d_w1.accumulate_outer(&mc.z, &da);
            for (b, d) in d_b1.iter_mut().zip(&da) {
                *b += d;
            }
            let mut dz = vec![0.0; d_hid + self.dims.d_emb];
            self.w1.accumulate_mat_vec(&da, &mut dz);
            for (e, d) in d_embed.row_mut(*a).iter_mut().zip(&dz[d_hid..]) {
                *e += d;
            }
            let dh: Vec<f64> = dz[..d_hid].iter().zip(&dh_next).map(|(x, y)| x + y).collect();
            let (d_in, dh_prev, dc_prev) = self.cell.backward(cache, &dh, &dc_next, &mut cell_grads);
            for (e, d) in d_embed.row_mut(*prev).iter_mut().zip(&d_in) {
                *e += d;
            }
            dh_next = dh_prev;
            dc_next = dc_prev;
        }

        cell_grads.add_into(grads, ENC);
        grads.expect_mut(EMBED).add_scaled(&d_embed, 1.0);
        grads.expect_mut(W1).add_scaled(&d_w1, 1.0);
        for (g, d) in grads.expect_mut(B1).as_mut_slice().iter_mut().zip(&d_b1) {
            *g += d;
        }
        for (g, d) in grads.expect_mut(W2).as_mut_slice().iter_mut().zip(&d_w2) {
            *g += d;
        }
        grads.expect_mut(B2).as_mut_slice()[0] += d_b2;
        total
    }
}

/// Per-step rewards `r_phi(s_t, a_t)` for `t = 1..T`.
///
/// With `train_mode` set, one dropout mask is drawn from `rng` for the whole
/// sequence; otherwise the result is deterministic and `rng` is unused.
pub fn step_rewards(rparams: &RewardParams, tokens: &[usize], train_mode: bool, rng: &RngStream) -> Result<Vec<f64>> {
    rparams.validate(tokens)?;
    let mask = if train_mode { rparams.draw_mask(rng) } else { None };
    Ok(rparams.view().rewards(tokens, mask.as_ref()))
}

/// [`step_rewards`] with an explicit mask.
pub fn step_rewards_masked(rparams: &RewardParams, tokens: &[usize], mask: Option<&DropoutMask>) -> Result<Vec<f64>> {
    rparams.validate(tokens)?;
    if let Some(m) = mask {
        if m.0.len() != rparams.dims.d_mlp {
            return Err(Error::arg("dropout mask has the wrong length"));
        }
    }
    Ok(rparams.view().rewards(tokens, mask))
}

/// `R_phi(tau) = sum_t r_phi(s_t, a_t)`.
pub fn trajectory_reward(rparams: &RewardParams, tokens: &[usize], train_mode: bool, rng: &RngStream) -> Result<f64> {
    Ok(step_rewards(rparams, tokens, train_mode, rng)?.iter().sum())
}

/// Self-normalized importance weights `w_j ~ exp(R(tau_j)) / q(tau_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceWeights {
    /// Unnormalized `R(tau_j) - log q(tau_j)`.
    pub log_w: Vec<f64>,
    /// Normalized weights, summing to one.
    pub w: Vec<f64>,
}

impl ImportanceWeights {
    pub fn from_log_weights(log_w: Vec<f64>) -> Result<Self> {
        if log_w.is_empty() {
            return Err(Error::arg("importance weights need at least one sample"));
        }
        if log_w.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(Error::Numeric("log importance weight is NaN or +inf".into()));
        }
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::Numeric("every importance weight is zero".into()));
        }
        let mut w: Vec<f64> = log_w.iter().map(|x| (x - max).exp()).collect();
        let sum: f64 = w.iter().sum();
        for x in &mut w {
            *x /= sum;
        }
        Ok(Self { log_w, w })
    }

    /// `1 / sum w_j^2`.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.w.iter().map(|x| x * x).sum::<f64>()
    }
}

/// Importance weights of generated trajectories under the current reward
/// (dropout off).
pub fn importance_weights(rparams: &RewardParams, gen_batch: &[Trajectory]) -> Result<ImportanceWeights> {
    for t in gen_batch {
        rparams.validate(&t.tokens)?;
    }
    let view = rparams.view();
    let log_w: Vec<f64> = gen_batch
        .par_iter()
        .map(|t| view.rewards(&t.tokens, None).iter().sum::<f64>() - t.total_logp())
        .collect();
    ImportanceWeights::from_log_weights(log_w)
}

/// Output of one r-step gradient evaluation.
#[derive(Debug, Clone)]
pub struct RStepGrad {
    /// Ascent direction for `J_r(phi)`.
    pub grads: ParamStore,
    pub mean_real_reward: f64,
    /// `sum_j w_j R(tau'_j)`.
    pub mean_gen_reward: f64,
    pub ess: f64,
    pub weights: ImportanceWeights,
}

/// Gradient of the importance-sampled reward objective:
///
/// `(1/N) sum_i grad R(tau_i) - sum_j w_j grad R(tau'_j)`
///
/// with normalized weights `w` held constant. Dropout masks are drawn once per
/// sequence from `rng.child("real").child(i)` / `rng.child("gen").child(j)`;
/// the weights are computed from the same masked rewards.
pub fn r_step_grad(rparams: &RewardParams, real_batch: &[Vec<usize>], gen_batch: &[Trajectory], rng: &RngStream) -> Result<RStepGrad> {
    if real_batch.is_empty() || gen_batch.is_empty() {
        return Err(Error::arg("r-step needs non-empty real and generated batches"));
    }
    for s in real_batch {
        rparams.validate(s)?;
    }
    for t in gen_batch {
        rparams.validate(&t.tokens)?;
    }
    let real_masks: Vec<Option<DropoutMask>> = (0..real_batch.len())
        .map(|i| rparams.draw_mask(&rng.child("real").child(i)))
        .collect();
    let gen_masks: Vec<Option<DropoutMask>> = (0..gen_batch.len())
        .map(|j| rparams.draw_mask(&rng.child("gen").child(j)))
        .collect();

    let view = rparams.view();
    let gen_rewards: Vec<f64> = gen_batch
        .par_iter()
        .zip(&gen_masks)
        .map(|(t, m)| view.rewards(&t.tokens, m.as_ref()).iter().sum())
        .collect();
    let log_w = gen_rewards.iter().zip(gen_batch).map(|(r, t)| r - t.total_logp()).collect();
    let weights = ImportanceWeights::from_log_weights(log_w)?;

    let real: Vec<&[usize]> = real_batch.iter().map(Vec::as_slice).collect();
    let gen: Vec<&[usize]> = gen_batch.iter().map(|t| t.tokens.as_slice()).collect();
    let (grads, real_rewards, _) = r_objective_grad(rparams, &real, &real_masks, &gen, &gen_masks, &weights.w);

    Ok(RStepGrad {
        grads,
        mean_real_reward: real_rewards.iter().sum::<f64>() / real_rewards.len() as f64,
        mean_gen_reward: weights.w.iter().zip(&gen_rewards).map(|(w, r)| w * r).sum(),
        ess: weights.effective_sample_size(),
        weights,
    })
}

/// Gradient of `(1/N) sum_i R(real_i) - sum_j w_j R(gen_j)` for fixed masks
/// and fixed normalized weights. Returns the gradient and both reward lists.
pub fn r_objective_grad(
    rparams: &RewardParams,
    real: &[&[usize]],
    real_masks: &[Option<DropoutMask>],
    gen: &[&[usize]],
    gen_masks: &[Option<DropoutMask>],
    weights: &[f64],
) -> (ParamStore, Vec<f64>, Vec<f64>) {
    let view = rparams.view();
    let n = real.len() as f64;
    // One work list so chunking (and therefore summation order) is fixed.
    let items: Vec<(&[usize], Option<&DropoutMask>, f64)> = real
        .iter()
        .zip(real_masks)
        .map(|(s, m)| (*s, m.as_ref(), 1.0 / n))
        .chain(gen.iter().zip(gen_masks).zip(weights).map(|((s, m), w)| (*s, m.as_ref(), -w)))
        .collect();
    let parts: Vec<(ParamStore, Vec<f64>)> = items
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = rparams.store.zeros_like();
            let rs = chunk.iter().map(|(s, m, c)| view.reward_grad(s, *m, *c, &mut g)).collect();
            (g, rs)
        })
        .collect();
    let mut grads = rparams.store.zeros_like();
    let mut rewards = Vec::with_capacity(items.len());
    for (g, rs) in parts {
        grads.add_scaled(&g, 1.0).expect("same layout");
        rewards.extend(rs);
    }
    let gen_rewards = rewards.split_off(real.len());
    (grads, rewards, gen_rewards)
}
