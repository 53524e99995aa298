//! Alternating reward (r-step) and generator (g-step) updates.
//!
//! One iteration runs `r_epochs` reward updates, each on a fresh real batch
//! and a fresh generated batch, followed by `g_batches` generator updates.
//! The generator gradient for step `t` of a sampled trajectory is
//!
//! ```text
//! grad log pi(a_t | s_t) * [Q_t - log pi(a_t | s_t) - 1]
//! ```
//!
//! where `Q_t = r(s_t, a_t) + V(s_{t+1})` and `V` is a Monte Carlo average over
//! `rollouts` continuations sampled from the current policy.

use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numerics::{adam_step, AdamConfig, AdamState, ParamStore, RngStream};
use crate::oracle::{nll_oracle, OracleModel};
use crate::policy::{batch_score_grad, mle_loss_and_grad, sample_batch, GeneratorParams, SeqMode, Trajectory};
use crate::reward::{r_step_grad, RewardParams};
use crate::{Error, Result, EOS};

/// Variance reduction applied to the g-step bracket term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// The bracket is used as is.
    #[default]
    None,
    /// At every position `t`, the mean bracket over the batch trajectories
    /// that reach `t` is subtracted.
    BatchMean,
}

/// Scalar knobs of the training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Real sequences per r-step (also the MLE minibatch size).
    pub real_batch: usize,
    /// Generated sequences per r-step and per g-step.
    pub gen_batch: usize,
    /// r-step epochs per iteration.
    pub r_epochs: usize,
    /// g-step batches per iteration.
    pub g_batches: usize,
    /// Adam step size for the reward approximator.
    pub reward_lr: f64,
    /// Adam step size for the generator (MLE and g-steps).
    pub generator_lr: f64,
    /// Continuations sampled per state when estimating `V(s_{t+1})`.
    pub rollouts: usize,
    pub pretrain_epochs: usize,
    pub max_len: usize,
    pub mode: SeqMode,
    pub seed: u64,
    pub total_iterations: usize,
    pub baseline: Baseline,
    /// Global-norm clip applied to both gradients; `None` disables it.
    pub grad_clip: Option<f64>,
    /// Samples drawn to score the generator against an oracle each iteration.
    pub eval_samples: usize,
    /// Adds wall-clock seconds to every record. Off by default because it
    /// makes logs differ between otherwise identical runs.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            real_batch: 64,
            gen_batch: 64,
            r_epochs: 10,
            g_batches: 1,
            reward_lr: 0.0004,
            generator_lr: 0.005,
            rollouts: 8,
            pretrain_epochs: 50,
            max_len: 20,
            mode: SeqMode::FixedLength,
            seed: 0,
            total_iterations: 50,
            baseline: Baseline::None,
            grad_clip: Some(5.0),
            eval_samples: 1000,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("real_batch", self.real_batch),
            ("gen_batch", self.gen_batch),
            ("r_epochs", self.r_epochs),
            ("g_batches", self.g_batches),
            ("rollouts", self.rollouts),
            ("max_len", self.max_len),
            ("eval_samples", self.eval_samples),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in [("reward_lr", self.reward_lr), ("generator_lr", self.generator_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be > 0 when set".into()));
            }
        }
        Ok(())
    }

    fn generator_adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.generator_lr)
    }

    fn reward_adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.reward_lr)
    }
}

/// Statistics of one completed iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Mean of `R(tau) - log q(tau)` over g-step samples: an estimate of
    /// `E[R] + H(q)`.
    pub objective: f64,
    pub mean_real_reward: f64,
    pub mean_gen_reward: f64,
    pub entropy: f64,
    pub ess: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nll_oracle: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_s: Option<f64>,
}

impl IterationRecord {
    fn all_finite(&self) -> bool {
        [self.objective, self.mean_real_reward, self.mean_gen_reward, self.entropy, self.ess]
            .iter()
            .chain(self.nll_oracle.iter())
            .all(|x| x.is_finite())
    }
}

/// One record per completed iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<IterationRecord>,
}

impl TrainReport {
    /// Line-delimited JSON, one object per iteration.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }
}

/// Monte Carlo estimate of `Q_t = r(s_t, a_t) + V(s_{t+1})` for every step of
/// `traj`. Continuation `k` after step `t` uses `rng.child(t).child(k)`;
/// rewards are evaluated without dropout.
pub fn estimate_returns(
    gparams: &GeneratorParams,
    rparams: &RewardParams,
    traj: &Trajectory,
    rollouts: usize,
    mode: SeqMode,
    max_len: usize,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    if rollouts == 0 {
        return Err(Error::arg("at least one rollout is required"));
    }
    if traj.len() > max_len {
        return Err(Error::arg("trajectory is longer than max_len"));
    }
    mode.validate(&traj.tokens, gparams.dims().v_total)?;
    let gview = gparams.view();
    let rview = rparams.view();
    let tokens = &traj.tokens;
    let (gen_states, _) = gview.score(tokens, mode);
    let enc_states = rview.states(tokens);
    let step_rewards = rview.rewards(tokens, None);

    let remaining = |t: usize| -> usize {
        // t is 0-based; a_t is tokens[t].
        if tokens[t] == EOS {
            0
        } else {
            max_len - (t + 1)
        }
    };

    let jobs: Vec<(usize, usize)> = (0..tokens.len())
        .filter(|&t| remaining(t) > 0)
        .flat_map(|t| (0..rollouts).map(move |k| (t, k)))
        .collect();
    let values: Vec<f64> = jobs
        .par_iter()
        .map(|&(t, k)| {
            let mut r = rng.child(t).child(k).rng();
            let mut cont = Trajectory {
                tokens: Vec::new(),
                step_logps: Vec::new(),
            };
            gview.continue_sampling(gen_states[t].clone(), tokens[t], remaining(t), mode, &mut r, &mut cont);
            let mut enc = enc_states[t].clone();
            let mut prev = tokens[t];
            let mut total = 0.0;
            for &a in &cont.tokens {
                let (next, reward) = rview.step(&enc, prev, a, None);
                total += reward;
                enc = next;
                prev = a;
            }
            total
        })
        .collect();

    let mut q = step_rewards;
    for (chunk_t, chunk) in jobs.chunks(rollouts).zip(values.chunks(rollouts)) {
        let t = chunk_t[0].0;
        q[t] += chunk.iter().sum::<f64>() / rollouts as f64;
    }
    Ok(q)
}

/// Ascent direction of the entropy-regularized objective:
///
/// `(1/M) sum_j sum_t grad log pi(a_t | s_t) * A_t`, `A_t = Q_t - log pi(a_t | s_t) - 1`
///
/// `A_t` is a constant (no gradient through returns or the bracketed log term).
pub fn g_step_grad(
    gparams: &GeneratorParams,
    batch: &[Trajectory],
    returns: &[Vec<f64>],
    mode: SeqMode,
    baseline: Baseline,
) -> Result<ParamStore> {
    let advantages = advantages(batch, returns, baseline)?;
    surrogate_grad(gparams, batch, &advantages, mode)
}

/// `A_t = Q_t - log pi(a_t | s_t) - 1`, optionally minus the per-position
/// batch mean.
pub fn advantages(batch: &[Trajectory], returns: &[Vec<f64>], baseline: Baseline) -> Result<Vec<Vec<f64>>> {
    if batch.is_empty() {
        return Err(Error::arg("g-step batch is empty"));
    }
    if batch.len() != returns.len() || batch.iter().zip(returns).any(|(t, q)| t.len() != q.len()) {
        return Err(Error::arg("returns are not aligned with the batch"));
    }
    let mut adv: Vec<Vec<f64>> = batch
        .iter()
        .zip(returns)
        .map(|(t, q)| q.iter().zip(&t.step_logps).map(|(q, lp)| q - lp - 1.0).collect())
        .collect();
    if baseline == Baseline::BatchMean {
        let len = adv.iter().map(Vec::len).max().unwrap_or(0);
        for t in 0..len {
            let (sum, n) = adv.iter().filter_map(|a| a.get(t)).fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
            let mean = sum / n as f64;
            for a in adv.iter_mut().filter_map(|a| a.get_mut(t)) {
                *a -= mean;
            }
        }
    }
    Ok(adv)
}

/// Gradient of `L(theta) = (1/M) sum_j sum_t log pi(a_t | s_t) * A_t` with
/// frozen `A`.
pub fn surrogate_grad(gparams: &GeneratorParams, batch: &[Trajectory], advantages: &[Vec<f64>], mode: SeqMode) -> Result<ParamStore> {
    if batch.len() != advantages.len() || batch.iter().zip(advantages).any(|(t, a)| t.len() != a.len()) {
        return Err(Error::arg("advantages are not aligned with the batch"));
    }
    for t in batch {
        mode.validate(&t.tokens, gparams.dims().v_total)?;
    }
    let m = batch.len() as f64;
    let seqs: Vec<&[usize]> = batch.iter().map(|t| t.tokens.as_slice()).collect();
    let coeffs: Vec<Vec<f64>> = advantages.iter().map(|a| a.iter().map(|x| x / m).collect()).collect();
    Ok(batch_score_grad(gparams, &seqs, &coeffs, mode).0)
}

/// Summary of one g-step batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GStepStats {
    /// Mean of `R(tau) - log q(tau)` over the batch.
    pub objective: f64,
    /// Mean of `-log q(tau)`.
    pub entropy: f64,
    pub grad_norm: f64,
}

/// Draws a batch, estimates returns and applies one Adam ascent step to the
/// generator. `rparams` is read only.
pub fn g_step(
    gparams: &mut GeneratorParams,
    rparams: &RewardParams,
    adam: &mut AdamState,
    config: &TrainConfig,
    rng: &RngStream,
) -> Result<GStepStats> {
    let batch = sample_batch(gparams, config.gen_batch, config.max_len, config.mode, &rng.child("gen"))?;
    let rollout_rng = rng.child("rollout");
    let returns: Vec<Vec<f64>> = batch
        .par_iter()
        .enumerate()
        .map(|(j, t)| estimate_returns(gparams, rparams, t, config.rollouts, config.mode, config.max_len, &rollout_rng.child(j)))
        .collect::<Result<_>>()?;

    let rview = rparams.view();
    let m = batch.len() as f64;
    let objective = batch
        .iter()
        .map(|t| rview.rewards(&t.tokens, None).iter().sum::<f64>() - t.total_logp())
        .sum::<f64>()
        / m;
    let entropy = -batch.iter().map(Trajectory::total_logp).sum::<f64>() / m;

    let mut grads = g_step_grad(gparams, &batch, &returns, config.mode, config.baseline)?;
    let grad_norm = clip(&mut grads, config.grad_clip);
    adam_step(gparams.store_mut(), &grads, adam, &config.generator_adam())?;
    Ok(GStepStats { objective, entropy, grad_norm })
}

/// Summary of one r-step epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RStepStats {
    pub mean_real_reward: f64,
    pub mean_gen_reward: f64,
    pub ess: f64,
}

/// Draws `real_batch` training sequences and `gen_batch` samples and applies
/// one Adam ascent step to the reward approximator.
pub fn r_step(
    gparams: &GeneratorParams,
    rparams: &mut RewardParams,
    trainset: &[Vec<usize>],
    adam: &mut AdamState,
    config: &TrainConfig,
    rng: &RngStream,
) -> Result<RStepStats> {
    let real = draw_real(trainset, config.real_batch, &rng.child("real"));
    let gen = sample_batch(gparams, config.gen_batch, config.max_len, config.mode, &rng.child("gen"))?;
    let mut out = r_step_grad(rparams, &real, &gen, &rng.child("dropout"))?;
    clip(&mut out.grads, config.grad_clip);
    adam_step(rparams.store_mut(), &out.grads, adam, &config.reward_adam())?;
    Ok(RStepStats {
        mean_real_reward: out.mean_real_reward,
        mean_gen_reward: out.mean_gen_reward,
        ess: out.ess,
    })
}

fn clip(grads: &mut ParamStore, max_norm: Option<f64>) -> f64 {
    match max_norm {
        Some(c) => grads.clip_global_norm(c),
        None => grads.global_norm(),
    }
}

/// `n` sequences without replacement (with replacement if the set is smaller).
fn draw_real(trainset: &[Vec<usize>], n: usize, rng: &RngStream) -> Vec<Vec<usize>> {
    let mut r = rng.rng();
    if n <= trainset.len() {
        index::sample(&mut r, trainset.len(), n)
            .into_iter()
            .map(|i| trainset[i].clone())
            .collect()
    } else {
        (0..n).map(|_| trainset[r.random_range(0..trainset.len())].clone()).collect()
    }
}

/// MLE pretraining: `epochs` passes over a shuffled `trainset` in minibatches
/// of `config.real_batch`. `on_epoch` receives the epoch index and the mean
/// minibatch loss.
pub fn pretrain_mle(
    gparams: &mut GeneratorParams,
    trainset: &[Vec<usize>],
    epochs: usize,
    config: &TrainConfig,
    rng: &RngStream,
    mut on_epoch: impl FnMut(usize, f64) -> Result<()>,
) -> Result<()> {
    if trainset.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    let mut adam = AdamState::new(gparams.store());
    let adam_cfg = config.generator_adam();
    let mut order: Vec<usize> = (0..trainset.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng.child(epoch).rng());
        let mut losses = Vec::new();
        for chunk in order.chunks(config.real_batch) {
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| trainset[i].clone()).collect();
            let (loss, mut grads) = mle_loss_and_grad(gparams, &batch, config.mode)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("MLE loss is not finite in epoch {epoch}")));
            }
            grads.scale(-1.0);
            clip(&mut grads, config.grad_clip);
            adam_step(gparams.store_mut(), &grads, &mut adam, &adam_cfg)?;
            losses.push(loss);
        }
        on_epoch(epoch, losses.iter().sum::<f64>() / losses.len() as f64)?;
    }
    Ok(())
}

/// Runs pretraining and `total_iterations` r-step/g-step iterations.
pub fn run_irl(
    gparams: GeneratorParams,
    rparams: RewardParams,
    trainset: &[Vec<usize>],
    config: &TrainConfig,
    oracle: Option<&OracleModel>,
) -> Result<(GeneratorParams, RewardParams, TrainReport)> {
    run_irl_with(gparams, rparams, trainset, config, oracle, |_, _, _| Ok(()))
}

/// [`run_irl`] with a hook called after every iteration (checkpointing,
/// logging).
pub fn run_irl_with(
    mut gparams: GeneratorParams,
    mut rparams: RewardParams,
    trainset: &[Vec<usize>],
    config: &TrainConfig,
    oracle: Option<&OracleModel>,
    mut on_iteration: impl FnMut(&IterationRecord, &GeneratorParams, &RewardParams) -> Result<()>,
) -> Result<(GeneratorParams, RewardParams, TrainReport)> {
    config.validate()?;
    if trainset.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    if gparams.dims().v_total != rparams.dims().v_total {
        return Err(Error::arg("generator and reward vocabularies differ"));
    }
    for (i, s) in trainset.iter().enumerate() {
        config
            .mode
            .validate(s, gparams.dims().v_total)
            .map_err(|e| Error::arg(format!("training sequence {i}: {e}")))?;
    }

    let root = RngStream::new(config.seed);
    if config.pretrain_epochs > 0 {
        pretrain_mle(&mut gparams, trainset, config.pretrain_epochs, config, &root.child("pretrain"), |_, _| Ok(()))?;
    }

    let mut report = TrainReport::default();
    let mut g_adam = AdamState::new(gparams.store());
    let mut r_adam = AdamState::new(rparams.store());
    for iteration in 0..config.total_iterations {
        let start = Instant::now();
        let it_rng = root.child("iter").child(iteration);

        let mut r_stats = Vec::with_capacity(config.r_epochs);
        for epoch in 0..config.r_epochs {
            r_stats.push(r_step(&gparams, &mut rparams, trainset, &mut r_adam, config, &it_rng.child("r").child(epoch))?);
        }
        let mut g_stats = Vec::with_capacity(config.g_batches);
        for b in 0..config.g_batches {
            g_stats.push(g_step(&mut gparams, &rparams, &mut g_adam, config, &it_rng.child("g").child(b))?);
        }

        let nll = match oracle {
            Some(o) => {
                let samples = sample_batch(&gparams, config.eval_samples, config.max_len, config.mode, &it_rng.child("eval"))?;
                let tokens: Vec<Vec<usize>> = samples.into_iter().map(|t| t.tokens).collect();
                Some(nll_oracle(o, &tokens)?)
            }
            None => None,
        };

        let mean = |xs: &mut dyn Iterator<Item = f64>, n: usize| xs.sum::<f64>() / n as f64;
        let (nr, ng) = (r_stats.len(), g_stats.len());
        let record = IterationRecord {
            iteration,
            objective: mean(&mut g_stats.iter().map(|s| s.objective), ng),
            mean_real_reward: mean(&mut r_stats.iter().map(|s| s.mean_real_reward), nr),
            mean_gen_reward: mean(&mut r_stats.iter().map(|s| s.mean_gen_reward), nr),
            entropy: mean(&mut g_stats.iter().map(|s| s.entropy), ng),
            ess: mean(&mut r_stats.iter().map(|s| s.ess), nr),
            nll_oracle: nll,
            wall_time_s: config.log_wall_time.then(|| start.elapsed().as_secs_f64()),
        };
        if !record.all_finite() || !gparams.store().is_finite() || !rparams.store().is_finite() {
            return Err(Error::Diverged {
                iteration,
                reason: "non-finite statistics or parameters".into(),
                record: Box::new(record),
            });
        }
        on_iteration(&record, &gparams, &rparams)?;
        report.records.push(record);
    }
    Ok((gparams, rparams, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{compare_grads, finite_diff_grad};
    use crate::policy::{log_prob, sample_trajectory, GeneratorDims};
    use crate::reward::{step_rewards, RewardDims};
    use crate::NUM_RESERVED;

    fn gen(vc: usize, d: usize, seed: u64, scale: f64) -> GeneratorParams {
        GeneratorParams::init_uniform(GeneratorDims::with_content(vc, d, d).unwrap(), scale, 0.5, &RngStream::new(seed))
    }

    fn rew(vc: usize, d: usize, seed: u64, scale: f64) -> RewardParams {
        let dims = RewardDims::new(vc + NUM_RESERVED, d, d, d).unwrap();
        RewardParams::init_uniform(dims, 1.0, scale, 0.5, &RngStream::new(seed)).unwrap()
    }

    #[test]
    fn single_step_return_is_step_reward() {
        let g = gen(3, 3, 1, 1.0);
        let r = rew(3, 3, 2, 1.0);
        let tr = sample_trajectory(&g, 1, SeqMode::FixedLength, &RngStream::new(3)).unwrap();
        let q = estimate_returns(&g, &r, &tr, 5, SeqMode::FixedLength, 1, &RngStream::new(4)).unwrap();
        let rs = step_rewards(&r, &tr.tokens, false, &RngStream::new(0)).unwrap();
        assert_eq!(q, rs);
    }

    #[test]
    fn deterministic_policy_returns_are_reward_to_go() {
        let dims = GeneratorDims::with_content(3, 2, 2).unwrap();
        let mut g = GeneratorParams::zeros(dims);
        g.store_mut().get_mut("out.b").unwrap().set(0, 4, 1e9);
        let r = rew(3, 3, 5, 1.0);
        let tr = sample_trajectory(&g, 5, SeqMode::FixedLength, &RngStream::new(1)).unwrap();
        assert_eq!(tr.tokens, vec![4; 5]);
        let q = estimate_returns(&g, &r, &tr, 3, SeqMode::FixedLength, 5, &RngStream::new(2)).unwrap();
        let rs = step_rewards(&r, &tr.tokens, false, &RngStream::new(0)).unwrap();
        for t in 0..5 {
            let to_go: f64 = rs[t..].iter().sum();
            assert!((q[t] - to_go).abs() < 1e-12, "{t}: {} vs {to_go}", q[t]);
        }
    }

    #[test]
    fn eos_trajectories_need_no_rollout_after_eos() {
        let g = gen(3, 3, 1, 1.0);
        let r = rew(3, 3, 2, 1.0);
        let tr = Trajectory {
            tokens: vec![2, EOS],
            step_logps: vec![-1.0, -1.0],
        };
        let q = estimate_returns(&g, &r, &tr, 4, SeqMode::EosTerminated, 6, &RngStream::new(0)).unwrap();
        let rs = step_rewards(&r, &tr.tokens, false, &RngStream::new(0)).unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(q[1], rs[1]);
    }

    #[test]
    fn returns_are_schedule_independent() {
        let g = gen(4, 3, 7, 1.0);
        let r = rew(4, 3, 8, 1.0);
        let tr = sample_trajectory(&g, 6, SeqMode::FixedLength, &RngStream::new(9)).unwrap();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| estimate_returns(&g, &r, &tr, 16, SeqMode::FixedLength, 6, &RngStream::new(10)).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn zero_advantage_gives_zero_gradient() {
        let g = gen(3, 3, 1, 1.0);
        let batch: Vec<Trajectory> = (0..4)
            .map(|i| sample_trajectory(&g, 4, SeqMode::FixedLength, &RngStream::new(i)).unwrap())
            .collect();
        let adv: Vec<Vec<f64>> = batch.iter().map(|t| vec![0.0; t.len()]).collect();
        let grads = surrogate_grad(&g, &batch, &adv, SeqMode::FixedLength).unwrap();
        assert_eq!(grads.global_norm(), 0.0);
        // Returns that cancel the bracket exactly.
        let returns: Vec<Vec<f64>> = batch.iter().map(|t| t.step_logps.iter().map(|lp| lp + 1.0).collect()).collect();
        let grads = g_step_grad(&g, &batch, &returns, SeqMode::FixedLength, Baseline::None).unwrap();
        assert!(grads.global_norm() < 1e-14);
    }

    #[test]
    fn misaligned_returns_are_rejected() {
        let g = gen(3, 3, 1, 1.0);
        let tr = sample_trajectory(&g, 3, SeqMode::FixedLength, &RngStream::new(0)).unwrap();
        assert!(g_step_grad(&g, &[tr.clone()], &[vec![0.0; 2]], SeqMode::FixedLength, Baseline::None).is_err());
        assert!(g_step_grad(&g, &[tr], &[], SeqMode::FixedLength, Baseline::None).is_err());
    }

    #[test]
    fn batch_mean_baseline_centres_advantages() {
        let batch = vec![
            Trajectory { tokens: vec![2, 3], step_logps: vec![-0.5, -1.5] },
            Trajectory { tokens: vec![3], step_logps: vec![-2.0] },
        ];
        let adv = advantages(&batch, &[vec![1.0, 2.0], vec![0.5]], Baseline::BatchMean).unwrap();
        // Raw brackets: [0.5, 2.5] and [1.5]; position means 1.0 and 2.5.
        assert_eq!(adv, vec![vec![-0.5, 0.0], vec![0.5]]);
    }

    #[test]
    fn surrogate_grad_matches_finite_differences() {
        let g = gen(4, 3, 21, 1.0);
        let r = rew(4, 3, 22, 1.0);
        let batch: Vec<Trajectory> = (0..3)
            .map(|i| sample_trajectory(&g, 4, SeqMode::FixedLength, &RngStream::new(30 + i)).unwrap())
            .collect();
        let returns: Vec<Vec<f64>> = batch
            .iter()
            .enumerate()
            .map(|(j, t)| estimate_returns(&g, &r, t, 4, SeqMode::FixedLength, 4, &RngStream::new(j as u64)).unwrap())
            .collect();
        let adv = advantages(&batch, &returns, Baseline::None).unwrap();
        let analytic = g_step_grad(&g, &batch, &returns, SeqMode::FixedLength, Baseline::None).unwrap();
        let dims = g.dims();
        let surrogate = |s: &ParamStore| {
            let q = GeneratorParams::from_store(dims, s.clone()).unwrap();
            batch
                .iter()
                .zip(&adv)
                .map(|(t, a)| {
                    let (_, lp) = log_prob(&q, &t.tokens, SeqMode::FixedLength).unwrap();
                    lp.iter().zip(a).map(|(l, a)| l * a).sum::<f64>()
                })
                .sum::<f64>()
                / batch.len() as f64
        };
        let numeric = finite_diff_grad(surrogate, g.store(), 1e-5).unwrap();
        if let Err(m) = compare_grads(&analytic, &numeric, 1e-4, 1e-8) {
            panic!("{m:?}");
        }
    }

    #[test]
    fn empty_run_returns_inputs() {
        let g = gen(3, 3, 1, 0.1);
        let r = rew(3, 3, 2, 0.1);
        let cfg = TrainConfig {
            pretrain_epochs: 0,
            total_iterations: 0,
            max_len: 3,
            ..TrainConfig::default()
        };
        let (g2, r2, report) = run_irl(g.clone(), r.clone(), &[vec![2, 3, 4]], &cfg, None).unwrap();
        assert_eq!(g, g2);
        assert_eq!(r, r2);
        assert!(report.records.is_empty());
    }

    #[test]
    fn run_is_deterministic() {
        let trainset: Vec<Vec<usize>> = (0..20).map(|i| vec![2 + i % 3, 3, 2 + (i * 7) % 3, 4]).collect();
        let cfg = TrainConfig {
            real_batch: 8,
            gen_batch: 8,
            r_epochs: 2,
            g_batches: 1,
            rollouts: 2,
            pretrain_epochs: 2,
            max_len: 4,
            total_iterations: 3,
            seed: 5,
            ..TrainConfig::default()
        };
        let go = || {
            run_irl(gen(3, 4, 1, 0.08), rew(3, 4, 2, 0.08), &trainset, &cfg, None).unwrap()
        };
        let (g1, r1, rep1) = go();
        let (g2, r2, rep2) = go();
        assert_eq!(g1, g2);
        assert_eq!(r1, r2);
        assert_eq!(rep1.to_jsonl(), rep2.to_jsonl());
        assert_eq!(rep1.records.len(), 3);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = TrainConfig { rollouts: 0, ..TrainConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = TrainConfig { reward_lr: 0.0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_config_matches_reference_settings() {
        let c = TrainConfig::default();
        assert_eq!((c.real_batch, c.gen_batch), (64, 64));
        assert_eq!((c.r_epochs, c.g_batches), (10, 1));
        assert_eq!(c.generator_lr, 0.005);
        assert_eq!(c.reward_lr, 0.0004);
        assert_eq!(c.pretrain_epochs, 50);
        assert_eq!(c.rollouts, 8);
        assert_eq!(c.grad_clip, Some(5.0));
        assert_eq!(c.baseline, Baseline::None);
    }
}
