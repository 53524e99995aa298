//! Statistical checks on the training loops, against exact enumeration.

use textirl::policy::log_prob;
use textirl::reward::step_rewards_masked;
use textirl::trainer::{g_step, pretrain_mle};
use textirl::{AdamState, GeneratorDims, GeneratorParams, RewardDims, RewardParams, RngStream, SeqMode, TrainConfig, NUM_RESERVED};

const V: usize = 3;
const T: usize = 3;

fn all_sequences() -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..T {
        out = out
            .into_iter()
            .flat_map(|s: Vec<usize>| {
                (NUM_RESERVED..NUM_RESERVED + V).map(move |a| {
                    let mut s = s.clone();
                    s.push(a);
                    s
                })
            })
            .collect();
    }
    out
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `E_q[R] + H(q)` by enumeration.
fn objective(g: &GeneratorParams, returns: &[f64], seqs: &[Vec<usize>]) -> f64 {
    seqs.iter()
        .zip(returns)
        .map(|(s, r)| {
            let lq = log_prob(g, s, SeqMode::FixedLength).unwrap().0;
            lq.exp() * (r - lq)
        })
        .sum()
}

#[test]
fn g_steps_climb_toward_the_free_energy_bound() {
    let seqs = all_sequences();
    let gdims = GeneratorDims::with_content(V, 4, 4).unwrap();
    let rdims = RewardDims::new(V + NUM_RESERVED, 4, 4, 4).unwrap();
    let config = TrainConfig { max_len: T, gen_batch: 32, rollouts: 4, generator_lr: 0.02, ..TrainConfig::default() };
    let mut gaps = Vec::new();
    for seed in 0..5u64 {
        let root = RngStream::new(seed);
        let r = RewardParams::init_uniform(rdims, 1.0, 0.6, 0.0, &root.child("r")).unwrap();
        let totals: Vec<f64> = seqs.iter().map(|s| step_rewards_masked(&r, s, None).unwrap().iter().sum()).collect();
        // J(q) <= log Z with equality at q = exp(R) / Z.
        let bound = log_sum_exp(&totals);
        let mut g = GeneratorParams::init_normal(gdims, 0.0, 0.8, &root.child("g"));
        let before = objective(&g, &totals, &seqs);
        let mut adam = AdamState::new(g.store());
        for b in 0..150usize {
            g_step(&mut g, &r, &mut adam, &config, &root.child("steps").child(b)).unwrap();
        }
        let after = objective(&g, &totals, &seqs);
        assert!(after <= bound + 1e-9, "seed {seed}: {after} above bound {bound}");
        assert!(after > before, "seed {seed}: objective fell from {before} to {after}");
        gaps.push((bound - before, bound - after));
    }
    let (b, a): (f64, f64) = gaps.iter().fold((0.0, 0.0), |(x, y), (p, q)| (x + p, y + q));
    assert!(a < 0.25 * b, "mean gap only went from {b} to {a} (per seed {gaps:?})");
}

#[test]
fn mle_pretraining_lowers_the_exact_cross_entropy() {
    let seqs = all_sequences();
    let dims = GeneratorDims::with_content(V, 4, 4).unwrap();
    let root = RngStream::new(3);
    let teacher = GeneratorParams::init_normal(dims, 0.0, 1.0, &root.child("teacher"));
    let p: Vec<f64> = seqs.iter().map(|s| log_prob(&teacher, s, SeqMode::FixedLength).unwrap().0.exp()).collect();
    let data = textirl::policy::sample_batch(&teacher, 2000, T, SeqMode::FixedLength, &root.child("data"))
        .unwrap()
        .into_iter()
        .map(|t| t.tokens)
        .collect::<Vec<_>>();
    let cross_entropy = |g: &GeneratorParams| -> f64 {
        seqs.iter().zip(&p).map(|(s, p)| -p * log_prob(g, s, SeqMode::FixedLength).unwrap().0).sum()
    };
    let entropy: f64 = -p.iter().map(|p| p * p.ln()).sum::<f64>();
    let mut g = GeneratorParams::init_default(dims, &root.child("student"));
    let start = cross_entropy(&g);
    let config = TrainConfig { max_len: T, ..TrainConfig::default() };
    pretrain_mle(&mut g, &data, 20, &config, &root.child("mle"), |_, _| Ok(())).unwrap();
    let end = cross_entropy(&g);
    assert!(end >= entropy - 1e-9);
    assert!(end < start);
    // Excess cross-entropy (KL to the teacher) shrinks by at least 80 %.
    assert!(end - entropy < 0.2 * (start - entropy), "KL {} -> {}", start - entropy, end - entropy);
}
