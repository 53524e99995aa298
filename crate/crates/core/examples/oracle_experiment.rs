//! Desk-scale synthetic-oracle comparison of MLE and IRL training.
//!
//! For each seed: draw an oracle (20 content tokens, length 8, width 16),
//! sample 2000 training sequences, MLE-pretrain a generator for 30 epochs,
//! then run 30 IRL iterations. Prints one JSON line per seed.
//!
//! Usage: `cargo run --release --example oracle_experiment -- [seeds] [key=value ...]`
//! where each `key=value` overrides a training-config field (JSON value),
//! plus `mle_epochs=N` for extra MLE epochs on a separate baseline copy.

use std::time::Instant;

use textirl::oracle::{generate_dataset, make_oracle, nll_oracle};
use textirl::policy::{sample_batch, GeneratorDims, GeneratorParams};
use textirl::reward::{RewardDims, RewardParams};
use textirl::trainer::{pretrain_mle, run_irl_with, TrainConfig};
use textirl::{RngStream, SeqMode, NUM_RESERVED};

const V_CONTENT: usize = 20;
const LEN: usize = 8;
const DIM: usize = 16;
const EVAL: usize = 5000;

fn nll(oracle: &textirl::oracle::OracleModel, g: &GeneratorParams, rng: &RngStream) -> f64 {
    let s: Vec<Vec<usize>> = sample_batch(g, EVAL, LEN, SeqMode::FixedLength, rng)
        .unwrap()
        .into_iter()
        .map(|t| t.tokens)
        .collect();
    nll_oracle(oracle, &s).unwrap()
}

fn main() {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map(|a| a.parse().expect("seed count")).unwrap_or(5);
    let mut overrides = serde_json::Map::new();
    let mut mle_epochs = 0usize;
    let mut keep_prob = 0.75;
    for a in args {
        let (k, v) = a.split_once('=').expect("key=value");
        if k == "mle_epochs" {
            mle_epochs = v.parse().expect("integer");
            continue;
        }
        if k == "keep_prob" {
            keep_prob = v.parse().expect("number");
            continue;
        }
        let v = serde_json::from_str(v).unwrap_or(serde_json::Value::String(v.to_string()));
        overrides.insert(k.to_string(), v);
    }
    for seed in 0..seeds {
        let start = Instant::now();
        let root = RngStream::new(seed);
        let oracle = make_oracle(seed, V_CONTENT, DIM, DIM).unwrap();
        let train = generate_dataset(&oracle, 2000, LEN, &root.child("data")).unwrap();
        let base = TrainConfig { max_len: LEN, pretrain_epochs: 0, total_iterations: 30, seed, eval_samples: 1000, ..TrainConfig::default() };
        let mut value = serde_json::to_value(&base).unwrap();
        for (k, v) in &overrides {
            value[k] = v.clone();
        }
        let config: TrainConfig = serde_json::from_value(value).expect("valid overrides");
        let dims = GeneratorDims::with_content(V_CONTENT, DIM, DIM).unwrap();
        let mut mle = GeneratorParams::init_default(dims, &root.child("g-init"));
        pretrain_mle(&mut mle, &train, 30, &base, &root.child("pretrain"), |_, _| Ok(())).unwrap();
        let nll_mle = nll(&oracle, &mle, &root.child("eval"));
        let mut longer = mle.clone();
        let mut nll_longer = Vec::new();
        for e in 0..mle_epochs {
            pretrain_mle(&mut longer, &train, 1, &base, &root.child("more").child(e), |_, _| Ok(())).unwrap();
            if (e + 1) % 10 == 0 {
                nll_longer.push(nll(&oracle, &longer, &root.child("eval")));
            }
        }

        let rdims = RewardDims::new(V_CONTENT + NUM_RESERVED, DIM, DIM, DIM).unwrap();
        let reward = RewardParams::init_default(rdims, keep_prob, &root.child("r-init")).unwrap();
        let mut trace = Vec::new();
        let (irl, _, _) = run_irl_with(mle.clone(), reward, &train, &config, Some(&oracle), |rec, _, _| {
            trace.push((rec.nll_oracle.unwrap(), rec.entropy, rec.ess, rec.mean_real_reward, rec.mean_gen_reward));
            Ok(())
        })
        .unwrap();
        let nll_irl = nll(&oracle, &irl, &root.child("eval"));
        let nll_data = nll_oracle(&oracle, &train).unwrap();
        println!(
            "{}",
            serde_json::json!({
                "seed": seed, "nll_data": nll_data, "nll_mle": nll_mle, "nll_irl": nll_irl, "nll_longer_mle": nll_longer,
                "seconds": start.elapsed().as_secs_f64(),
                "trace": trace.iter().map(|t| [t.0, t.1, t.2, t.3, t.4]).collect::<Vec<_>>(),
            })
        );
    }
}
