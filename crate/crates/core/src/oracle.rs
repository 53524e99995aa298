//! Synthetic-oracle evaluation.
//!
//! A randomly initialized LSTM with wide Normal(0, 1) weights plays the role
//! of the true data distribution: it generates the training set and scores
//! generated text. `nll_oracle` is reported per token.

use crate::numerics::RngStream;
use crate::policy::{log_prob, sample_batch, GeneratorDims, GeneratorParams, SeqMode};
use crate::{Error, Result};

/// A frozen generator used as the ground-truth distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleModel {
    params: GeneratorParams,
    seed: u64,
}

impl OracleModel {
    /// Wraps existing parameters, e.g. loaded from a checkpoint.
    pub fn from_params(params: GeneratorParams, seed: u64) -> Self {
        Self { params, seed }
    }

    pub fn params(&self) -> &GeneratorParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Draws every oracle weight i.i.d. Normal(0, 1) from `seed`.
pub fn make_oracle(seed: u64, v_content: usize, d_emb: usize, d_hid: usize) -> Result<OracleModel> {
    let dims = GeneratorDims::with_content(v_content, d_emb, d_hid)?;
    let params = GeneratorParams::init_normal(dims, 0.0, 1.0, &RngStream::new(seed).child("oracle"));
    Ok(OracleModel { params, seed })
}

/// `n` fixed-length samples of length `len`.
pub fn generate_dataset(oracle: &OracleModel, n: usize, len: usize, rng: &RngStream) -> Result<Vec<Vec<usize>>> {
    Ok(sample_batch(&oracle.params, n, len, SeqMode::FixedLength, rng)?
        .into_iter()
        .map(|t| t.tokens)
        .collect())
}

/// Mean per-token negative log-likelihood of `samples` under the oracle:
/// `-(1 / (n T)) sum_i sum_t log P(x_t | x_<t)`.
pub fn nll_oracle(oracle: &OracleModel, samples: &[Vec<usize>]) -> Result<f64> {
    let first = samples.first().ok_or_else(|| Error::arg("no samples to score"))?;
    let len = first.len();
    if len == 0 {
        return Err(Error::arg("samples are empty sequences"));
    }
    if let Some(i) = samples.iter().position(|s| s.len() != len) {
        return Err(Error::arg(format!("sample {i} has length {} but sample 0 has {len}", samples[i].len())));
    }
    let mut total = 0.0;
    for s in samples {
        total += log_prob(&oracle.params, s, SeqMode::FixedLength)?.0;
    }
    Ok(-total / (samples.len() * len) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::NUM_RESERVED;

    #[test]
    fn same_seed_same_oracle() {
        assert_eq!(make_oracle(3, 5, 4, 4).unwrap(), make_oracle(3, 5, 4, 4).unwrap());
        assert_ne!(make_oracle(3, 5, 4, 4).unwrap().params, make_oracle(4, 5, 4, 4).unwrap().params);
    }

    #[test]
    fn oracle_is_lower_entropy_than_uniform() {
        let o = make_oracle(11, 10, 8, 8).unwrap();
        let data = generate_dataset(&o, 1000, 10, &RngStream::new(1)).unwrap();
        let nll = nll_oracle(&o, &data).unwrap();
        assert!(nll < (10f64).ln(), "{nll}");
    }

    #[test]
    fn dataset_shape() {
        let o = make_oracle(1, 6, 4, 4).unwrap();
        assert!(generate_dataset(&o, 0, 5, &RngStream::new(0)).unwrap().is_empty());
        let d = generate_dataset(&o, 50, 7, &RngStream::new(0)).unwrap();
        assert_eq!(d.len(), 50);
        assert!(d.iter().all(|s| s.len() == 7 && s.iter().all(|&a| (NUM_RESERVED..8).contains(&a))));
    }

    #[test]
    fn uniform_oracle_scores_ln_v() {
        let dims = GeneratorDims::with_content(8, 3, 3).unwrap();
        let o = OracleModel::from_params(GeneratorParams::zeros(dims), 0);
        let samples = vec![vec![2, 3, 9], vec![5, 5, 5]];
        assert!((nll_oracle(&o, &samples).unwrap() - 8f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn greedy_sequence_matches_log_prob() {
        let o = make_oracle(5, 5, 4, 4).unwrap();
        // Greedy decode.
        let view = o.params.view();
        let mut state = view.initial_state();
        let mut prev = crate::BOS;
        let mut seq = Vec::new();
        for _ in 0..6 {
            let (next, logits) = view.step(&state, prev);
            let a = (NUM_RESERVED..logits.len())
                .max_by(|&i, &j| logits[i].total_cmp(&logits[j]))
                .unwrap();
            seq.push(a);
            state = next;
            prev = a;
        }
        let (total, per) = log_prob(&o.params, &seq, SeqMode::FixedLength).unwrap();
        let nll = nll_oracle(&o, &[seq]).unwrap();
        assert!((nll + total / 6.0).abs() < 1e-12);
        assert!((nll + per.iter().sum::<f64>() / 6.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let o = make_oracle(1, 4, 2, 2).unwrap();
        assert!(nll_oracle(&o, &[]).is_err());
        assert!(nll_oracle(&o, &[vec![2, 3], vec![2]]).is_err());
        assert!(nll_oracle(&o, &[vec![2, 1]]).is_err());
    }

    #[test]
    fn own_samples_beat_uniform_noise() {
        use rand::Rng;
        for seed in 0..5 {
            let o = make_oracle(seed, 12, 8, 8).unwrap();
            let own = generate_dataset(&o, 300, 8, &RngStream::new(seed)).unwrap();
            let mut r = RngStream::new(100 + seed).rng();
            let noise: Vec<Vec<usize>> = (0..300).map(|_| (0..8).map(|_| r.random_range(2..14)).collect()).collect();
            assert!(nll_oracle(&o, &own).unwrap() < nll_oracle(&o, &noise).unwrap());
        }
    }

    #[test]
    fn nll_estimate_is_stable() {
        let o = make_oracle(2, 10, 8, 8).unwrap();
        let a = generate_dataset(&o, 5000, 8, &RngStream::new(1)).unwrap();
        let b = generate_dataset(&o, 5000, 8, &RngStream::new(2)).unwrap();
        let (na, nb) = (nll_oracle(&o, &a).unwrap(), nll_oracle(&o, &b).unwrap());
        assert!((na - nb).abs() < 0.02, "{na} vs {nb}");
    }

    #[test]
    fn token_marginals_agree_between_draws() {
        // Two-sample chi-square on pooled token counts, 99% critical value.
        let o = make_oracle(8, 6, 4, 4).unwrap();
        let a = generate_dataset(&o, 10_000, 5, &RngStream::new(1)).unwrap();
        let b = generate_dataset(&o, 10_000, 5, &RngStream::new(2)).unwrap();
        let count = |d: &[Vec<usize>]| {
            let mut c = vec![0f64; 8];
            for s in d {
                for &t in s {
                    c[t] += 1.0;
                }
            }
            c
        };
        let (ca, cb) = (count(&a), count(&b));
        let (na, nb): (f64, f64) = (ca.iter().sum(), cb.iter().sum());
        let mut chi2 = 0.0;
        for k in NUM_RESERVED..8 {
            let pooled = (ca[k] + cb[k]) / (na + nb);
            let (ea, eb) = (pooled * na, pooled * nb);
            chi2 += (ca[k] - ea).powi(2) / ea + (cb[k] - eb).powi(2) / eb;
        }
        // 5 degrees of freedom.
        assert!(chi2 < 15.086, "chi2 = {chi2}");
    }
}
