//! Sentence BLEU and the corpus-level forward / backward BLEU pair.
//!
//! Forward BLEU scores sampled generated texts against the whole test set
//! (quality); backward BLEU scores sampled test texts against a sample of
//! generated texts (diversity). Their harmonic mean summarizes both.
//!
//! Defaults: cumulative BLEU-n with uniform weights over orders `1..=n`, zero
//! precisions replaced by `1e-9`, brevity penalty against the closest
//! reference length (ties go to the shorter reference).

use std::collections::HashMap;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numerics::RngStream;
use crate::{Error, Result};

/// How zero n-gram precisions are handled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum Smoothing {
    /// Zero precisions are replaced by this value.
    Epsilon(f64),
    /// A zero precision makes the score zero.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BleuConfig {
    /// Geometric mean over orders `1..=n` when set; only order `n` otherwise.
    pub cumulative: bool,
    pub smoothing: Smoothing,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self {
            cumulative: true,
            smoothing: Smoothing::Epsilon(1e-9),
        }
    }
}

/// Numbers of sentences drawn for corpus BLEU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSizes {
    /// Hypotheses scored (generated texts forward, test texts backward).
    pub hyps: usize,
    /// Generated texts used as references in backward BLEU.
    pub refs: usize,
}

impl Default for SampleSizes {
    fn default() -> Self {
        Self { hyps: 1000, refs: 5000 }
    }
}

/// Precomputed reference statistics: for every n-gram the maximum count in
/// any single reference, plus the set of reference lengths.
pub struct ReferenceSet {
    max_counts: HashMap<Vec<usize>, usize>,
    lengths: Vec<usize>,
    max_order: usize,
}

impl ReferenceSet {
    pub fn new<S: AsRef<[usize]>>(refs: &[S], max_order: usize) -> Result<Self> {
        if refs.is_empty() {
            return Err(Error::arg("BLEU needs at least one reference"));
        }
        let mut max_counts: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut lengths: Vec<usize> = Vec::new();
        for r in refs {
            let r = r.as_ref();
            lengths.push(r.len());
            for (gram, c) in ngram_counts(r, max_order) {
                let e = max_counts.entry(gram).or_insert(0);
                *e = (*e).max(c);
            }
        }
        lengths.sort_unstable();
        lengths.dedup();
        Ok(Self { max_counts, lengths, max_order })
    }

    /// Reference length closest to `c`; ties resolve to the shorter one.
    fn closest_length(&self, c: usize) -> usize {
        let mut best = self.lengths[0];
        for &r in &self.lengths {
            if r.abs_diff(c) < best.abs_diff(c) {
                best = r;
            }
        }
        best
    }
}

fn ngram_counts(tokens: &[usize], max_order: usize) -> HashMap<Vec<usize>, usize> {
    let mut counts = HashMap::new();
    for k in 1..=max_order.min(tokens.len()) {
        for w in tokens.windows(k) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU of `hyp` against precomputed references, for order `n`.
pub fn sentence_bleu_with(hyp: &[usize], refs: &ReferenceSet, n: usize, cfg: &BleuConfig) -> Result<f64> {
    if hyp.is_empty() {
        return Err(Error::arg("BLEU hypothesis is empty"));
    }
    if n == 0 || n > refs.max_order {
        return Err(Error::arg(format!("BLEU order {n} outside 1..={}", refs.max_order)));
    }
    let counts = ngram_counts(hyp, n);
    let mut matched = vec![0usize; n + 1];
    let mut total = vec![0usize; n + 1];
    for (gram, c) in &counts {
        let k = gram.len();
        total[k] += c;
        matched[k] += (*c).min(refs.max_counts.get(gram).copied().unwrap_or(0));
    }
    let precision = |k: usize| -> f64 {
        let p = if total[k] == 0 { 0.0 } else { matched[k] as f64 / total[k] as f64 };
        match cfg.smoothing {
            Smoothing::Epsilon(eps) if p == 0.0 => eps,
            _ => p,
        }
    };
    let orders: Vec<usize> = if cfg.cumulative { (1..=n).collect() } else { vec![n] };
    let mut log_sum = 0.0;
    for &k in &orders {
        let p = precision(k);
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
    }
    let c = hyp.len();
    let r = refs.closest_length(c);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / orders.len() as f64).exp())
}

/// Sentence-level BLEU-`n` with the default configuration.
pub fn sentence_bleu<S: AsRef<[usize]>>(hyp: &[usize], refs: &[S], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::arg("BLEU order must be >= 1"));
    }
    sentence_bleu_with(hyp, &ReferenceSet::new(refs, n)?, n, &BleuConfig::default())
}

/// Harmonic mean `2fb / (f + b)`, zero when both are zero.
pub fn bleu_ha(f: f64, b: f64) -> f64 {
    if f + b == 0.0 {
        0.0
    } else {
        2.0 * f * b / (f + b)
    }
}

/// Indices of `min(k, len)` items; everything, in order, when `k >= len`.
fn subsample(len: usize, k: usize, rng: &RngStream) -> Vec<usize> {
    if k >= len {
        (0..len).collect()
    } else {
        index::sample(&mut rng.rng(), len, k).into_vec()
    }
}

fn mean_bleu<S: AsRef<[usize]> + Sync>(hyps: &[&S], refs: &ReferenceSet, orders: &[usize], cfg: &BleuConfig) -> Result<Vec<f64>> {
    let scores: Vec<Vec<f64>> = hyps
        .par_iter()
        .map(|h| orders.iter().map(|&n| sentence_bleu_with(h.as_ref(), refs, n, cfg)).collect::<Result<Vec<f64>>>())
        .collect::<Result<_>>()?;
    Ok((0..orders.len())
        .map(|i| scores.iter().map(|s| s[i]).sum::<f64>() / scores.len() as f64)
        .collect())
}

fn check_sets<S>(generated: &[S], testset: &[S]) -> Result<()> {
    if generated.is_empty() || testset.is_empty() {
        return Err(Error::arg("BLEU needs non-empty generated and test sets"));
    }
    Ok(())
}

fn forward_all<S: AsRef<[usize]> + Sync>(
    generated: &[S],
    testset: &[S],
    orders: &[usize],
    cfg: &BleuConfig,
    sizes: SampleSizes,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    check_sets(generated, testset)?;
    let max_order = orders.iter().copied().max().unwrap_or(1);
    let refs = ReferenceSet::new(testset, max_order)?;
    let hyps: Vec<&S> = subsample(generated.len(), sizes.hyps, &rng.child("hyps")).into_iter().map(|i| &generated[i]).collect();
    mean_bleu(&hyps, &refs, orders, cfg)
}

fn backward_all<S: AsRef<[usize]> + Sync>(
    generated: &[S],
    testset: &[S],
    orders: &[usize],
    cfg: &BleuConfig,
    sizes: SampleSizes,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    check_sets(generated, testset)?;
    let max_order = orders.iter().copied().max().unwrap_or(1);
    let ref_idx = subsample(generated.len(), sizes.refs, &rng.child("refs"));
    let ref_seqs: Vec<&[usize]> = ref_idx.iter().map(|&i| generated[i].as_ref()).collect();
    let refs = ReferenceSet::new(&ref_seqs, max_order)?;
    let hyps: Vec<&S> = subsample(testset.len(), sizes.hyps, &rng.child("hyps")).into_iter().map(|i| &testset[i]).collect();
    mean_bleu(&hyps, &refs, orders, cfg)
}

/// Mean sentence BLEU-`n` of sampled generated texts against the test set.
pub fn bleu_forward<S: AsRef<[usize]> + Sync>(
    generated: &[S],
    testset: &[S],
    n: usize,
    cfg: &BleuConfig,
    sizes: SampleSizes,
    rng: &RngStream,
) -> Result<f64> {
    Ok(forward_all(generated, testset, &[n], cfg, sizes, rng)?[0])
}

/// Mean sentence BLEU-`n` of sampled test texts against sampled generated texts.
pub fn bleu_backward<S: AsRef<[usize]> + Sync>(
    generated: &[S],
    testset: &[S],
    n: usize,
    cfg: &BleuConfig,
    sizes: SampleSizes,
    rng: &RngStream,
) -> Result<f64> {
    Ok(backward_all(generated, testset, &[n], cfg, sizes, rng)?[0])
}

/// Scores for a single BLEU order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderScores {
    pub n: usize,
    pub forward: f64,
    pub backward: f64,
    pub harmonic: f64,
}

/// Forward, backward and harmonic BLEU for several orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scores: Vec<OrderScores>,
    pub generated_count: usize,
    pub test_count: usize,
    pub sample_sizes: SampleSizes,
    pub bleu: BleuConfig,
    pub seed: u64,
}

/// Computes a [`MetricsReport`] for every order in `orders`; all orders share
/// the same sampled hypotheses and references.
pub fn evaluate_bleu<S: AsRef<[usize]> + Sync>(
    generated: &[S],
    testset: &[S],
    orders: &[usize],
    cfg: &BleuConfig,
    sizes: SampleSizes,
    seed: u64,
) -> Result<MetricsReport> {
    if orders.is_empty() || orders.contains(&0) {
        return Err(Error::arg("BLEU orders must be non-empty and >= 1"));
    }
    let rng = RngStream::new(seed);
    let f = forward_all(generated, testset, orders, cfg, sizes, &rng.child("forward"))?;
    let b = backward_all(generated, testset, orders, cfg, sizes, &rng.child("backward"))?;
    let scores = orders
        .iter()
        .zip(f.iter().zip(&b))
        .map(|(&n, (&forward, &backward))| OrderScores {
            n,
            forward,
            backward,
            harmonic: bleu_ha(forward, backward),
        })
        .collect();
    Ok(MetricsReport {
        scores,
        generated_count: generated.len(),
        test_count: testset.len(),
        sample_sizes: sizes,
        bleu: *cfg,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(x: &str) -> Vec<usize> {
        x.bytes().filter(|b| !b.is_ascii_whitespace()).map(|b| (b - b'a' + 2) as usize).collect()
    }

    #[test]
    fn identical_hypothesis_scores_one() {
        let refs = vec![s("a b c d"), s("b b a")];
        assert!((sentence_bleu(&s("a b c d"), &refs, 4).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_hypothesis_is_tiny() {
        let v = sentence_bleu(&s("x y z"), &[s("a b c")], 3).unwrap();
        assert!(v < 1e-2);
    }

    #[test]
    fn worked_bigram_example() {
        // p1 = 2/3, p2 = 1/2, equal lengths.
        let v = sentence_bleu(&s("a b c"), &[s("a b d")], 2).unwrap();
        assert!((v - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_applies() {
        // Hypothesis of length 2 against a reference of length 4, all matching.
        let v = sentence_bleu(&s("a b"), &[s("a b c d")], 1).unwrap();
        assert!((v - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn clipping_limits_repeats() {
        // "a a a a" vs "a b": unigram a clipped to 1 of 4.
        let v = sentence_bleu(&s("a a a a"), &[s("a b c d")], 1).unwrap();
        assert!((v - 0.25).abs() < 1e-12);
    }

    #[test]
    fn unsmoothed_zero_precision_is_zero() {
        let cfg = BleuConfig { smoothing: Smoothing::None, ..BleuConfig::default() };
        let refs = ReferenceSet::new(&[s("a b c")], 2).unwrap();
        assert_eq!(sentence_bleu_with(&s("a c b"), &refs, 2, &cfg).unwrap(), 0.0);
        let indiv = BleuConfig { cumulative: false, ..BleuConfig::default() };
        assert!((sentence_bleu_with(&s("a b d"), &refs, 2, &indiv).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn argument_errors() {
        assert!(sentence_bleu(&[], &[s("a")], 2).is_err());
        assert!(sentence_bleu::<Vec<usize>>(&s("a"), &[], 2).is_err());
        assert!(sentence_bleu(&s("a"), &[s("a")], 0).is_err());
        let empty: Vec<Vec<usize>> = vec![];
        assert!(bleu_forward(&empty, &[s("a")], 2, &BleuConfig::default(), SampleSizes::default(), &RngStream::new(0)).is_err());
    }

    #[test]
    fn harmonic_mean_cases() {
        assert_eq!(bleu_ha(0.0, 0.0), 0.0);
        assert_eq!(bleu_ha(0.0, 0.7), 0.0);
        assert!((bleu_ha(0.4, 0.4) - 0.4).abs() < 1e-15);
        assert!((bleu_ha(0.829, 0.868) - 0.848).abs() < 0.0005);
    }

    #[test]
    fn forward_is_one_for_subset() {
        let test = vec![s("a b c"), s("b c d e"), s("c a")];
        let gen = vec![s("b c d e"), s("a b c")];
        let cfg = BleuConfig::default();
        let f = bleu_forward(&gen, &test, 3, &cfg, SampleSizes::default(), &RngStream::new(0)).unwrap();
        assert!((f - 1.0).abs() < 1e-12);
        let b = bleu_backward(&test, &test, 2, &cfg, SampleSizes::default(), &RngStream::new(0)).unwrap();
        assert!((b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn collapsed_generator_has_low_backward_bleu() {
        let test = vec![s("a b c d"), s("e f g h"), s("b d f h"), s("h g a c"), s("c c e e")];
        let gen = vec![s("a b c d"); 20];
        let cfg = BleuConfig::default();
        let sizes = SampleSizes::default();
        let f = bleu_forward(&gen, &test, 2, &cfg, sizes, &RngStream::new(1)).unwrap();
        let b = bleu_backward(&gen, &test, 2, &cfg, sizes, &RngStream::new(1)).unwrap();
        assert!((f - 1.0).abs() < 1e-12);
        assert!(b < f && b < 0.5, "{b}");
    }

    #[test]
    fn report_is_deterministic_and_bounded() {
        let test: Vec<Vec<usize>> = (0..30).map(|i| vec![2 + i % 4, 3 + i % 3, 2 + (i * 5) % 4, 5]).collect();
        let gen: Vec<Vec<usize>> = (0..40).map(|i| vec![2 + i % 3, 3, 2 + (i * 3) % 4, 4 + i % 2]).collect();
        let sizes = SampleSizes { hyps: 10, refs: 15 };
        let a = evaluate_bleu(&gen, &test, &[2, 3, 4, 5], &BleuConfig::default(), sizes, 4).unwrap();
        let b = evaluate_bleu(&gen, &test, &[2, 3, 4, 5], &BleuConfig::default(), sizes, 4).unwrap();
        assert_eq!(a, b);
        for o in &a.scores {
            for v in [o.forward, o.backward, o.harmonic] {
                assert!((0.0..=1.0).contains(&v));
            }
            assert!(o.harmonic >= o.forward.min(o.backward) - 1e-15);
            assert!(o.harmonic <= o.forward.max(o.backward) + 1e-15);
        }
    }

    proptest! {
        #[test]
        fn harmonic_between_min_and_max(f in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let h = bleu_ha(f, b);
            prop_assert!(h >= f.min(b) - 1e-15 && h <= f.max(b) + 1e-15);
        }

        #[test]
        fn refs_order_and_duplicates_do_not_matter(
            hyp in proptest::collection::vec(2usize..6, 1..8),
            refs in proptest::collection::vec(proptest::collection::vec(2usize..6, 1..8), 1..5),
        ) {
            let base = sentence_bleu(&hyp, &refs, 3).unwrap();
            let mut rev = refs.clone();
            rev.reverse();
            rev.push(refs[0].clone());
            prop_assert_eq!(base, sentence_bleu(&hyp, &rev, 3).unwrap());
        }

        #[test]
        fn unigram_equal_length_is_clipped_precision(
            pair in (1usize..8).prop_flat_map(|n| (
                proptest::collection::vec(2usize..6, n),
                proptest::collection::vec(2usize..6, n),
            ))
        ) {
            let (hyp, r) = pair;
            let v = sentence_bleu(&hyp, &[r.clone()], 1).unwrap();
            let mut matched = 0usize;
            for tok in 2..6 {
                let ch = hyp.iter().filter(|&&x| x == tok).count();
                let cr = r.iter().filter(|&&x| x == tok).count();
                matched += ch.min(cr);
            }
            let p = matched as f64 / hyp.len() as f64;
            let expected = if p == 0.0 { 1e-9 } else { p };
            prop_assert!((v - expected).abs() < 1e-15);
        }
    }
}
