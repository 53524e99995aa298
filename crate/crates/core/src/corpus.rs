//! Vocabulary, frequency filtering, token-id encoding and token files.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::numerics::RngStream;
use crate::policy::SeqMode;
use crate::{Error, Result, BOS, EOS, NUM_RESERVED};

pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";

/// Bidirectional token/id map. Ids `0` and `1` are BOS and EOS; content ids
/// are dense from `2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    counts: Vec<usize>,
    min_freq: usize,
}

impl Vocab {
    /// Builds a vocabulary from content tokens in id order. Counts default to
    /// zero when unknown (e.g. a vocabulary read from disk).
    pub fn from_tokens(content: Vec<String>, counts: Option<Vec<usize>>, min_freq: usize) -> Result<Self> {
        let counts = match counts {
            Some(c) if c.len() != content.len() => {
                return Err(Error::arg("vocabulary counts and tokens differ in length"));
            }
            Some(c) => c,
            None => vec![0; content.len()],
        };
        let mut tokens = vec![BOS_TOKEN.to_string(), EOS_TOKEN.to_string()];
        tokens.extend(content);
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::arg(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), id).is_some() {
                return Err(Error::arg(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let mut all_counts = vec![0; NUM_RESERVED];
        all_counts.extend(counts);
        Ok(Self { tokens, index, counts: all_counts, min_freq })
    }

    /// Total number of ids, reserved ones included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == NUM_RESERVED
    }

    pub fn content_len(&self) -> usize {
        self.tokens.len() - NUM_RESERVED
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Frequency of each id in the filtered corpus (zero for reserved ids).
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn encode<S: AsRef<str>>(&self, sentence: &[S]) -> Result<Vec<usize>> {
        sentence
            .iter()
            .map(|t| {
                let t = t.as_ref();
                match self.id(t) {
                    Some(id) if id >= NUM_RESERVED => Ok(id),
                    Some(_) => Err(Error::arg(format!("reserved symbol {t:?} in input text"))),
                    None => Err(Error::arg(format!("unknown token {t:?}"))),
                }
            })
            .collect()
    }

    /// Maps ids back to tokens. In eos-terminated mode BOS/EOS ids are
    /// dropped; in fixed-length mode they are an error.
    pub fn decode(&self, ids: &[usize], mode: SeqMode) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            if id >= self.len() {
                return Err(Error::arg(format!("token id {id} outside vocabulary of {}", self.len())));
            }
            if id == BOS || id == EOS {
                match mode {
                    SeqMode::EosTerminated => continue,
                    SeqMode::FixedLength => {
                        return Err(Error::arg(format!("reserved id {id} in a fixed-length sequence")));
                    }
                }
            }
            out.push(self.tokens[id].clone());
        }
        Ok(out)
    }

    /// One token per line, line index = id.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < NUM_RESERVED || lines[0] != BOS_TOKEN || lines[1] != EOS_TOKEN {
            return Err(Error::MalformedLine {
                path: path.to_path_buf(),
                line: 1,
                reason: format!("vocabulary must start with {BOS_TOKEN} and {EOS_TOKEN}"),
            });
        }
        Self::from_tokens(lines[NUM_RESERVED..].iter().map(|s| s.to_string()).collect(), None, 0)
    }
}

/// Lowercases, splits on whitespace and separates punctuation into
/// standalone tokens.
pub fn pretokenize(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in line.to_lowercase().split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Keeps sentences with `min_len <= len <= max_len`, then repeatedly removes
/// tokens seen fewer than `min_freq` times together with every sentence that
/// contains one, until no token falls below the threshold.
///
/// Content ids are ordered by descending count, ties broken lexicographically.
pub fn build_vocab_and_filter<S: AsRef<str>>(
    texts: &[Vec<S>],
    min_freq: usize,
    min_len: usize,
    max_len: usize,
) -> Result<(Vocab, Vec<Vec<String>>)> {
    if min_len > max_len {
        return Err(Error::arg(format!("min_len {min_len} exceeds max_len {max_len}")));
    }
    let mut kept: Vec<Vec<String>> = texts
        .iter()
        .filter(|s| (min_len..=max_len).contains(&s.len()))
        .map(|s| s.iter().map(|t| t.as_ref().to_string()).collect())
        .collect();
    let counts = loop {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in &kept {
            for t in s {
                *counts.entry(t.as_str()).or_insert(0) += 1;
            }
        }
        let rare: HashSet<String> = counts
            .iter()
            .filter(|(_, &c)| c < min_freq)
            .map(|(t, _)| t.to_string())
            .collect();
        if rare.is_empty() {
            break counts.into_iter().map(|(t, c)| (t.to_string(), c)).collect::<Vec<_>>();
        }
        kept.retain(|s| !s.iter().any(|t| rare.contains(t)));
    };
    if kept.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts = counts;
    counts.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let (tokens, freqs): (Vec<String>, Vec<usize>) = counts.into_iter().unzip();
    let vocab = Vocab::from_tokens(tokens, Some(freqs), min_freq)?;
    Ok((vocab, kept))
}

/// Reads one sequence of space-separated ids per line.
pub fn read_token_file(path: &Path) -> Result<Vec<Vec<usize>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let seq = line
            .split(' ')
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<usize>().map_err(|_| Error::MalformedLine {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: format!("{t:?} is not a non-negative integer"),
                })
            })
            .collect::<Result<Vec<usize>>>()?;
        out.push(seq);
    }
    Ok(out)
}

pub fn write_token_file<S: AsRef<[usize]>>(path: &Path, seqs: &[S]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        for s in seqs {
            let mut first = true;
            for id in s.as_ref() {
                if !first {
                    w.write_all(b" ")?;
                }
                first = false;
                write!(w, "{id}")?;
            }
            w.write_all(b"\n")?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Reads a raw text file and pretokenizes every non-blank line.
pub fn read_text_file(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(pretokenize).filter(|s| !s.is_empty()).collect())
}

/// Seeded shuffle followed by a split into `(train, test)` with `n_test`
/// items in the test part.
pub fn split_train_test<T: Clone>(items: &[T], n_test: usize, rng: &RngStream) -> Result<(Vec<T>, Vec<T>)> {
    if n_test > items.len() {
        return Err(Error::arg(format!("test size {n_test} exceeds corpus size {}", items.len())));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng.rng());
    let test = order[..n_test].iter().map(|&i| items[i].clone()).collect();
    let train = order[n_test..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| pretokenize(l)).collect()
    }

    #[test]
    fn hand_counted_filtering() {
        let (vocab, kept) = build_vocab_and_filter(&corpus(&["a b", "a c", "a b"]), 2, 1, 10).unwrap();
        assert_eq!(&vocab.tokens()[2..], &["a".to_string(), "b".to_string()]);
        assert_eq!(kept, corpus(&["a b", "a b"]));
        assert_eq!(vocab.counts(), &[0, 0, 2, 2]);
        assert!(vocab.id("c").is_none());
    }

    #[test]
    fn min_freq_one_keeps_length_valid_sentences() {
        let texts = corpus(&["a", "a b", "a b c d e"]);
        let (vocab, kept) = build_vocab_and_filter(&texts, 1, 2, 4).unwrap();
        assert_eq!(kept, corpus(&["a b"]));
        assert_eq!(vocab.content_len(), 2);
    }

    #[test]
    fn cascade_reaches_fixed_point() {
        // "z" is rare; dropping "x z" leaves "x" with a single occurrence.
        let texts = corpus(&["x z", "x y", "y y", "y w w"]);
        let (vocab, kept) = build_vocab_and_filter(&texts, 2, 1, 5).unwrap();
        assert_eq!(kept, corpus(&["y y", "y w w"]));
        assert_eq!(&vocab.tokens()[2..], &["y".to_string(), "w".to_string()]);
        let (v2, k2) = build_vocab_and_filter(&kept, 2, 1, 5).unwrap();
        assert_eq!((v2, k2), (vocab, kept));
    }

    #[test]
    fn empty_result_is_an_error() {
        let err = build_vocab_and_filter(&corpus(&["a b", "c d"]), 2, 1, 5).unwrap_err();
        assert!(matches!(err, Error::EmptyCorpus));
        assert!(build_vocab_and_filter(&corpus(&["a"]), 1, 3, 2).is_err());
    }

    #[test]
    fn pretokenize_splits_punctuation() {
        assert_eq!(pretokenize("A man, riding a Horse."), ["a", "man", ",", "riding", "a", "horse", "."]);
        assert_eq!(pretokenize("don't"), ["don", "'", "t"]);
        assert!(pretokenize("   ").is_empty());
    }

    #[test]
    fn encode_decode_contract() {
        let (vocab, kept) = build_vocab_and_filter(&corpus(&["a b", "b a", "a a"]), 1, 1, 4).unwrap();
        for s in &kept {
            let ids = vocab.encode(s).unwrap();
            assert_eq!(&vocab.decode(&ids, SeqMode::FixedLength).unwrap(), s);
        }
        assert!(vocab.encode::<&str>(&[]).unwrap().is_empty());
        assert!(vocab.encode(&["q"]).is_err());
        assert!(vocab.encode(&["<s>"]).is_err());
        let a = vocab.id("a").unwrap();
        assert_eq!(vocab.decode(&[BOS, a, EOS], SeqMode::EosTerminated).unwrap(), ["a"]);
        assert!(vocab.decode(&[a, EOS], SeqMode::FixedLength).is_err());
        assert!(vocab.decode(&[99], SeqMode::EosTerminated).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let (vocab, _) = build_vocab_and_filter(&corpus(&["a b c", "c b"]), 1, 1, 4).unwrap();
        vocab.write(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("<s>\n</s>\n"));
        let back = Vocab::read(&p).unwrap();
        assert_eq!(back.tokens(), vocab.tokens());
        std::fs::write(&p, "a\nb\n").unwrap();
        assert!(matches!(Vocab::read(&p), Err(Error::MalformedLine { line: 1, .. })));
    }

    #[test]
    fn token_file_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        write_token_file(&p, &[vec![3usize, 4, 5]]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "3 4 5\n");
        let empty: Vec<Vec<usize>> = vec![];
        write_token_file(&p, &empty).unwrap();
        assert_eq!(std::fs::read(&p).unwrap().len(), 0);
        assert!(read_token_file(&p).unwrap().is_empty());
        std::fs::write(&p, "1 2\n3 x 4\n").unwrap();
        match read_token_file(&p) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&p, "1 -2\n").unwrap();
        assert!(read_token_file(&p).is_err());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let items: Vec<usize> = (0..50).collect();
        let (tr, te) = split_train_test(&items, 10, &RngStream::new(5)).unwrap();
        let (tr2, te2) = split_train_test(&items, 10, &RngStream::new(5)).unwrap();
        assert_eq!((&tr, &te), (&tr2, &te2));
        assert_eq!(te.len(), 10);
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert!(split_train_test(&items, 51, &RngStream::new(5)).is_err());
    }

    #[test]
    fn many_sequences_round_trip() {
        use rand::Rng;
        let mut r = RngStream::new(11).rng();
        let seqs: Vec<Vec<usize>> = (0..10_000)
            .map(|_| {
                let n = r.random_range(0..12);
                (0..n).map(|_| r.random_range(0..100_000)).collect()
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("big.txt");
        write_token_file(&p, &seqs).unwrap();
        assert_eq!(read_token_file(&p).unwrap(), seqs);
    }

    proptest! {
        #[test]
        fn filtering_is_idempotent(
            texts in proptest::collection::vec(proptest::collection::vec(0u8..8, 1..6), 1..30),
            min_freq in 1usize..4,
        ) {
            let texts: Vec<Vec<String>> = texts.iter().map(|s| s.iter().map(|b| format!("w{b}")).collect()).collect();
            if let Ok((vocab, kept)) = build_vocab_and_filter(&texts, min_freq, 1, 5) {
                for (id, &c) in vocab.counts().iter().enumerate().skip(NUM_RESERVED) {
                    prop_assert!(c >= min_freq, "id {} count {}", id, c);
                }
                let (v2, k2) = build_vocab_and_filter(&kept, min_freq, 1, 5).unwrap();
                prop_assert_eq!(&v2, &vocab);
                prop_assert_eq!(&k2, &kept);
                for s in &kept {
                    prop_assert_eq!(&vocab.decode(&vocab.encode(s).unwrap(), SeqMode::FixedLength).unwrap(), s);
                }
            }
        }
    }
}
