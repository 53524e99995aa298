use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One element of a stream's label path.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Label {
    Name(String),
    Index(u64),
}

impl From<&str> for Label {
    fn from(s: &str) -> Self {
        Label::Name(s.to_owned())
    }
}

impl From<String> for Label {
    fn from(s: String) -> Self {
        Label::Name(s)
    }
}

impl From<u64> for Label {
    fn from(i: u64) -> Self {
        Label::Index(i)
    }
}

impl From<usize> for Label {
    fn from(i: usize) -> Self {
        Label::Index(i as u64)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Name(s) => f.write_str(s),
            Label::Index(i) => write!(f, "{i}"),
        }
    }
}

/// A reproducible random stream identified by `(seed, label path)`.
///
/// Streams are counter based: a child's key is a hash of the parent key and
/// the label, so `stream.child("rollout").child(t).child(k)` yields the same
/// values no matter which thread or in which order it is consumed. The
/// stream itself holds no mutable state; [`RngStream::rng`] hands out a fresh
/// generator positioned at the start of the stream.
#[derive(Clone, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    path: Vec<Label>,
    key: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            path: Vec::new(),
            key: splitmix64(seed),
        }
    }

    /// Derives an independent child stream.
    pub fn child(&self, label: impl Into<Label>) -> Self {
        let label = label.into();
        // Distinct tags keep Name("3") and Index(3) apart.
        let (tag, h) = match &label {
            Label::Name(s) => (0x5A17_u64, fnv1a(s.as_bytes())),
            Label::Index(i) => (0x1D3E_u64, *i),
        };
        let key = splitmix64(splitmix64(self.key ^ tag.wrapping_mul(GOLDEN)) ^ splitmix64(h));
        let mut path = self.path.clone();
        path.push(label);
        Self {
            seed: self.seed,
            path,
            key,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[Label] {
        &self.path
    }

    /// The 64-bit key summarizing `(seed, path)`.
    pub fn key(&self) -> u64 {
        self.key
    }

    /// A fresh generator at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key)
    }
}

impl fmt::Debug for RngStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RngStream({}", self.seed)?;
        for l in &self.path {
            write!(f, "/{l}")?;
        }
        write!(f, ")")
    }
}
