//! Per-token activation masks used by the compression baselines.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::RankSet;
use crate::error::{Error, Result};
use crate::rng::mix64;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// Keep the largest-magnitude entries of each token.
    TopK,
    /// Keep a uniformly drawn subset of each token.
    Random,
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskKind::TopK => "topk",
            MaskKind::Random => "random",
        })
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk" => Ok(MaskKind::TopK),
            "random" => Ok(MaskKind::Random),
            other => Err(Error::Config(format!("unknown mask kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    /// Fraction of each token's channels that survive.
    pub p: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(kind: MaskKind, p: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!(
                "mask keep fraction {p} outside [0, 1]"
            )));
        }
        Ok(Self { kind, p, seed })
    }

    pub fn keep_count(&self, hidden: usize) -> usize {
        ((hidden as f64) * self.p).floor() as usize
    }

    /// Same mask family with an independent random stream.
    pub fn derive(&self, salt: u64) -> Self {
        Self {
            seed: mix64(self.seed ^ mix64(salt)),
            ..*self
        }
    }
}

/// Boolean keep-mask for every rank, saved for reuse in the backward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankMask {
    hidden: usize,
    keep: Vec<Vec<bool>>,
}

impl RankMask {
    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn ranks(&self) -> usize {
        self.keep.len()
    }

    pub fn rank(&self, m: usize) -> &[bool] {
        &self.keep[m]
    }

    /// Surviving entries on one rank; identical for every rank.
    pub fn kept_per_rank(&self) -> u64 {
        self.keep[0].iter().filter(|&&k| k).count() as u64
    }

    /// Zeroes every masked entry.
    pub fn apply<T: Scalar>(&self, rs: &RankSet<T>) -> RankSet<T> {
        assert_eq!(rs.ranks(), self.ranks(), "mask rank count mismatch");
        rs.map(|m, t| {
            let mut out = t.clone();
            for (v, &k) in out.data_mut().iter_mut().zip(&self.keep[m]) {
                if !k {
                    *v = T::zero();
                }
            }
            out
        })
    }
}

/// Masks every token (row) of every rank, keeping `floor(h·p)` channels.
///
/// Top-K ties break toward the lower channel index. Random masks draw from a
/// generator keyed by `(seed, step, rank, token)`.
pub fn apply_mask<T: Scalar>(
    rs: &RankSet<T>,
    mask: &MaskSpec,
    step: u64,
) -> (RankSet<T>, RankMask) {
    let h = rs.hidden();
    let keep_n = mask.keep_count(h);
    let mut keep = Vec::with_capacity(rs.ranks());
    for (m, t) in rs.iter().enumerate() {
        let mut bits = vec![false; t.len()];
        for row in 0..t.rows() {
            let slot = &mut bits[row * h..(row + 1) * h];
            if keep_n == h {
                slot.fill(true);
                continue;
            }
            match mask.kind {
                MaskKind::TopK => {
                    let vals = t.row(row);
                    let mut order: Vec<usize> = (0..h).collect();
                    order.sort_by(|&a, &b| {
                        vals[b]
                            .abs()
                            .partial_cmp(&vals[a].abs())
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(a.cmp(&b))
                    });
                    for &j in &order[..keep_n] {
                        slot[j] = true;
                    }
                }
                MaskKind::Random => {
                    let mut rng = token_rng(mask.seed, step, m as u64, row as u64);
                    for j in index::sample(&mut rng, h, keep_n) {
                        slot[j] = true;
                    }
                }
            }
        }
        keep.push(bits);
    }
    let saved = RankMask { hidden: h, keep };
    (saved.apply(rs), saved)
}

fn token_rng(seed: u64, step: u64, rank: u64, token: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(mix64(mix64(mix64(step) ^ rank) ^ token));
    rng
}
