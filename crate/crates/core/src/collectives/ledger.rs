use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CollectiveKind {
    AllReduce,
    PartialReduce,
    ReduceScatter,
    AllGather,
    /// All-reduce of normalization-gain gradients before the optimizer step.
    NormSync,
    /// Synchronization at the model boundary: the embedding gradient and the
    /// final hidden state feeding the replicated head.
    Boundary,
}

impl CollectiveKind {
    pub const ALL: [CollectiveKind; 6] = [
        CollectiveKind::AllReduce,
        CollectiveKind::PartialReduce,
        CollectiveKind::ReduceScatter,
        CollectiveKind::AllGather,
        CollectiveKind::NormSync,
        CollectiveKind::Boundary,
    ];

    /// Activation and activation-gradient reduces inside transformer blocks.
    pub fn is_tensor_parallel(self) -> bool {
        !matches!(self, CollectiveKind::NormSync | CollectiveKind::Boundary)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CollectiveKind::AllReduce => "all_reduce",
            CollectiveKind::PartialReduce => "partial_reduce",
            CollectiveKind::ReduceScatter => "reduce_scatter",
            CollectiveKind::AllGather => "all_gather",
            CollectiveKind::NormSync => "norm_sync",
            CollectiveKind::Boundary => "boundary",
        }
    }
}

impl fmt::Display for CollectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CollectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CollectiveKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown collective kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pass {
    Forward,
    Backward,
}

impl Pass {
    pub fn as_str(self) -> &'static str {
        match self {
            Pass::Forward => "forward",
            Pass::Backward => "backward",
        }
    }
}

impl FromStr for Pass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Pass::Forward),
            "backward" => Ok(Pass::Backward),
            other => Err(Error::Data(format!("unknown pass `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counter {
    pub elements: u64,
    pub calls: u64,
}

/// Key of a ledger entry: collective kind, pass, and wire width in bits.
pub type LedgerKey = (CollectiveKind, Pass, u8);

/// Cumulative per-rank element counts of simulated communication.
///
/// Counts follow a payload model in which an all-reduce of `n` elements costs
/// `2n` per rank (sent plus received), split evenly between its reduce-scatter
/// and all-gather halves.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CommLedger {
    counters: BTreeMap<LedgerKey, Counter>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, kind: CollectiveKind, pass: Pass, bits: u8, elements: u64) {
        let c = self.counters.entry((kind, pass, bits)).or_default();
        c.elements += elements;
        c.calls += 1;
    }

    pub fn get(&self, kind: CollectiveKind, pass: Pass, bits: u8) -> Counter {
        self.counters
            .get(&(kind, pass, bits))
            .copied()
            .unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LedgerKey, &Counter)> {
        self.counters.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.counters.is_empty()
    }

    /// Elements summed over entries accepted by `filter`.
    pub fn elements_where(&self, filter: impl Fn(CollectiveKind, Pass, u8) -> bool) -> u64 {
        self.counters
            .iter()
            .filter(|((k, p, b), _)| filter(*k, *p, *b))
            .map(|(_, c)| c.elements)
            .sum()
    }

    pub fn total_elements(&self) -> u64 {
        self.elements_where(|_, _, _| true)
    }

    pub fn kind_elements(&self, kind: CollectiveKind, pass: Pass) -> u64 {
        self.elements_where(|k, p, _| k == kind && p == pass)
    }

    /// Tensor-parallel traffic, optionally restricted to one pass.
    pub fn tensor_parallel_elements(&self, pass: Option<Pass>) -> u64 {
        self.elements_where(|k, p, _| k.is_tensor_parallel() && pass.is_none_or(|want| want == p))
    }

    pub fn merge(&mut self, other: &CommLedger) {
        for (key, c) in &other.counters {
            let e = self.counters.entry(*key).or_default();
            e.elements += c.elements;
            e.calls += c.calls;
        }
    }

    /// Flat table: `kind,pass,precision,elements_per_rank,calls`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "kind,pass,precision,elements_per_rank,calls")?;
        for ((kind, pass, bits), c) in &self.counters {
            writeln!(
                w,
                "{},{},{},{},{}",
                kind,
                pass.as_str(),
                bits,
                c.elements,
                c.calls
            )?;
        }
        Ok(())
    }

    /// Parses the output of [`CommLedger::write_csv`].
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header != "kind,pass,precision,elements_per_rank,calls" {
            return Err(Error::Data(format!("unexpected ledger header `{header}`")));
        }
        let mut ledger = Self::new();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Data(format!("malformed ledger row `{line}`"));
            if f.len() != 5 {
                return Err(bad());
            }
            let key = (
                f[0].parse()?,
                f[1].parse()?,
                f[2].parse().map_err(|_| bad())?,
            );
            let counter = Counter {
                elements: f[3].parse().map_err(|_| bad())?,
                calls: f[4].parse().map_err(|_| bad())?,
            };
            ledger.counters.insert(key, counter);
        }
        Ok(ledger)
    }
}
