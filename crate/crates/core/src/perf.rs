//! Closed-form compute/communication model of one transformer layer's
//! forward pass, and the communication savings of masking baselines.
//!
//! Units: compute is counted in FLOPs, communication in elements per rank,
//! and `C` converts between them as FLOPs per communicated element. A layer
//! then takes `T(p) = G/C + P(p)` element-times. Batch size is fixed at one.

use std::io::{self, Write};

use crate::error::{Error, Result};

/// Inputs of the cost model. `r` is the tensor-parallel degree and `c` the
/// compute-to-communication capacity ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerfInput {
    pub h: f64,
    pub s: f64,
    pub r: f64,
    pub c: f64,
    pub p: f64,
}

impl PerfInput {
    pub fn new(h: f64, s: f64, r: f64, c: f64, p: f64) -> Result<Self> {
        for (name, v) in [("h", h), ("s", s), ("r", r), ("C", c)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if r < 1.0 {
            return Err(Error::Config(format!("r must be at least 1, got {r}")));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("p must lie in [0, 1], got {p}")));
        }
        Ok(Self { h, s, r, c, p })
    }

    pub fn gemm_ops(&self) -> f64 {
        gemm_ops(self.h, self.s, self.r)
    }

    pub fn payload(&self) -> f64 {
        payload(self.h, self.s, self.p)
    }

    pub fn layer_time(&self) -> f64 {
        layer_time(self.h, self.s, self.r, self.c, self.p)
    }

    pub fn speedup(&self) -> f64 {
        speedup(self.h, self.s, self.r, self.c, self.p)
    }

    pub fn optimal_p(&self) -> f64 {
        optimal_p(self.h, self.s, self.r, self.c)
    }
}

/// Per-layer GEMM FLOPs on a single device, counting a multiply-add as two.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GemmBreakdown {
    /// `h → 4h` and `4h → h` projections: `16·s·h²`.
    pub mlp: f64,
    /// Query, key, and value projections: `6·s·h²`.
    pub qkv_proj: f64,
    /// Score and value products: `4·s²·h`.
    pub attention: f64,
    /// Attention output projection: `2·s·h²`.
    pub out_proj: f64,
}

impl GemmBreakdown {
    pub fn attention_total(&self) -> f64 {
        self.qkv_proj + self.attention + self.out_proj
    }

    pub fn total(&self) -> f64 {
        self.mlp + self.attention_total()
    }
}

pub fn gemm_breakdown(h: f64, s: f64) -> GemmBreakdown {
    GemmBreakdown {
        mlp: 8.0 * s * h * h + 8.0 * s * h * h,
        qkv_proj: 6.0 * s * h * h,
        attention: 4.0 * s * s * h,
        out_proj: 2.0 * s * h * h,
    }
}

/// `G = (24·s·h² + 4·s²·h) / r`.
pub fn gemm_ops(h: f64, s: f64, r: f64) -> f64 {
    (24.0 * s * h * h + 4.0 * s * s * h) / r
}

/// `P(p) = 2·s·h·p` elements per rank for the two reduces of one layer.
pub fn payload(h: f64, s: f64, p: f64) -> f64 {
    2.0 * s * h * p
}

/// `T(p) = G/C + P(p)`.
pub fn layer_time(h: f64, s: f64, r: f64, c: f64, p: f64) -> f64 {
    gemm_ops(h, s, r) / c + payload(h, s, p)
}

/// Relative time saved against `p = 1`:
/// `(1 − p) / (1 + (12h + 2s)/(C·r))`.
pub fn speedup(h: f64, s: f64, r: f64, c: f64, p: f64) -> f64 {
    (1.0 - p) / (1.0 + (12.0 * h + 2.0 * s) / (c * r))
}

/// Largest `p` whose communication still hides behind compute:
/// `min((12h + 2s)/(C·r), 1)`.
pub fn optimal_p(h: f64, s: f64, r: f64, c: f64) -> f64 {
    ((12.0 * h + 2.0 * s) / (c * r)).min(1.0)
}

/// Fraction of tensor-parallel communication removed at keep fraction `p`,
/// as `(partial channel-reduce, forward mask)`.
///
/// A mask compresses only the reduce-scatter half of the forward all-reduce,
/// one quarter of the layer's forward-plus-backward traffic.
pub fn mask_comm_reduction(p: f64) -> (f64, f64) {
    let caat = 1.0 - p;
    (caat, caat / 4.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub p: f64,
    pub gemm_ops: f64,
    pub payload: f64,
    pub time: f64,
    pub speedup: f64,
}

/// Evaluates the model at `points ≥ 2` evenly spaced `p` in `[0, 1]`.
pub fn sweep(h: f64, s: f64, r: f64, c: f64, points: usize) -> Vec<SweepRow> {
    assert!(points >= 2, "a sweep needs both endpoints");
    (0..points)
        .map(|i| {
            let p = i as f64 / (points - 1) as f64;
            SweepRow {
                p,
                gemm_ops: gemm_ops(h, s, r),
                payload: payload(h, s, p),
                time: layer_time(h, s, r, c, p),
                speedup: speedup(h, s, r, c, p),
            }
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut w: W) -> io::Result<()> {
    writeln!(w, "p,G,P,T,speedup")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.p, r.gemm_ops, r.payload, r.time, r.speedup
        )?;
    }
    Ok(())
}

pub fn write_summary_csv<W: Write>(input: &PerfInput, mut w: W) -> io::Result<()> {
    writeln!(w, "h,s,r,C,p_star")?;
    writeln!(
        w,
        "{},{},{},{},{}",
        input.h,
        input.s,
        input.r,
        input.c,
        input.optimal_p()
    )
}
