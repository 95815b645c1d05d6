#![allow(clippy::needless_range_loop)]

//! Unsharded single-device transformer with a hand-written backward, built
//! from plain loops so it shares no kernels with the library.

use caat::train::CaatModel;

const EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_tensor(t: &caat::Tensor64) -> Self {
        Self {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().to_vec(),
        }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows);
    let mut c = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut s = 0.0;
            for k in 0..a.cols {
                s += a.at(i, k) * b.at(k, j);
            }
            *c.at_mut(i, j) = s;
        }
    }
    c
}

/// aᵀ b
fn mm_tn(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows);
    let mut c = Mat::zeros(a.cols, b.cols);
    for i in 0..a.cols {
        for j in 0..b.cols {
            let mut s = 0.0;
            for k in 0..a.rows {
                s += a.at(k, i) * b.at(k, j);
            }
            *c.at_mut(i, j) = s;
        }
    }
    c
}

/// a bᵀ
fn mm_nt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols);
    let mut c = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            let mut s = 0.0;
            for k in 0..a.cols {
                s += a.at(i, k) * b.at(j, k);
            }
            *c.at_mut(i, j) = s;
        }
    }
    c
}

fn add(a: &Mat, b: &Mat) -> Mat {
    let mut c = a.clone();
    for (x, y) in c.data.iter_mut().zip(&b.data) {
        *x += y;
    }
    c
}

fn norm_fwd(x: &Mat, g: &[f64]) -> Mat {
    let mut y = x.clone();
    for i in 0..x.rows {
        let ms: f64 = (0..x.cols).map(|j| x.at(i, j) * x.at(i, j)).sum::<f64>() / x.cols as f64;
        let r = 1.0 / (ms + EPS).sqrt();
        for j in 0..x.cols {
            *y.at_mut(i, j) = x.at(i, j) * r * g[j];
        }
    }
    y
}

/// Returns `(dx, dg)`.
fn norm_bwd(x: &Mat, g: &[f64], dy: &Mat) -> (Mat, Vec<f64>) {
    let h = x.cols as f64;
    let mut dx = Mat::zeros(x.rows, x.cols);
    let mut dg = vec![0.0; x.cols];
    for i in 0..x.rows {
        let ms: f64 = (0..x.cols).map(|j| x.at(i, j) * x.at(i, j)).sum::<f64>() / h;
        let r = 1.0 / (ms + EPS).sqrt();
        let dot: f64 = (0..x.cols).map(|j| dy.at(i, j) * g[j] * x.at(i, j)).sum();
        for j in 0..x.cols {
            dg[j] += dy.at(i, j) * x.at(i, j) * r;
            *dx.at_mut(i, j) = r * g[j] * dy.at(i, j) - x.at(i, j) * r * r * r * dot / h;
        }
    }
    (dx, dg)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[derive(Clone, Debug)]
pub struct RefLayer {
    pub g1: Vec<f64>,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub g2: Vec<f64>,
    pub up: Mat,
    pub down: Mat,
}

#[derive(Clone, Debug)]
pub struct RefModel {
    pub heads: usize,
    pub embed: Mat,
    pub pos: Mat,
    pub layers: Vec<RefLayer>,
    pub gf: Vec<f64>,
    pub head: Mat,
}

/// Gradients with the same layout as [`RefModel`].
pub type RefGrads = RefModel;

struct AttnTape {
    q: Mat,
    k: Mat,
    v: Mat,
    /// `[b][head][s][u]`
    probs: Vec<f64>,
    o: Mat,
}

struct LayerTape {
    x: Mat,
    n1: Mat,
    attn: AttnTape,
    x1: Mat,
    n2: Mat,
    u: Mat,
    y: Mat,
}

pub struct Trace {
    /// Input of every layer followed by the last layer's output.
    pub hidden: Vec<Mat>,
    pub logits: Mat,
    pub loss: f64,
}

impl RefModel {
    /// Gathers the shards of `model` into full matrices.
    pub fn from_caat(model: &CaatModel<f64>) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|l| {
                let [wq, wk, wv, wo] = l.attn.to_full();
                let (up, down) = l.mlp.to_full();
                RefLayer {
                    g1: l.attn_norm.data().to_vec(),
                    wq: Mat::from_tensor(&wq),
                    wk: Mat::from_tensor(&wk),
                    wv: Mat::from_tensor(&wv),
                    wo: Mat::from_tensor(&wo),
                    g2: l.mlp_norm.data().to_vec(),
                    up: Mat::from_tensor(&up),
                    down: Mat::from_tensor(&down),
                }
            })
            .collect();
        Self {
            heads: model.config().heads,
            embed: Mat::from_tensor(&model.embed),
            pos: Mat::from_tensor(&model.pos),
            layers,
            gf: model.final_norm.data().to_vec(),
            head: Mat::from_tensor(&model.head),
        }
    }

    fn zeros_like(&self) -> RefGrads {
        let z = |m: &Mat| Mat::zeros(m.rows, m.cols);
        RefModel {
            heads: self.heads,
            embed: z(&self.embed),
            pos: z(&self.pos),
            layers: self
                .layers
                .iter()
                .map(|l| RefLayer {
                    g1: vec![0.0; l.g1.len()],
                    wq: z(&l.wq),
                    wk: z(&l.wk),
                    wv: z(&l.wv),
                    wo: z(&l.wo),
                    g2: vec![0.0; l.g2.len()],
                    up: z(&l.up),
                    down: z(&l.down),
                })
                .collect(),
            gf: vec![0.0; self.gf.len()],
            head: z(&self.head),
        }
    }

    fn attention(&self, l: &RefLayer, n1: &Mat, batch: usize, seq: usize) -> (Mat, AttnTape) {
        let q = mm(n1, &l.wq);
        let k = mm(n1, &l.wk);
        let v = mm(n1, &l.wv);
        let h = n1.cols;
        let d = h / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut probs = vec![0.0; batch * self.heads * seq * seq];
        let mut o = Mat::zeros(n1.rows, h);
        for b in 0..batch {
            for hd in 0..self.heads {
                let base = (b * self.heads + hd) * seq * seq;
                for s in 0..seq {
                    let mut scores = vec![f64::NEG_INFINITY; seq];
                    for (u, sc) in scores.iter_mut().enumerate().take(s + 1) {
                        *sc = (0..d)
                            .map(|e| q.at(b * seq + s, hd * d + e) * k.at(b * seq + u, hd * d + e))
                            .sum::<f64>()
                            * scale;
                    }
                    let max = scores[..=s]
                        .iter()
                        .cloned()
                        .fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores[..=s].iter().map(|x| (x - max).exp()).sum();
                    for u in 0..=s {
                        probs[base + s * seq + u] = (scores[u] - max).exp() / z;
                    }
                    for e in 0..d {
                        *o.at_mut(b * seq + s, hd * d + e) = (0..=s)
                            .map(|u| probs[base + s * seq + u] * v.at(b * seq + u, hd * d + e))
                            .sum();
                    }
                }
            }
        }
        let out = mm(&o, &l.wo);
        (out, AttnTape { q, k, v, probs, o })
    }

    fn embed_rows(&self, tokens: &[usize], seq: usize) -> Mat {
        let h = self.embed.cols;
        let mut x = Mat::zeros(tokens.len(), h);
        for (i, &t) in tokens.iter().enumerate() {
            for j in 0..h {
                *x.at_mut(i, j) = self.embed.at(t, j) + self.pos.at(i % seq, j);
            }
        }
        x
    }

    fn run(
        &self,
        tokens: &[usize],
        targets: &[usize],
        batch: usize,
        seq: usize,
    ) -> (Trace, Vec<LayerTape>, Mat, Mat) {
        let mut x = self.embed_rows(tokens, seq);
        let mut hidden = vec![x.clone()];
        let mut tapes = Vec::new();
        for l in &self.layers {
            let n1 = norm_fwd(&x, &l.g1);
            let (a, attn) = self.attention(l, &n1, batch, seq);
            let x1 = add(&x, &a);
            let n2 = norm_fwd(&x1, &l.g2);
            let u = mm(&n2, &l.up);
            let mut y = u.clone();
            y.data.iter_mut().for_each(|v| *v = gelu(*v));
            let out = add(&x1, &mm(&y, &l.down));
            tapes.push(LayerTape {
                x: x.clone(),
                n1,
                attn,
                x1,
                n2,
                u,
                y,
            });
            x = out;
            hidden.push(x.clone());
        }
        let nf = norm_fwd(&x, &self.gf);
        let logits = mm(&nf, &self.head);
        let n = logits.rows as f64;
        let mut loss = 0.0;
        let mut dlogits = Mat::zeros(logits.rows, logits.cols);
        for i in 0..logits.rows {
            let max = (0..logits.cols)
                .map(|j| logits.at(i, j))
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..logits.cols)
                .map(|j| (logits.at(i, j) - max).exp())
                .sum();
            loss += z.ln() + max - logits.at(i, targets[i]);
            for j in 0..logits.cols {
                let p = (logits.at(i, j) - max).exp() / z;
                *dlogits.at_mut(i, j) = (p - if j == targets[i] { 1.0 } else { 0.0 }) / n;
            }
        }
        let trace = Trace {
            hidden,
            logits,
            loss: loss / n,
        };
        (trace, tapes, nf, dlogits)
    }

    pub fn forward(&self, tokens: &[usize], targets: &[usize], batch: usize, seq: usize) -> Trace {
        self.run(tokens, targets, batch, seq).0
    }

    pub fn loss_and_grads(
        &self,
        tokens: &[usize],
        targets: &[usize],
        batch: usize,
        seq: usize,
    ) -> (f64, RefGrads) {
        let (trace, tapes, nf, dlogits) = self.run(tokens, targets, batch, seq);
        let mut g = self.zeros_like();
        g.head = mm_tn(&nf, &dlogits);
        let dnf = mm_nt(&dlogits, &self.head);
        let last = trace.hidden.last().unwrap();
        let (mut dx, dgf) = norm_bwd(last, &self.gf, &dnf);
        g.gf = dgf;
        for (li, (l, t)) in self.layers.iter().zip(&tapes).enumerate().rev() {
            let gl = &mut g.layers[li];
            // MLP branch.
            gl.down = mm_tn(&t.y, &dx);
            let mut du = mm_nt(&dx, &l.down);
            for (d, &u) in du.data.iter_mut().zip(&t.u.data) {
                *d *= gelu_grad(u);
            }
            gl.up = mm_tn(&t.n2, &du);
            let dn2 = mm_nt(&du, &l.up);
            let (dx1n, dg2) = norm_bwd(&t.x1, &l.g2, &dn2);
            gl.g2 = dg2;
            let dx1 = add(&dx, &dx1n);
            // Attention branch.
            gl.wo = mm_tn(&t.attn.o, &dx1);
            let do_ = mm_nt(&dx1, &l.wo);
            let (dq, dk, dv) = self.attention_bwd(&t.attn, &do_, batch, seq);
            gl.wq = mm_tn(&t.n1, &dq);
            gl.wk = mm_tn(&t.n1, &dk);
            gl.wv = mm_tn(&t.n1, &dv);
            let dn1 = add(
                &add(&mm_nt(&dq, &l.wq), &mm_nt(&dk, &l.wk)),
                &mm_nt(&dv, &l.wv),
            );
            let (dxn, dg1) = norm_bwd(&t.x, &l.g1, &dn1);
            gl.g1 = dg1;
            dx = add(&dx1, &dxn);
        }
        for (i, &tok) in tokens.iter().enumerate() {
            for j in 0..dx.cols {
                *g.embed.at_mut(tok, j) += dx.at(i, j);
                *g.pos.at_mut(i % seq, j) += dx.at(i, j);
            }
        }
        (trace.loss, g)
    }

    fn attention_bwd(&self, t: &AttnTape, do_: &Mat, batch: usize, seq: usize) -> (Mat, Mat, Mat) {
        let h = t.q.cols;
        let d = h / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut dq = Mat::zeros(t.q.rows, h);
        let mut dk = Mat::zeros(t.q.rows, h);
        let mut dv = Mat::zeros(t.q.rows, h);
        for b in 0..batch {
            for hd in 0..self.heads {
                let base = (b * self.heads + hd) * seq * seq;
                for s in 0..seq {
                    let r = b * seq + s;
                    let dp: Vec<f64> = (0..=s)
                        .map(|u| {
                            (0..d)
                                .map(|e| do_.at(r, hd * d + e) * t.v.at(b * seq + u, hd * d + e))
                                .sum()
                        })
                        .collect();
                    let p = &t.probs[base + s * seq..base + s * seq + s + 1];
                    let inner: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
                    for u in 0..=s {
                        let ds = p[u] * (dp[u] - inner) * scale;
                        let ru = b * seq + u;
                        for e in 0..d {
                            let c = hd * d + e;
                            *dq.at_mut(r, c) += ds * t.k.at(ru, c);
                            *dk.at_mut(ru, c) += ds * t.q.at(r, c);
                            *dv.at_mut(ru, c) += p[u] * do_.at(r, c);
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

/// Named flattened gradients, one entry per full (unsharded) parameter.
pub fn flat(g: &RefGrads) -> Vec<(String, Vec<f64>)> {
    let mut out = vec![
        ("embed".to_string(), g.embed.data.clone()),
        ("pos".to_string(), g.pos.data.clone()),
    ];
    for (i, l) in g.layers.iter().enumerate() {
        out.push((format!("layers.{i}.attn_norm"), l.g1.clone()));
        out.push((format!("layers.{i}.attn.wq"), l.wq.data.clone()));
        out.push((format!("layers.{i}.attn.wk"), l.wk.data.clone()));
        out.push((format!("layers.{i}.attn.wv"), l.wv.data.clone()));
        out.push((format!("layers.{i}.attn.wo"), l.wo.data.clone()));
        out.push((format!("layers.{i}.mlp_norm"), l.g2.clone()));
        out.push((format!("layers.{i}.mlp.up"), l.up.data.clone()));
        out.push((format!("layers.{i}.mlp.down"), l.down.data.clone()));
    }
    out.push(("final_norm".to_string(), g.gf.clone()));
    out.push(("head".to_string(), g.head.data.clone()));
    out
}
