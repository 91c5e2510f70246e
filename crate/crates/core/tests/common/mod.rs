//! Scalar reference implementations shared by the integration tests. They
//! are written from the textbook definitions with plain loops and never call
//! the library's tensor code paths.

#![allow(dead_code)]

use candle_core::Tensor;
use velvet_core::nn::{to_f64_vec, LayerNorm, Linear};

pub fn vals(t: &Tensor) -> Vec<f64> {
    to_f64_vec(t).unwrap()
}

/// Row-major matrix of `rows × cols`.
#[derive(Debug, Clone)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let d = t.dims();
        let cols = *d.last().unwrap();
        let data = vals(t);
        Self::new(data.len() / cols, cols, data)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

pub struct RefLinear {
    pub w: Mat,
    pub b: Option<Vec<f64>>,
}

impl RefLinear {
    pub fn of(l: &Linear) -> Self {
        Self { w: Mat::from_tensor(&l.weight), b: l.bias.as_ref().map(vals) }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.w.rows)
            .map(|o| {
                let mut s = self.b.as_ref().map_or(0.0, |b| b[o]);
                for (i, xi) in x.iter().enumerate() {
                    s += self.w.at(o, i) * xi;
                }
                s
            })
            .collect()
    }
}

pub struct RefNorm {
    pub g: Vec<f64>,
    pub b: Vec<f64>,
    pub eps: f64,
}

impl RefNorm {
    pub fn of(n: &LayerNorm) -> Self {
        Self { g: vals(&n.gamma), b: vals(&n.beta), eps: n.eps }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = (var + self.eps).sqrt();
        x.iter().enumerate().map(|(i, v)| (v - mean) / sd * self.g[i] + self.b[i]).collect()
    }
}

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn ffn(fc1: &RefLinear, fc2: &RefLinear, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = fc1.apply(x).into_iter().map(gelu).collect();
    fc2.apply(&h)
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax restricted to `allowed` entries; the rest get weight 0.
pub fn masked_softmax(scores: &[f64], allowed: &[bool]) -> Vec<f64> {
    let m = scores.iter().zip(allowed).filter(|(_, &a)| a).map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().zip(allowed).map(|(s, &a)| if a { (s - m).exp() } else { 0.0 }).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Multi-head attention for one query row set against one key/value set.
/// `allowed(q, k)` decides visibility and `extra(h, q, k)` adds a bias.
pub fn mha(
    wq: &RefLinear,
    wk: &RefLinear,
    wv: &RefLinear,
    wo: &RefLinear,
    heads: usize,
    xq: &[Vec<f64>],
    xkv: &[Vec<f64>],
    allowed: impl Fn(usize, usize) -> bool,
    extra: impl Fn(usize, usize, usize) -> f64,
) -> Vec<Vec<f64>> {
    let q: Vec<Vec<f64>> = xq.iter().map(|x| wq.apply(x)).collect();
    let k: Vec<Vec<f64>> = xkv.iter().map(|x| wk.apply(x)).collect();
    let v: Vec<Vec<f64>> = xkv.iter().map(|x| wv.apply(x)).collect();
    let c = q[0].len();
    let hd = c / heads;
    let mut out = Vec::with_capacity(xq.len());
    for (qi, qrow) in q.iter().enumerate() {
        let mut merged = vec![0.0; c];
        for h in 0..heads {
            let r = h * hd..(h + 1) * hd;
            let scores: Vec<f64> = k
                .iter()
                .enumerate()
                .map(|(ki, krow)| dot(&qrow[r.clone()], &krow[r.clone()]) / (hd as f64).sqrt() + extra(h, qi, ki))
                .collect();
            let mask: Vec<bool> = (0..k.len()).map(|ki| allowed(qi, ki)).collect();
            let p = masked_softmax(&scores, &mask);
            for (ki, vrow) in v.iter().enumerate() {
                for d in r.clone() {
                    merged[d] += p[ki] * vrow[d];
                }
            }
        }
        out.push(wo.apply(&merged));
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let m = Mat::from_tensor(t);
    (0..m.rows).map(|r| m.row(r).to_vec()).collect()
}

/// 0-based rank of item `target` after a stable descending sort.
pub fn sorted_rank(scores: &[f64], target: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    order.iter().position(|&i| i == target).unwrap()
}

/// Recall@K in both directions by explicit sorting. `sim[i * n + j]` scores
/// scan `i` against report `j`.
pub fn brute_force_recall(sim: &[f64], n: usize, ks: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let s2r: Vec<usize> = (0..n).map(|i| sorted_rank(&sim[i * n..(i + 1) * n], i)).collect();
    let r2s: Vec<usize> = (0..n)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| sim[i * n + j]).collect();
            sorted_rank(&col, j)
        })
        .collect();
    let frac = |r: &[usize], k: usize| r.iter().filter(|&&x| x < k).count() as f64 / n as f64;
    (ks.iter().map(|&k| frac(&s2r, k)).collect(), ks.iter().map(|&k| frac(&r2s, k)).collect())
}
