use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use super::linalg::{add_col_sums, affine, gemm, Matrix};
use super::weights::HeadWeights;
use crate::error::{Error, Result};
use crate::math;

/// A labelled set of edge tokens. Rows of `features` are raw edge feature
/// vectors; `groups` partitions the rows into contiguous per-source runs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub features: Matrix,
    pub groups: Vec<Range<usize>>,
    pub labels: Vec<f64>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.features.rows
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows == 0
    }
}

/// Contiguous group ranges from per-row group ids. Rows with the same id must
/// be adjacent.
pub fn groups_from_ids<T: PartialEq>(ids: &[T]) -> Result<Vec<Range<usize>>> {
    let mut out: Vec<Range<usize>> = Vec::new();
    let mut start = 0;
    for i in 1..=ids.len() {
        if i == ids.len() || ids[i] != ids[start] {
            if out.iter().any(|r| ids[r.start] == ids[start]) {
                return Err(Error::arg("group rows are not contiguous"));
            }
            out.push(start..i);
            start = i;
        }
    }
    Ok(out)
}

pub(crate) fn check_inputs(w: &HeadWeights, x: &Matrix, groups: &[Range<usize>]) -> Result<()> {
    if x.cols != w.shape.input {
        return Err(Error::arg(format!(
            "feature width {} does not match head input {}",
            x.cols, w.shape.input
        )));
    }
    if x.rows == 0 {
        return Err(Error::arg("empty batch"));
    }
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("non-finite edge features"));
    }
    let mut next = 0;
    for g in groups {
        if g.start != next || g.end <= g.start {
            return Err(Error::arg("groups must be non-empty contiguous runs"));
        }
        next = g.end;
    }
    if next != x.rows {
        return Err(Error::arg("groups do not cover every token"));
    }
    Ok(())
}

/// Intermediate activations kept for the backward pass.
pub(crate) struct Cache {
    h: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Attention matrices, indexed `[group][head]`, each `g x g` row-major.
    attn: Vec<Vec<Vec<f64>>>,
    c: Matrix,
    r: Matrix,
    z1: Matrix,
    m: Matrix,
    pub(crate) logits: Vec<f64>,
}

pub(crate) fn forward_cached(w: &HeadWeights, x: &Matrix, groups: &[Range<usize>]) -> Cache {
    let d = w.shape.hidden;
    let heads = w.shape.heads;
    let dh = w.shape.head_dim();
    let scale = 1.0 / math::sqrt(dh as f64);
    let lambda = w.lambda_comp();

    let h = affine(x, &w.proj_w, &w.proj_b);
    let q = affine(&h, &w.q_w, &w.q_b);
    let k = affine(&h, &w.k_w, &w.k_b);
    let v = affine(&h, &w.v_w, &w.v_b);

    let mut c = Matrix::zeros(x.rows, d);
    let mut attn = Vec::with_capacity(groups.len());
    for g in groups {
        let n = g.len();
        let mut per_head = Vec::with_capacity(heads);
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                let qi = &q.row(g.start + i)[cols.clone()];
                let row = &mut a[i * n..(i + 1) * n];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &k.row(g.start + j)[cols.clone()];
                    let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    *s = dot * scale - if i == j { 0.0 } else { lambda };
                }
                softmax_in_place(row);
            }
            for i in 0..n {
                let out = &mut c.data[(g.start + i) * d + cols.start..(g.start + i) * d + cols.end];
                for j in 0..n {
                    let aij = a[i * n + j];
                    let vj = &v.row(g.start + j)[cols.clone()];
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += aij * vv;
                    }
                }
            }
            per_head.push(a);
        }
        attn.push(per_head);
    }

    let o = affine(&c, &w.o_w, &w.o_b);
    let mut r = h.clone();
    for (a, b) in r.data.iter_mut().zip(&o.data) {
        *a += b;
    }
    let z1 = affine(&r, &w.fc1_w, &w.fc1_b);
    let mut m = z1.clone();
    for v in &mut m.data {
        *v = v.max(0.0);
    }
    let logits = affine(&m, &w.fc2_w, &w.fc2_b).data;
    Cache {
        h,
        q,
        k,
        v,
        attn,
        c,
        r,
        z1,
        m,
        logits,
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in row.iter_mut() {
        *s = math::exp(*s - max);
        sum += *s;
    }
    for s in row.iter_mut() {
        *s /= sum;
    }
}

/// Edge logits. Tokens attend only to tokens of their own group.
pub fn forward(w: &HeadWeights, features: &Matrix, groups: &[Range<usize>]) -> Result<Vec<f64>> {
    check_inputs(w, features, groups)?;
    Ok(forward_cached(w, features, groups).logits)
}

/// Attention matrices indexed `[group][head]`, each `g x g`.
pub fn attention_maps(
    w: &HeadWeights,
    features: &Matrix,
    groups: &[Range<usize>],
) -> Result<Vec<Vec<Matrix>>> {
    check_inputs(w, features, groups)?;
    let cache = forward_cached(w, features, groups);
    Ok(cache
        .attn
        .into_iter()
        .zip(groups)
        .map(|(heads, g)| {
            heads
                .into_iter()
                .map(|a| Matrix::from_vec(g.len(), g.len(), a))
                .collect()
        })
        .collect())
}

/// Numerically stable binary cross-entropy on a logit.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + math::ln_1p(math::exp(-z.abs()))
}

/// Mean binary cross-entropy and its gradient with respect to every parameter.
pub fn loss_and_grad(w: &HeadWeights, batch: &TrainBatch) -> Result<(f64, HeadWeights)> {
    check_inputs(w, &batch.features, &batch.groups)?;
    if batch.labels.len() != batch.features.rows {
        return Err(Error::arg("labels are not aligned with tokens"));
    }
    if batch.labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::arg("labels must be 0 or 1"));
    }
    let cache = forward_cached(w, &batch.features, &batch.groups);
    let n = batch.features.rows as f64;
    let loss = cache
        .logits
        .iter()
        .zip(&batch.labels)
        .map(|(&z, &y)| bce_with_logit(z, y))
        .sum::<f64>()
        / n;
    let dlogits: Vec<f64> = cache
        .logits
        .iter()
        .zip(&batch.labels)
        .map(|(&z, &y)| (math::sigmoid(z) - y) / n)
        .collect();
    Ok((loss, backward(w, &batch.features, &batch.groups, &cache, &dlogits)))
}

fn backward(
    w: &HeadWeights,
    x: &Matrix,
    groups: &[Range<usize>],
    cache: &Cache,
    dlogits: &[f64],
) -> HeadWeights {
    let rows = x.rows;
    let d = w.shape.hidden;
    let mh = w.shape.mlp_hidden;
    let heads = w.shape.heads;
    let dh = w.shape.head_dim();
    let scale = 1.0 / math::sqrt(dh as f64);
    let mut g = HeadWeights::zeros(w.shape).expect("shape was validated on construction");
    g.lambda.data[0] = 0.0;

    // MLP.
    let dl = Matrix::from_vec(rows, 1, dlogits.to_vec());
    gemm(1.0, &cache.m, true, &dl, false, 0.0, &mut g.fc2_w);
    g.fc2_b.data[0] = dlogits.iter().sum();
    let mut dz1 = Matrix::zeros(rows, mh);
    gemm(1.0, &dl, false, &w.fc2_w, true, 0.0, &mut dz1);
    for (dv, z) in dz1.data.iter_mut().zip(&cache.z1.data) {
        if *z <= 0.0 {
            *dv = 0.0;
        }
    }
    gemm(1.0, &cache.r, true, &dz1, false, 0.0, &mut g.fc1_w);
    add_col_sums(&dz1, &mut g.fc1_b);
    let mut dr = Matrix::zeros(rows, d);
    gemm(1.0, &dz1, false, &w.fc1_w, true, 0.0, &mut dr);

    // Output projection; the residual passes `dr` straight to `h`.
    gemm(1.0, &cache.c, true, &dr, false, 0.0, &mut g.o_w);
    add_col_sums(&dr, &mut g.o_b);
    let mut dc = Matrix::zeros(rows, d);
    gemm(1.0, &dr, false, &w.o_w, true, 0.0, &mut dc);

    // Attention.
    let (q, k, v) = (&cache.q, &cache.k, &cache.v);
    let mut dq = Matrix::zeros(rows, d);
    let mut dk = Matrix::zeros(rows, d);
    let mut dv = Matrix::zeros(rows, d);
    let mut dlambda = 0.0;
    for (gi, grp) in groups.iter().enumerate() {
        let n = grp.len();
        let s0 = grp.start;
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            let a = &cache.attn[gi][hd];
            let mut ds = vec![0.0; n * n];
            for i in 0..n {
                let dci = &dc.row(s0 + i)[cols.clone()];
                let mut weighted = 0.0;
                for j in 0..n {
                    let vj = &v.row(s0 + j)[cols.clone()];
                    let da: f64 = dci.iter().zip(vj).map(|(p, q)| p * q).sum();
                    ds[i * n + j] = da;
                    weighted += a[i * n + j] * da;
                }
                for j in 0..n {
                    ds[i * n + j] = a[i * n + j] * (ds[i * n + j] - weighted);
                    if i != j {
                        dlambda -= ds[i * n + j];
                    }
                }
            }
            for i in 0..n {
                for j in 0..n {
                    let aij = a[i * n + j];
                    let sij = ds[i * n + j] * scale;
                    let ri = (s0 + i) * d;
                    let rj = (s0 + j) * d;
                    for c in cols.clone() {
                        dv.data[rj + c] += aij * dc.data[ri + c];
                        dq.data[ri + c] += sij * k.data[rj + c];
                        dk.data[rj + c] += sij * q.data[ri + c];
                    }
                }
            }
        }
    }
    g.lambda.data[0] = dlambda;

    let h = &cache.h;
    let mut dh_total = dr;
    for (dm, wm, gw, gb) in [
        (&dq, &w.q_w, &mut g.q_w, &mut g.q_b),
        (&dk, &w.k_w, &mut g.k_w, &mut g.k_b),
        (&dv, &w.v_w, &mut g.v_w, &mut g.v_b),
    ] {
        gemm(1.0, h, true, dm, false, 0.0, gw);
        add_col_sums(dm, gb);
        gemm(1.0, dm, false, wm, true, 1.0, &mut dh_total);
    }

    gemm(1.0, x, true, &dh_total, false, 0.0, &mut g.proj_w);
    add_col_sums(&dh_total, &mut g.proj_b);
    g
}
