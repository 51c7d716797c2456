//! Reference implementations used by the integration tests. Nothing here
//! calls into the library's algorithms; everything is plain loops in f64.

#![allow(dead_code)]

use draft_attention::{LatentLayout, Matrix, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Scalar>(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::from_f64(rng.gen_range(lo..hi)))
}

pub fn to_f64<T: Scalar>(m: &Matrix<T>) -> Vec<Vec<f64>> {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|x| x.as_f64()).collect())
        .collect()
}

/// Token order obtained by sorting on (frame, patch row, patch col, row in
/// patch, col in patch).
pub fn reorder_by_sort(frames: usize, h: usize, w: usize, ph: usize, pw: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..frames * h * w).collect();
    idx.sort_by_key(|&i| {
        let f = i / (h * w);
        let y = (i % (h * w)) / w;
        let x = i % w;
        (f, y / ph, x / pw, y % ph, x % pw)
    });
    idx
}

/// Row softmax with `None` entries treated as -inf; an all-`None` row gives
/// zeros.
pub fn masked_softmax_row(row: &[Option<f64>]) -> Vec<f64> {
    let m = row.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        return vec![0.0; row.len()];
    }
    let e: Vec<f64> = row.iter().map(|x| x.map_or(0.0, |x| (x - m).exp())).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Dense attention where `keep(u, v) == false` removes the pair entirely.
pub fn attention_oracle(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    scale: f64,
    keep: impl Fn(usize, usize) -> bool,
) -> Vec<Vec<f64>> {
    let n = q.len();
    let dv = v[0].len();
    (0..n)
        .map(|u| {
            let row: Vec<Option<f64>> = (0..k.len())
                .map(|j| {
                    keep(u, j).then(|| {
                        scale * q[u].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>()
                    })
                })
                .collect();
            let p = masked_softmax_row(&row);
            (0..dv)
                .map(|c| p.iter().zip(v).map(|(w, vr)| w * vr[c]).sum())
                .collect()
        })
        .collect()
}

pub fn max_abs_diff<T: Scalar>(a: &Matrix<T>, b: &[Vec<f64>]) -> f64 {
    let mut m = 0.0f64;
    for (r, row) in b.iter().enumerate() {
        for (c, &x) in row.iter().enumerate() {
            m = m.max((a.get(r, c).as_f64() - x).abs());
        }
    }
    m
}

/// Unscaled logits in f64.
pub fn logits_oracle(q: &[Vec<f64>], k: &[Vec<f64>]) -> Vec<Vec<f64>> {
    q.iter()
        .map(|qu| k.iter().map(|kv| qu.iter().zip(kv).map(|(a, b)| a * b).sum()).collect())
        .collect()
}

/// `p x p` block means of an `n x n` matrix whose rows are in reordered order.
pub fn block_means(s: &[Vec<f64>], p: usize) -> Vec<Vec<f64>> {
    let g = s.len() / p;
    (0..g)
        .map(|i| {
            (0..g)
                .map(|j| {
                    let mut acc = 0.0;
                    for u in i * p..(i + 1) * p {
                        for v in j * p..(j + 1) * p {
                            acc += s[u][v];
                        }
                    }
                    acc / (p * p) as f64
                })
                .collect()
        })
        .collect()
}

/// Every tiled layout of the acceptance grid for a given patch.
pub fn layout_grid(ph: usize, pw: usize) -> Vec<LatentLayout> {
    let mut out = Vec::new();
    for frames in [1, 2, 3] {
        for gh in [1, 2, 4] {
            for gw in [1, 2, 4] {
                out.push(LatentLayout::new(frames, gh * ph, gw * pw, ph, pw).unwrap());
            }
        }
    }
    out
}
