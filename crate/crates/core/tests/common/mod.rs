//! Independent reference implementations used as test oracles. Each is the
//! most direct loop form of its operation and shares no code with the
//! library kernels.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flexinet_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn random_tensor_f32(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0))
}

/// Nested-loop dense convolution with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, (usize, usize)) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for o in 0..cout {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(0.0, |bs| bs[o]);
                    for i in 0..cin {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xo * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * cin + i) * h + iy as usize) * w + ix as usize];
                                let wv = wt[((o * cin + i) * kh + dy) * kw + dx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * cout + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, (oh, ow))
}

/// Nested-loop depthwise convolution: channel `c` uses only filter `c`.
pub fn naive_depthwise(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * c * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let iy = (y * stride + dy) as isize - pad as isize;
                            let ix = (xo * stride + dx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += x[((b * c + ch) * h + iy as usize) * w + ix as usize]
                                    * wt[(ch * k + dy) * k + dx];
                            }
                        }
                    }
                    out[((b * c + ch) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

/// Full-convolution weight equivalent to depthwise `dw` (`C,1,K,K`)
/// followed by pointwise `pw` (`O,C,1,1`): `W[o,c,:,:] = pw[o,c] * dw[c,:,:]`.
pub fn expand_separable(dw: &[f64], pw: &[f64], c: usize, o: usize, k: usize) -> Vec<f64> {
    let mut w = vec![0.0; o * c * k * k];
    for oo in 0..o {
        for cc in 0..c {
            for t in 0..k * k {
                w[(oo * c + cc) * k * k + t] = pw[oo * c + cc] * dw[cc * k * k + t];
            }
        }
    }
    w
}

/// O(n·m) linear convolution, truncated to `x.len()`.
pub fn direct_convolution(x: &[f32], h: &[f32]) -> Vec<f64> {
    (0..x.len())
        .map(|n| {
            let mut acc = 0.0f64;
            for (k, &hk) in h.iter().enumerate() {
                if k > n {
                    break;
                }
                acc += hk as f64 * x[n - k] as f64;
            }
            acc
        })
        .collect()
}

/// Mean and population standard deviation of every `(n, f)` row of an
/// `N x C x F x T` map, taken over `(C, T)`.
pub fn freq_stats(x: &[f32], (n, c, f, t): (usize, usize, usize, usize)) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n * f);
    for b in 0..n {
        for fb in 0..f {
            let mut vals = Vec::with_capacity(c * t);
            for ch in 0..c {
                for tt in 0..t {
                    vals.push(x[((b * c + ch) * f + fb) * t + tt] as f64);
                }
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            out.push((m, v.sqrt()));
        }
    }
    out
}

/// Mean cross-entropy of `softmax(sum_k a_k L_k + beta)` computed with
/// explicit loops, for grid-search fusion oracles.
pub fn fusion_ce_loop(rows: &[Vec<f32>], labels: &[usize], alpha: &[f64], beta: &[f64], classes: usize) -> f64 {
    let k = alpha.len();
    let mut total = 0.0;
    for (row, &y) in rows.iter().zip(labels) {
        let h: Vec<f64> = (0..classes)
            .map(|i| (0..k).map(|t| alpha[t] * row[t * classes + i] as f64).sum::<f64>() + beta[i])
            .collect();
        let m = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + h.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - h[y];
    }
    total / rows.len() as f64
}

/// Nearest-centroid classifier on mean log-mel band profiles; returns
/// accuracy on `test` after fitting on `train`.
pub fn nearest_centroid(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)], classes: usize) -> f64 {
    let dim = train[0].0.len();
    let mut centroids = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (v, y) in train {
        counts[*y] += 1;
        for (c, x) in centroids[*y].iter_mut().zip(v) {
            *c += x;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let hits = test
        .iter()
        .filter(|(v, y)| {
            let best = (0..classes)
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a].iter().zip(v).map(|(c, x)| (c - x).powi(2)).sum();
                    let db: f64 = centroids[b].iter().zip(v).map(|(c, x)| (c - x).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            best == *y
        })
        .count();
    hits as f64 / test.len() as f64
}
