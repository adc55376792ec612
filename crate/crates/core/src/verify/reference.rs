//! Plain-loop oracles. Nothing here calls into the tape or its kernels;
//! every function is written directly from the textbook definition with
//! nested `Vec`s so that it can be read line by line.

use crate::routing::RoutingKind;

pub type Matrix = Vec<Vec<f64>>;

/// `s · (|s|² / (1 + |s|²)) / |s|`, and the zero vector at the origin.
pub fn squash(s: &[f64]) -> Vec<f64> {
    let mut norm_sq = 0.0;
    for v in s {
        norm_sq += v * v;
    }
    if norm_sq == 0.0 {
        return vec![0.0; s.len()];
    }
    let norm = norm_sq.sqrt();
    let gain = norm_sq / (1.0 + norm_sq);
    s.iter().map(|v| gain * v / norm).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let mut total = 0.0;
    for e in &exps {
        total += e;
    }
    exps.iter().map(|e| e / total).collect()
}

/// Output of [`route`]: parents `[cp][d]`, logits and couplings `[ci][cp]`.
#[derive(Clone, Debug)]
pub struct Routed {
    pub parents: Matrix,
    pub logits: Matrix,
    pub couplings: Matrix,
}

/// Routing by agreement for votes `[ci][cp][d]`, one iteration per pass of
/// the outer loop:
///
/// ```text
/// b_ij <- 0
/// repeat r times:
///     k_i  <- softmax(b_i)
///     s_j  <- sum_i k_ij v_j|i
///     v_j  <- squash(s_j)
///     b_ij <- b_ij - |v_j|i - v_j|^2      (Euclidean)
///     b_ij <- b_ij + <v_j|i, v_j>         (dynamic)
/// ```
pub fn route(votes: &[Vec<Vec<f64>>], iterations: usize, kind: RoutingKind) -> Routed {
    let ci = votes.len();
    let cp = votes[0].len();
    let d = votes[0][0].len();

    let mut b = vec![vec![0.0; cp]; ci];
    let mut k = vec![vec![0.0; cp]; ci];
    let mut parents = vec![vec![0.0; d]; cp];

    for _ in 0..iterations {
        for i in 0..ci {
            k[i] = softmax(&b[i]);
        }
        for j in 0..cp {
            let mut s = vec![0.0; d];
            for i in 0..ci {
                for t in 0..d {
                    s[t] += k[i][j] * votes[i][j][t];
                }
            }
            parents[j] = squash(&s);
        }
        for i in 0..ci {
            for j in 0..cp {
                match kind {
                    RoutingKind::Euclidean => {
                        let mut dist = 0.0;
                        for t in 0..d {
                            let diff = votes[i][j][t] - parents[j][t];
                            dist += diff * diff;
                        }
                        b[i][j] -= dist;
                    }
                    RoutingKind::Dynamic => {
                        let mut dot = 0.0;
                        for t in 0..d {
                            dot += votes[i][j][t] * parents[j][t];
                        }
                        b[i][j] += dot;
                    }
                }
            }
        }
    }
    Routed {
        parents,
        logits: b,
        couplings: k,
    }
}

/// Splits a flat row-major `[ci, cp, d]` buffer into nested votes.
pub fn nest_votes(flat: &[f64], ci: usize, cp: usize, d: usize) -> Vec<Vec<Vec<f64>>> {
    (0..ci)
        .map(|i| {
            (0..cp)
                .map(|j| (0..d).map(|t| flat[(i * cp + j) * d + t]).collect())
                .collect()
        })
        .collect()
}

pub fn flatten(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().flat_map(|r| r.iter().copied()).collect()
}

/// Each row of `x` `[R][F]` against each kernel `[K][F]`, giving `[R][K]`.
pub fn conv_rows(x: &[Vec<f64>], kernels: &[Vec<f64>], bias: Option<&[f64]>) -> Matrix {
    let mut out = vec![vec![0.0; kernels.len()]; x.len()];
    for (r, row) in x.iter().enumerate() {
        for (k, kernel) in kernels.iter().enumerate() {
            let mut acc = 0.0;
            for f in 0..row.len() {
                acc += row[f] * kernel[f];
            }
            if let Some(b) = bias {
                acc += b[k];
            }
            out[r][k] = acc;
        }
    }
    out
}

/// Valid sliding-window convolution of a 1D signal with kernels `[K][n]`,
/// giving `[positions][K]`.
pub fn sliding_conv(signal: &[f64], kernels: &[Vec<f64>], stride: usize) -> Matrix {
    let n = kernels[0].len();
    let mut out = Vec::new();
    let mut start = 0;
    while start + n <= signal.len() {
        let mut row = Vec::with_capacity(kernels.len());
        for kernel in kernels {
            let mut acc = 0.0;
            for t in 0..n {
                acc += signal[start + t] * kernel[t];
            }
            row.push(acc);
        }
        out.push(row);
        start += stride;
    }
    out
}

/// Transposed convolution along the width: input `[W][C_in]`, kernels
/// `[k][C_out][C_in]`. Every input column scatters `k` output columns
/// starting at `w · stride`; overlaps accumulate.
pub fn deconv(x: &[Vec<f64>], kernels: &[Vec<Vec<f64>>], stride: usize) -> Matrix {
    let k = kernels.len();
    let c_out = kernels[0].len();
    let width = (x.len() - 1) * stride + k;
    let mut out = vec![vec![0.0; c_out]; width];
    for (w, column) in x.iter().enumerate() {
        for t in 0..k {
            for o in 0..c_out {
                for (c, &xv) in column.iter().enumerate() {
                    out[w * stride + t][o] += kernels[t][o][c] * xv;
                }
            }
        }
    }
    out
}

/// Exhaustive symmetric Chamfer distance.
pub fn chamfer(x: &[[f64; 3]], y: &[[f64; 3]]) -> f64 {
    let nearest = |p: &[f64; 3], set: &[[f64; 3]]| {
        let mut best = f64::INFINITY;
        for q in set {
            let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
            if d < best {
                best = d;
            }
        }
        best
    };
    let forward: f64 = x.iter().map(|p| nearest(p, y)).sum::<f64>() / x.len() as f64;
    let backward: f64 = y.iter().map(|q| nearest(q, x)).sum::<f64>() / y.len() as f64;
    forward + backward
}

/// Margin loss of one sample.
pub fn margin(lengths: &[f64], label: usize, m_plus: f64, m_minus: f64, lambda: f64) -> f64 {
    let mut total = 0.0;
    for (k, &l) in lengths.iter().enumerate() {
        if k == label {
            let gap = (m_plus - l).max(0.0);
            total += gap * gap;
        } else {
            let gap = (l - m_minus).max(0.0);
            total += lambda * gap * gap;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squash_of_unit_vector_halves_it() {
        assert_eq!(squash(&[0.0, 1.0]), vec![0.0, 0.5]);
        assert_eq!(squash(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn deconv_with_overlap_accumulates() {
        // k = 2, stride 1: the middle output column receives both inputs.
        let x = vec![vec![1.0], vec![2.0]];
        let kernels = vec![vec![vec![1.0]], vec![vec![10.0]]];
        assert_eq!(deconv(&x, &kernels, 1), vec![vec![1.0], vec![12.0], vec![20.0]]);
    }

    #[test]
    fn sliding_conv_positions() {
        let out = sliding_conv(&[1.0, 2.0, 3.0, 4.0], &[vec![1.0, 1.0]], 2);
        assert_eq!(out, vec![vec![3.0], vec![7.0]]);
    }

    #[test]
    fn single_pass_routing_is_uniform() {
        let votes = nest_votes(&[1.0, 0.0, 0.0, 1.0], 1, 2, 2);
        let r = route(&votes, 1, RoutingKind::Dynamic);
        assert_eq!(r.couplings, vec![vec![0.5, 0.5]]);
    }
}
