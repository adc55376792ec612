//! Slice-level forward and backward kernels. Shapes are validated by the
//! tape before these are called.

#[inline]
pub(super) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------- linear

/// `c = a · b` for row-major `a` `[m, n_inner]` and `b` `[n_inner, n]`,
/// each given with explicit row and column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, inner: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize, c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the strides describe the `m x inner`, `inner x n` and `m x n`
    // views of `a`, `b` and `c`, all of which lie inside the slices (the
    // callers pass buffers of exactly those sizes), and `c` does not alias
    // `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            inner,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `y[r, k] = b[k] + <x[r, :], w[k, :]>`
pub(super) fn linear_fwd(x: &[f64], w: &[f64], bias: Option<&[f64]>, f: usize, k: usize) -> Vec<f64> {
    let rows = x.len() / f;
    let mut y = vec![0.0; rows * k];
    gemm(rows, f, k, x, f as isize, 1, w, 1, f as isize, &mut y);
    if let Some(b) = bias {
        for yr in y.chunks_mut(k) {
            for (o, bv) in yr.iter_mut().zip(b) {
                *o += bv;
            }
        }
    }
    y
}

/// `dx = dy · w`
pub(super) fn linear_bwd_x(dy: &[f64], w: &[f64], f: usize, k: usize) -> Vec<f64> {
    let rows = dy.len() / k;
    let mut dx = vec![0.0; rows * f];
    gemm(rows, k, f, dy, k as isize, 1, w, f as isize, 1, &mut dx);
    dx
}

/// `dw = dyᵀ · x`
pub(super) fn linear_bwd_w(dy: &[f64], x: &[f64], f: usize, k: usize) -> Vec<f64> {
    let rows = dy.len() / k;
    let mut dw = vec![0.0; k * f];
    gemm(k, rows, f, dy, 1, k as isize, x, f as isize, 1, &mut dw);
    dw
}

/// Column sums of a `[rows, k]` buffer.
pub(super) fn col_sums(dy: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k];
    for row in dy.chunks(k) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

// ---------------------------------------------------------- activations

/// Returns `x * sigmoid(x)` and the sigmoid values for the backward pass.
pub(super) fn swish_fwd(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let sig: Vec<f64> = x.iter().map(|&v| sigmoid(v)).collect();
    let y = x.iter().zip(&sig).map(|(v, s)| v * s).collect();
    (y, sig)
}

pub(super) fn swish_bwd(x: &[f64], sig: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(sig)
        .zip(dy)
        .map(|((&v, &s), &g)| g * (s + v * s * (1.0 - s)))
        .collect()
}

/// `squash(s) = |s|^2 / (1 + |s|^2) * s / |s|`, exactly zero at the origin.
pub(super) fn squash_fwd(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, yr) in x.chunks(d).zip(out.chunks_mut(d)) {
        let n2 = dot(xr, xr);
        if n2 > 0.0 {
            let scale = n2.sqrt() / (1.0 + n2);
            for (y, v) in yr.iter_mut().zip(xr) {
                *y = scale * v;
            }
        }
    }
    out
}

pub(super) fn squash_bwd(x: &[f64], dy: &[f64], d: usize) -> Vec<f64> {
    // out = f(n2) s with f = sqrt(n2) / (1 + n2)
    // d out / d s = f I + 2 f'(n2) s s^T
    // 2 f' s (g.s) = s (g.s) / |s| * [1/(1+n2) - 2 n2/(1+n2)^2]
    let mut dx = vec![0.0; x.len()];
    for ((xr, gr), dr) in x.chunks(d).zip(dy.chunks(d)).zip(dx.chunks_mut(d)) {
        let n2 = dot(xr, xr);
        if n2 == 0.0 {
            continue;
        }
        let n = n2.sqrt();
        let inv1 = 1.0 / (1.0 + n2);
        let f = n * inv1;
        let gs = dot(gr, xr);
        let coeff = gs / n * (inv1 - 2.0 * n2 * inv1 * inv1);
        for ((o, &g), &s) in dr.iter_mut().zip(gr).zip(xr) {
            *o = f * g + coeff * s;
        }
    }
    dx
}

pub(super) fn softmax_fwd(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, yr) in x.chunks(d).zip(out.chunks_mut(d)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = (v - max).exp();
            total += *y;
        }
        for y in yr.iter_mut() {
            *y /= total;
        }
    }
    out
}

pub(super) fn softmax_bwd(y: &[f64], dy: &[f64], d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, gr), dr) in y.chunks(d).zip(dy.chunks(d)).zip(dx.chunks_mut(d)) {
        let inner = dot(yr, gr);
        for ((o, &yv), &g) in dr.iter_mut().zip(yr).zip(gr) {
            *o = yv * (g - inner);
        }
    }
    dx
}

/// Euclidean norm along the last axis.
pub(super) fn norm_fwd(x: &[f64], d: usize) -> Vec<f64> {
    x.chunks(d).map(|r| dot(r, r).sqrt()).collect()
}

pub(super) fn norm_bwd(x: &[f64], y: &[f64], dy: &[f64], d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for (((xr, &n), &g), dr) in x.chunks(d).zip(y).zip(dy).zip(dx.chunks_mut(d)) {
        if n > 0.0 {
            for (o, &v) in dr.iter_mut().zip(xr) {
                *o = g * v / n;
            }
        }
    }
    dx
}

// -------------------------------------------------------------- routing
//
// Shapes: couplings/logits [G, ci, cp], votes [G, ci, cp, d], parents [G, cp, d].

pub(super) struct VoteDims {
    pub groups: usize,
    pub children: usize,
    pub parents: usize,
    pub dim: usize,
}

impl VoteDims {
    fn parent_group(&self) -> usize {
        self.parents * self.dim
    }
    fn logit_group(&self) -> usize {
        self.children * self.parents
    }
}

/// `s[g, j, :] = sum_i k[g, i, j] v[g, i, j, :]`
pub(super) fn weighted_vote_sum_fwd(k: &[f64], v: &[f64], dims: &VoteDims) -> Vec<f64> {
    let VoteDims {
        groups,
        children,
        parents,
        dim,
    } = *dims;
    let mut s = vec![0.0; groups * parents * dim];
    for g in 0..groups {
        let sg = &mut s[g * dims.parent_group()..(g + 1) * dims.parent_group()];
        for i in 0..children {
            for j in 0..parents {
                let kij = k[(g * children + i) * parents + j];
                let off = ((g * children + i) * parents + j) * dim;
                axpy(kij, &v[off..off + dim], &mut sg[j * dim..(j + 1) * dim]);
            }
        }
    }
    s
}

pub(super) fn weighted_vote_sum_bwd(
    k: &[f64],
    v: &[f64],
    ds: &[f64],
    dims: &VoteDims,
) -> (Vec<f64>, Vec<f64>) {
    let VoteDims {
        groups,
        children,
        parents,
        dim,
    } = *dims;
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    for g in 0..groups {
        for i in 0..children {
            for j in 0..parents {
                let lk = (g * children + i) * parents + j;
                let off = lk * dim;
                let dsj = &ds[(g * parents + j) * dim..(g * parents + j + 1) * dim];
                dk[lk] = dot(dsj, &v[off..off + dim]);
                axpy(k[lk], dsj, &mut dv[off..off + dim]);
            }
        }
    }
    (dk, dv)
}

/// Per-pair agreement between a vote and its parent.
#[derive(Clone, Copy, Debug)]
pub(super) enum Agreement {
    DistanceSq,
    Dot,
    Cosine,
}

pub(super) fn agreement_fwd(v: &[f64], s: &[f64], dims: &VoteDims, kind: Agreement) -> Vec<f64> {
    let VoteDims {
        groups,
        children,
        parents,
        dim,
    } = *dims;
    let mut out = vec![0.0; groups * dims.logit_group()];
    for g in 0..groups {
        for i in 0..children {
            for j in 0..parents {
                let lk = (g * children + i) * parents + j;
                let vv = &v[lk * dim..(lk + 1) * dim];
                let sv = &s[(g * parents + j) * dim..(g * parents + j + 1) * dim];
                out[lk] = match kind {
                    Agreement::DistanceSq => vv
                        .iter()
                        .zip(sv)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum(),
                    Agreement::Dot => dot(vv, sv),
                    Agreement::Cosine => {
                        let nv = dot(vv, vv).sqrt();
                        let ns = dot(sv, sv).sqrt();
                        if nv > 0.0 && ns > 0.0 {
                            dot(vv, sv) / (nv * ns)
                        } else {
                            0.0
                        }
                    }
                };
            }
        }
    }
    out
}

pub(super) fn agreement_bwd(
    v: &[f64],
    s: &[f64],
    dout: &[f64],
    dims: &VoteDims,
    kind: Agreement,
) -> (Vec<f64>, Vec<f64>) {
    let VoteDims {
        groups,
        children,
        parents,
        dim,
    } = *dims;
    let mut dv = vec![0.0; v.len()];
    let mut ds = vec![0.0; s.len()];
    for g in 0..groups {
        for i in 0..children {
            for j in 0..parents {
                let lk = (g * children + i) * parents + j;
                let gval = dout[lk];
                if gval == 0.0 {
                    continue;
                }
                let vv = &v[lk * dim..(lk + 1) * dim];
                let so = (g * parents + j) * dim;
                let sv = &s[so..so + dim];
                let dvv = &mut dv[lk * dim..(lk + 1) * dim];
                let dsv = &mut ds[so..so + dim];
                match kind {
                    Agreement::DistanceSq => {
                        for t in 0..dim {
                            let diff = 2.0 * gval * (vv[t] - sv[t]);
                            dvv[t] += diff;
                            dsv[t] -= diff;
                        }
                    }
                    Agreement::Dot => {
                        axpy(gval, sv, dvv);
                        axpy(gval, vv, dsv);
                    }
                    Agreement::Cosine => {
                        let nv2 = dot(vv, vv);
                        let ns2 = dot(sv, sv);
                        if nv2 > 0.0 && ns2 > 0.0 {
                            let inv = 1.0 / (nv2.sqrt() * ns2.sqrt());
                            let c = dot(vv, sv) * inv;
                            for t in 0..dim {
                                dvv[t] += gval * (sv[t] * inv - c * vv[t] / nv2);
                                dsv[t] += gval * (vv[t] * inv - c * sv[t] / ns2);
                            }
                        }
                    }
                }
            }
        }
    }
    (dv, ds)
}

/// `v[g, i, j, :] = W[i, j] u[g, i, :]` with `W` stored `[ci, a, dout, din]`.
pub(super) fn caps_transform_fwd(
    u: &[f64],
    w: &[f64],
    groups: usize,
    ci: usize,
    a: usize,
    dout: usize,
    din: usize,
) -> Vec<f64> {
    let mut v = vec![0.0; groups * ci * a * dout];
    for g in 0..groups {
        for i in 0..ci {
            let ur = &u[(g * ci + i) * din..(g * ci + i + 1) * din];
            for j in 0..a {
                for o in 0..dout {
                    let wrow = ((i * a + j) * dout + o) * din;
                    v[((g * ci + i) * a + j) * dout + o] = dot(&w[wrow..wrow + din], ur);
                }
            }
        }
    }
    v
}

#[allow(clippy::too_many_arguments)]
pub(super) fn caps_transform_bwd(
    u: &[f64],
    w: &[f64],
    dv: &[f64],
    groups: usize,
    ci: usize,
    a: usize,
    dout: usize,
    din: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut du = vec![0.0; u.len()];
    let mut dw = vec![0.0; w.len()];
    for g in 0..groups {
        for i in 0..ci {
            let uo = (g * ci + i) * din;
            for j in 0..a {
                for o in 0..dout {
                    let gval = dv[((g * ci + i) * a + j) * dout + o];
                    if gval == 0.0 {
                        continue;
                    }
                    let wrow = ((i * a + j) * dout + o) * din;
                    axpy(gval, &w[wrow..wrow + din], &mut du[uo..uo + din]);
                    axpy(gval, &u[uo..uo + din], &mut dw[wrow..wrow + din]);
                }
            }
        }
    }
    (du, dw)
}

// ----------------------------------------------------------- batch norm

pub(super) struct BnForward {
    pub y: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Normalises each channel of a `[rows, c]` buffer with its batch statistics.
pub(super) fn bn_train_fwd(x: &[f64], gamma: &[f64], beta: &[f64], c: usize, eps: f64) -> BnForward {
    let rows = x.len() / c;
    let m = rows as f64;
    let mut mean = vec![0.0; c];
    for row in x.chunks(c) {
        for (mu, v) in mean.iter_mut().zip(row) {
            *mu += v;
        }
    }
    mean.iter_mut().for_each(|mu| *mu /= m);
    let mut var = vec![0.0; c];
    for row in x.chunks(c) {
        for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - mu) * (v - mu);
        }
    }
    var.iter_mut().for_each(|s| *s /= m);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (y, xhat) = bn_apply(x, gamma, beta, &mean, &inv_std, c);
    BnForward {
        y,
        xhat,
        inv_std,
        mean,
        var,
    }
}

pub(super) fn bn_apply(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    inv_std: &[f64],
    c: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for ((xr, hr), yr) in x.chunks(c).zip(xhat.chunks_mut(c)).zip(y.chunks_mut(c)) {
        for ch in 0..c {
            hr[ch] = (xr[ch] - mean[ch]) * inv_std[ch];
            yr[ch] = gamma[ch] * hr[ch] + beta[ch];
        }
    }
    (y, xhat)
}

/// Returns `(dx, dgamma, dbeta)`; `batch_stats` selects whether the mean
/// and variance depend on `x`.
pub(super) fn bn_bwd(
    dy: &[f64],
    xhat: &[f64],
    gamma: &[f64],
    inv_std: &[f64],
    c: usize,
    batch_stats: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = dy.len() / c;
    let m = rows as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (gr, hr) in dy.chunks(c).zip(xhat.chunks(c)) {
        for ch in 0..c {
            dgamma[ch] += gr[ch] * hr[ch];
            dbeta[ch] += gr[ch];
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for ((gr, hr), dr) in dy.chunks(c).zip(xhat.chunks(c)).zip(dx.chunks_mut(c)) {
        for ch in 0..c {
            let dxhat = gr[ch] * gamma[ch];
            dr[ch] = if batch_stats {
                // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                inv_std[ch] / m * (m * dxhat - gamma[ch] * dbeta[ch] - hr[ch] * gamma[ch] * dgamma[ch])
            } else {
                dxhat * inv_std[ch]
            };
        }
    }
    (dx, dgamma, dbeta)
}

// --------------------------------------------------------------- losses

pub(super) struct ChamferForward {
    pub value: f64,
    pub nn_xy: Vec<usize>,
    pub nn_yx: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Mean over the batch of the symmetric Chamfer distance. Nearest-neighbour
/// ties resolve to the lowest index.
pub(super) fn chamfer_fwd(x: &[f64], y: &[f64], batch: usize, n: usize, m: usize, d: usize) -> ChamferForward {
    let mut nn_xy = vec![0; batch * n];
    let mut nn_yx = vec![0; batch * m];
    let mut total = 0.0;
    for b in 0..batch {
        let xb = &x[b * n * d..(b + 1) * n * d];
        let yb = &y[b * m * d..(b + 1) * m * d];
        let mut best_y = vec![f64::INFINITY; m];
        let mut sum_x = 0.0;
        for i in 0..n {
            let xi = &xb[i * d..(i + 1) * d];
            let mut best = f64::INFINITY;
            let mut arg = 0;
            for j in 0..m {
                let dist = sq_dist(xi, &yb[j * d..(j + 1) * d]);
                if dist < best {
                    best = dist;
                    arg = j;
                }
                if dist < best_y[j] {
                    best_y[j] = dist;
                    nn_yx[b * m + j] = i;
                }
            }
            nn_xy[b * n + i] = arg;
            sum_x += best;
        }
        let sum_y: f64 = best_y.iter().sum();
        total += sum_x / n as f64 + sum_y / m as f64;
    }
    ChamferForward {
        value: total / batch as f64,
        nn_xy,
        nn_yx,
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn chamfer_bwd(
    x: &[f64],
    y: &[f64],
    nn_xy: &[usize],
    nn_yx: &[usize],
    g: f64,
    batch: usize,
    n: usize,
    m: usize,
    d: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dy = vec![0.0; y.len()];
    let gb = g / batch as f64;
    for b in 0..batch {
        let cx = 2.0 * gb / n as f64;
        for i in 0..n {
            let xi = (b * n + i) * d;
            let yj = (b * m + nn_xy[b * n + i]) * d;
            for t in 0..d {
                let diff = cx * (x[xi + t] - y[yj + t]);
                dx[xi + t] += diff;
                dy[yj + t] -= diff;
            }
        }
        let cy = 2.0 * gb / m as f64;
        for j in 0..m {
            let yj = (b * m + j) * d;
            let xi = (b * n + nn_yx[b * m + j]) * d;
            for t in 0..d {
                let diff = cy * (y[yj + t] - x[xi + t]);
                dy[yj + t] += diff;
                dx[xi + t] -= diff;
            }
        }
    }
    (dx, dy)
}

pub(super) struct MarginParams {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

/// Per-class hinge-squared loss summed over classes, averaged over rows.
pub(super) fn margin_fwd(lengths: &[f64], labels: &[usize], a: usize, p: &MarginParams) -> f64 {
    let rows = lengths.len() / a;
    let mut total = 0.0;
    for (r, row) in lengths.chunks(a).enumerate() {
        for (k, &l) in row.iter().enumerate() {
            total += if k == labels[r] {
                (p.m_plus - l).max(0.0).powi(2)
            } else {
                p.lambda * (l - p.m_minus).max(0.0).powi(2)
            };
        }
    }
    total / rows as f64
}

pub(super) fn margin_bwd(lengths: &[f64], labels: &[usize], a: usize, p: &MarginParams, g: f64) -> Vec<f64> {
    let rows = lengths.len() / a;
    let scale = g / rows as f64;
    let mut out = vec![0.0; lengths.len()];
    for (r, (row, orow)) in lengths.chunks(a).zip(out.chunks_mut(a)).enumerate() {
        for (k, (&l, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
            *o = scale
                * if k == labels[r] {
                    -2.0 * (p.m_plus - l).max(0.0)
                } else {
                    2.0 * p.lambda * (l - p.m_minus).max(0.0)
                };
        }
    }
    out
}
