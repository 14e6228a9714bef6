//! Dense kernels with explicit backward passes. All matrices are row-major
//! unless a stride pair says otherwise.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use super::Scalar;

pub(crate) const LN_EPS: f64 = 1e-5;

/// `c = alpha * a · b + beta * c` with `(row stride, col stride)` views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: &[S],
    av: (usize, usize),
    b: &[S],
    bv: (usize, usize),
    beta: S,
    c: &mut [S],
    cv: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * cv.0 + (n - 1) * cv.1 < c.len(), "gemm: c out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let x = &mut c[i * cv.0 + j * cv.1];
                *x = if beta == S::zero() { S::zero() } else { *x * beta };
            }
        }
        return;
    }
    assert!((m - 1) * av.0 + (k - 1) * av.1 < a.len(), "gemm: a out of bounds");
    assert!((k - 1) * bv.0 + (n - 1) * bv.1 < b.len(), "gemm: b out of bounds");
    if m == 1 {
        // Packing dominates single-row products, which incremental decoding
        // does at every step.
        return gemv(k, n, alpha, a, av.1, b, bv, beta, c, cv.1);
    }
    // SAFETY: every index the kernel touches was bounds-checked above, and `c`
    // is exclusively borrowed so it cannot alias `a` or `b`.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            av.0 as isize,
            av.1 as isize,
            b.as_ptr(),
            bv.0 as isize,
            bv.1 as isize,
            beta,
            c.as_mut_ptr(),
            cv.0 as isize,
            cv.1 as isize,
        )
    }
}

/// Single-row `c = alpha * a · b + beta * c`, already bounds-checked.
#[allow(clippy::too_many_arguments)]
fn gemv<S: Scalar>(k: usize, n: usize, alpha: S, a: &[S], ac: usize, b: &[S], bv: (usize, usize), beta: S, c: &mut [S], cc: usize) {
    let mut acc = vec![S::zero(); n];
    if bv.1 == 1 {
        for p in 0..k {
            let x = a[p * ac];
            let row = &b[p * bv.0..p * bv.0 + n];
            for (y, &w) in acc.iter_mut().zip(row) {
                *y = *y + x * w;
            }
        }
    } else {
        for (j, y) in acc.iter_mut().enumerate() {
            *y = (0..k).map(|p| a[p * ac] * b[p * bv.0 + j * bv.1]).sum();
        }
    }
    for (j, y) in acc.into_iter().enumerate() {
        let o = &mut c[j * cc];
        *o = if beta == S::zero() { alpha * y } else { beta * *o + alpha * y };
    }
}

/// `c[m,n] = a[m,k] · b[k,n] + beta * c`
pub(crate) fn matmul<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize, beta: S) {
    gemm(m, k, n, S::one(), a, (k, 1), b, (n, 1), beta, c, (n, 1));
}

/// `c[m,n] = a[m,k] · b[n,k]ᵀ + beta * c`
pub(crate) fn matmul_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize, beta: S) {
    gemm(m, k, n, S::one(), a, (k, 1), b, (1, k), beta, c, (n, 1));
}

/// `c[m,n] = a[k,m]ᵀ · b[k,n] + beta * c`
pub(crate) fn matmul_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize, beta: S) {
    gemm(m, k, n, S::one(), a, (1, m), b, (n, 1), beta, c, (n, 1));
}

/// `y[t, dout] = x[t, din] · w + b`
pub(crate) fn linear<S: Scalar>(x: &[S], w: &[S], b: &[S], rows: usize, din: usize, dout: usize) -> Vec<S> {
    let mut y = Vec::with_capacity(rows * dout);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    matmul(x, w, &mut y, rows, din, dout, S::one());
    y
}

/// Accumulates `dx += dy · wᵀ`, `dw += xᵀ · dy`, `db += Σ dy`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<S: Scalar>(
    dy: &[S],
    x: &[S],
    w: &[S],
    rows: usize,
    din: usize,
    dout: usize,
    dx: Option<&mut [S]>,
    dw: &mut [S],
    db: &mut [S],
) {
    if let Some(dx) = dx {
        matmul_nt(dy, w, dx, rows, dout, din, S::one());
    }
    matmul_tn(x, dy, dw, din, rows, dout, S::one());
    for row in dy.chunks_exact(dout) {
        for (g, &d) in db.iter_mut().zip(row) {
            *g = *g + d;
        }
    }
}

pub(crate) struct LnCache<S> {
    pub xhat: Vec<S>,
    pub rstd: Vec<S>,
}

pub(crate) fn layernorm<S: Scalar>(x: &[S], g: &[S], b: &[S], d: usize) -> (Vec<S>, LnCache<S>) {
    let rows = x.len() / d;
    let mut y = vec![S::zero(); x.len()];
    let mut xhat = vec![S::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    let dn = S::lit(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<S>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
        let rs = S::one() / (var + S::lit(LN_EPS)).sqrt();
        rstd.push(rs);
        for i in 0..d {
            let h = (row[i] - mean) * rs;
            xhat[r * d + i] = h;
            y[r * d + i] = h * g[i] + b[i];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Accumulates into `dx`, `dg`, `db`.
pub(crate) fn layernorm_backward<S: Scalar>(dy: &[S], cache: &LnCache<S>, g: &[S], d: usize, dx: &mut [S], dg: &mut [S], db: &mut [S]) {
    let dn = S::lit(d as f64);
    let mut dxhat = vec![S::zero(); d];
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut sum = S::zero();
        let mut dot = S::zero();
        for i in 0..d {
            dg[i] = dg[i] + dyr[i] * xh[i];
            db[i] = db[i] + dyr[i];
            dxhat[i] = dyr[i] * g[i];
            sum = sum + dxhat[i];
            dot = dot + dxhat[i] * xh[i];
        }
        let (mean, mdot) = (sum / dn, dot / dn);
        for i in 0..d {
            let v = &mut dx[r * d + i];
            *v = *v + rs * (dxhat[i] - mean - xh[i] * mdot);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Polynomial `exp` (Cephes coefficients) written so the loop vectorizes;
/// about 1 ulp, flushing to the smallest normal below `e^-87.3`.
pub(crate) fn exp_f32_slice(xs: &mut [f32]) {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // Adding 1.5 * 2^23 rounds to an integer held in the low mantissa bits.
    const ROUND: f32 = 12_582_912.0;
    const ROUND_BITS: u32 = 0x4B40_0000;
    for x in xs.iter_mut() {
        let v = x.max(-87.3).min(88.0);
        let k = v * LOG2E + ROUND;
        let n = k - ROUND;
        let r = v - n * LN2_HI - n * LN2_LO;
        let mut p = 1.987_569_1e-4f32;
        p = p * r + 1.398_2e-3;
        p = p * r + 8.333_452e-3;
        p = p * r + 4.166_579_6e-2;
        p = p * r + 0.166_666_65;
        p = p * r + 0.5;
        let e = p * r * r + r + 1.0;
        let scale = f32::from_bits(k.to_bits().wrapping_sub(ROUND_BITS).wrapping_add(127) << 23);
        *x = e * scale;
    }
}

/// Sum with eight independent accumulators so the loop pipelines.
pub(crate) fn lane_sum<S: Scalar>(xs: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder().iter().copied().sum::<S>();
    for c in chunks {
        for i in 0..8 {
            acc[i] = acc[i] + c[i];
        }
    }
    acc.iter().copied().sum::<S>() + tail
}

pub(crate) fn lane_dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum::<S>();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    acc.iter().copied().sum::<S>() + tail
}

pub(crate) fn lane_max<S: Scalar>(xs: &[S]) -> S {
    let mut acc = [S::neg_infinity(); 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder().iter().copied().fold(S::neg_infinity(), S::max);
    for c in chunks {
        for i in 0..8 {
            acc[i] = if c[i] > acc[i] { c[i] } else { acc[i] };
        }
    }
    acc.iter().copied().fold(tail, S::max)
}

/// `tanh(z) = 1 - 2 / (1 + e^{2z})` over a slice.
fn tanh_slice<S: Scalar>(z: &mut [S]) {
    let two = S::lit(2.0);
    z.iter_mut().for_each(|v| *v = two * *v);
    S::exp_slice(z);
    z.iter_mut().for_each(|v| *v = S::one() - two / (S::one() + *v));
}

fn gelu_tanh<S: Scalar>(x: &[S]) -> Vec<S> {
    let (c, a) = (S::lit(GELU_C), S::lit(GELU_A));
    let mut t: Vec<S> = x.iter().map(|&v| c * (v + a * v * v * v)).collect();
    tanh_slice(&mut t);
    t
}

pub(crate) fn gelu<S: Scalar>(x: &[S]) -> Vec<S> {
    let half = S::lit(0.5);
    let mut t = gelu_tanh(x);
    for (t, &v) in t.iter_mut().zip(x) {
        *t = half * v * (S::one() + *t);
    }
    t
}

/// `du = dy * gelu'(u)`, overwriting `dy`.
pub(crate) fn gelu_backward<S: Scalar>(u: &[S], dy: &mut [S]) {
    let (c, a, half, three) = (S::lit(GELU_C), S::lit(GELU_A), S::lit(0.5), S::lit(3.0));
    let t = gelu_tanh(u);
    for ((d, &v), &t) in dy.iter_mut().zip(u).zip(&t) {
        let grad = half * (S::one() + t) + half * v * (S::one() - t * t) * c * (S::one() + three * a * v * v);
        *d = *d * grad;
    }
}

/// Inverted dropout. Returns the applied mask, or `None` when inactive.
pub(crate) fn dropout<S: Scalar>(x: &mut [S], p: f64, rng: Option<&mut ChaCha8Rng>) -> Option<Vec<S>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = S::lit(1.0 / (1.0 - p));
    // Drop when a uniform u32 falls below p * 2^32.
    let cut = (p * 4_294_967_296.0) as u64;
    let mask: Vec<S> = (0..x.len()).map(|_| if (rng.next_u32() as u64) < cut { S::zero() } else { keep }).collect();
    for (v, &m) in x.iter_mut().zip(&mask) {
        *v = *v * m;
    }
    Some(mask)
}

pub(crate) fn apply_mask<S: Scalar>(x: &mut [S], mask: &Option<Vec<S>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v = *v * k;
        }
    }
}

/// Geometry of one attention call. Query `i` sees keys `0..=i + tk - tq` when
/// causal, all keys otherwise.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnShape {
    pub tq: usize,
    pub tk: usize,
    pub heads: usize,
    pub dh: usize,
    pub causal: bool,
}

impl AttnShape {
    fn visible(&self, i: usize) -> usize {
        if self.causal {
            (i + 1 + self.tk - self.tq).min(self.tk)
        } else {
            self.tk
        }
    }
}

/// Multi-head scaled dot-product attention. `q`, `k`, `v` are row views with
/// the given row strides; heads are contiguous column blocks. Returns the
/// `[tq, heads * dh]` output and fills `probs` (`heads * tq * tk`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention<S: Scalar>(
    q: &[S],
    qs: usize,
    k: &[S],
    ks: usize,
    v: &[S],
    vs: usize,
    shape: AttnShape,
    probs: &mut Vec<S>,
) -> Vec<S> {
    let AttnShape { tq, tk, heads, dh, .. } = shape;
    let d = heads * dh;
    let scale = S::lit(1.0 / (dh as f64).sqrt());
    probs.clear();
    probs.resize(heads * tq * tk, S::zero());
    let mut out = vec![S::zero(); tq * d];
    for h in 0..heads {
        let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
        gemm(tq, dh, tk, scale, &q[h * dh..], (qs, 1), &k[h * dh..], (1, ks), S::zero(), p, (tk, 1));
        for i in 0..tq {
            let lim = shape.visible(i);
            let row = &mut p[i * tk..(i + 1) * tk];
            let max = lane_max(&row[..lim]);
            row[..lim].iter_mut().for_each(|x| *x = *x - max);
            S::exp_slice(&mut row[..lim]);
            let total = lane_sum(&row[..lim]);
            for x in &mut row[..lim] {
                *x = *x / total;
            }
            for x in &mut row[lim..] {
                *x = S::zero();
            }
        }
        gemm(tq, tk, dh, S::one(), p, (tk, 1), &v[h * dh..], (vs, 1), S::zero(), &mut out[h * dh..], (d, 1));
    }
    out
}

/// Gradients of [`attention`]; returns contiguous `[tq, d]`, `[tk, d]`, `[tk, d]`
/// buffers for q, k and v.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<S: Scalar>(
    dout: &[S],
    q: &[S],
    qs: usize,
    k: &[S],
    ks: usize,
    v: &[S],
    vs: usize,
    probs: &[S],
    shape: AttnShape,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let AttnShape { tq, tk, heads, dh, .. } = shape;
    let d = heads * dh;
    let scale = S::lit(1.0 / (dh as f64).sqrt());
    let (mut dq, mut dk, mut dv) = (vec![S::zero(); tq * d], vec![S::zero(); tk * d], vec![S::zero(); tk * d]);
    let mut ds = vec![S::zero(); tq * tk];
    for h in 0..heads {
        let p = &probs[h * tq * tk..(h + 1) * tq * tk];
        let dout_h = &dout[h * dh..];
        gemm(tq, dh, tk, S::one(), dout_h, (d, 1), &v[h * dh..], (1, vs), S::zero(), &mut ds, (tk, 1));
        gemm(tk, tq, dh, S::one(), p, (1, tk), dout_h, (d, 1), S::one(), &mut dv[h * dh..], (d, 1));
        for i in 0..tq {
            let lim = shape.visible(i);
            let (pr, dr) = (&p[i * tk..i * tk + lim], &mut ds[i * tk..(i + 1) * tk]);
            let dot = lane_dot(pr, &dr[..lim]);
            for (x, &pv) in dr[..lim].iter_mut().zip(pr) {
                *x = pv * (*x - dot);
            }
            for x in &mut dr[lim..] {
                *x = S::zero();
            }
        }
        gemm(tq, tk, dh, scale, &ds, (tk, 1), &k[h * dh..], (ks, 1), S::one(), &mut dq[h * dh..], (d, 1));
        gemm(tk, tq, dh, scale, &ds, (1, tk), &q[h * dh..], (qs, 1), S::one(), &mut dk[h * dh..], (d, 1));
    }
    (dq, dk, dv)
}

/// Row-wise log-softmax.
pub(crate) fn log_softmax_row<S: Scalar>(row: &[S]) -> Vec<S> {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<S>().ln() + max;
    row.iter().map(|&x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|x| x as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        matmul(&a, &b, &mut c, 2, 3, 4, 0.0);
        let mut naive = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                naive[i * 4 + j] = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
            }
        }
        assert_eq!(c, naive);
        // bᵀ stored as 4x3
        let bt: Vec<f64> = (0..12).map(|i| b[(i % 3) * 4 + i / 3]).collect();
        let mut c2 = vec![0.0; 8];
        matmul_nt(&a, &bt, &mut c2, 2, 3, 4, 0.0);
        assert_eq!(c2, naive);
        let at: Vec<f64> = (0..6).map(|i| a[(i % 2) * 3 + i / 2]).collect(); // 3x2
        let mut c3 = vec![0.0; 8];
        matmul_tn(&at, &b, &mut c3, 2, 3, 4, 0.0);
        assert_eq!(c3, naive);
    }

    #[test]
    fn fast_exp_is_accurate() {
        let mut xs: Vec<f32> = (-2000..=2000).map(|i| i as f32 * 0.0437).collect();
        xs.extend([-100.0, -87.0, 0.0, 88.0]);
        let mut ys = xs.clone();
        exp_f32_slice(&mut ys);
        for (&x, &y) in xs.iter().zip(&ys) {
            let want = (x as f64).exp();
            if x < -87.3 {
                assert!(y <= 1.22e-38, "{x}: {y}");
            } else {
                assert!(((y as f64 - want) / want).abs() < 4e-7, "{x}: {y} vs {want}");
            }
        }
    }

    #[test]
    fn single_row_path_matches_naive() {
        let a: Vec<f64> = (0..5).map(|x| x as f64 - 1.5).collect();
        let b: Vec<f64> = (0..35).map(|x| ((x * 7) % 11) as f64 * 0.25).collect(); // 5x7
        let naive: Vec<f64> = (0..7).map(|j| (0..5).map(|k| a[k] * b[k * 7 + j]).sum::<f64>() + 1.0).collect();
        let mut c = vec![0.5; 7];
        matmul(&a, &b, &mut c, 1, 5, 7, 2.0);
        assert_eq!(c, naive);
        let bt: Vec<f64> = (0..35).map(|i| b[(i % 5) * 7 + i / 5]).collect();
        let mut c2 = vec![0.5; 7];
        matmul_nt(&a, &bt, &mut c2, 1, 5, 7, 2.0);
        assert_eq!(c2, naive);
    }

    #[test]
    fn gelu_matches_reference_values() {
        // 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
        let xs = [-3.0, -0.5, 0.0, 1e-4, 0.7, 2.5];
        let ys = gelu(&xs);
        for (&x, &y) in xs.iter().zip(&ys) {
            let want = 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh());
            assert!((y - want).abs() < 1e-15, "{x}: {y} vs {want}");
        }
    }

    #[test]
    fn causal_rows_ignore_future_keys() {
        let shape = AttnShape { tq: 3, tk: 3, heads: 1, dh: 2, causal: true };
        let q: Vec<f64> = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let mut probs = Vec::new();
        attention(&q, 2, &q, 2, &q, 2, shape, &mut probs);
        assert_eq!(probs[1], 0.0);
        assert_eq!(probs[2], 0.0);
        assert!((probs[0] - 1.0).abs() < 1e-15);
        assert!((probs[3] + probs[4] - 1.0).abs() < 1e-15);
    }
}
