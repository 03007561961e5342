//! Raw row-major kernels. Reduction order is fixed so results are
//! bit-reproducible.

/// `out (+)= op(a) · op(b)` with `op(a)`: m×k and `op(b)`: k×n.
///
/// With `ta` the buffer `a` is stored k×m; with `tb` the buffer `b` is
/// stored n×k. Transposed operands are packed to row-major first; every
/// output element is then summed over `p` in ascending order.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if !accumulate {
        out.fill(0.0);
    }
    let packed_a;
    let a = if ta {
        packed_a = transpose(a, k, m);
        &packed_a[..]
    } else {
        a
    };
    let packed_b;
    let b = if tb {
        packed_b = transpose(b, n, k);
        &packed_b[..]
    } else {
        b
    };
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // Same arithmetic, wider registers; no FMA so bits match.
            unsafe { gemm_nn_avx2(a, b, out, m, k, n) };
            return;
        }
    }
    gemm_nn(a, b, out, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_nn_avx2(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_nn(a, b, out, m, k, n)
}

/// Row-major `rows × cols` to `cols × rows`.
pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

const MR: usize = 4;
const NR: usize = 8;

#[inline(always)]
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let m_main = m - m % MR;
    let n_main = n - n % NR;
    for i in (0..m_main).step_by(MR) {
        for j in (0..n_main).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..k {
                let bp: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
                for r in 0..MR {
                    let av = a[(i + r) * k + p];
                    for c in 0..NR {
                        acc[r][c] += av * bp[c];
                    }
                }
            }
            for r in 0..MR {
                let row = &mut out[(i + r) * n + j..(i + r) * n + j + NR];
                for c in 0..NR {
                    row[c] += acc[r][c];
                }
            }
        }
        if n_main < n {
            edge(a, b, out, i..i + MR, n_main..n, k, n);
        }
    }
    if m_main < m {
        edge(a, b, out, m_main..m, 0..n, k, n);
    }
}

fn edge(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    k: usize,
    n: usize,
) {
    for i in rows {
        for j in cols.clone() {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] += s;
        }
    }
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f64; 4];
    let chunks = x.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += x[i] * y[i];
        acc[1] += x[i + 1] * y[i + 1];
        acc[2] += x[i + 2] * y[i + 2];
        acc[3] += x[i + 3] * y[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..x.len() {
        s += x[i] * y[i];
    }
    s
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every flat index of `out_shape`, the flat index of the broadcast
/// operand. `b_shape` is right-aligned against `out_shape`; its extents must
/// equal the matching output extent or be 1.
/// Source index of each output element when `b` broadcasts into `out`.
#[derive(Clone, Debug, PartialEq)]
pub enum Broadcast {
    /// Broadcast axes form one contiguous block of `mid` elements with
    /// `inner` elements after it.
    Block { mid: usize, inner: usize },
    Map(Vec<usize>),
}

impl Broadcast {
    pub fn new(out_shape: &[usize], b_shape: &[usize]) -> Option<Self> {
        if b_shape.len() > out_shape.len() {
            return None;
        }
        let pad = out_shape.len() - b_shape.len();
        let mut full = vec![1usize; out_shape.len()];
        full[pad..].copy_from_slice(b_shape);
        let mut axes = Vec::new();
        for (ax, (o, b)) in out_shape.iter().zip(&full).enumerate() {
            if *b != 1 && b != o {
                return None;
            }
            if *b == 1 && *o != 1 {
                axes.push(ax);
            }
        }
        let (Some(&lo), Some(&hi)) = (axes.first(), axes.last()) else {
            return Some(Broadcast::Block { mid: 1, inner: 1 });
        };
        if out_shape[lo..=hi].iter().zip(&full[lo..=hi]).any(|(o, b)| *b != 1 && *o != 1) {
            return broadcast_map(out_shape, b_shape).map(Broadcast::Map);
        }
        Some(Broadcast::Block {
            mid: out_shape[lo..=hi].iter().product(),
            inner: out_shape[hi + 1..].iter().product(),
        })
    }

    #[inline]
    pub fn at(&self, i: usize) -> usize {
        match self {
            Broadcast::Block { mid, inner } => (i / (mid * inner)) * inner + i % inner,
            Broadcast::Map(m) => m[i],
        }
    }
}

pub fn broadcast_map(out_shape: &[usize], b_shape: &[usize]) -> Option<Vec<usize>> {
    if b_shape.len() > out_shape.len() {
        return None;
    }
    let pad = out_shape.len() - b_shape.len();
    let mut full = vec![1usize; out_shape.len()];
    full[pad..].copy_from_slice(b_shape);
    for (o, b) in out_shape.iter().zip(&full) {
        if *b != 1 && b != o {
            return None;
        }
    }
    let bstr = strides(&full);
    let eff: Vec<usize> = full
        .iter()
        .zip(&bstr)
        .map(|(&e, &s)| if e == 1 { 0 } else { s })
        .collect();
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Some(map)
}

/// Permutes the axes of a row-major buffer: output axis `i` is input axis
/// `perm[i]`.
pub fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_str = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_str: Vec<usize> = perm.iter().map(|&p| in_str[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += src_str[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_str[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
