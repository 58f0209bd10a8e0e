//! Raw row-major loops shared by forward and backward passes.
//!
//! All kernels accumulate into `out` (`out += ...`), so callers zero the
//! buffer when they want plain assignment.

use std::cell::Cell;

/// Which attention product a MAC belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MacTag {
    Score,
    Value,
}

thread_local! {
    static PROBE: Cell<Option<MacTag>> = const { Cell::new(None) };
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
    static SCORE_MACS: Cell<u64> = const { Cell::new(0) };
    static VALUE_MACS: Cell<u64> = const { Cell::new(0) };
}

/// Runs `f` with the MAC probe enabled and returns the multiply-accumulates
/// executed by tagged batched products as `(score, value)`.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64, u64) {
    let was_active = ACTIVE.with(|a| a.replace(true));
    let s0 = SCORE_MACS.with(Cell::get);
    let v0 = VALUE_MACS.with(Cell::get);
    let r = f();
    let s = SCORE_MACS.with(Cell::get) - s0;
    let v = VALUE_MACS.with(Cell::get) - v0;
    ACTIVE.with(|a| a.set(was_active));
    (r, s, v)
}

/// Tags batched products issued inside `f`. Counting only happens when a
/// [`count_macs`] scope is also active.
pub(crate) fn tagged<R>(tag: MacTag, f: impl FnOnce() -> R) -> R {
    let prev = PROBE.with(|p| p.replace(Some(tag)));
    let r = f();
    PROBE.with(|p| p.set(prev));
    r
}

fn current_probe() -> Option<MacTag> {
    if ACTIVE.with(Cell::get) {
        PROBE.with(Cell::get)
    } else {
        None
    }
}

fn bump(tag: MacTag, n: u64) {
    match tag {
        MacTag::Score => SCORE_MACS.with(|c| c.set(c.get() + n)),
        MacTag::Value => VALUE_MACS.with(|c| c.set(c.get() + n)),
    }
}

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// `out[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four partial sums keep the loop vectorizable without fast-math
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Batched `out[b] += a[b] · op(b_[b])` where `op` transposes when
/// `trans_b` is set. Counted when a probe scope and tag are active.
#[allow(clippy::too_many_arguments)]
pub fn bmm(a: &[f64], b: &[f64], out: &mut [f64], batch: usize, m: usize, k: usize, n: usize, trans_b: bool) {
    let (sa, sb, so) = (m * k, k * n, m * n);
    match current_probe() {
        Some(tag) => {
            let mut counter = 0u64;
            for bi in 0..batch {
                let (ab, bb, ob) = (&a[bi * sa..][..sa], &b[bi * sb..][..sb], &mut out[bi * so..][..so]);
                if trans_b {
                    matmul_nt_counted(ab, bb, ob, m, k, n, &mut counter);
                } else {
                    matmul_nn_counted(ab, bb, ob, m, k, n, &mut counter);
                }
            }
            bump(tag, counter);
        }
        None => {
            for bi in 0..batch {
                let (ab, bb, ob) = (&a[bi * sa..][..sa], &b[bi * sb..][..sb], &mut out[bi * so..][..so]);
                if trans_b {
                    matmul_nt(ab, bb, ob, m, k, n);
                } else {
                    matmul_nn(ab, bb, ob, m, k, n);
                }
            }
        }
    }
}

fn matmul_nn_counted(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize, counter: &mut u64) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
                *counter += 1;
            }
        }
    }
}

fn matmul_nt_counted(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize, counter: &mut u64) {
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[j * k + p];
                *counter += 1;
            }
            out[i * n + j] += s;
        }
    }
}

/// Unfolds `x[c,h,w]` into columns `[c*9, ho*wo]` for a 3×3 kernel with
/// zero padding 1 and the given stride.
pub fn im2col3x3(x: &[f64], c: usize, h: usize, w: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let ho = (h - 1) / stride + 1;
    let wo = (w - 1) / stride + 1;
    let mut cols = vec![0.0; c * 9 * ho * wo];
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row + oy * wo + ox] = x[ci * h * w + iy as usize * w + ix as usize];
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col3x3`]: scatters column gradients back onto `dx`.
pub fn col2im3x3(dcols: &[f64], dx: &mut [f64], c: usize, h: usize, w: usize, stride: usize) {
    let ho = (h - 1) / stride + 1;
    let wo = (w - 1) / stride + 1;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[ci * h * w + iy as usize * w + ix as usize] += dcols[row + oy * wo + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn three_layouts_agree() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut nn = vec![0.0; m * n];
        matmul_nn(&a, &b, &mut nn, m, k, n);
        let mut nt = vec![0.0; m * n];
        matmul_nt(&a, &transpose(&b, k, n), &mut nt, m, k, n);
        let mut tn = vec![0.0; m * n];
        matmul_tn(&transpose(&a, m, k), &b, &mut tn, m, k, n);
        for i in 0..m * n {
            assert!((nn[i] - want[i]).abs() < 1e-12);
            assert!((nt[i] - want[i]).abs() < 1e-12);
            assert!((tn[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn probe_counts_only_inside_scope() {
        let a = vec![1.0; 2 * 3 * 4];
        let b = vec![1.0; 2 * 4 * 5];
        let mut out = vec![0.0; 2 * 3 * 5];
        tagged(MacTag::Score, || bmm(&a, &b, &mut out, 2, 3, 4, 5, false));
        let ((), s, v) = count_macs(|| {
            tagged(MacTag::Score, || bmm(&a, &b, &mut out, 2, 3, 4, 5, false));
            bmm(&a, &b, &mut out, 2, 3, 4, 5, false);
        });
        assert_eq!((s, v), (2 * 3 * 4 * 5, 0));
    }

    #[test]
    fn im2col_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w) = (2, 5, 4);
        for stride in [1, 2] {
            let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
            let (cols, ho, wo) = im2col3x3(&x, c, h, w, stride);
            let y: Vec<f64> = (0..c * 9 * ho * wo).map(|i| (i as f64 * 0.3).cos()).collect();
            let lhs = dot(&cols, &y);
            let mut dx = vec![0.0; x.len()];
            col2im3x3(&y, &mut dx, c, h, w, stride);
            let rhs = dot(&x, &dx);
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
