//! Small dense matrix products on row-major slices, sized for mini-batch
//! training (a handful of rows against a few hundred columns). An AVX2/FMA
//! path is picked at runtime; the portable path gives the same results up to
//! summation order.

/// `out (m×n) = a (m×k) · wᵀ` where `w` is `n×k`.
pub fn matmul_nt(a: &[f64], w: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() == m * k && w.len() == n * k && out.len() == m * n);
    #[cfg(target_arch = "x86_64")]
    if has_fma() {
        // SAFETY: feature presence checked above, bounds asserted by slice lengths
        unsafe { x86::nt(a, w, out, m, k, n) };
        return;
    }
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(ar, &w[j * k..(j + 1) * k]);
        }
    }
}

/// `out (m×k) = d (m×n) · w` where `w` is `n×k`.
pub fn matmul_nn(d: &[f64], w: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert!(d.len() == m * n && w.len() == n * k && out.len() == m * k);
    #[cfg(target_arch = "x86_64")]
    if has_fma() {
        // SAFETY: as above
        unsafe { x86::nn(d, w, out, m, n, k) };
        return;
    }
    out.fill(0.0);
    for i in 0..m {
        let orow = &mut out[i * k..(i + 1) * k];
        for j in 0..n {
            let s = d[i * n + j];
            orow.iter_mut()
                .zip(&w[j * k..(j + 1) * k])
                .for_each(|(o, &v)| *o += s * v);
        }
    }
}

/// `out (n×k) = dᵀ · a` where `d` is `m×n` and `a` is `m×k`.
pub fn matmul_tn(d: &[f64], a: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert!(d.len() == m * n && a.len() == m * k && out.len() == n * k);
    #[cfg(target_arch = "x86_64")]
    if has_fma() {
        // SAFETY: as above
        unsafe { x86::tn(d, a, out, m, n, k) };
        return;
    }
    out.fill(0.0);
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        for j in 0..n {
            let s = d[r * n + j];
            out[j * k..(j + 1) * k]
                .iter_mut()
                .zip(arow)
                .for_each(|(o, &v)| *o += s * v);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(target_arch = "x86_64")]
fn has_fma() -> bool {
    use std::sync::OnceLock;
    static FMA: OnceLock<bool> = OnceLock::new();
    *FMA.get_or_init(|| is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma"))
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    #[inline(always)]
    unsafe fn hsum(v: __m256d) -> f64 {
        let mut t = [0.0; 4];
        _mm256_storeu_pd(t.as_mut_ptr(), v);
        (t[0] + t[1]) + (t[2] + t[3])
    }

    #[inline(always)]
    unsafe fn dot_tail(a: *const f64, b: *const f64, from: usize, to: usize) -> f64 {
        let mut s = 0.0;
        for q in from..to {
            s += *a.add(q) * *b.add(q);
        }
        s
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn nt(a: &[f64], w: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        let ap = a.as_ptr();
        let wp = w.as_ptr();
        let k4 = k - k % 4;
        let n2 = n - n % 2;
        let m5 = m - m % 5;
        for j in (0..n2).step_by(2) {
            let w0p = wp.add(j * k);
            let w1p = wp.add((j + 1) * k);
            for i in (0..m5).step_by(5) {
                let mut acc = [[_mm256_setzero_pd(); 5]; 2];
                let mut q = 0;
                while q < k4 {
                    let w0 = _mm256_loadu_pd(w0p.add(q));
                    let w1 = _mm256_loadu_pd(w1p.add(q));
                    for r in 0..5 {
                        let av = _mm256_loadu_pd(ap.add((i + r) * k + q));
                        acc[0][r] = _mm256_fmadd_pd(av, w0, acc[0][r]);
                        acc[1][r] = _mm256_fmadd_pd(av, w1, acc[1][r]);
                    }
                    q += 4;
                }
                for r in 0..5 {
                    let arow = ap.add((i + r) * k);
                    out[(i + r) * n + j] = hsum(acc[0][r]) + dot_tail(arow, w0p, k4, k);
                    out[(i + r) * n + j + 1] = hsum(acc[1][r]) + dot_tail(arow, w1p, k4, k);
                }
            }
        }
        // leftover rows and columns, one output at a time
        for i in 0..m {
            let js = if i < m5 { n2..n } else { 0..n };
            for j in js {
                let arow = ap.add(i * k);
                let wrow = wp.add(j * k);
                let mut acc = _mm256_setzero_pd();
                let mut q = 0;
                while q < k4 {
                    acc = _mm256_fmadd_pd(_mm256_loadu_pd(arow.add(q)), _mm256_loadu_pd(wrow.add(q)), acc);
                    q += 4;
                }
                out[i * n + j] = hsum(acc) + dot_tail(arow, wrow, k4, k);
            }
        }
    }

    /// Shared shape of `nn` and `tn`: each output row `o` is
    /// `Σ_t coef(o, t) · src_row(t)`, blocked two output rows at a time.
    #[inline(always)]
    unsafe fn axpy_rows(
        out: &mut [f64],
        rows: usize,
        terms: usize,
        k: usize,
        coef: impl Fn(usize, usize) -> f64,
        src: *const f64,
    ) {
        let op = out.as_mut_ptr();
        let k16 = k - k % 16;
        let k4 = k - k % 4;
        let rows2 = rows - rows % 2;
        for o in (0..rows2).step_by(2) {
            let mut c = 0;
            while c < k16 {
                let mut acc = [[_mm256_setzero_pd(); 4]; 2];
                for t in 0..terms {
                    let d0 = _mm256_set1_pd(coef(o, t));
                    let d1 = _mm256_set1_pd(coef(o + 1, t));
                    let s = src.add(t * k + c);
                    for v in 0..4 {
                        let x = _mm256_loadu_pd(s.add(4 * v));
                        acc[0][v] = _mm256_fmadd_pd(d0, x, acc[0][v]);
                        acc[1][v] = _mm256_fmadd_pd(d1, x, acc[1][v]);
                    }
                }
                for v in 0..4 {
                    _mm256_storeu_pd(op.add(o * k + c + 4 * v), acc[0][v]);
                    _mm256_storeu_pd(op.add((o + 1) * k + c + 4 * v), acc[1][v]);
                }
                c += 16;
            }
            while c < k4 {
                let mut a0 = _mm256_setzero_pd();
                let mut a1 = _mm256_setzero_pd();
                for t in 0..terms {
                    let x = _mm256_loadu_pd(src.add(t * k + c));
                    a0 = _mm256_fmadd_pd(_mm256_set1_pd(coef(o, t)), x, a0);
                    a1 = _mm256_fmadd_pd(_mm256_set1_pd(coef(o + 1, t)), x, a1);
                }
                _mm256_storeu_pd(op.add(o * k + c), a0);
                _mm256_storeu_pd(op.add((o + 1) * k + c), a1);
                c += 4;
            }
            for c in k4..k {
                let (mut s0, mut s1) = (0.0, 0.0);
                for t in 0..terms {
                    let x = *src.add(t * k + c);
                    s0 += coef(o, t) * x;
                    s1 += coef(o + 1, t) * x;
                }
                *op.add(o * k + c) = s0;
                *op.add((o + 1) * k + c) = s1;
            }
        }
        for o in rows2..rows {
            for c in 0..k {
                let mut s = 0.0;
                for t in 0..terms {
                    s += coef(o, t) * *src.add(t * k + c);
                }
                *op.add(o * k + c) = s;
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn nn(d: &[f64], w: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
        let dp = d.as_ptr();
        axpy_rows(out, m, n, k, |o, t| *dp.add(o * n + t), w.as_ptr());
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn tn(d: &[f64], a: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
        let dp = d.as_ptr();
        axpy_rows(out, n, m, k, |o, t| *dp.add(t * n + o), a.as_ptr());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        // a: m×k, b: k×n
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|q| a[i * k + q] * b[q * n + j]).sum();
            }
        }
        out
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + y.abs()))
    }

    fn fill(len: usize, seed: u64) -> Vec<f64> {
        (0..len)
            .map(|i| (((i as u64).wrapping_mul(2654435761) ^ seed) % 1000) as f64 / 500.0 - 1.0)
            .collect()
    }

    proptest! {
        #[test]
        fn products_match_naive(m in 1usize..13, k in 1usize..41, n in 1usize..23, seed in 0u64..1000) {
            let a = fill(m * k, seed);
            let w = fill(n * k, seed + 1);
            let mut out = vec![f64::NAN; m * n];
            matmul_nt(&a, &w, &mut out, m, k, n);
            prop_assert!(close(&out, &naive(&a, &transpose(&w, n, k), m, k, n)));

            // d: m×n, w2: n×k
            let d = fill(m * n, seed + 2);
            let w2 = fill(n * k, seed + 3);
            let mut out = vec![f64::NAN; m * k];
            matmul_nn(&d, &w2, &mut out, m, n, k);
            prop_assert!(close(&out, &naive(&d, &w2, m, n, k)));

            let mut out = vec![f64::NAN; n * k];
            matmul_tn(&d, &a, &mut out, m, n, k);
            prop_assert!(close(&out, &naive(&transpose(&d, m, n), &a, n, m, k)));
        }
    }
}
