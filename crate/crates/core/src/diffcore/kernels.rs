//! Slice-level numeric kernels shared by the graph and the pure tensor ops.
//!
//! All matrices are dense row-major. Inner loops run over contiguous rows so
//! the compiler can vectorize them.

const MR: usize = 4;
const NR: usize = 8;

/// `a·b + c`, fused when the target has FMA.
#[inline(always)]
pub fn fmadd(a: f64, b: f64, c: f64) -> f64 {
    #[cfg(target_feature = "fma")]
    {
        a.mul_add(b, c)
    }
    #[cfg(not(target_feature = "fma"))]
    {
        a * b + c
    }
}

/// `out[m×n] += A · b[k×n]` where `A[i, p] = a[i·rs + p·cs]`.
///
/// Register-blocked: each `MR×NR` output tile is accumulated over the whole
/// inner dimension before it is written back.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(a: &[f64], rs: usize, cs: usize, b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let m_main = m - m % MR;
    let n_main = n - n % NR;
    for i0 in (0..m_main).step_by(MR) {
        for j0 in (0..n_main).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..k {
                let b_tile: &[f64; NR] = b[p * n + j0..p * n + j0 + NR].try_into().unwrap();
                for (r, acc_row) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * rs + p * cs];
                    for c in 0..NR {
                        acc_row[c] = fmadd(av, b_tile[c], acc_row[c]);
                    }
                }
            }
            for (r, acc_row) in acc.iter().enumerate() {
                let o = &mut out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR];
                for c in 0..NR {
                    o[c] += acc_row[c];
                }
            }
        }
    }
    // ragged right edge and bottom rows
    for i in 0..m {
        let from = if i < m_main { n_main } else { 0 };
        if from == n {
            continue;
        }
        let out_row = &mut out[i * n + from..(i + 1) * n];
        for p in 0..k {
            let av = a[i * rs + p * cs];
            let b_row = &b[p * n + from..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = fmadd(av, bv, *o);
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    gemm_acc(a, k, 1, b, out, m, k, n);
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// Transpose of a `rows×cols` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    matmul_acc(a, &bt, out, m, k, n);
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    gemm_acc(a, 1, k, b, out, k, m, n);
}

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0; // 1.5 · 2^52

/// `e^x` to within a couple of ulps, written branch-free so loops over it
/// vectorize. Underflows to 0 below −708 and saturates above 709.
#[inline(always)]
pub fn exp(x: f64) -> f64 {
    let xc = x.clamp(-708.0, 709.0);
    let shifted = xc * LOG2E + ROUND_MAGIC;
    let k = shifted - ROUND_MAGIC;
    let r = (xc - k * LN2_HI) - k * LN2_LO;
    // Taylor series of e^r on |r| ≤ ln2/2, Horner form
    let mut p = 1.0 / 6_227_020_800.0;
    p = fmadd(p, r, 1.0 / 479_001_600.0);
    p = fmadd(p, r, 1.0 / 39_916_800.0);
    p = fmadd(p, r, 1.0 / 3_628_800.0);
    p = fmadd(p, r, 1.0 / 362_880.0);
    p = fmadd(p, r, 1.0 / 40_320.0);
    p = fmadd(p, r, 1.0 / 5_040.0);
    p = fmadd(p, r, 1.0 / 720.0);
    p = fmadd(p, r, 1.0 / 120.0);
    p = fmadd(p, r, 1.0 / 24.0);
    p = fmadd(p, r, 1.0 / 6.0);
    p = fmadd(p, r, 0.5);
    p = fmadd(p, r, 1.0);
    p = fmadd(p, r, 1.0);
    // the low mantissa bits of `shifted` hold k in two's complement
    let scale = f64::from_bits(shifted.to_bits().wrapping_add(1023) << 52);
    let y = p * scale;
    if x < -708.0 {
        0.0
    } else if x > 709.0 {
        f64::INFINITY
    } else {
        y
    }
}

#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    let e = exp(-2.0 * x.abs());
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

/// In-place softmax over `row`, restricted to positions where `keep` is true.
/// Excluded positions are set to exactly zero.
pub fn masked_softmax_row(row: &mut [f64], keep: Option<&[bool]>) {
    let mut max = f64::NEG_INFINITY;
    match keep {
        None => row.iter().for_each(|&v| max = max.max(v)),
        Some(k) => row.iter().zip(k).filter(|(_, &k)| k).for_each(|(&v, _)| max = max.max(v)),
    }
    match keep {
        None => row.iter_mut().for_each(|v| *v = exp(*v - max)),
        Some(k) => row.iter_mut().zip(k).for_each(|(v, &k)| *v = if k { exp(*v - max) } else { 0.0 }),
    }
    let inv = 1.0 / row.iter().sum::<f64>();
    row.iter_mut().for_each(|v| *v *= inv);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline(always)]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + GELU_A * x * x * x)))
}

#[inline(always)]
pub fn gelu_grad(x: f64) -> f64 {
    let t = tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        out
    }

    fn ramp(len: usize, seed: f64) -> Vec<f64> {
        (0..len).map(|i| ((i as f64 + seed) * 0.37).sin()).collect()
    }

    #[test]
    fn blocked_matmul_matches_naive_on_ragged_shapes() {
        for (m, k, n) in [(1, 1, 1), (3, 5, 7), (4, 8, 8), (9, 3, 17), (13, 16, 24), (5, 1, 9)] {
            let a = ramp(m * k, 1.0);
            let b = ramp(k * n, 2.0);
            let got = matmul(&a, &b, m, k, n);
            for (x, y) in got.iter().zip(naive(&a, &b, m, k, n)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_variants() {
        let (m, k, n) = (6, 5, 9);
        let a = ramp(m * k, 0.5);
        let b = ramp(k * n, 1.5);
        let expect = naive(&a, &b, m, k, n);
        let mut out = vec![0.0; m * n];
        matmul_bt_acc(&a, &transpose(&b, k, n), &mut out, m, k, n);
        assert!(out.iter().zip(&expect).all(|(x, y)| (x - y).abs() < 1e-12));
        let mut out = vec![0.0; m * n];
        matmul_at_acc(&transpose(&a, m, k), &b, &mut out, k, m, n);
        assert!(out.iter().zip(&expect).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn exp_matches_std() {
        let mut worst: f64 = 0.0;
        for i in 0..200_001 {
            let x = -700.0 + 1400.0 * i as f64 / 200_000.0;
            let (a, b) = (exp(x), x.exp());
            worst = worst.max(((a - b) / b).abs());
        }
        for i in 0..20_001 {
            let x = -1.0 + 2.0 * i as f64 / 20_000.0;
            worst = worst.max(((exp(x) - x.exp()) / x.exp()).abs());
        }
        assert!(worst < 1e-15, "{worst}");
        assert_eq!(exp(0.0), 1.0);
        assert_eq!(exp(-800.0), 0.0);
        assert_eq!(exp(800.0), f64::INFINITY);
        assert!(exp(f64::NAN).is_nan());
    }

    #[test]
    fn tanh_matches_std() {
        for i in 0..20_001 {
            let x = -20.0 + 40.0 * i as f64 / 20_000.0;
            assert!((tanh(x) - x.tanh()).abs() < 1e-15, "{x}");
        }
        assert_eq!(tanh(0.0), 0.0);
    }

    #[test]
    fn softmax_zeroes_excluded() {
        let mut row = vec![1.0, 2.0, 3.0];
        masked_softmax_row(&mut row, Some(&[true, false, true]));
        assert_eq!(row[1], 0.0);
        assert!((row[0] + row[2] - 1.0).abs() < 1e-15);
    }
}
