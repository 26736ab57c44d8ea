//! Raw loops shared by forward and backward rules.

/// Reductions longer than this accumulate in `f64`.
pub(crate) const WIDE_ACCUMULATION: usize = 4096;

/// `a[m×k] · b[k×n]`, row-major.
pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    if k > WIDE_ACCUMULATION {
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for p in 0..k {
                let av = a[i * k + p] as f64;
                let row = &b[p * n..(p + 1) * n];
                acc.iter_mut().zip(row).for_each(|(o, &bv)| *o += av * bv as f64);
            }
            out[i * n..(i + 1) * n]
                .iter_mut()
                .zip(&acc)
                .for_each(|(o, &v)| *o = v as f32);
        }
        return out;
    }
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(row).for_each(|(o, &bv)| *o += av * bv);
        }
    }
    out
}

pub(crate) fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub(crate) fn sum_f64(values: &[f32]) -> f64 {
    values.iter().map(|&v| v as f64).sum()
}

/// Unfolds one `[c, h, w]` image into `[c·k·k, h_out·w_out]` columns.
pub(crate) fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
) -> (Vec<f32>, usize, usize) {
    let h_out = h + 2 * pad + 1 - k;
    let w_out = w + 2 * pad + 1 - k;
    let mut cols = vec![0.0f32; c * k * k * h_out * w_out];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let base = row * h_out * w_out;
                for oi in 0..h_out {
                    let ii = (oi + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..w_out {
                        let jj = (oj + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[base + oi * w_out + oj] =
                            x[(ci * h + ii as usize) * w + jj as usize];
                    }
                }
            }
        }
    }
    (cols, h_out, w_out)
}

/// Adjoint of [`im2col`]: folds columns back, accumulating into `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_add(
    cols: &[f32],
    dx: &mut [f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) {
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let base = row * h_out * w_out;
                for oi in 0..h_out {
                    let ii = (oi + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..w_out {
                        let jj = (oj + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dx[(ci * h + ii as usize) * w + jj as usize] +=
                            cols[base + oi * w_out + oj];
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_K: f32 = 0.044_715;

pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wide_and_narrow_matmul_agree() {
        let k = WIDE_ACCUMULATION + 3;
        let a: Vec<f32> = (0..2 * k).map(|i| ((i % 7) as f32 - 3.0) * 0.1).collect();
        let b: Vec<f32> = (0..k * 2).map(|i| ((i % 5) as f32 - 2.0) * 0.1).collect();
        let wide = matmul(&a, &b, 2, k, 2);
        let mut naive = [0.0f64; 4];
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..k {
                    naive[i * 2 + j] += a[i * k + p] as f64 * b[p * 2 + j] as f64;
                }
            }
        }
        for (w, n) in wide.iter().zip(naive) {
            assert!((*w as f64 - n).abs() < 1e-3);
        }
    }

    #[test]
    fn softplus_tails() {
        assert_eq!(softplus(30.0), 30.0);
        assert!((softplus(0.0) - 2f32.ln()).abs() < 1e-7);
        assert!(softplus(-30.0) > 0.0);
    }
}
