//! Multidimensional FFT on row-major grids, built on `rustfft`.

use num_complex::Complex64;
use rustfft::FftPlanner;

/// In-place n-dimensional transform. The forward direction computes
/// `sum_k a_k exp(-2 pi i <j, k> / N)` along every axis; the inverse is unscaled.
pub fn fft_nd(data: &mut [Complex64], shape: &[usize], inverse: bool) {
    let total: usize = shape.iter().product();
    assert_eq!(total, data.len(), "grid shape does not match buffer");
    let mut planner = FftPlanner::new();
    let mut stride = total;
    for &len in shape {
        stride /= len;
        if len == 1 {
            continue;
        }
        let fft = if inverse {
            planner.plan_fft_inverse(len)
        } else {
            planner.plan_fft_forward(len)
        };
        let mut line = vec![Complex64::new(0.0, 0.0); len];
        let block = len * stride;
        for base in (0..total).step_by(block) {
            for inner in 0..stride {
                for (k, slot) in line.iter_mut().enumerate() {
                    *slot = data[base + inner + k * stride];
                }
                fft.process(&mut line);
                for (k, v) in line.iter().enumerate() {
                    data[base + inner + k * stride] = *v;
                }
            }
        }
    }
}

/// Row-major flat index of a multi-index.
pub fn flat_index(idx: &[usize], shape: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (&i, &s)| acc * s + i)
}

pub fn unflatten(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut out = vec![0; shape.len()];
    for i in (0..shape.len()).rev() {
        out[i] = flat % shape[i];
        flat /= shape[i];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_2d() {
        let shape = [4, 8];
        let orig: Vec<Complex64> = (0..32).map(|i| Complex64::new(i as f64, -(i as f64) / 3.0)).collect();
        let mut d = orig.clone();
        fft_nd(&mut d, &shape, false);
        fft_nd(&mut d, &shape, true);
        for (a, b) in d.iter().zip(&orig) {
            assert!((a / 32.0 - b).norm() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_dft() {
        let shape = [3, 4];
        let vals: Vec<Complex64> = (0..12).map(|i| Complex64::new((i * i % 7) as f64, 0.0)).collect();
        let mut d = vals.clone();
        fft_nd(&mut d, &shape, false);
        for j in 0..12 {
            let jj = unflatten(j, &shape);
            let mut acc = Complex64::new(0.0, 0.0);
            for k in 0..12 {
                let kk = unflatten(k, &shape);
                let ph = jj[0] as f64 * kk[0] as f64 / 3.0 + jj[1] as f64 * kk[1] as f64 / 4.0;
                acc += vals[k] * Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * ph);
            }
            assert!((acc - d[j]).norm() < 1e-10);
        }
        assert_eq!(flat_index(&[2, 3], &shape), 11);
    }
}
