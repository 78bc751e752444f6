//! Ideal radial frequency filtering of image planes.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::tensor::Real;

/// Which side of the radial cutoff survives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    High,
    Low,
}

/// Signed frequency of bin `k` on an axis of length `n`.
fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= (n - 1) / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Radial distance of bin `(ky, kx)` from the zero-frequency bin of the
/// centred spectrum, normalized by the spectrum's half-diagonal.
pub fn radial_distance(ky: usize, kx: usize, h: usize, w: usize) -> f64 {
    let fy = signed_freq(ky, h);
    let fx = signed_freq(kx, w);
    let half_diag = ((h as f64 / 2.0).powi(2) + (w as f64 / 2.0).powi(2)).sqrt();
    (fy * fy + fx * fx).sqrt() / half_diag
}

/// Mask of kept bins for a `h × w` spectrum. High-pass removes every bin with
/// radial distance `<= cutoff`; low-pass keeps exactly those bins.
pub fn band_mask(h: usize, w: usize, cutoff: f64, band: Band) -> Vec<bool> {
    let mut mask = Vec::with_capacity(h * w);
    for ky in 0..h {
        for kx in 0..w {
            let removed_by_highpass = radial_distance(ky, kx, h, w) <= cutoff;
            mask.push(match band {
                Band::High => !removed_by_highpass,
                Band::Low => removed_by_highpass,
            });
        }
    }
    mask
}

/// Filter every `h × w` plane in `data` in place, keeping the real part of the
/// inverse transform. The mask is symmetric under frequency negation, so the
/// operator is real, linear and self-adjoint.
pub fn filter_planes<T: Real>(data: &mut [T], h: usize, w: usize, cutoff: f64, band: Band) {
    let plane = h * w;
    if plane == 0 {
        return;
    }
    let mask = band_mask(h, w, cutoff, band);
    let mut planner = FftPlanner::<f64>::new();
    let row_fwd = planner.plan_fft_forward(w);
    let row_inv = planner.plan_fft_inverse(w);
    let col_fwd = planner.plan_fft_forward(h);
    let col_inv = planner.plan_fft_inverse(h);
    let mut buf = vec![Complex::new(0.0, 0.0); plane];
    let mut col = vec![Complex::new(0.0, 0.0); h];
    let scale = 1.0 / plane as f64;

    for chunk in data.chunks_mut(plane) {
        for (b, &v) in buf.iter_mut().zip(chunk.iter()) {
            *b = Complex::new(v.as_f64(), 0.0);
        }
        for row in buf.chunks_mut(w) {
            row_fwd.process(row);
        }
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            col_fwd.process(&mut col);
            for y in 0..h {
                buf[y * w + x] = if mask[y * w + x] {
                    col[y]
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
        }
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            col_inv.process(&mut col);
            for y in 0..h {
                buf[y * w + x] = col[y];
            }
        }
        for row in buf.chunks_mut(w) {
            row_inv.process(row);
        }
        for (v, b) in chunk.iter_mut().zip(&buf) {
            *v = T::lit(b.re * scale);
        }
    }
}
