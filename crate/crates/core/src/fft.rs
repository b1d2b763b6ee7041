//! Power-of-two complex FFT used by the large-kernel convolution path.
//!
//! Plain complex radix-2 Cooley-Tukey with precomputed twiddles; plan sizes
//! round up to the next power of two. At desk scale this is plenty; a
//! real-to-complex transform would halve the work but is not needed.

#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    fn mul(self, o: Complex) -> Complex {
        Complex {
            re: self.re * o.re - self.im * o.im,
            im: self.re * o.im + self.im * o.re,
        }
    }
}

pub(crate) fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}

/// Twiddle table: w[j] = exp(-i * 2*pi * j / n) for j in 0..n/2.
fn twiddles(n: usize) -> Vec<Complex> {
    let step = -2.0 * std::f64::consts::PI / n as f64;
    (0..n / 2)
        .map(|j| {
            let a = step * j as f64;
            Complex {
                re: a.cos(),
                im: a.sin(),
            }
        })
        .collect()
}

/// In-place radix-2 FFT over a power-of-two length. `table` must come from
/// `twiddles(buf.len())`. Inverse transform conjugates the twiddles and
/// scales by 1/n at the end.
fn fft_inplace(buf: &mut [Complex], table: &[Complex], inverse: bool) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let stride = n / len;
        let half = len / 2;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let mut w = table[k * stride];
                if inverse {
                    w.im = -w.im;
                }
                let u = buf[start + k];
                let v = buf[start + k + half].mul(w);
                buf[start + k] = Complex {
                    re: u.re + v.re,
                    im: u.im + v.im,
                };
                buf[start + k + half] = Complex {
                    re: u.re - v.re,
                    im: u.im - v.im,
                };
            }
        }
        len <<= 1;
    }
    if inverse {
        let s = 1.0 / n as f64;
        for x in buf.iter_mut() {
            x.re *= s;
            x.im *= s;
        }
    }
}

/// 2D FFT over a ph x pw buffer (both powers of two), rows then columns.
fn fft2d(buf: &mut [Complex], ph: usize, pw: usize, inverse: bool) {
    let row_table = twiddles(pw);
    for r in 0..ph {
        fft_inplace(&mut buf[r * pw..(r + 1) * pw], &row_table, inverse);
    }
    let col_table = twiddles(ph);
    let mut col = vec![Complex::default(); ph];
    for c in 0..pw {
        for r in 0..ph {
            col[r] = buf[r * pw + c];
        }
        fft_inplace(&mut col, &col_table, inverse);
        for r in 0..ph {
            buf[r * pw + c] = col[r];
        }
    }
}

/// Full 2D linear convolution (true convolution, kernel flipped relative to
/// correlation) of `a` (ha x wa) with `b` (hb x wb) via zero-padded FFT.
/// Output is (ha+hb-1) x (wa+wb-1).
pub(crate) fn convolve_full_fft(
    a: &[f64],
    (ha, wa): (usize, usize),
    b: &[f64],
    (hb, wb): (usize, usize),
) -> Vec<f64> {
    let oh = ha + hb - 1;
    let ow = wa + wb - 1;
    let ph = next_pow2(oh);
    let pw = next_pow2(ow);
    let mut fa = vec![Complex::default(); ph * pw];
    let mut fb = vec![Complex::default(); ph * pw];
    for r in 0..ha {
        for c in 0..wa {
            fa[r * pw + c].re = a[r * wa + c];
        }
    }
    for r in 0..hb {
        for c in 0..wb {
            fb[r * pw + c].re = b[r * wb + c];
        }
    }
    fft2d(&mut fa, ph, pw, false);
    fft2d(&mut fb, ph, pw, false);
    for (x, y) in fa.iter_mut().zip(fb.iter()) {
        *x = x.mul(*y);
    }
    fft2d(&mut fa, ph, pw, true);
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = fa[r * pw + c].re;
        }
    }
    out
}
