//! Unnormalized complex DFTs: iterative radix-2 for power-of-two lengths,
//! direct O(n²) summation otherwise.

use std::f64::consts::PI;

use num_complex::Complex64;

/// Sign of the exponent: `Forward` uses `exp(-i…)`, `Inverse` uses `exp(+i…)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Forward => -1.0,
            Direction::Inverse => 1.0,
        }
    }
}

/// In-place unnormalized 1D transform.
pub fn dft_inplace(buf: &mut [Complex64], dir: Direction) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(buf, dir);
    } else {
        direct(buf, dir);
    }
}

fn radix2(buf: &mut [Complex64], dir: Direction) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let angle = dir.sign() * 2.0 * PI / len as f64;
        // Twiddles computed directly per index; repeated multiplication drifts.
        let twiddles: Vec<Complex64> = (0..half)
            .map(|k| Complex64::from_polar(1.0, angle * k as f64))
            .collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let a = buf[start + k];
                let b = buf[start + k + half] * twiddles[k];
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

fn direct(buf: &mut [Complex64], dir: Direction) {
    let n = buf.len();
    let angle = dir.sign() * 2.0 * PI / n as f64;
    let out: Vec<Complex64> = (0..n)
        .map(|k| {
            (0..n)
                .map(|j| buf[j] * Complex64::from_polar(1.0, angle * ((k * j) % n) as f64))
                .sum()
        })
        .collect();
    buf.copy_from_slice(&out);
}

/// In-place unnormalized 2D transform of a row-major `h × w` plane.
pub fn dft2_inplace(plane: &mut [Complex64], h: usize, w: usize, dir: Direction) {
    debug_assert_eq!(plane.len(), h * w);
    for row in plane.chunks_exact_mut(w) {
        dft_inplace(row, dir);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = plane[y * w + x];
        }
        dft_inplace(&mut column, dir);
        for y in 0..h {
            plane[y * w + x] = column[y];
        }
    }
}

/// Forward 2D transform of a real plane, unnormalized.
pub fn real_dft2(plane: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    dft2_inplace(&mut buf, h, w, Direction::Forward);
    buf
}
