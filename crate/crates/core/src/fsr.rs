//! Frequency-domain style recalibration.
//!
//! A feature map is split into amplitude (style) and phase (content) with a
//! `1/(HW)`-normalized 2D DFT. The amplitude is instance-normalized, a learned
//! gate mixes the normalized and original amplitudes, and the map is rebuilt
//! from the mixed amplitude and the untouched phase. The normalized amplitude
//! is divided by `√(HW)` before mixing so the rebuilt map keeps the scale of
//! the input at any resolution.

use crate::autodiff::{ParamStore, Tape, Var};
use crate::fft::real_dft2;
use crate::tensor::{Tensor, TensorError};

/// Index of the normalized-amplitude weight in the gate output.
pub const GATE_NORM: usize = 0;
/// Index of the original-amplitude weight in the gate output.
pub const GATE_ORG: usize = 1;

/// Amplitude and phase of a `[C, H, W]` map, both on the tape.
#[derive(Debug, Clone, Copy)]
pub struct Spectrum {
    pub amplitude: Var,
    pub phase: Var,
}

/// Parameter handles of one gate: weight `[2, 2C]` and bias `[2]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StyleGate {
    prefix: String,
    channels: usize,
}

impl StyleGate {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        StyleGate {
            prefix: prefix.into(),
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn weight_id(&self) -> String {
        format!("{}.gate.weight", self.prefix)
    }

    pub fn bias_id(&self) -> String {
        format!("{}.gate.bias", self.prefix)
    }

    /// Zero weight and bias, so the gate opens at (0.5, 0.5).
    pub fn init(&self, store: &mut ParamStore) -> Result<(), TensorError> {
        store.insert(self.weight_id(), Tensor::zeros(&[2, 2 * self.channels]))?;
        store.insert(self.bias_id(), Tensor::zeros(&[2]))
    }

    pub fn param_count(&self) -> usize {
        2 * 2 * self.channels + 2
    }
}

pub fn fft2(tape: &mut Tape, z: Var) -> Result<Spectrum, TensorError> {
    let stacked = tape.fft2(z)?;
    Ok(Spectrum {
        amplitude: tape.take(stacked, 0)?,
        phase: tape.take(stacked, 1)?,
    })
}

pub fn ifft2(tape: &mut Tape, spectrum: &Spectrum) -> Result<Var, TensorError> {
    tape.ifft2(spectrum.amplitude, spectrum.phase)
}

/// Per-channel zero-mean, unit-variance normalization over the frequency grid.
pub fn amplitude_instance_norm(tape: &mut Tape, amplitude: Var) -> Result<Var, TensorError> {
    tape.instance_norm(amplitude)
}

/// `sigmoid(W · [GAP(χ_norm); GAP(χ)] + b)`, a `[2]` vector indexed by
/// [`GATE_NORM`] and [`GATE_ORG`].
pub fn style_gate(
    tape: &mut Tape,
    store: &ParamStore,
    gate: &StyleGate,
    amp_norm: Var,
    amp: Var,
) -> Result<Var, TensorError> {
    let pooled_norm = tape.global_avg_pool(amp_norm)?;
    let pooled = tape.global_avg_pool(amp)?;
    let features = tape.concat(&[pooled_norm, pooled])?;
    let w = tape.param(store, &gate.weight_id())?;
    let b = tape.param(store, &gate.bias_id())?;
    let logits = tape.linear(w, features, b)?;
    tape.sigmoid(logits)
}

/// How the normalized and original amplitudes are mixed.
#[derive(Debug, Clone, Copy)]
pub enum Mixing<'a> {
    Learned(&'a StyleGate),
    /// Fixed `(λ_norm, λ_org)`; used to pin the layer in tests and ablations.
    Fixed { norm: f64, org: f64 },
}

/// Factor applied to the normalized amplitude before mixing: `1/√(HW)`.
pub fn normalized_branch_scale(h: usize, w: usize) -> f64 {
    1.0 / ((h * w) as f64).sqrt()
}

/// Full recalibration: `ifft2(max(0, λ_norm·χ_norm/√(HW) + λ_org·χ), γ)`.
pub fn fsr_forward(tape: &mut Tape, store: &ParamStore, z: Var, mixing: Mixing<'_>) -> Result<Var, TensorError> {
    let spectrum = fft2(tape, z)?;
    let (c, h, w) = tape.value(z).chw("fsr_forward")?;
    let amp_norm = amplitude_instance_norm(tape, spectrum.amplitude)?;
    // Unit variance per frequency bin rebuilds, through the unnormalized
    // inverse, a map of RMS ≈ √(HW); the factor brings it back to O(1) so
    // both branches live on the scale of the input features.
    let amp_norm = tape.scale(amp_norm, normalized_branch_scale(h, w))?;
    let mixed = match mixing {
        Mixing::Learned(gate) => {
            if c != gate.channels() {
                return Err(TensorError::dim(
                    "fsr_forward",
                    format!("gate built for {} channels, map has {c}", gate.channels()),
                ));
            }
            let lambdas = style_gate(tape, store, gate, amp_norm, spectrum.amplitude)?;
            let a = tape.scale_by(amp_norm, lambdas, GATE_NORM)?;
            let b = tape.scale_by(spectrum.amplitude, lambdas, GATE_ORG)?;
            tape.add(a, b)?
        }
        Mixing::Fixed { norm, org } => {
            let a = tape.scale(amp_norm, norm)?;
            let b = tape.scale(spectrum.amplitude, org)?;
            tape.add(a, b)?
        }
    };
    let clamped = tape.relu(mixed)?;
    tape.ifft2(clamped, spectrum.phase)
}

/// Amplitude and phase of a plain tensor, outside any tape.
pub fn spectrum_of(z: &Tensor) -> Result<(Tensor, Tensor), TensorError> {
    let (c, h, w) = z.chw("spectrum_of")?;
    let hw = h * w;
    let norm = 1.0 / hw as f64;
    let mut amp = Vec::with_capacity(c * hw);
    let mut phase = Vec::with_capacity(c * hw);
    for plane in z.data().chunks_exact(hw) {
        for v in real_dft2(plane, h, w) {
            let v = v * norm;
            amp.push(v.norm());
            phase.push(v.arg());
        }
    }
    Ok((Tensor::new(vec![c, h, w], amp)?, Tensor::new(vec![c, h, w], phase)?))
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::finite_diff_check;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct O(N²) evaluation of the normalized forward transform.
    fn naive_spectrum(z: &Tensor) -> Vec<Complex64> {
        let (c, h, w) = z.chw("oracle").unwrap();
        let mut out = Vec::new();
        for ch in 0..c {
            for a in 0..h {
                for b in 0..w {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for y in 0..h {
                        for x in 0..w {
                            let theta = -2.0 * PI * ((a * y) as f64 / h as f64 + (b * x) as f64 / w as f64);
                            acc += z.data()[(ch * h + y) * w + x] * Complex64::from_polar(1.0, theta);
                        }
                    }
                    out.push(acc / (h * w) as f64);
                }
            }
        }
        out
    }

    fn run_spectrum(z: &Tensor) -> (Tensor, Tensor) {
        let mut tape = Tape::new(true);
        let v = tape.constant(z.clone()).unwrap();
        let s = fft2(&mut tape, v).unwrap();
        (tape.value(s.amplitude).clone(), tape.value(s.phase).clone())
    }

    #[test]
    fn constant_map_is_dc_only() {
        let (amp, phase) = run_spectrum(&Tensor::full(&[1, 4, 4], 0.7));
        assert!((amp.data()[0] - 0.7).abs() < 1e-15);
        assert_eq!(phase.data()[0], 0.0);
        assert!(amp.data()[1..].iter().all(|&v| v < 1e-15));
    }

    #[test]
    fn parseval_under_normalized_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random(&mut rng, &[2, 8, 6]);
        let (amp, _) = run_spectrum(&z);
        for ch in 0..2 {
            let energy: f64 = z.data()[ch * 48..][..48].iter().map(|v| v * v).sum();
            let spectral: f64 = amp.data()[ch * 48..][..48].iter().map(|v| v * v).sum();
            assert!((energy - 48.0 * spectral).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_direct_dft_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (h, w) in [(8, 8), (6, 5), (2, 3)] {
            let z = random(&mut rng, &[2, h, w]);
            let (amp, phase) = run_spectrum(&z);
            for (k, want) in naive_spectrum(&z).iter().enumerate() {
                let got = Complex64::from_polar(amp.data()[k], phase.data()[k]);
                assert!((got - want).norm() < 1e-9, "{h}x{w} bin {k}");
            }
        }
    }

    #[test]
    fn conjugate_symmetry_of_real_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w) = (6, 8);
        let (amp, phase) = run_spectrum(&random(&mut rng, &[1, h, w]));
        for a in 0..h {
            for b in 0..w {
                let k = a * w + b;
                let m = ((h - a) % h) * w + (w - b) % w;
                assert!((amp.data()[k] - amp.data()[m]).abs() < 1e-9);
                if amp.data()[k] > 1e-9 {
                    // Compare as unit phasors so ±π on the real axis agree.
                    let p = Complex64::from_polar(1.0, phase.data()[k]);
                    let q = Complex64::from_polar(1.0, -phase.data()[m]);
                    assert!((p - q).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn round_trip_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = random(&mut rng, &[3, 16, 16]);
        let mut tape = Tape::new(true);
        let v = tape.constant(z.clone()).unwrap();
        let s = fft2(&mut tape, v).unwrap();
        let back = ifft2(&mut tape, &s).unwrap();
        assert!(tape.value(back).max_abs_diff(&z) < 1e-9);
    }

    #[test]
    fn dc_only_spectrum_inverts_to_constant() {
        let mut amp = Tensor::zeros(&[1, 4, 4]);
        amp.data_mut()[0] = 1.25;
        let mut tape = Tape::new(true);
        let a = tape.constant(amp).unwrap();
        let p = tape.constant(Tensor::zeros(&[1, 4, 4])).unwrap();
        let z = tape.ifft2(a, p).unwrap();
        assert!(tape.value(z).data().iter().all(|v| (v - 1.25).abs() < 1e-12));
    }

    #[test]
    fn asymmetric_spectrum_is_rejected_in_checked_mode() {
        let mut tape = Tape::new(true);
        let a = tape.constant(Tensor::full(&[1, 4, 4], 1.0)).unwrap();
        let p = tape.constant(Tensor::from_fn(&[1, 4, 4], |i| i as f64 * 0.37)).unwrap();
        assert!(matches!(tape.ifft2(a, p), Err(TensorError::SpectralConsistency { .. })));
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn gradient_magnitude(z: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let dx = z[y * w + (x + 1) % w] - z[y * w + x];
                let dy = z[((y + 1) % h) * w + x] - z[y * w + x];
                out.push((dx * dx + dy * dy).sqrt());
            }
        }
        out
    }

    #[test]
    fn amplitude_swap_keeps_phase_structure() {
        // Two images with distinct edge layouts: a square and a disc.
        let n = 32;
        let square = Tensor::from_fn(&[1, n, n], |i| {
            let (y, x) = (i / n, i % n);
            if (6..14).contains(&y) && (18..28).contains(&x) { 1.0 } else { 0.0 }
        });
        let disc = Tensor::from_fn(&[1, n, n], |i| {
            let (y, x) = ((i / n) as f64 - 20.0, (i % n) as f64 - 10.0);
            if x * x + y * y < 36.0 { 1.0 } else { 0.0 }
        });
        let (_, phase_a) = spectrum_of(&square).unwrap();
        let (amp_b, _) = spectrum_of(&disc).unwrap();
        let mut tape = Tape::new(true);
        let a = tape.constant(amp_b).unwrap();
        let p = tape.constant(phase_a).unwrap();
        let mixed = tape.ifft2(a, p).unwrap();
        let edges_mixed = gradient_magnitude(tape.value(mixed).data(), n, n);
        let phase_corr = correlation(&edges_mixed, &gradient_magnitude(square.data(), n, n));
        let amp_corr = correlation(&edges_mixed, &gradient_magnitude(disc.data(), n, n));
        assert!(phase_corr > amp_corr, "phase {phase_corr} vs amplitude {amp_corr}");
    }

    #[test]
    fn amplitude_norm_examples() {
        let mut tape = Tape::new(true);
        let c = tape.constant(Tensor::full(&[2, 4, 4], 3.0)).unwrap();
        let n = amplitude_instance_norm(&mut tape, c).unwrap();
        assert!(tape.value(n).data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (amp, _) = spectrum_of(&random(&mut rng, &[3, 8, 8])).unwrap();
        let a = tape.constant(amp.clone()).unwrap();
        let n = amplitude_instance_norm(&mut tape, a).unwrap();
        for plane in tape.value(n).data().chunks(64) {
            assert!((plane.iter().sum::<f64>() / 64.0).abs() < 1e-9);
        }
    }

    #[test]
    fn amplitude_norm_is_affine_invariant() {
        // ε = 1e-5 perturbs scale invariance by O(ε/var); a spread of order
        // 10³ puts that far below the 1e-9 tolerance.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = Tensor::from_fn(&[2, 8, 8], |_| rng.gen_range(0.0..3000.0));
        let (gains, shifts) = ([2.5, 0.4], [10.0, 0.0]);
        let scaled = Tensor::from_fn(&[2, 8, 8], |i| base.data()[i] * gains[i / 64] + shifts[i / 64]);
        let mut tape = Tape::new(true);
        let a = tape.constant(base).unwrap();
        let b = tape.constant(scaled).unwrap();
        let na = amplitude_instance_norm(&mut tape, a).unwrap();
        let nb = amplitude_instance_norm(&mut tape, b).unwrap();
        assert!(tape.value(na).max_abs_diff(tape.value(nb)) < 1e-9);
    }

    fn gate_with(store: &mut ParamStore, channels: usize, bias: [f64; 2]) -> StyleGate {
        let gate = StyleGate::new("g", channels);
        gate.init(store).unwrap();
        store.get_mut(&gate.bias_id()).unwrap().value.data_mut().copy_from_slice(&bias);
        gate
    }

    #[test]
    fn gate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = random(&mut rng, &[2, 4, 4]);
        for (bias, want) in [([0.0, 0.0], [0.5, 0.5]), ([20.0, -20.0], [1.0, 0.0])] {
            let mut store = ParamStore::new();
            let gate = gate_with(&mut store, 2, bias);
            let mut tape = Tape::new(true);
            let v = tape.constant(z.clone()).unwrap();
            let s = fft2(&mut tape, v).unwrap();
            let n = amplitude_instance_norm(&mut tape, s.amplitude).unwrap();
            let l = style_gate(&mut tape, &store, &gate, n, s.amplitude).unwrap();
            let got = tape.value(l).data();
            assert!((got[GATE_NORM] - want[0]).abs() < 1e-8);
            assert!((got[GATE_ORG] - want[1]).abs() < 1e-8);
            assert!(got.iter().all(|&v| v > 0.0 && v < 1.0 || (v - want[0]).abs() < 1e-8 || (v - want[1]).abs() < 1e-8));
        }
    }

    #[test]
    fn gate_weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = random(&mut rng, &[2, 4, 4]);
        let mut store = ParamStore::new();
        let gate = StyleGate::new("g", 2);
        store.insert(gate.weight_id(), random(&mut rng, &[2, 4])).unwrap();
        store.insert(gate.bias_id(), random(&mut rng, &[2])).unwrap();
        let err = finite_diff_check(&store, 1e-4, |t, s| {
            let v = t.constant(z.clone())?;
            let sp = fft2(t, v)?;
            let n = amplitude_instance_norm(t, sp.amplitude)?;
            let l = style_gate(t, s, &gate, n, sp.amplitude)?;
            t.dot_const(l, &[0.7, -1.3])
        })
        .unwrap();
        assert!(err < 1e-3, "{err:e}");
    }

    #[test]
    fn identity_mixing_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = random(&mut rng, &[3, 8, 8]);
        let mut tape = Tape::new(true);
        let v = tape.constant(z.clone()).unwrap();
        let out = fsr_forward(&mut tape, &ParamStore::new(), v, Mixing::Fixed { norm: 0.0, org: 1.0 }).unwrap();
        assert!(tape.value(out).max_abs_diff(&z) < 1e-9);
    }

    /// The normalized amplitude has Σχ² = HW per channel, so after the
    /// `1/√(HW)` factor and the clamp, Parseval caps the rebuilt RMS at 1.
    #[test]
    fn normalized_branch_keeps_unit_scale_at_any_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [8, 32, 64] {
            let z = Tensor::from_fn(&[2, n, n], |_| 50.0 * rng.gen_range(-1.0..1.0));
            let mut tape = Tape::new(true);
            let v = tape.constant(z).unwrap();
            let out = fsr_forward(&mut tape, &ParamStore::new(), v, Mixing::Fixed { norm: 1.0, org: 0.0 }).unwrap();
            let data = tape.value(out).data();
            let rms = (data.iter().map(|x| x * x).sum::<f64>() / data.len() as f64).sqrt();
            assert!(rms > 0.3 && rms <= 1.0 + 1e-9, "{n}: {rms}");
        }
    }

    /// Same content under two amplitude styles differing by a gain. Full
    /// normalization pulls the reconstructions together.
    #[test]
    fn normalized_mixing_reduces_style_distance() {
        let n = 16;
        let content = Tensor::from_fn(&[1, n, n], |i| {
            let (y, x) = ((i / n) as f64, (i % n) as f64);
            (0.7 * x).sin() + (0.4 * y).cos() + if (4.0..10.0).contains(&x) { 1.0 } else { 0.0 }
        });
        let (amp, phase) = spectrum_of(&content).unwrap();
        let restyle = |gain: f64| -> Tensor {
            let amp2 = Tensor::from_fn(&[1, n, n], |i| amp.data()[i] * gain);
            let mut tape = Tape::new(true);
            let a = tape.constant(amp2).unwrap();
            let p = tape.constant(phase.clone()).unwrap();
            let z = tape.ifft2(a, p).unwrap();
            tape.value(z).clone()
        };
        let za = restyle(1.0);
        let zb = restyle(3.0);
        let recal = |z: &Tensor| {
            let mut tape = Tape::new(true);
            let v = tape.constant(z.clone()).unwrap();
            let out = fsr_forward(&mut tape, &ParamStore::new(), v, Mixing::Fixed { norm: 1.0, org: 0.0 }).unwrap();
            tape.value(out).clone()
        };
        let dist = |a: &Tensor, b: &Tensor| {
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        assert!(dist(&recal(&za), &recal(&zb)) < dist(&za, &zb));
    }

    #[test]
    fn recalibration_preserves_phase() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = random(&mut rng, &[2, 8, 8]);
        let mut store = ParamStore::new();
        let gate = StyleGate::new("g", 2);
        store.insert(gate.weight_id(), random(&mut rng, &[2, 4])).unwrap();
        store.insert(gate.bias_id(), random(&mut rng, &[2])).unwrap();
        let mut tape = Tape::new(true);
        let v = tape.constant(z.clone()).unwrap();
        let out = fsr_forward(&mut tape, &store, v, Mixing::Learned(&gate)).unwrap();
        let (amp_out, phase_out) = spectrum_of(tape.value(out)).unwrap();
        let (_, phase_in) = spectrum_of(&z).unwrap();
        let mut compared = 0;
        for k in 0..amp_out.len() {
            if amp_out.data()[k] > 1e-9 {
                let p = Complex64::from_polar(1.0, phase_out.data()[k]);
                let q = Complex64::from_polar(1.0, phase_in.data()[k]);
                assert!((p - q).norm() < 1e-6, "bin {k}");
                compared += 1;
            }
        }
        assert!(compared > 0);
    }

    #[test]
    fn composite_layer_passes_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(20 + seed);
            let mut store = ParamStore::new();
            let gate = StyleGate::new("g", 2);
            store.insert("z", random(&mut rng, &[2, 4, 4])).unwrap();
            store.insert(gate.weight_id(), random(&mut rng, &[2, 4])).unwrap();
            store.insert(gate.bias_id(), random(&mut rng, &[2])).unwrap();
            let proj: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let err = finite_diff_check(&store, 1e-4, |t, s| {
                let z = t.param(s, "z")?;
                let out = fsr_forward(t, s, z, Mixing::Learned(&gate))?;
                t.dot_const(out, &proj)
            })
            .unwrap();
            assert!(err < 1e-3, "seed {seed}: {err:e}");
        }
    }
}
