//! Synthetic multi-domain segmentation data with feature skew.
//!
//! Content (smooth blobs defining binary labels) is drawn independently of
//! style. Each domain restyles its renderings through radial spectral band
//! gains, a gamma curve, a low-frequency bias field and Gaussian noise. Label
//! statistics are shared across domains by construction: every domain draws
//! the same stratified set of foreground fractions.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::fft::{dft2_inplace, real_dft2, Direction};
use crate::rng::stream;
use crate::tensor::{LabelMap, Tensor};

/// Lowest and highest stratified foreground fraction.
const FRACTION_RANGE: (f64, f64) = (0.10, 0.50);
/// Outer radii of the spectral bands, as a fraction of the Nyquist radius.
/// The last band extends to the corners.
pub const BAND_EDGES: [f64; 3] = [0.125, 0.25, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainStyle {
    /// Multipliers on the (non-DC) spectrum per radial band, low to high.
    pub amplitude_gain: [f64; 4],
    pub intensity_gamma: f64,
    /// Amplitude of the additive low-frequency field.
    pub bias_field: f64,
    pub noise_sigma: f64,
}

impl DomainStyle {
    pub fn identity() -> Self {
        DomainStyle {
            amplitude_gain: [1.0; 4],
            intensity_gamma: 1.0,
            bias_field: 0.0,
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.amplitude_gain.iter().any(|g| !(*g > 0.0)) {
            return Err("band gains must be positive".into());
        }
        if !(self.intensity_gamma > 0.0) {
            return Err("gamma must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) || !(self.bias_field >= 0.0) {
            return Err("noise and bias field must be nonnegative".into());
        }
        Ok(())
    }
}

/// Four clearly separated styles: neutral, blurred, sharpened and mixed.
pub fn default_styles() -> Vec<DomainStyle> {
    vec![
        DomainStyle {
            amplitude_gain: [1.0, 1.0, 1.0, 1.0],
            intensity_gamma: 1.0,
            bias_field: 0.0,
            noise_sigma: 0.02,
        },
        DomainStyle {
            amplitude_gain: [1.6, 1.2, 0.6, 0.4],
            intensity_gamma: 0.5,
            bias_field: 0.15,
            noise_sigma: 0.03,
        },
        DomainStyle {
            amplitude_gain: [0.6, 0.8, 1.8, 2.5],
            intensity_gamma: 2.0,
            bias_field: 0.05,
            noise_sigma: 0.01,
        },
        DomainStyle {
            amplitude_gain: [1.3, 0.5, 2.0, 1.2],
            intensity_gamma: 3.0,
            bias_field: 0.2,
            noise_sigma: 0.06,
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub labels: LabelMap,
    pub domain_id: usize,
    pub split: Split,
}

impl Sample {
    pub fn foreground_fraction(&self) -> f64 {
        self.labels.count(1) as f64 / self.labels.classes().len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain_id: usize,
    pub style: DomainStyle,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// What to generate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub image_size: usize,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub styles: Vec<DomainStyle>,
    pub augment: bool,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            image_size: 64,
            train_per_domain: 12,
            test_per_domain: 8,
            styles: default_styles(),
            augment: false,
        }
    }
}

/// One client per domain; each dataset also carries its domain's test set.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationData {
    pub domains: Vec<DomainDataset>,
}

#[derive(Debug, Clone)]
struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    wobble: f64,
    lobes: f64,
    phase: f64,
}

impl Blob {
    /// Smallest scale at which the blob covers `(y, x)`. Scaling stretches
    /// both axes equally, so the angle in the blob frame does not depend on
    /// the scale and membership is `‖(u, v)‖ / radius(θ) < s`.
    fn critical_scale(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (sin, cos) = self.angle.sin_cos();
        let u = (cos * dx + sin * dy) / self.rx;
        let v = (-sin * dx + cos * dy) / self.ry;
        let radius = 1.0 + self.wobble * (self.lobes * v.atan2(u) + self.phase).sin();
        (u * u + v * v).sqrt() / radius
    }
}

/// Clean rendering and labels for one content draw whose foreground covers
/// `target` of the image, up to ties in pixel order.
pub fn render_content(content_seed: u64, size: usize, target: f64) -> (Tensor, LabelMap) {
    let mut rng = stream(content_seed, &[]);
    let n = size as f64;
    let count = rng.gen_range(1..=3);
    let blobs: Vec<Blob> = (0..count)
        .map(|_| Blob {
            cy: rng.gen_range(0.25..0.75) * n,
            cx: rng.gen_range(0.25..0.75) * n,
            ry: rng.gen_range(0.08..0.2) * n,
            rx: rng.gen_range(0.08..0.2) * n,
            angle: rng.gen_range(0.0..PI),
            wobble: rng.gen_range(0.05..0.2),
            lobes: f64::from(rng.gen_range(3..7)),
            phase: rng.gen_range(0.0..2.0 * PI),
        })
        .collect();
    // Each pixel joins the foreground once the scale passes its critical
    // value; picking the k-th smallest critical scale hits the target count.
    let critical: Vec<f64> = (0..size * size)
        .map(|i| {
            let (py, px) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
            blobs.iter().map(|b| b.critical_scale(py, px)).fold(f64::INFINITY, f64::min)
        })
        .collect();
    let k = ((target * n * n).round() as usize).clamp(1, size * size);
    let mut sorted = critical.clone();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[k - 1];
    let labels: Vec<usize> = critical.iter().map(|&c| usize::from(c <= threshold)).collect();

    // Fixed tissue levels plus a faint smooth texture; contrast and
    // brightness differences are left to the domain style.
    let (bg, fg) = (0.25, 0.65);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.005..0.015),
                rng.gen_range(1.0..6.0) * 2.0 * PI / n,
                rng.gen_range(1.0..6.0) * 2.0 * PI / n,
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let image = Tensor::from_fn(&[1, size, size], |i| {
        let (y, x) = ((i / size) as f64, (i % size) as f64);
        let base = if labels[i] == 1 { fg } else { bg };
        base + waves.iter().map(|&(a, ky, kx, p)| a * (ky * y + kx * x + p).sin()).sum::<f64>()
    });
    let labels = LabelMap::new(size, size, labels).expect("square label map");
    (image, labels)
}

fn band_of(a: usize, b: usize, size: usize) -> usize {
    let fa = a.min(size - a) as f64;
    let fb = b.min(size - b) as f64;
    let r = (fa * fa + fb * fb).sqrt() / (size as f64 / 2.0);
    BAND_EDGES.iter().position(|&e| r < e).unwrap_or(BAND_EDGES.len())
}

/// Spectral gains → gamma → bias field → noise → clamp to `[0, 1]`.
pub fn apply_style(clean: &Tensor, style: &DomainStyle, rng: &mut ChaCha8Rng) -> Tensor {
    let size = clean.shape()[1];
    let hw = size * size;
    let mut spec = real_dft2(clean.data(), size, size);
    for (k, v) in spec.iter_mut().enumerate().skip(1) {
        *v *= style.amplitude_gain[band_of(k / size, k % size, size)];
    }
    dft2_inplace(&mut spec, size, size, Direction::Inverse);
    let (phase_y, phase_x) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let noise = Normal::new(0.0, style.noise_sigma.max(0.0)).expect("finite sigma");
    let identity_gains = style.amplitude_gain.iter().all(|&g| g == 1.0);
    let data = spec
        .iter()
        .zip(clean.data())
        .enumerate()
        .map(|(i, (z, &orig)): (usize, (&Complex64, &f64))| {
            // Skip the round trip entirely for unit gains so the identity
            // style reproduces the rendering exactly.
            let v = if identity_gains { orig } else { z.re / hw as f64 };
            let mut v = v.clamp(0.0, 1.0).powf(style.intensity_gamma);
            if style.bias_field > 0.0 {
                let (y, x) = ((i / size) as f64, (i % size) as f64);
                let t = 2.0 * PI / size as f64;
                v += style.bias_field * ((t * y + phase_y).sin() + (t * x + phase_x).cos()) * 0.5;
            }
            if style.noise_sigma > 0.0 {
                v += noise.sample(rng);
            }
            v.clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(vec![1, size, size], data).expect("same shape")
}

/// Foreground targets shared by every domain: a stratified grid over
/// [`FRACTION_RANGE`] in a per-domain shuffled order.
fn stratified_targets(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (lo, hi) = FRACTION_RANGE;
    let mut t: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * (i as f64 + 0.5) / n as f64).collect();
    t.shuffle(rng);
    t
}

pub fn generate_domain(
    domain_id: usize,
    style: &DomainStyle,
    n_train: usize,
    n_test: usize,
    size: usize,
    seed: u64,
) -> DomainDataset {
    let split_samples = |split: Split, n: usize| -> Vec<Sample> {
        let tag = match split {
            Split::Train => 0,
            Split::Test => 1,
        };
        let mut order_rng = stream(seed, &[domain_id as u64, tag, 0]);
        stratified_targets(n, &mut order_rng)
            .into_iter()
            .enumerate()
            .map(|(i, target)| {
                let content_seed = crate::rng::derive_seed(seed, &[domain_id as u64, tag, 1, i as u64]);
                let (clean, labels) = render_content(content_seed, size, target);
                let mut style_rng = stream(seed, &[domain_id as u64, tag, 2, i as u64]);
                Sample {
                    image: apply_style(&clean, style, &mut style_rng),
                    labels,
                    domain_id,
                    split,
                }
            })
            .collect()
    };
    DomainDataset {
        domain_id,
        style: style.clone(),
        train: split_samples(Split::Train, n_train),
        test: split_samples(Split::Test, n_test),
    }
}

/// One domain per client, `spec.styles.len()` clients.
pub fn make_federation_data(spec: &DataSpec, seed: u64) -> Result<FederationData, String> {
    if spec.styles.is_empty() {
        return Err("need at least one domain style".into());
    }
    for (i, s) in spec.styles.iter().enumerate() {
        s.validate().map_err(|e| format!("style {i}: {e}"))?;
        if spec.styles[..i].contains(s) {
            return Err(format!("style {i} duplicates an earlier style"));
        }
    }
    if spec.train_per_domain == 0 || spec.test_per_domain == 0 {
        return Err("need at least one train and one test sample per domain".into());
    }
    let domains = spec
        .styles
        .iter()
        .enumerate()
        .map(|(d, style)| generate_domain(d, style, spec.train_per_domain, spec.test_per_domain, spec.image_size, seed))
        .collect();
    Ok(FederationData { domains })
}

/// Random flip and quarter rotation applied identically to image and labels.
pub fn augment(sample: &Sample, rng: &mut ChaCha8Rng) -> Sample {
    let size = sample.labels.height();
    let flip = rng.gen_bool(0.5);
    let turns = rng.gen_range(0..4);
    let map = |y: usize, x: usize| -> usize {
        let (mut y, mut x) = (y, x);
        for _ in 0..turns {
            (y, x) = (x, size - 1 - y);
        }
        if flip {
            x = size - 1 - x;
        }
        y * size + x
    };
    let mut image = vec![0.0; size * size];
    let mut labels = vec![0; size * size];
    for y in 0..size {
        for x in 0..size {
            let dst = map(y, x);
            image[dst] = sample.image.data()[y * size + x];
            labels[dst] = sample.labels.classes()[y * size + x];
        }
    }
    Sample {
        image: Tensor::new(vec![1, size, size], image).expect("same shape"),
        labels: LabelMap::new(size, size, labels).expect("same shape"),
        domain_id: sample.domain_id,
        split: sample.split,
    }
}

/// Writes `d{domain}_{split}_{index}.f64` (little-endian image values),
/// matching `.u8` label masks and a `manifest.txt`.
pub fn dump_dataset(data: &FederationData, dir: &Path, seed: u64) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    writeln!(manifest, "seed = {seed}").ok();
    for d in &data.domains {
        let size = d.train.first().or(d.test.first()).map_or(0, |s| s.labels.height());
        writeln!(
            manifest,
            "domain {} shape = 1x{size}x{size} train = {} test = {} style = {}",
            d.domain_id,
            d.train.len(),
            d.test.len(),
            serde_json::to_string(&d.style).map_err(io::Error::other)?
        )
        .ok();
        for (split, samples) in [("train", &d.train), ("test", &d.test)] {
            for (i, s) in samples.iter().enumerate() {
                let stem = format!("d{}_{split}_{i:03}", d.domain_id);
                let bytes: Vec<u8> = s.image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                fs::write(dir.join(format!("{stem}.f64")), bytes)?;
                let mask: Vec<u8> = s.labels.classes().iter().map(|&c| c as u8).collect();
                fs::write(dir.join(format!("{stem}.u8")), mask)?;
            }
        }
    }
    fs::write(dir.join("manifest.txt"), manifest)
}
