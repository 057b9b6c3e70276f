//! Central-difference checks of every differentiable op and of the
//! composite paths built from them (style recalibration, fusion, the three
//! losses, a small end-to-end network). Shared by the unit tests, the
//! acceptance suite and the `gradcheck` command.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, ParamStore, Tape, Var};
use crate::fsr::{fsr_forward, Mixing, StyleGate};
use crate::losses::{consis_loss, contra_loss, dice_loss, total_loss};
use crate::prototypes::{embed_sample, FusionHead, PrototypeLayout};
use crate::segnet::{Pathway, SegNet, SegNetConfig};
use crate::tensor::{LabelMap, Tensor, TensorError};

/// Central-difference step for single ops.
pub const STEP: f64 = 1e-4;
/// Step for the whole-network case: with thousands of leaky-ReLU and
/// max-pool units, a ±1e-4 probe regularly straddles a kink somewhere.
pub const NETWORK_STEP: f64 = 1e-6;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-3;

type Fragment = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var, TensorError>>;

/// A named scalar function of the parameters in `store`.
pub struct GradientCase {
    pub name: &'static str,
    pub store: ParamStore,
    pub step: f64,
    fragment: Fragment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientResult {
    pub name: &'static str,
    pub seed: u64,
    pub relative_error: f64,
}

impl GradientResult {
    pub fn passed(&self) -> bool {
        self.relative_error < TOLERANCE
    }
}

impl GradientCase {
    /// Largest per-parameter relative error.
    pub fn check(&self) -> Result<f64, TensorError> {
        finite_diff_check(&self.store, self.step, &self.fragment)
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn store_of(items: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (id, t) in items {
        s.insert(*id, t.clone()).expect("distinct identifiers");
    }
    s
}

fn projection(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Every case at one seed.
pub fn gradient_cases(seed: u64) -> Vec<GradientCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let mut cases: Vec<(&'static str, ParamStore, Fragment)> = Vec::new();

    let proj = projection(&mut rng, 3 * 4 * 4);
    cases.push((
        "conv2d",
        store_of(&[
            ("x", random(&mut rng, &[2, 4, 4], 1.0)),
            ("w", random(&mut rng, &[3, 2, 3, 3], 1.0)),
            ("b", random(&mut rng, &[3], 1.0)),
        ]),
        Box::new(move |t, s| {
            let (x, w, b) = (t.param(s, "x")?, t.param(s, "w")?, t.param(s, "b")?);
            let y = t.conv2d(x, w, b, 1, 1)?;
            t.dot_const(y, &proj)
        }),
    ));

    let proj = projection(&mut rng, 2 * 3 * 3);
    cases.push((
        "conv2d_strided",
        store_of(&[
            ("x", random(&mut rng, &[1, 5, 5], 1.0)),
            ("w", random(&mut rng, &[2, 1, 3, 3], 1.0)),
            ("b", random(&mut rng, &[2], 1.0)),
        ]),
        Box::new(move |t, s| {
            let (x, w, b) = (t.param(s, "x")?, t.param(s, "w")?, t.param(s, "b")?);
            let y = t.conv2d(x, w, b, 2, 1)?;
            t.dot_const(y, &proj)
        }),
    ));

    let proj = projection(&mut rng, 12);
    cases.push((
        "leaky_relu",
        store_of(&[("x", random(&mut rng, &[12], 1.0))]),
        Box::new(move |t, s| {
            let x = t.param(s, "x")?;
            let y = t.leaky_relu(x, 0.1)?;
            t.dot_const(y, &proj)
        }),
    ));

    let proj = projection(&mut rng, 12);
    cases.push((
        "relu",
        store_of(&[("x", random(&mut rng, &[12], 1.0))]),
        Box::new(move |t, s| {
            let x = t.param(s, "x")?;
            let y = t.relu(x)?;
            t.dot_const(y, &proj)
        }),
    ));

    let proj = projection(&mut rng, 6);
    cases.push((
        "sigmoid",
        store_of(&[("x", random(&mut rng, &[6], 3.0))]),
        Box::new(move |t, s| {
            let x = t.param(s, "x")?;
            let y = t.sigmoid(x)?;
            t.dot_const(y, &proj)
        }),
    ));

    let proj = projection(&mut rng, 3);
    cases.push((
        "linear",
        store_of(&[
            ("w", random(&mut rng, &[3, 5], 1.0)),
            ("x", random(&mut rng, &[5], 1.0)),
            ("b", random(&mut rng, &[3], 1.0)),
        ]),
        Box::new(move |t, s| {
            let (w, x, b) = (t.param(s, "w")?, t.param(s, "x")?, t.param(s, "b")?);
            let y = t.linear(w, x, b)?;
            t.dot_const(y, &proj)
        }),
    ));

    let proj = projection(&mut rng, 3);
    cases.push((
        "global_avg_pool",
        store_of(&[("x", random(&mut rng, &[3, 4, 2], 1.0))]),
        Box::new(move |t, s| {
            let x = t.param(s, "x")?;
            let y = t.global_avg_pool(x)?;
            t.dot_const(y, &proj)
        }),
    ));

    let proj = projection(&mut rng, 2 * 6 * 4);
    cases.push((
        "nearest_upsample2x",
        store_of(&[("x", random(&mut rng, &[2, 3, 2], 1.0))]),
        Box::new(move |t, s| {
            let x = t.param(s, "x")?;
            let y = t.nearest_upsample2x(x)?;
            t.dot_const(y, &proj)
        }),
    ));

    let proj = projection(&mut rng, 2 * 2 * 3);
    cases.push((
        "maxpool2x",
        store_of(&[("x", random(&mut rng, &[2, 4, 6], 1.0))]),
        Box::new(move |t, s| {
            let x = t.param(s, "x")?;
            let y = t.maxpool2x(x)?;
            t.dot_const(y, &proj)
        }),
    ));

    let proj = projection(&mut rng, 2 * 4 * 4);
    cases.push((
        "instance_norm",
        store_of(&[("x", random(&mut rng, &[2, 4, 4], 1.0))]),
        Box::new(move |t, s| {
            let x = t.param(s, "x")?;
            let y = t.instance_norm(x)?;
            t.dot_const(y, &proj)
        }),
    ));

    let proj = projection(&mut rng, 5 * 2 * 2);
    cases.push((
        "concat_channels",
        store_of(&[("a", random(&mut rng, &[2, 2, 2], 1.0)), ("b", random(&mut rng, &[3, 2, 2], 1.0))]),
        Box::new(move |t, s| {
            let (a, b) = (t.param(s, "a")?, t.param(s, "b")?);
            let y = t.concat_channels(&[a, b])?;
            t.dot_const(y, &proj)
        }),
    ));

    let (p1, p2) = (projection(&mut rng, 6), projection(&mut rng, 6));
    cases.push((
        "add_sub_mul_scale",
        store_of(&[("a", random(&mut rng, &[6], 1.0)), ("b", random(&mut rng, &[6], 1.0))]),
        Box::new(move |t, s| {
            let (a, b) = (t.param(s, "a")?, t.param(s, "b")?);
            let m = t.mul(a, b)?;
            let d = t.sub(m, b)?;
            let sc = t.scale(d, -1.7)?;
            let y = t.add(sc, a)?;
            let l1 = t.dot_const(y, &p1)?;
            let l2 = t.dot_const(m, &p2)?;
            t.add(l1, l2)
        }),
    ));

    let proj = projection(&mut rng, 4 * 3);
    cases.push((
        "scale_by_take",
        store_of(&[("x", random(&mut rng, &[2, 4, 3], 1.0)), ("s", random(&mut rng, &[2], 1.0))]),
        Box::new(move |t, s| {
            let (x, sv) = (t.param(s, "x")?, t.param(s, "s")?);
            let x1 = t.take(x, 1)?;
            let y = t.scale_by(x1, sv, 1)?;
            t.dot_const(y, &proj)
        }),
    ));

    // Phase is weighted only at non-self-conjugate bins: at the others the
    // imaginary part is structurally zero and the phase sits on the ±π cut.
    let (c, h, w) = (2usize, 4usize, 6usize);
    let mut proj = projection(&mut rng, 2 * c * h * w);
    for ch in 0..c {
        for a in [0, h / 2] {
            for b in [0, w / 2] {
                proj[c * h * w + (ch * h + a) * w + b] = 0.0;
            }
        }
    }
    cases.push((
        "fft2",
        store_of(&[("x", random(&mut rng, &[c, h, w], 1.0))]),
        Box::new(move |t, s| {
            let x = t.param(s, "x")?;
            let y = t.fft2(x)?;
            t.dot_const(y, &proj)
        }),
    ));

    let proj = projection(&mut rng, 2 * 4 * 4);
    cases.push((
        "ifft2",
        store_of(&[
            ("a", Tensor::from_fn(&[2, 4, 4], |_| rng.gen_range(0.1..1.0))),
            ("p", random(&mut rng, &[2, 4, 4], 3.0)),
        ]),
        Box::new(move |t, s| {
            // Arbitrary (non-Hermitian) spectra: the residue guard is off.
            t.set_checked(false);
            let (a, p) = (t.param(s, "a")?, t.param(s, "p")?);
            let y = t.ifft2(a, p)?;
            t.dot_const(y, &proj)
        }),
    ));

    let proj = projection(&mut rng, 3);
    let idx = vec![0, 3, 5, 6];
    cases.push((
        "masked_mean",
        store_of(&[("x", random(&mut rng, &[3, 2, 4], 1.0))]),
        Box::new(move |t, s| {
            let x = t.param(s, "x")?;
            let y = t.masked_mean(x, idx.clone())?;
            t.dot_const(y, &proj)
        }),
    ));

    let labels: Vec<usize> = (0..20).map(|_| rng.gen_range(0..3)).collect();
    cases.push((
        "soft_dice",
        store_of(&[("x", random(&mut rng, &[3, 4, 5], 2.0))]),
        Box::new(move |t, s| {
            let x = t.param(s, "x")?;
            t.soft_dice(x, &labels, 1e-5)
        }),
    ));

    cases.push((
        "contrastive",
        store_of(&[("a", random(&mut rng, &[5], 1.0)), ("q", random(&mut rng, &[4, 5], 1.0))]),
        Box::new(move |t, s| {
            let (a, q) = (t.param(s, "a")?, t.param(s, "q")?);
            t.contrastive(a, q, 2, 0.5)
        }),
    ));

    let target = projection(&mut rng, 5);
    cases.push((
        "sq_dist",
        store_of(&[("x", random(&mut rng, &[5], 1.0))]),
        Box::new(move |t, s| {
            let x = t.param(s, "x")?;
            t.sq_dist(x, &target)
        }),
    ));

    cases.push((
        "sum",
        store_of(&[("x", random(&mut rng, &[2, 3], 1.0))]),
        Box::new(move |t, s| {
            let x = t.param(s, "x")?;
            let y = t.mul(x, x)?;
            t.sum(y)
        }),
    ));

    composite_cases(&mut rng, &mut cases);
    cases
        .into_iter()
        .map(|(name, store, fragment)| GradientCase {
            name,
            step: if name == "segnet_total_loss" { NETWORK_STEP } else { STEP },
            store,
            fragment,
        })
        .collect()
}

fn composite_cases(rng: &mut ChaCha8Rng, cases: &mut Vec<(&'static str, ParamStore, Fragment)>) {
    let gate = StyleGate::new("g", 2);
    let proj = projection(rng, 2 * 4 * 4);
    cases.push((
        "fsr_layer",
        store_of(&[
            ("z", random(rng, &[2, 4, 4], 1.0)),
            (&gate.weight_id(), random(rng, &[2, 4], 1.0)),
            (&gate.bias_id(), random(rng, &[2], 1.0)),
        ]),
        Box::new(move |t, s| {
            let z = t.param(s, "z")?;
            let out = fsr_forward(t, s, z, Mixing::Learned(&gate))?;
            t.dot_const(out, &proj)
        }),
    ));

    let head = FusionHead::new(Pathway::Encoder, 5, 3).expect("valid widths");
    let proj = projection(rng, 3);
    cases.push((
        "fusion",
        store_of(&[
            ("x", random(rng, &[5], 1.0)),
            (&head.weight_id(), random(rng, &[3, 5], 1.0)),
            (&head.bias_id(), random(rng, &[3], 1.0)),
        ]),
        Box::new(move |t, s| {
            let x = t.param(s, "x")?;
            let w = t.param(s, &head.weight_id())?;
            let b = t.param(s, &head.bias_id())?;
            let y = t.linear(w, x, b)?;
            t.dot_const(y, &proj)
        }),
    ));

    let labels = LabelMap::new(4, 5, (0..20).map(|_| rng.gen_range(0..2)).collect()).expect("4x5 labels");
    cases.push((
        "dice_loss",
        store_of(&[("x", random(rng, &[2, 4, 5], 2.0))]),
        Box::new(move |t, s| {
            let x = t.param(s, "x")?;
            dice_loss(t, x, &labels)
        }),
    ));

    let positives: Vec<Vec<f64>> = (0..2).map(|_| projection(rng, 6)).collect();
    let negatives: Vec<Vec<f64>> = (0..3).map(|_| projection(rng, 6)).collect();
    cases.push((
        "contra_loss",
        store_of(&[("r", random(rng, &[6], 1.0))]),
        Box::new(move |t, s| {
            let r = t.param(s, "r")?;
            let pos: Vec<&[f64]> = positives.iter().map(Vec::as_slice).collect();
            let neg: Vec<&[f64]> = negatives.iter().map(Vec::as_slice).collect();
            contra_loss(t, r, &pos, &neg, 0.4)?.ok_or_else(|| TensorError::Contract("no positives".into()))
        }),
    ));

    let (m1, m2) = (projection(rng, 4), projection(rng, 4));
    cases.push((
        "consis_loss",
        store_of(&[("a", random(rng, &[4], 1.0)), ("b", random(rng, &[4], 1.0))]),
        Box::new(move |t, s| {
            let (a, b) = (t.param(s, "a")?, t.param(s, "b")?);
            consis_loss(t, &[(a, &m1), (b, &m2)])
        }),
    ));

    // A tiny network end to end: recalibration at every tap, fused
    // prototypes and the full objective against fixed global prototypes.
    let net = SegNet::new(SegNetConfig {
        level_channels: vec![2, 2, 2],
        ..SegNetConfig::default()
    })
    .expect("valid tiny network");
    let layout = PrototypeLayout::dual_level(&net, 2).expect("valid fusion width");
    let mut store = net.init_parameters(rng.gen()).expect("init");
    layout.init_into(&mut store, rng.gen()).expect("init");
    // Nonzero gates so recalibration is active.
    for (id, p) in store.iter_mut() {
        if id.contains(".gate.") {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    let image = Tensor::from_fn(&[1, 8, 8], |_| rng.gen_range(0.0..1.0));
    let labels = LabelMap::new(8, 8, (0..64).map(|i| usize::from((i % 8) >= 3 && (i / 8) >= 2)).collect())
        .expect("8x8 labels");
    let means: Vec<Vec<f64>> = (0..4).map(|_| projection(rng, 2)).collect();
    cases.push((
        "segnet_total_loss",
        store,
        Box::new(move |t, s| {
            let x = t.constant(image.clone())?;
            let (logits, taps) = net.forward(t, s, x)?;
            let dice = dice_loss(t, logits, &labels)?;
            let anchors = embed_sample(t, s, &layout, &taps, &labels)?;
            let pairs: Vec<(Var, &[f64])> = anchors
                .iter()
                .enumerate()
                .map(|(i, a)| (a.vector, means[i % means.len()].as_slice()))
                .collect();
            let consis = consis_loss(t, &pairs)?;
            let pos = [means[0].as_slice()];
            let neg = [means[1].as_slice()];
            let contra = contra_loss(t, anchors[0].vector, &pos, &neg, 0.4)?;
            total_loss(t, dice, contra, Some(consis), 0.5)
        }),
    ));
}

/// Runs every case at every seed.
pub fn run_gradient_suite(seeds: Range<u64>) -> Result<Vec<GradientResult>, TensorError> {
    let mut out = Vec::new();
    for seed in seeds {
        for case in gradient_cases(seed) {
            out.push(GradientResult {
                name: case.name,
                seed,
                relative_error: case.check()?,
            });
        }
    }
    Ok(out)
}
