//! Segmentation and prototype-alignment objectives.
//!
//! * soft Dice over foreground classes,
//! * an InfoNCE-style contrastive term pulling each anchor towards its
//!   class's global cluster representatives (cosine similarity over `τ`),
//! * a squared-distance consistency term towards the class mean prototypes,
//!
//! combined as `dice + λ_c · (contra + consis)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, NORM_EPS};
use crate::prototypes::Anchor;
use crate::server::GlobalPrototypeSet;
use crate::tensor::{LabelMap, Tensor, TensorError};

/// Smoothing constant of the soft Dice ratio.
pub const DICE_EPS: f64 = NORM_EPS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight on the prototype terms.
    pub lambda_c: f64,
    /// Contrastive temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_c: 1.0, tau: 0.4 }
    }
}

impl LossWeights {
    pub fn new(lambda_c: f64, tau: f64) -> Result<Self, TensorError> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(TensorError::Contract(format!("temperature must be positive, got {tau}")));
        }
        if !(lambda_c >= 0.0) || !lambda_c.is_finite() {
            return Err(TensorError::Contract(format!("λ_c must be nonnegative, got {lambda_c}")));
        }
        Ok(LossWeights { lambda_c, tau })
    }
}

pub fn dice_loss(tape: &mut Tape, logits: Var, labels: &LabelMap) -> Result<Var, TensorError> {
    tape.soft_dice(logits, labels.classes(), DICE_EPS)
}

/// Contrastive loss against constant prototypes; `None` when there are no
/// positives (the class is skipped).
pub fn contra_loss(
    tape: &mut Tape,
    anchor: Var,
    positives: &[&[f64]],
    negatives: &[&[f64]],
    tau: f64,
) -> Result<Option<Var>, TensorError> {
    if positives.is_empty() {
        return Ok(None);
    }
    let protos = tape.constant(prototype_matrix(positives, negatives)?)?;
    tape.contrastive(anchor, protos, positives.len(), tau).map(Some)
}

/// Rows `[positives; negatives]` as one `[n, d]` tensor.
pub fn prototype_matrix(positives: &[&[f64]], negatives: &[&[f64]]) -> Result<Tensor, TensorError> {
    let d = positives
        .first()
        .or(negatives.first())
        .map_or(0, |v| v.len());
    let rows: Vec<&[f64]> = positives.iter().chain(negatives).copied().collect();
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(TensorError::dim("prototype_matrix", format!("row of {} vs {d}", bad.len())));
    }
    Tensor::new(vec![rows.len(), d], rows.concat())
}

/// `Σ_pathways ‖e − q̄‖²` for one class.
pub fn consis_loss(tape: &mut Tape, pairs: &[(Var, &[f64])]) -> Result<Var, TensorError> {
    let terms = pairs
        .iter()
        .map(|&(anchor, mean)| tape.sq_dist(anchor, mean))
        .collect::<Result<Vec<_>, _>>()?;
    sum_vars(tape, &terms)
}

/// `dice + λ_c · (contra + consis)`; with `λ_c = 0` the prototype terms are
/// left off the graph entirely.
pub fn total_loss(
    tape: &mut Tape,
    dice: Var,
    contra: Option<Var>,
    consis: Option<Var>,
    lambda_c: f64,
) -> Result<Var, TensorError> {
    if lambda_c == 0.0 {
        return Ok(dice);
    }
    let terms: Vec<Var> = contra.into_iter().chain(consis).collect();
    if terms.is_empty() {
        return Ok(dice);
    }
    let mp = sum_vars(tape, &terms)?;
    let weighted = tape.scale(mp, lambda_c)?;
    tape.add(dice, weighted)
}

/// Averaged prototype terms for one sample.
#[derive(Debug, Clone, Copy)]
pub struct PrototypeTerms {
    /// Mean contrastive loss over anchors with at least one positive.
    pub contra: Option<Var>,
    /// Mean over classes of the summed per-pathway squared distances.
    pub consis: Option<Var>,
}

/// Contrastive and consistency terms of a sample's anchors against the
/// broadcast global prototypes. Anchors without a global counterpart are
/// skipped.
pub fn prototype_terms(
    tape: &mut Tape,
    anchors: &[Anchor],
    global: &GlobalPrototypeSet,
    tau: f64,
) -> Result<PrototypeTerms, TensorError> {
    let mut contra = Vec::new();
    let mut per_class: Vec<(usize, Vec<(Var, &[f64])>)> = Vec::new();
    for a in anchors {
        let Some(entry) = global.get(a.pathway, a.class_id) else {
            continue;
        };
        let positives: Vec<&[f64]> = entry.representatives.iter().map(Vec::as_slice).collect();
        let negatives = global.negatives(a.pathway, a.class_id);
        if let Some(l) = contra_loss(tape, a.vector, &positives, &negatives, tau)? {
            contra.push(l);
        }
        match per_class.iter_mut().find(|(c, _)| *c == a.class_id) {
            Some((_, pairs)) => pairs.push((a.vector, entry.mean.as_slice())),
            None => per_class.push((a.class_id, vec![(a.vector, entry.mean.as_slice())])),
        }
    }
    let contra = mean_vars(tape, &contra)?;
    let consis_terms = per_class
        .iter()
        .map(|(_, pairs)| consis_loss(tape, pairs))
        .collect::<Result<Vec<_>, _>>()?;
    let consis = mean_vars(tape, &consis_terms)?;
    Ok(PrototypeTerms { contra, consis })
}

fn sum_vars(tape: &mut Tape, terms: &[Var]) -> Result<Var, TensorError> {
    let (&first, rest) = terms
        .split_first()
        .ok_or_else(|| TensorError::Contract("sum of no terms".into()))?;
    rest.iter().try_fold(first, |acc, &t| tape.add(acc, t))
}

/// Mean of scalar terms, `None` when there are none.
pub fn mean_vars(tape: &mut Tape, terms: &[Var]) -> Result<Option<Var>, TensorError> {
    if terms.is_empty() {
        return Ok(None);
    }
    let s = sum_vars(tape, terms)?;
    if terms.len() == 1 {
        return Ok(Some(s));
    }
    tape.scale(s, 1.0 / terms.len() as f64).map(Some)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::LN_2;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{finite_diff_check, ParamStore};
    use crate::prototypes::PrototypeUpload;
    use crate::segnet::Pathway;
    use crate::server::Metric;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    fn logits_from(labels: &LabelMap, margin: f64) -> Tensor {
        let n = labels.classes().len();
        Tensor::from_fn(&[2, labels.height(), labels.width()], |i| {
            let (ch, pos) = (i / n, i % n);
            if labels.classes()[pos] == ch { margin } else { -margin }
        })
    }

    fn dice_of(logits: Tensor, labels: &LabelMap) -> f64 {
        let mut tape = Tape::new(true);
        let l = tape.constant(logits).unwrap();
        let d = dice_loss(&mut tape, l, labels).unwrap();
        scalar(&tape, d)
    }

    #[test]
    fn dice_closed_forms() {
        let half = LabelMap::new(4, 4, (0..16).map(|i| usize::from(i % 4 >= 2)).collect()).unwrap();
        assert!(dice_of(logits_from(&half, 20.0), &half) < 1e-3);

        // p = 1/2 everywhere on N pixels with A = N/2 foreground:
        // Σpg = A/2, Σp = N/2 = A, Σg = A, so the ratio is A / 2A = 1/2.
        let loss = dice_of(Tensor::zeros(&[2, 4, 4]), &half);
        let (a, eps) = (8.0, DICE_EPS);
        assert!((loss - (1.0 - (a + eps) / (2.0 * a + eps))).abs() < 1e-12);
        assert!((loss - 0.5).abs() < 1e-6);

        // All-foreground image: Σpg = N/2, Σp = N/2, Σg = N, ratio 2/3.
        let full = LabelMap::new(4, 4, vec![1; 16]).unwrap();
        assert!((dice_of(Tensor::zeros(&[2, 4, 4]), &full) - 1.0 / 3.0).abs() < 1e-6);

        let empty = LabelMap::new(4, 4, vec![0; 16]).unwrap();
        assert!(dice_of(logits_from(&empty, 30.0), &empty) < 1e-6);
    }

    fn contra_value(anchor: &[f64], pos: &[&[f64]], neg: &[&[f64]], tau: f64) -> f64 {
        let mut tape = Tape::new(true);
        let a = tape.constant(Tensor::vector(anchor.to_vec())).unwrap();
        let l = contra_loss(&mut tape, a, pos, neg, tau).unwrap().unwrap();
        scalar(&tape, l)
    }

    /// Direct, unstabilized evaluation of −log(Σ_pos e^s / Σ_all e^s).
    fn contra_oracle(anchor: &[f64], pos: &[&[f64]], neg: &[&[f64]], tau: f64) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let p: f64 = pos.iter().map(|q| (cos(anchor, q) / tau).exp()).sum();
        let n: f64 = neg.iter().map(|q| (cos(anchor, q) / tau).exp()).sum();
        -(p / (p + n)).ln()
    }

    #[test]
    fn contrastive_closed_forms() {
        let a = [1.0, 0.0];
        let l = contra_value(&a, &[&[0.0, 1.0]], &[&[0.0, -1.0]], 0.1);
        assert!((l - LN_2).abs() < 1e-9);
        let l = contra_value(&a, &[&[0.3, 2.0], &[1.0, 0.5]], &[], 0.05);
        assert_eq!(l, 0.0);
        let mut tape = Tape::new(true);
        let av = tape.constant(Tensor::vector(a.to_vec())).unwrap();
        assert!(contra_loss(&mut tape, av, &[], &[&[1.0, 1.0]], 0.1).unwrap().is_none());
    }

    fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn contrastive_matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let d = rng.gen_range(2..8);
            let anchor = random_vec(&mut rng, d);
            let pos: Vec<Vec<f64>> = (0..rng.gen_range(1..4)).map(|_| random_vec(&mut rng, d)).collect();
            let neg: Vec<Vec<f64>> = (0..rng.gen_range(0..5)).map(|_| random_vec(&mut rng, d)).collect();
            let pos: Vec<&[f64]> = pos.iter().map(Vec::as_slice).collect();
            let neg: Vec<&[f64]> = neg.iter().map(Vec::as_slice).collect();
            let tau = rng.gen_range(0.1..1.0);
            let got = contra_value(&anchor, &pos, &neg, tau);
            assert!((got - contra_oracle(&anchor, &pos, &neg, tau)).abs() < 1e-9);
        }
    }

    #[test]
    fn contrastive_scale_invariance_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let anchor = random_vec(&mut rng, 4);
        let pos = random_vec(&mut rng, 4);
        let neg = [random_vec(&mut rng, 4), random_vec(&mut rng, 4)];
        let negs: Vec<&[f64]> = neg.iter().map(Vec::as_slice).collect();
        let base = contra_value(&anchor, &[&pos], &negs, 0.3);
        let scaled: Vec<f64> = anchor.iter().map(|x| x * 7.5).collect();
        assert!((contra_value(&scaled, &[&pos], &negs, 0.3) - base).abs() < 1e-9);
        // Move the positive halfway towards the anchor: its cosine rises.
        let closer: Vec<f64> = pos.iter().zip(&anchor).map(|(p, a)| 0.5 * (p + a)).collect();
        assert!(contra_value(&anchor, &[&closer], &negs, 0.3) < base);
    }

    /// Draws a vector with Euclidean norm in `[lo, hi]`.
    fn vec_with_norm(rng: &mut ChaCha8Rng, d: usize, lo: f64, hi: f64) -> Vec<f64> {
        let v = random_vec(rng, d);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-3);
        let target = rng.gen_range(lo..=hi);
        v.into_iter().map(|x| x * target / n).collect()
    }

    #[test]
    fn positive_gradient_respects_temperature_bound() {
        // |∂L/∂r| ≤ 1/(τ‖r‖) for cosine similarity; prototypes of norm ≥ 1
        // therefore satisfy the 1/τ bound.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let d = rng.gen_range(2..10);
            let tau = rng.gen_range(0.005..1.0);
            let anchor = vec_with_norm(&mut rng, d, 1.0, 1.0);
            let (np, nn) = (rng.gen_range(1..4), rng.gen_range(0..4));
            let rows: Vec<Vec<f64>> = (0..np + nn).map(|_| vec_with_norm(&mut rng, d, 1.0, 3.0)).collect();
            let mut tape = Tape::new(true);
            let a = tape.constant(Tensor::vector(anchor)).unwrap();
            let protos = tape.variable(Tensor::new(vec![np + nn, d], rows.concat()).unwrap()).unwrap();
            let l = tape.contrastive(a, protos, np, tau).unwrap();
            tape.backward(l, &mut ParamStore::new()).unwrap();
            let g = tape.grad(protos).unwrap();
            for row in g.data().chunks(d).take(np) {
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!(norm <= 1.0 / tau + 1e-6, "{norm} vs {}", 1.0 / tau);
            }
        }
    }

    #[test]
    fn consistency_examples() {
        let mut tape = Tape::new(true);
        let e = tape.constant(Tensor::vector(vec![0.5, -1.0])).unwrap();
        let d = tape.constant(Tensor::vector(vec![2.0, 3.0])).unwrap();
        let zero = consis_loss(&mut tape, &[(e, &[0.5, -1.0]), (d, &[2.0, 3.0])]).unwrap();
        assert_eq!(scalar(&tape, zero), 0.0);
        let one = consis_loss(&mut tape, &[(e, &[0.5, -1.0]), (d, &[2.0, 4.0])]).unwrap();
        assert_eq!(scalar(&tape, one), 1.0);
        // (0.5-0)² + (-1-1)² + (2-1)² + (3-3)² = 0.25 + 4 + 1 = 5.25
        let v = consis_loss(&mut tape, &[(e, &[0.0, 1.0]), (d, &[1.0, 3.0])]).unwrap();
        assert_eq!(scalar(&tape, v), 5.25);
    }

    #[test]
    fn total_examples() {
        let mut tape = Tape::new(true);
        let one = tape.constant(Tensor::scalar(1.0)).unwrap();
        let t = total_loss(&mut tape, one, Some(one), Some(one), 1.0).unwrap();
        assert_eq!(scalar(&tape, t), 3.0);
        let t = total_loss(&mut tape, one, Some(one), Some(one), 0.0).unwrap();
        assert_eq!(t, one);
        assert!(LossWeights::new(1.0, 0.0).is_err());
        assert!(LossWeights::new(-0.1, 0.4).is_err());
    }

    fn gradient_of(store: &ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> Result<Var, TensorError>) -> Vec<f64> {
        let mut s = store.clone();
        s.zero_grad();
        let mut tape = Tape::new(true);
        let l = f(&mut tape, &s).unwrap();
        tape.backward(l, &mut s).unwrap();
        s.flat_grads()
    }

    fn loss_store(seed: u64) -> (ParamStore, LabelMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store
            .insert("logits", Tensor::from_fn(&[2, 4, 4], |_| rng.gen_range(-2.0..2.0)))
            .unwrap();
        store.insert("e", Tensor::vector(random_vec(&mut rng, 3))).unwrap();
        let labels = LabelMap::new(4, 4, (0..16).map(|_| rng.gen_range(0..2)).collect()).unwrap();
        (store, labels)
    }

    const POS: [[f64; 3]; 2] = [[1.0, 0.2, -0.3], [0.7, 0.9, 0.1]];
    const NEG: [[f64; 3]; 1] = [[-0.5, 0.4, 1.0]];
    const MEAN: [f64; 3] = [0.85, 0.55, -0.1];

    fn dice_term(t: &mut Tape, s: &ParamStore, labels: &LabelMap) -> Result<Var, TensorError> {
        let l = t.param(s, "logits")?;
        dice_loss(t, l, labels)
    }

    fn contra_term(t: &mut Tape, s: &ParamStore) -> Result<Var, TensorError> {
        let e = t.param(s, "e")?;
        let pos: Vec<&[f64]> = POS.iter().map(|r| &r[..]).collect();
        let neg: Vec<&[f64]> = NEG.iter().map(|r| &r[..]).collect();
        Ok(contra_loss(t, e, &pos, &neg, 0.3)?.expect("positives"))
    }

    fn consis_term(t: &mut Tape, s: &ParamStore) -> Result<Var, TensorError> {
        let e = t.param(s, "e")?;
        consis_loss(t, &[(e, &MEAN)])
    }

    #[test]
    fn all_losses_pass_finite_differences() {
        for seed in 0..5 {
            let (store, labels) = loss_store(seed);
            let checks: [(&str, f64); 3] = [
                ("dice", finite_diff_check(&store, 1e-4, |t, s| dice_term(t, s, &labels)).unwrap()),
                ("contra", finite_diff_check(&store, 1e-4, contra_term).unwrap()),
                ("consis", finite_diff_check(&store, 1e-4, consis_term).unwrap()),
            ];
            for (name, err) in checks {
                assert!(err < 1e-3, "{name} seed {seed}: {err:e}");
            }
        }
    }

    #[test]
    fn total_gradient_is_sum_of_term_gradients() {
        let (store, labels) = loss_store(9);
        let total = gradient_of(&store, |t, s| {
            let d = dice_term(t, s, &labels)?;
            let c = contra_term(t, s)?;
            let k = consis_term(t, s)?;
            total_loss(t, d, Some(c), Some(k), 1.0)
        });
        let parts = [
            gradient_of(&store, |t, s| dice_term(t, s, &labels)),
            gradient_of(&store, contra_term),
            gradient_of(&store, consis_term),
        ];
        for (i, g) in total.iter().enumerate() {
            let sum: f64 = parts.iter().map(|p| p[i]).sum();
            assert!((g - sum).abs() < 1e-12);
        }
    }

    fn upload(pathway: Pathway, class_id: usize, values: Vec<f64>) -> PrototypeUpload {
        PrototypeUpload {
            client_id: 0,
            round: 0,
            pathway,
            class_id,
            support: 1,
            d_fused: values.len(),
            values,
        }
    }

    #[test]
    fn prototype_terms_average_over_pathways_and_classes() {
        let global = GlobalPrototypeSet::from_uploads(
            &[
                upload(Pathway::Encoder, 0, vec![1.0, 0.0]),
                upload(Pathway::Encoder, 1, vec![0.0, 1.0]),
                upload(Pathway::Decoder, 0, vec![1.0, 1.0]),
            ],
            Metric::Cosine,
        );
        let mut tape = Tape::new(true);
        let e0 = tape.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        let d0 = tape.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let e1 = tape.constant(Tensor::vector(vec![0.0, 3.0])).unwrap();
        let anchors = [
            Anchor { class_id: 0, pathway: Pathway::Encoder, vector: e0 },
            Anchor { class_id: 0, pathway: Pathway::Decoder, vector: d0 },
            Anchor { class_id: 1, pathway: Pathway::Encoder, vector: e1 },
            // No decoder prototype for class 1 on the server: skipped.
            Anchor { class_id: 1, pathway: Pathway::Decoder, vector: e1 },
        ];
        let terms = prototype_terms(&mut tape, &anchors, &global, 0.5).unwrap();
        // Consistency: class 0 → 0 + 1, class 1 → 4; mean 2.5.
        assert_eq!(scalar(&tape, terms.consis.unwrap()), 2.5);
        let want = (contra_oracle(&[1.0, 0.0], &[&[1.0, 0.0]], &[&[0.0, 1.0]], 0.5)
            + contra_oracle(&[1.0, 2.0], &[&[1.0, 1.0]], &[], 0.5)
            + contra_oracle(&[0.0, 3.0], &[&[0.0, 1.0]], &[&[1.0, 0.0]], 0.5))
            / 3.0;
        assert!((scalar(&tape, terms.contra.unwrap()) - want).abs() < 1e-12);

        let none = prototype_terms(&mut tape, &anchors, &GlobalPrototypeSet::default(), 0.5).unwrap();
        assert!(none.contra.is_none() && none.consis.is_none());
    }
}
