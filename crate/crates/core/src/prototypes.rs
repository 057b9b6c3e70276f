//! Class prototypes: per-layer masked means of tapped features, concatenated
//! across the taps of a pathway and projected by a per-pathway fusion head.
//!
//! The same pipeline yields the per-sample anchors used by the losses
//! ([`embed_sample`]) and the per-client prototypes uploaded to the server
//! ([`PrototypeAccumulator`]).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::segnet::{Pathway, SegNet, TapBundle};
use crate::tensor::{LabelMap, Tensor, TensorError};

/// One tap feeding a pathway's prototype.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapSlot {
    pub name: String,
    pub channels: usize,
}

/// How tapped features become prototypes for one pathway.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathwayLayout {
    pub pathway: Pathway,
    /// Taps in forward order; their masked means are concatenated in this order.
    pub taps: Vec<TapSlot>,
    /// `Some` when a fusion head projects the concatenation.
    pub fusion: Option<FusionHead>,
}

impl PathwayLayout {
    pub fn concat_dim(&self) -> usize {
        self.taps.iter().map(|t| t.channels).sum()
    }

    pub fn dim(&self) -> usize {
        self.fusion.as_ref().map_or(self.concat_dim(), |f| f.out_dim)
    }
}

/// Prototype extraction plan for a network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrototypeLayout {
    pub class_count: usize,
    pub pathways: Vec<PathwayLayout>,
}

impl PrototypeLayout {
    /// Both pathways: every tap of the pathway, concatenated shallow to deep
    /// and fused to `d_fused`.
    pub fn dual_level(net: &SegNet, d_fused: usize) -> Result<Self, TensorError> {
        let mut pathways = Vec::new();
        for pathway in Pathway::BOTH {
            let taps: Vec<TapSlot> = net
                .taps(pathway)
                .into_iter()
                .map(|l| TapSlot {
                    name: l.name.clone(),
                    channels: l.channels,
                })
                .collect();
            let in_dim = taps.iter().map(|t| t.channels).sum();
            let head = FusionHead::new(pathway, in_dim, d_fused)?;
            pathways.push(PathwayLayout {
                pathway,
                taps,
                fusion: Some(head),
            });
        }
        Ok(PrototypeLayout {
            class_count: net.class_count(),
            pathways,
        })
    }

    /// Encoder only, deepest tap only, no fusion.
    pub fn single_level(net: &SegNet) -> Self {
        let deepest = net
            .taps(Pathway::Encoder)
            .into_iter()
            .last()
            .expect("a validated network has encoder taps");
        PrototypeLayout {
            class_count: net.class_count(),
            pathways: vec![PathwayLayout {
                pathway: Pathway::Encoder,
                taps: vec![TapSlot {
                    name: deepest.name.clone(),
                    channels: deepest.channels,
                }],
                fusion: None,
            }],
        }
    }

    pub fn pathway(&self, pathway: Pathway) -> Option<&PathwayLayout> {
        self.pathways.iter().find(|p| p.pathway == pathway)
    }

    /// Inserts fusion-head parameters.
    pub fn init_into(&self, store: &mut ParamStore, seed: u64) -> Result<(), TensorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &self.pathways {
            if let Some(head) = &p.fusion {
                head.init_into(store, &mut rng)?;
            }
        }
        Ok(())
    }

    /// Most prototypes one client can upload per round.
    pub fn uploads_per_client(&self) -> usize {
        self.class_count * self.pathways.len()
    }
}

/// Linear projection of a concatenated prototype: weight `[out, in]`, bias `[out]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionHead {
    pub pathway: Pathway,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl FusionHead {
    pub fn new(pathway: Pathway, in_dim: usize, out_dim: usize) -> Result<Self, TensorError> {
        if out_dim == 0 || out_dim > in_dim {
            return Err(TensorError::Contract(format!(
                "fused width {out_dim} must be in 1..={in_dim} for the {} pathway",
                pathway.as_str()
            )));
        }
        Ok(FusionHead {
            pathway,
            in_dim,
            out_dim,
        })
    }

    pub fn weight_id(&self) -> String {
        format!("fusion.{}.weight", self.pathway.as_str())
    }

    pub fn bias_id(&self) -> String {
        format!("fusion.{}.bias", self.pathway.as_str())
    }

    /// Uniform weights in `±1/√in`, zero bias.
    pub fn init_into(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<(), TensorError> {
        let bound = 1.0 / (self.in_dim as f64).sqrt();
        let w = Tensor::from_fn(&[self.out_dim, self.in_dim], |_| rng.gen_range(-bound..bound));
        store.insert(self.weight_id(), w)?;
        store.insert(self.bias_id(), Tensor::zeros(&[self.out_dim]))
    }
}

/// Mean feature over the positions whose resampled label is `class_id`;
/// `None` when the class has no support at this resolution.
pub fn class_masked_mean(
    tape: &mut Tape,
    feature: Var,
    labels: &LabelMap,
    class_id: usize,
) -> Result<Option<Var>, TensorError> {
    let (_, h, w) = tape.value(feature).chw("class_masked_mean")?;
    let positions = labels.downsample_nearest(h, w)?.positions(class_id);
    if positions.is_empty() {
        return Ok(None);
    }
    tape.masked_mean(feature, positions).map(Some)
}

/// Concatenation in the given (shallow to deep) order.
pub fn hierarchical_concat(tape: &mut Tape, parts: &[Var]) -> Result<Var, TensorError> {
    tape.concat(parts)
}

pub fn fuse(tape: &mut Tape, store: &ParamStore, head: &FusionHead, concatenated: Var) -> Result<Var, TensorError> {
    let n = tape.value(concatenated).len();
    if n != head.in_dim {
        return Err(TensorError::dim("fuse", format!("head expects {}, got {n}", head.in_dim)));
    }
    let w = tape.param(store, &head.weight_id())?;
    let b = tape.param(store, &head.bias_id())?;
    tape.linear(w, concatenated, b)
}

/// Per-sample anchor for one class and pathway.
#[derive(Debug, Clone, Copy)]
pub struct Anchor {
    pub class_id: usize,
    pub pathway: Pathway,
    pub vector: Var,
}

/// Anchors for every (pathway, class) whose class is present at every tap
/// of the pathway. Gradients flow back into the network and fusion heads.
pub fn embed_sample(
    tape: &mut Tape,
    store: &ParamStore,
    layout: &PrototypeLayout,
    taps: &TapBundle,
    labels: &LabelMap,
) -> Result<Vec<Anchor>, TensorError> {
    let mut anchors = Vec::new();
    for p in &layout.pathways {
        'class: for class_id in 0..layout.class_count {
            let mut parts = Vec::with_capacity(p.taps.len());
            for slot in &p.taps {
                let feature = tap(taps, &slot.name)?;
                match class_masked_mean(tape, feature, labels, class_id)? {
                    Some(m) => parts.push(m),
                    None => continue 'class,
                }
            }
            let mut vector = if parts.len() == 1 { parts[0] } else { hierarchical_concat(tape, &parts)? };
            if let Some(head) = &p.fusion {
                vector = fuse(tape, store, head, vector)?;
            }
            anchors.push(Anchor {
                class_id,
                pathway: p.pathway,
                vector,
            });
        }
    }
    Ok(anchors)
}

fn tap(taps: &TapBundle, name: &str) -> Result<Var, TensorError> {
    taps.get(name)
        .ok_or_else(|| TensorError::Contract(format!("tap {name} missing from forward pass")))
}

/// A client's prototype for one class and pathway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class_id: usize,
    pub pathway: Pathway,
    pub vector: Vec<f64>,
    /// Pixels behind the prototype at the pathway's first tap.
    pub support: usize,
}

/// Running per-tap sums of class features over many samples.
///
/// Prototypes are formed once at the end: per-tap means over all samples,
/// concatenated and fused. This is the support-weighted mean over samples,
/// so accumulating in any grouping gives the same result.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeAccumulator {
    class_count: usize,
    /// (tap name, class) → (feature sum, pixel count).
    sums: BTreeMap<(String, usize), (Vec<f64>, usize)>,
}

impl PrototypeAccumulator {
    pub fn new(class_count: usize) -> Self {
        PrototypeAccumulator {
            class_count,
            sums: BTreeMap::new(),
        }
    }

    /// Add one sample's tapped features (read from the tape, no gradient).
    pub fn add_sample(
        &mut self,
        tape: &Tape,
        layout: &PrototypeLayout,
        taps: &TapBundle,
        labels: &LabelMap,
    ) -> Result<(), TensorError> {
        for p in &layout.pathways {
            for slot in &p.taps {
                let feature = tape.value(tap(taps, &slot.name)?);
                self.add_feature(&slot.name, feature, labels)?;
            }
        }
        Ok(())
    }

    pub fn add_feature(&mut self, tap_name: &str, feature: &Tensor, labels: &LabelMap) -> Result<(), TensorError> {
        let (c, h, w) = feature.chw("prototype_accumulate")?;
        let hw = h * w;
        let small = labels.downsample_nearest(h, w)?;
        for (pos, &class_id) in small.classes().iter().enumerate() {
            if class_id >= self.class_count {
                return Err(TensorError::dim(
                    "prototype_accumulate",
                    format!("label {class_id} outside {} classes", self.class_count),
                ));
            }
            let entry = self
                .sums
                .entry((tap_name.to_string(), class_id))
                .or_insert_with(|| (vec![0.0; c], 0));
            for ch in 0..c {
                entry.0[ch] += feature.data()[ch * hw + pos];
            }
            entry.1 += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &PrototypeAccumulator) {
        for (key, (sum, count)) in &other.sums {
            let entry = self.sums.entry(key.clone()).or_insert_with(|| (vec![0.0; sum.len()], 0));
            for (a, b) in entry.0.iter_mut().zip(sum) {
                *a += b;
            }
            entry.1 += count;
        }
    }

    fn tap_mean(&self, tap_name: &str, class_id: usize) -> Option<(Vec<f64>, usize)> {
        let (sum, count) = self.sums.get(&(tap_name.to_string(), class_id))?;
        (*count > 0).then(|| (sum.iter().map(|s| s / *count as f64).collect(), *count))
    }

    /// Per-class prototypes for every pathway; classes unseen at any tap of a
    /// pathway are absent.
    pub fn finish(&self, store: &ParamStore, layout: &PrototypeLayout) -> Result<Vec<Prototype>, TensorError> {
        let mut out = Vec::new();
        for p in &layout.pathways {
            'class: for class_id in 0..layout.class_count {
                let mut concat = Vec::with_capacity(p.concat_dim());
                let mut support = None;
                for slot in &p.taps {
                    match self.tap_mean(&slot.name, class_id) {
                        Some((mean, count)) => {
                            concat.extend(mean);
                            support.get_or_insert(count);
                        }
                        None => continue 'class,
                    }
                }
                let vector = match &p.fusion {
                    Some(head) => apply_head(store, head, &concat)?,
                    None => concat,
                };
                out.push(Prototype {
                    class_id,
                    pathway: p.pathway,
                    vector,
                    support: support.expect("at least one tap"),
                });
            }
        }
        Ok(out)
    }
}

fn apply_head(store: &ParamStore, head: &FusionHead, x: &[f64]) -> Result<Vec<f64>, TensorError> {
    let w = store.value(&head.weight_id())?;
    let b = store.value(&head.bias_id())?;
    if w.shape() != [head.out_dim, head.in_dim] || x.len() != head.in_dim {
        return Err(TensorError::dim("fuse", format!("weight {:?} vs input {}", w.shape(), x.len())));
    }
    Ok(w
        .data()
        .chunks_exact(head.in_dim)
        .zip(b.data())
        .map(|(row, bias)| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias)
        .collect())
}

/// Wire record of one uploaded prototype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeUpload {
    pub client_id: usize,
    pub round: usize,
    pub pathway: Pathway,
    pub class_id: usize,
    pub support: usize,
    pub d_fused: usize,
    pub values: Vec<f64>,
}

impl PrototypeUpload {
    pub fn from_prototype(client_id: usize, round: usize, p: &Prototype) -> Self {
        PrototypeUpload {
            client_id,
            round,
            pathway: p.pathway,
            class_id: p.class_id,
            support: p.support,
            d_fused: p.vector.len(),
            values: p.vector.clone(),
        }
    }
}
