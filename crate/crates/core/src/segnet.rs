//! Miniature UNet with named feature taps.
//!
//! Every block is `conv3x3 → instance_norm → leaky_relu`, followed by style
//! recalibration when the block is tapped. The encoder halves the resolution
//! between levels with max pooling; the decoder upsamples, concatenates the
//! matching encoder skip and convolves. A 1×1 convolution produces logits.
//!
//! Convolutions that feed an instance norm carry no bias: the norm removes
//! any per-channel constant, so such a bias would be dead weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::fsr::{fsr_forward, Mixing, StyleGate};
use crate::tensor::{Tensor, TensorError};

const LEAKY_SLOPE: f64 = 0.01;

/// How tapped blocks apply style recalibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FsrMode {
    /// Learned gate, recalibration in the forward path.
    #[default]
    Learned,
    /// Taps pass features through untouched. Gate parameters still exist so
    /// the parameter layout is the same for every method.
    Bypass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegNetConfig {
    pub input_channels: usize,
    pub class_count: usize,
    pub level_channels: Vec<usize>,
    pub tap_layers: Vec<String>,
    pub fsr: FsrMode,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            input_channels: 1,
            class_count: 2,
            level_channels: vec![8, 16, 32],
            tap_layers: vec!["enc2".into(), "enc3".into(), "dec2".into(), "dec1".into()],
            fsr: FsrMode::Learned,
        }
    }
}

/// Which side of the UNet a layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pathway {
    Encoder,
    Decoder,
}

impl Pathway {
    pub const BOTH: [Pathway; 2] = [Pathway::Encoder, Pathway::Decoder];

    pub fn as_str(self) -> &'static str {
        match self {
            Pathway::Encoder => "enc",
            Pathway::Decoder => "dec",
        }
    }
}

/// A block of the network: `enc1..encL` then `dec(L-1)..dec1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub pathway: Pathway,
    pub channels: usize,
    /// Resolution divisor relative to the input.
    pub stride: usize,
}

/// Recalibrated features at the configured taps, in forward order.
#[derive(Debug, Clone, Default)]
pub struct TapBundle {
    taps: Vec<(String, Var)>,
}

impl TapBundle {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.taps.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.taps.iter().map(|(n, v)| (n.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SegNet {
    config: SegNetConfig,
    layers: Vec<LayerInfo>,
}

impl SegNet {
    pub fn new(config: SegNetConfig) -> Result<Self, TensorError> {
        let levels = config.level_channels.len();
        if config.class_count < 2 {
            return Err(TensorError::Contract(format!("need at least 2 classes, got {}", config.class_count)));
        }
        if levels < 2 {
            return Err(TensorError::Contract("need at least 2 levels".into()));
        }
        if config.input_channels == 0 || config.level_channels.contains(&0) {
            return Err(TensorError::Contract("channel counts must be positive".into()));
        }
        let mut layers = Vec::with_capacity(2 * levels - 1);
        for (i, &ch) in config.level_channels.iter().enumerate() {
            layers.push(LayerInfo {
                name: format!("enc{}", i + 1),
                pathway: Pathway::Encoder,
                channels: ch,
                stride: 1 << i,
            });
        }
        for i in (0..levels - 1).rev() {
            layers.push(LayerInfo {
                name: format!("dec{}", i + 1),
                pathway: Pathway::Decoder,
                channels: config.level_channels[i],
                stride: 1 << i,
            });
        }
        let mut seen = Vec::new();
        for tap in &config.tap_layers {
            if !layers.iter().any(|l| &l.name == tap) {
                return Err(TensorError::Contract(format!("unknown tap layer {tap}")));
            }
            if seen.contains(&tap) {
                return Err(TensorError::Contract(format!("tap layer {tap} listed twice")));
            }
            seen.push(tap);
        }
        for pathway in Pathway::BOTH {
            let n = layers
                .iter()
                .filter(|l| l.pathway == pathway && config.tap_layers.contains(&l.name))
                .count();
            if n < 2 {
                return Err(TensorError::Contract(format!(
                    "{} pathway needs at least 2 taps, got {n}",
                    pathway.as_str()
                )));
            }
        }
        Ok(SegNet { config, layers })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn class_count(&self) -> usize {
        self.config.class_count
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    /// Tapped layers of one pathway, in forward order.
    pub fn taps(&self, pathway: Pathway) -> Vec<&LayerInfo> {
        self.layers
            .iter()
            .filter(|l| l.pathway == pathway && self.is_tapped(&l.name))
            .collect()
    }

    fn is_tapped(&self, name: &str) -> bool {
        self.config.tap_layers.iter().any(|t| t == name)
    }

    fn gate(&self, layer: &LayerInfo) -> StyleGate {
        StyleGate::new(format!("{}.fsr", layer.name), layer.channels)
    }

    /// Input channels seen by each layer's convolution.
    fn conv_inputs(&self) -> Vec<usize> {
        let ch = &self.config.level_channels;
        let levels = ch.len();
        let mut out: Vec<usize> = (0..levels)
            .map(|i| if i == 0 { self.config.input_channels } else { ch[i - 1] })
            .collect();
        out.extend((0..levels - 1).rev().map(|i| ch[i + 1] + ch[i]));
        out
    }

    /// Closed form: `Σ 9·in·out` over blocks, the head's `c₁·classes + classes`,
    /// and `4C + 2` per tapped gate.
    pub fn parameter_count(&self) -> usize {
        let convs: usize = self
            .conv_inputs()
            .iter()
            .zip(&self.layers)
            .map(|(&cin, l)| 9 * cin * l.channels)
            .sum();
        let head = self.config.level_channels[0] * self.config.class_count + self.config.class_count;
        let gates: usize = self
            .layers
            .iter()
            .filter(|l| self.is_tapped(&l.name))
            .map(|l| 4 * l.channels + 2)
            .sum();
        convs + head + gates
    }

    /// Kaiming-uniform convolution weights, zero biases, zero gates.
    pub fn init_parameters(&self, seed: u64) -> Result<ParamStore, TensorError> {
        let mut store = ParamStore::new();
        self.init_into(&mut store, seed)?;
        Ok(store)
    }

    pub fn init_into(&self, store: &mut ParamStore, seed: u64) -> Result<(), TensorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (cin, layer) in self.conv_inputs().into_iter().zip(&self.layers) {
            let w = kaiming_uniform(&mut rng, &[layer.channels, cin, 3, 3]);
            store.insert(format!("{}.conv.weight", layer.name), w)?;
            if self.is_tapped(&layer.name) {
                self.gate(layer).init(store)?;
            }
        }
        let c1 = self.config.level_channels[0];
        let classes = self.config.class_count;
        store.insert("head.weight", kaiming_uniform(&mut rng, &[classes, c1, 1, 1]))?;
        store.insert("head.bias", Tensor::zeros(&[classes]))?;
        Ok(())
    }

    fn block(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: &LayerInfo,
        input: Var,
        taps: &mut TapBundle,
    ) -> Result<Var, TensorError> {
        let w = tape.param(store, &format!("{}.conv.weight", layer.name))?;
        let zero_bias = tape.constant(Tensor::zeros(&[layer.channels]))?;
        let z = tape.conv2d(input, w, zero_bias, 1, 1)?;
        let z = tape.instance_norm(z)?;
        let mut z = tape.leaky_relu(z, LEAKY_SLOPE)?;
        if self.is_tapped(&layer.name) {
            if self.config.fsr == FsrMode::Learned {
                let gate = self.gate(layer);
                z = fsr_forward(tape, store, z, Mixing::Learned(&gate))?;
            }
            taps.taps.push((layer.name.clone(), z));
        }
        Ok(z)
    }

    /// Logits `[classes, H, W]` and the tapped features for one image.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<(Var, TapBundle), TensorError> {
        const OP: &str = "segnet_forward";
        let (cin, h, w) = tape.value(image).chw(OP)?;
        let levels = self.config.level_channels.len();
        let factor = 1 << (levels - 1);
        if cin != self.config.input_channels {
            return Err(TensorError::dim(
                OP,
                format!("expected {} input channels, got {cin}", self.config.input_channels),
            ));
        }
        if h % factor != 0 || w % factor != 0 || h == 0 || w == 0 {
            return Err(TensorError::dim(OP, format!("{h}x{w} not divisible by {factor}")));
        }
        let mut taps = TapBundle::default();
        let mut skips = Vec::with_capacity(levels);
        let mut x = image;
        for (i, layer) in self.layers[..levels].iter().enumerate() {
            if i > 0 {
                x = tape.maxpool2x(x)?;
            }
            x = self.block(tape, store, layer, x, &mut taps)?;
            skips.push(x);
        }
        for (j, layer) in self.layers[levels..].iter().enumerate() {
            let skip = skips[levels - 2 - j];
            let up = tape.nearest_upsample2x(x)?;
            let joined = tape.concat_channels(&[up, skip])?;
            x = self.block(tape, store, layer, joined, &mut taps)?;
        }
        let hw = tape.param(store, "head.weight")?;
        let hb = tape.param(store, "head.bias")?;
        let logits = tape.conv2d(x, hw, hb, 1, 0)?;
        Ok((logits, taps))
    }
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}
