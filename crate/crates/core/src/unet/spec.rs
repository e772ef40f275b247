use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::deform::DEFAULT_SQUARING_STEPS;
use crate::error::{Error, Result};
use crate::lif::DEFAULT_ALPHA;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    Ann,
    Snn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    Displacement,
    /// The head predicts a stationary velocity field that is integrated by
    /// scaling and squaring.
    Velocity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downsample {
    StridedConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    /// Nearest-neighbour x2 followed by the decoder convolution.
    NearestConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSmoothing {
    pub enabled: bool,
    pub kernel_size: usize,
}

impl Default for HeadSmoothing {
    fn default() -> Self {
        HeadSmoothing {
            enabled: true,
            kernel_size: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub input_channels: usize,
    pub output_channels: usize,
    pub kernel_size: usize,
    pub bottleneck_convs: usize,
    pub downsample: Downsample,
    pub upsample: Upsample,
    pub timesteps: usize,
    pub head_smoothing: HeadSmoothing,
    pub output_mode: OutputMode,
    pub alpha: f64,
    pub tau_hi: f64,
    pub tau_lo: f64,
    pub head_init_std: f64,
    pub squaring_steps: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            encoder_channels: vec![16, 32, 64, 128],
            decoder_channels: vec![64, 32, 16, 16],
            input_channels: 2,
            output_channels: 3,
            kernel_size: 3,
            bottleneck_convs: 2,
            downsample: Downsample::StridedConv,
            upsample: Upsample::NearestConv,
            timesteps: 4,
            head_smoothing: HeadSmoothing::default(),
            output_mode: OutputMode::Displacement,
            alpha: DEFAULT_ALPHA,
            tau_hi: 0.90,
            tau_lo: 0.75,
            head_init_std: 1e-3,
            squaring_steps: DEFAULT_SQUARING_STEPS,
        }
    }
}

/// Where a layer sits in the U-Net.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Stem,
    Encoder,
    Bottleneck,
    Decoder,
    Head,
    Smoothing,
}

/// Symbolic description of one convolution in the layer graph.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    /// Producers concatenated (in order) to form the input; `"input"` is the
    /// image pair.
    pub inputs: Vec<String>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Whether the first input is nearest-upsampled x2 before the conv.
    pub upsample_first: bool,
    /// Output resolution divisor relative to the input volume.
    pub scale: usize,
    /// conv -> BN -> ReLU/LIF block (as opposed to a linear head layer).
    pub block: bool,
}

impl LayerInfo {
    pub fn out_voxels(&self, dims: [usize; 3]) -> usize {
        dims.iter().map(|d| d / self.scale).product()
    }

    /// Dense multiply-accumulates for one forward pass.
    pub fn macs(&self, dims: [usize; 3]) -> u64 {
        let per_voxel = if self.kind == LayerKind::Smoothing {
            self.cout * self.kernel.pow(3)
        } else {
            self.cin * self.cout * self.kernel.pow(3)
        };
        per_voxel as u64 * self.out_voxels(dims) as u64
    }
}

impl NetworkSpec {
    /// The paper-scale architecture.
    pub fn full_scale() -> Self {
        Self::default()
    }

    /// Reduced widths for CPU experiments on small volumes.
    pub fn desk() -> Self {
        NetworkSpec {
            encoder_channels: vec![8, 16, 32, 64],
            decoder_channels: vec![32, 16, 8, 8],
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.encoder_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder_channels;
        let d = &self.decoder_channels;
        if e.is_empty() || e.len() != d.len() {
            return Err(Error::invalid(format!(
                "encoder and decoder need the same non-zero level count, got {} and {}",
                e.len(),
                d.len()
            )));
        }
        if e.iter().chain(d).any(|&c| c == 0) {
            return Err(Error::invalid("channel widths must be positive"));
        }
        if self.output_channels != 3 {
            return Err(Error::invalid("output_channels must be 3"));
        }
        if self.input_channels == 0 {
            return Err(Error::invalid("input_channels must be positive"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::invalid("kernel_size must be odd"));
        }
        if self.head_smoothing.enabled && self.head_smoothing.kernel_size.is_multiple_of(2) {
            return Err(Error::invalid("head smoothing kernel must be odd"));
        }
        if self.timesteps == 0 {
            return Err(Error::invalid("timesteps must be at least 1"));
        }
        if !(self.tau_lo > 0.0 && self.tau_lo < self.tau_hi && self.tau_hi <= 1.0) {
            return Err(Error::invalid("need 0 < tau_lo < tau_hi <= 1"));
        }
        if !(self.alpha > 0.0) || !(self.head_init_std >= 0.0) {
            return Err(Error::invalid("alpha must be positive and head_init_std non-negative"));
        }
        Ok(())
    }

    /// Spatial dims must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serialises");
        hex::encode(Sha256::digest(&json))
    }

    /// Layer graph in evaluation order. The smoothing layer is listed only for
    /// the spiking flavour with smoothing enabled.
    pub fn layers(&self, flavor: Flavor) -> Vec<LayerInfo> {
        let e = &self.encoder_channels;
        let d = &self.decoder_channels;
        let lv = e.len();
        let k = self.kernel_size;
        let mut out = Vec::new();
        let block = |name: String, kind, inputs: Vec<String>, cin, cout, stride, up, scale| LayerInfo {
            name,
            kind,
            inputs,
            cin,
            cout,
            kernel: k,
            stride,
            upsample_first: up,
            scale,
            block: true,
        };
        out.push(block("stem".into(), LayerKind::Stem, vec!["input".into()], self.input_channels, e[0], 1, false, 1));
        out.push(block("enc1".into(), LayerKind::Encoder, vec!["stem".into()], e[0], e[0], 1, false, 1));
        for i in 1..lv {
            out.push(block(
                format!("enc{}", i + 1),
                LayerKind::Encoder,
                vec![format!("enc{i}")],
                e[i - 1],
                e[i],
                2,
                false,
                1 << i,
            ));
        }
        let mut prev = format!("enc{lv}");
        let mut prev_ch = e[lv - 1];
        let deep = 1 << (lv - 1);
        for j in 0..self.bottleneck_convs {
            let name = format!("bott{}", j + 1);
            out.push(block(name.clone(), LayerKind::Bottleneck, vec![prev], prev_ch, prev_ch, 1, false, deep));
            prev = name;
        }
        for i in 0..lv {
            let name = format!("dec{}", i + 1);
            if i + 1 < lv {
                let skip = lv - 1 - i;
                out.push(block(
                    name.clone(),
                    LayerKind::Decoder,
                    vec![prev, format!("enc{skip}")],
                    prev_ch + e[skip - 1],
                    d[i],
                    1,
                    true,
                    1 << (lv - 2 - i),
                ));
            } else {
                out.push(block(name.clone(), LayerKind::Decoder, vec![prev], prev_ch, d[i], 1, false, 1));
            }
            prev = name;
            prev_ch = d[i];
        }
        out.push(LayerInfo {
            name: "head".into(),
            kind: LayerKind::Head,
            inputs: vec![prev],
            cin: prev_ch,
            cout: self.output_channels,
            kernel: 1,
            stride: 1,
            upsample_first: false,
            scale: 1,
            block: false,
        });
        if flavor == Flavor::Snn && self.head_smoothing.enabled {
            out.push(LayerInfo {
                name: "smooth".into(),
                kind: LayerKind::Smoothing,
                inputs: vec!["head".into()],
                cin: 1,
                cout: self.output_channels,
                kernel: self.head_smoothing.kernel_size,
                stride: 1,
                upsample_first: false,
                scale: 1,
                block: false,
            });
        }
        out
    }

    /// Learnable parameter count, derived from the layer graph without
    /// allocating any tensor.
    pub fn param_count(&self, flavor: Flavor) -> u64 {
        self.layers(flavor)
            .iter()
            .map(|l| {
                let k3 = l.kernel.pow(3);
                let n = match l.kind {
                    LayerKind::Smoothing => l.cout * k3,
                    LayerKind::Head => l.cin * l.cout * k3 + l.cout,
                    _ => {
                        let conv_bn = l.cin * l.cout * k3 + l.cout + 2 * l.cout;
                        let lif = if flavor == Flavor::Snn { l.cout + 1 } else { 0 };
                        conv_bn + lif
                    }
                };
                n as u64
            })
            .sum()
    }

    /// Total dense MACs of one forward pass of the given flavour.
    pub fn total_macs(&self, flavor: Flavor, dims: [usize; 3]) -> u64 {
        self.layers(flavor).iter().map(|l| l.macs(dims)).sum()
    }

    pub fn spiking_layers(&self) -> Vec<String> {
        self.layers(Flavor::Snn)
            .into_iter()
            .filter(|l| l.block)
            .map(|l| l.name)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_counts_must_match() {
        let bad = NetworkSpec {
            decoder_channels: vec![8, 8],
            ..NetworkSpec::desk()
        };
        assert!(bad.validate().is_err());
        assert!(NetworkSpec::desk().validate().is_ok());
        let even = NetworkSpec {
            kernel_size: 2,
            ..NetworkSpec::desk()
        };
        assert!(even.validate().is_err());
    }

    #[test]
    fn graph_shape() {
        let spec = NetworkSpec::full_scale();
        let layers = spec.layers(Flavor::Snn);
        let names: Vec<&str> = layers.iter().map(|l| l.name.as_str()).collect();
        assert_eq!(
            names,
            ["stem", "enc1", "enc2", "enc3", "enc4", "bott1", "bott2", "dec1", "dec2", "dec3", "dec4", "head", "smooth"]
        );
        let dec1 = &layers[7];
        assert_eq!((dec1.cin, dec1.cout, dec1.scale), (128 + 64, 64, 4));
        assert_eq!(dec1.inputs, ["bott2", "enc3"]);
        assert_eq!(spec.spiking_layers().len(), 11);
        assert_eq!(spec.layers(Flavor::Ann).len(), 12);
    }

    #[test]
    fn counts_by_hand_for_a_toy_spec() {
        let spec = NetworkSpec {
            encoder_channels: vec![4, 8],
            decoder_channels: vec![4, 4],
            bottleneck_convs: 1,
            ..NetworkSpec::default()
        };
        // stem 2->4, enc1 4->4, enc2 4->8, bott 8->8, dec1 (8+4)->4, dec2 4->4
        let convs = [(2, 4), (4, 4), (4, 8), (8, 8), (12, 4), (4, 4)];
        let ann: usize = convs.iter().map(|&(i, o)| i * o * 27 + o + 2 * o).sum::<usize>() + 4 * 3 + 3;
        assert_eq!(spec.param_count(Flavor::Ann), ann as u64);
        let lif: usize = convs.iter().map(|&(_, o)| o + 1).sum();
        assert_eq!(spec.param_count(Flavor::Snn), (ann + lif + 81) as u64);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = NetworkSpec::desk();
        assert_eq!(a.hash(), NetworkSpec::desk().hash());
        let b = NetworkSpec { timesteps: 5, ..a.clone() };
        assert_ne!(a.hash(), b.hash());
    }
}
