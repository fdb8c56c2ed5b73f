//! Declarative search space and the flat indexing of its kernel slices.
//!
//! A slice is the kernel of one kernel-size branch restricted to one input
//! channel: `(layer, channel, kernel_size)`. Slices are numbered layer-major,
//! then branch in declaration order, then channel.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Parallel branches, one per odd spatial size; their outputs are summed.
    pub kernel_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

/// Convolutional super-network topology followed by a fixed
/// global-average-pool + dense classifier head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpaceSpec {
    /// `[channels, height, width]` of one example.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

impl SearchSpaceSpec {
    /// Every violation, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.input_shape.contains(&0) {
            out.push(format!("input_shape {:?} has a zero dimension", self.input_shape));
        }
        if self.layers.is_empty() {
            out.push("at least one layer is required".into());
        }
        if self.num_classes < 2 {
            out.push(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        let mut expected_in = self.input_shape[0];
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.in_channels != expected_in {
                out.push(format!(
                    "layer {l}: in_channels {} does not match the {expected_in} channels feeding it",
                    layer.in_channels
                ));
            }
            if layer.out_channels == 0 {
                out.push(format!("layer {l}: out_channels must be positive"));
            }
            if layer.kernel_sizes.is_empty() {
                out.push(format!("layer {l}: no kernel sizes"));
            }
            for (i, &s) in layer.kernel_sizes.iter().enumerate() {
                if s % 2 == 0 {
                    out.push(format!("layer {l}: kernel size {s} is not odd"));
                }
                if layer.kernel_sizes[..i].contains(&s) {
                    out.push(format!("layer {l}: kernel size {s} listed twice"));
                }
            }
            expected_in = layer.out_channels;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(v.join("; ")))
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn head_param_count(&self) -> usize {
        let features = self.layers.last().map_or(0, |l| l.out_channels);
        features * self.num_classes + self.num_classes
    }
}

/// One (layer, kernel size) branch and its block of slices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceGroup {
    pub layer: usize,
    pub branch: usize,
    pub kernel_size: usize,
    /// K_l: one slice per input channel.
    pub channels: usize,
    pub out_channels: usize,
    /// Flat index of the group's first slice.
    pub offset: usize,
}

impl SliceGroup {
    /// Weights in one slice: `H_l * s * s`.
    pub fn slice_params(&self) -> usize {
        self.out_channels * self.kernel_size * self.kernel_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SliceId {
    pub layer: usize,
    pub channel: usize,
    pub kernel_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceLayout {
    groups: Vec<SliceGroup>,
    num_slices: usize,
    head_params: usize,
    spec_digest: String,
}

impl SliceLayout {
    pub fn new(spec: &SearchSpaceSpec) -> Self {
        let mut groups = Vec::new();
        let mut offset = 0;
        for (l, layer) in spec.layers.iter().enumerate() {
            for (b, &s) in layer.kernel_sizes.iter().enumerate() {
                groups.push(SliceGroup {
                    layer: l,
                    branch: b,
                    kernel_size: s,
                    channels: layer.in_channels,
                    out_channels: layer.out_channels,
                    offset,
                });
                offset += layer.in_channels;
            }
        }
        Self {
            groups,
            num_slices: offset,
            head_params: spec.head_param_count(),
            spec_digest: spec.digest(),
        }
    }

    pub fn groups(&self) -> &[SliceGroup] {
        &self.groups
    }

    pub fn num_slices(&self) -> usize {
        self.num_slices
    }

    pub fn num_layers(&self) -> usize {
        self.groups.last().map_or(0, |g| g.layer + 1)
    }

    pub fn head_params(&self) -> usize {
        self.head_params
    }

    pub fn spec_digest(&self) -> &str {
        &self.spec_digest
    }

    pub fn group(&self, layer: usize, branch: usize) -> &SliceGroup {
        self.groups
            .iter()
            .find(|g| g.layer == layer && g.branch == branch)
            .expect("group exists")
    }

    pub fn group_of(&self, slice: usize) -> &SliceGroup {
        self.groups
            .iter()
            .find(|g| slice >= g.offset && slice < g.offset + g.channels)
            .expect("slice index in range")
    }

    pub fn slice_id(&self, slice: usize) -> SliceId {
        let g = self.group_of(slice);
        SliceId {
            layer: g.layer,
            channel: slice - g.offset,
            kernel_size: g.kernel_size,
        }
    }

    pub fn index_of(&self, id: SliceId) -> Option<usize> {
        self.groups
            .iter()
            .find(|g| g.layer == id.layer && g.kernel_size == id.kernel_size)
            .filter(|g| id.channel < g.channels)
            .map(|g| g.offset + id.channel)
    }

    pub fn full_kernel_params(&self) -> usize {
        self.groups.iter().map(|g| g.channels * g.slice_params()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn two_layer() -> SearchSpaceSpec {
        SearchSpaceSpec {
            input_shape: [2, 4, 4],
            layers: vec![
                LayerSpec {
                    in_channels: 2,
                    out_channels: 3,
                    kernel_sizes: vec![1, 3],
                    activation: Activation::Relu,
                },
                LayerSpec {
                    in_channels: 3,
                    out_channels: 4,
                    kernel_sizes: vec![3],
                    activation: Activation::Relu,
                },
            ],
            num_classes: 3,
        }
    }

    #[test]
    fn layout_indexing_round_trips() {
        let layout = SliceLayout::new(&two_layer());
        assert_eq!(layout.num_slices(), 2 + 2 + 3);
        for i in 0..layout.num_slices() {
            assert_eq!(layout.index_of(layout.slice_id(i)), Some(i));
        }
        assert_eq!(
            layout.slice_id(3),
            SliceId {
                layer: 0,
                channel: 1,
                kernel_size: 3
            }
        );
        assert_eq!(layout.full_kernel_params(), 2 * 3 + 2 * 27 + 3 * 36);
        assert_eq!(layout.head_params(), 4 * 3 + 3);
    }

    #[test]
    fn reports_every_violation() {
        let mut spec = two_layer();
        spec.layers[0].kernel_sizes = vec![2, 3, 3];
        spec.layers[1].in_channels = 5;
        spec.num_classes = 1;
        let v = spec.violations();
        assert_eq!(v.len(), 4, "{v:?}");
    }

    #[test]
    fn digest_tracks_content() {
        let a = two_layer();
        let mut b = two_layer();
        assert_eq!(a.digest(), b.digest());
        b.layers[1].out_channels = 5;
        assert_ne!(a.digest(), b.digest());
    }
}
