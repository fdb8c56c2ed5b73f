//! Binary kernel-activation maps and the standalone networks they prune to.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sampler::{MaskMode, MaskSample};
use crate::space::{Activation, SearchSpaceSpec, SliceId, SliceLayout};
use crate::supernet::SuperNet;
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    layout: SliceLayout,
    active: Vec<bool>,
}

/// A kernel-size group whose slices are all inactive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedOperation {
    pub layer: usize,
    pub kernel_size: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchitectureFile {
    spec_digest: String,
    num_slices: usize,
    param_count: usize,
    #[serde(default)]
    dropped_operations: Vec<DroppedOperation>,
    #[serde(default)]
    active: Vec<SliceId>,
}

impl Architecture {
    pub fn new(layout: &SliceLayout, active: Vec<bool>) -> Result<Self> {
        if active.len() != layout.num_slices() {
            return Err(Error::InvalidArgument(format!(
                "architecture has {} bits but the layout has {} slices",
                active.len(),
                layout.num_slices()
            )));
        }
        Ok(Self {
            layout: layout.clone(),
            active,
        })
    }

    pub fn full(layout: &SliceLayout) -> Self {
        Self {
            layout: layout.clone(),
            active: vec![true; layout.num_slices()],
        }
    }

    /// `alpha = eps` for a hard mask.
    pub fn from_mask(layout: &SliceLayout, mask: &MaskSample) -> Result<Self> {
        if mask.mode != MaskMode::Hard {
            return Err(Error::InvalidArgument("architectures derive from hard masks only".into()));
        }
        Self::new(layout, mask.bits())
    }

    /// Architecture `index` of the `2^K` enumeration: bit `i` of `index` is slice `i`.
    pub fn from_index(layout: &SliceLayout, index: u64) -> Self {
        let active = (0..layout.num_slices()).map(|i| index >> i & 1 == 1).collect();
        Self {
            layout: layout.clone(),
            active,
        }
    }

    pub fn layout(&self) -> &SliceLayout {
        &self.layout
    }

    pub fn bits(&self) -> &[bool] {
        &self.active
    }

    pub fn is_active(&self, slice: usize) -> bool {
        self.active[slice]
    }

    pub fn to_mask(&self) -> MaskSample {
        MaskSample::from_bits(&self.active)
    }

    pub fn active_slices(&self) -> Vec<SliceId> {
        (0..self.active.len())
            .filter(|&i| self.active[i])
            .map(|i| self.layout.slice_id(i))
            .collect()
    }

    pub fn num_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Active kernel weights plus the head.
    pub fn param_count(&self) -> usize {
        let kernels: usize = self
            .layout
            .groups()
            .iter()
            .map(|g| {
                let on = self.active[g.offset..g.offset + g.channels].iter().filter(|&&a| a).count();
                on * g.slice_params()
            })
            .sum();
        kernels + self.layout.head_params()
    }

    /// True when every layer keeps at least one slice, so the input reaches the head.
    pub fn has_path(&self) -> bool {
        let mut alive = vec![false; self.layout.num_layers()];
        for g in self.layout.groups() {
            if self.active[g.offset..g.offset + g.channels].iter().any(|&a| a) {
                alive[g.layer] = true;
            }
        }
        alive.iter().all(|&a| a)
    }

    pub fn dropped_operations(&self) -> Vec<DroppedOperation> {
        self.layout
            .groups()
            .iter()
            .filter(|g| self.active[g.offset..g.offset + g.channels].iter().all(|&a| !a))
            .map(|g| DroppedOperation {
                layer: g.layer,
                kernel_size: g.kernel_size,
            })
            .collect()
    }

    /// Fraction of slices that are inactive.
    pub fn dropped_channel_fraction(&self) -> f64 {
        1.0 - self.num_active() as f64 / self.active.len() as f64
    }

    pub fn dropped_operation_fraction(&self) -> f64 {
        self.dropped_operations().len() as f64 / self.layout.groups().len() as f64
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.layout.spec_digest().as_bytes());
        h.update(self.active.iter().map(|&a| a as u8).collect::<Vec<_>>());
        hex::encode(h.finalize())
    }

    pub fn to_toml(&self) -> String {
        let file = ArchitectureFile {
            spec_digest: self.layout.spec_digest().to_string(),
            num_slices: self.active.len(),
            param_count: self.param_count(),
            dropped_operations: self.dropped_operations(),
            active: self.active_slices(),
        };
        toml::to_string(&file).expect("architecture serializes")
    }

    pub fn from_toml(text: &str, spec: &SearchSpaceSpec) -> Result<Self> {
        let file: ArchitectureFile =
            toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("architecture file: {e}")))?;
        let layout = SliceLayout::new(spec);
        if file.spec_digest != layout.spec_digest() {
            return Err(Error::InvalidArgument(format!(
                "architecture was derived for spec {} but the configured spec is {}",
                file.spec_digest,
                layout.spec_digest()
            )));
        }
        let mut active = vec![false; layout.num_slices()];
        for id in &file.active {
            let i = layout
                .index_of(*id)
                .ok_or_else(|| Error::InvalidArgument(format!("slice {id:?} is not in the search space")))?;
            active[i] = true;
        }
        let arch = Self::new(&layout, active)?;
        if arch.param_count() != file.param_count {
            return Err(Error::InvalidArgument(format!(
                "architecture file declares {} parameters, active slices give {}",
                file.param_count,
                arch.param_count()
            )));
        }
        Ok(arch)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct PrunedBranch {
    kernel_size: usize,
    /// Input channels read by the surviving slices.
    channels: Vec<usize>,
    kernel: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
struct PrunedLayer {
    out_channels: usize,
    activation: Activation,
    branches: Vec<PrunedBranch>,
}

/// Standalone network holding only the active slices, weights copied verbatim.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunedNet {
    input_shape: [usize; 3],
    layers: Vec<PrunedLayer>,
    head_weight: Tensor,
    head_bias: Tensor,
    param_count: usize,
}

pub fn prune(net: &SuperNet, arch: &Architecture) -> Result<PrunedNet> {
    if !arch.has_path() {
        return Err(Error::InvalidArgument(
            "architecture has a layer with no active slice".into(),
        ));
    }
    prune_any(net, arch)
}

/// Like [`prune`] but keeps headless architectures; a layer with nothing
/// active outputs zeros, so the logits reduce to the head bias.
pub(crate) fn prune_any(net: &SuperNet, arch: &Architecture) -> Result<PrunedNet> {
    if arch.layout().spec_digest() != net.layout().spec_digest() {
        return Err(Error::InvalidArgument("architecture belongs to a different search space".into()));
    }
    let spec = net.spec();
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (l, layer) in spec.layers.iter().enumerate() {
        let mut branches = Vec::new();
        for (b, br) in net.layers()[l].iter().enumerate() {
            let g = net.layout().group(l, b);
            let channels: Vec<usize> = (0..g.channels).filter(|&k| arch.is_active(g.offset + k)).collect();
            if channels.is_empty() {
                continue;
            }
            branches.push(PrunedBranch {
                kernel_size: br.kernel_size,
                kernel: kernels::gather_rows(&br.kernel, &channels),
                channels,
            });
        }
        layers.push(PrunedLayer {
            out_channels: layer.out_channels,
            activation: layer.activation,
            branches,
        });
    }
    let (w, b) = net.head();
    Ok(PrunedNet {
        input_shape: spec.input_shape,
        layers,
        head_weight: w.clone(),
        head_bias: b.clone(),
        param_count: arch.param_count(),
    })
}

impl PrunedNet {
    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Operations (kernel-size branches) that survived, per layer.
    pub fn operations(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .map(|l| l.branches.iter().map(|b| b.kernel_size).collect())
            .collect()
    }

    /// Applies layer `l` to its input activations.
    pub fn forward_layer(&self, l: usize, hidden: &Tensor) -> Result<Tensor> {
        let layer = &self.layers[l];
        let s = hidden.shape();
        let mut acc: Option<Tensor> = None;
        for br in &layer.branches {
            let input = kernels::gather_channels(hidden, &br.channels);
            let y = kernels::conv2d(&input, &br.kernel, 1, (br.kernel_size - 1) / 2)?;
            match acc.as_mut() {
                None => acc = Some(y),
                Some(a) => a.add_assign(&y),
            }
        }
        let sum = acc.unwrap_or_else(|| Tensor::zeros(&[s[0], layer.out_channels, s[2], s[3]]));
        Ok(match layer.activation {
            Activation::Relu => kernels::relu(&sum),
            Activation::Identity => sum,
        })
    }

    pub fn head(&self, hidden: &Tensor) -> Result<Tensor> {
        let pooled = kernels::global_avg_pool(hidden)?;
        kernels::dense(&pooled, &self.head_weight, &self.head_bias)
    }

    /// Logits for layers `from..` given the activations entering layer `from`.
    pub fn forward_from(&self, from: usize, hidden: &Tensor) -> Result<Tensor> {
        let mut h = hidden.clone();
        for l in from..self.layers.len() {
            h = self.forward_layer(l, &h)?;
        }
        self.head(&h)
    }

    pub fn forward(&self, inputs: &Tensor) -> Result<Tensor> {
        let [c, h, w] = self.input_shape;
        let s = inputs.shape();
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: s.to_vec(),
                right: vec![c, h, w],
            });
        }
        self.forward_from(0, inputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supernet::tests::{random_inputs, small_spec};
    use crate::supernet::InitConfig;

    fn net() -> SuperNet {
        SuperNet::build(&small_spec(), 4, &InitConfig::default()).unwrap()
    }

    #[test]
    fn full_architecture_matches_supernet() {
        let net = net();
        let x = random_inputs(6, 3);
        let pruned = prune(&net, &Architecture::full(net.layout())).unwrap();
        assert_eq!(pruned.forward(&x).unwrap(), net.forward(&x).unwrap());
        assert_eq!(pruned.param_count(), net.full_param_count());
    }

    #[test]
    fn pruned_forward_matches_masked_forward() {
        let net = net();
        let x = random_inputs(4, 8);
        let n = net.layout().num_slices();
        let mut checked = 0;
        for index in 0..(1u64 << n) {
            let arch = Architecture::from_index(net.layout(), index);
            if !arch.has_path() || index % 7 != 0 {
                continue;
            }
            let a = prune(&net, &arch).unwrap().forward(&x).unwrap();
            let b = net.forward_masked(&x, &[arch.to_mask()]).unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() <= 1e-12, "{index}: {u} vs {v}");
            }
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn dropped_operation_is_absent() {
        let net = net();
        let mut bits = vec![true; net.layout().num_slices()];
        let g = net.layout().group(1, 1).clone();
        bits[g.offset..g.offset + g.channels].iter_mut().for_each(|b| *b = false);
        let arch = Architecture::new(net.layout(), bits).unwrap();
        assert_eq!(
            arch.dropped_operations(),
            vec![DroppedOperation {
                layer: 1,
                kernel_size: 3
            }]
        );
        let pruned = prune(&net, &arch).unwrap();
        assert_eq!(pruned.operations(), vec![vec![1, 3], vec![1]]);
        assert_eq!(Architecture::full(net.layout()).dropped_operations(), vec![]);
    }

    #[test]
    fn proportions_match_hand_count() {
        // Layout: [l0 k1: 2][l0 k3: 2][l1 k1: 3][l1 k3: 3].
        let layout = net().layout().clone();
        let bits = [true, false, false, false, true, true, false, false, false, false];
        let arch = Architecture::new(&layout, bits.to_vec()).unwrap();
        assert!((arch.dropped_channel_fraction() - 0.7).abs() < 1e-15);
        assert_eq!(arch.dropped_operation_fraction(), 0.5);
        assert_eq!(arch.param_count(), 3 + 2 * 4 + layout.head_params());
    }

    #[test]
    fn path_requires_every_layer() {
        let layout = net().layout().clone();
        let mut bits = vec![false; 10];
        bits[0] = true;
        assert!(!Architecture::new(&layout, bits.clone()).unwrap().has_path());
        bits[9] = true;
        assert!(Architecture::new(&layout, bits).unwrap().has_path());
        assert!(prune(&net(), &Architecture::new(&layout, vec![false; 10]).unwrap()).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let layout = net().layout().clone();
        let arch = Architecture::from_index(&layout, 0b1011001101);
        let text = arch.to_toml();
        assert_eq!(Architecture::from_toml(&text, &small_spec()).unwrap(), arch);
        let mut other = small_spec();
        other.num_classes = 4;
        assert!(Architecture::from_toml(&text, &other).is_err());
    }

    #[test]
    fn relaxed_masks_do_not_define_architectures() {
        let layout = net().layout().clone();
        let p = vec![0.5; layout.num_slices()];
        let t = crate::sampler::Temperature::new(0.5).unwrap();
        let relaxed = crate::sampler::sample_relaxed(&p, t, 1).unwrap();
        assert!(Architecture::from_mask(&layout, &relaxed).is_err());
    }
}
