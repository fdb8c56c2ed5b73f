//! The weight-sharing super-network: sliced convolution kernels, per-branch
//! keep logits, and the masked forward pass.
//!
//! Masking slice `(l, k, s)` multiplies the kernel rows that read input
//! channel `k` in branch `s`. Because those rows touch nothing else, the
//! forward pass gates the branch's *input channel* instead of materialising a
//! masked kernel per example; the two are the same product.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, NodeId, ParamMap};
use crate::error::{Error, Result};
use crate::rng;
use crate::sampler::{MaskMode, MaskSample, BELOW_ONE};
use crate::space::{Activation, SearchSpaceSpec, SliceLayout};
use crate::tensor::Tensor;

/// How keep probabilities are shared across the slices of one branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepGranularity {
    /// One probability per (layer, kernel size).
    #[default]
    PerBranch,
    /// One probability per (layer, channel, kernel size).
    PerSlice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Initial keep probability of every slice.
    pub keep_init: f64,
    /// Kernels are drawn from `U(-a, a)` with `a = gain * sqrt(3 / fan_in)`,
    /// `fan_in` summed over a layer's branches.
    pub weight_gain: f64,
    pub keep_granularity: KeepGranularity,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            keep_init: 0.9,
            weight_gain: std::f64::consts::SQRT_2,
            keep_granularity: KeepGranularity::PerBranch,
        }
    }
}

impl InitConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.keep_init > 0.0 && self.keep_init < 1.0) {
            v.push(format!("init.keep_init must lie in (0, 1), got {}", self.keep_init));
        }
        if !(self.weight_gain >= 0.0 && self.weight_gain.is_finite()) {
            v.push(format!("init.weight_gain must be finite and non-negative, got {}", self.weight_gain));
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub kernel_size: usize,
    /// `[K_l, H_l, s, s]`; row `k` is the slice reading input channel `k`.
    pub kernel: Tensor,
    /// `[1]` or `[K_l]` depending on [`KeepGranularity`].
    pub keep_logits: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuperNet {
    spec: SearchSpaceSpec,
    layout: SliceLayout,
    layers: Vec<Vec<Branch>>,
    head_weight: Tensor,
    head_bias: Tensor,
    seed: u64,
    granularity: KeepGranularity,
}

/// Where the masks of a forward pass come from.
#[derive(Clone, Copy, Debug)]
pub enum MaskInput<'a> {
    Unmasked,
    /// Constant mask values: one sample for the whole batch or one per example.
    Fixed(&'a [MaskSample]),
    /// Relaxed masks rebuilt from the keep logits and each sample's stored
    /// noise, so gradients reach the logits.
    Relaxed(&'a [MaskSample]),
}

/// Graph nodes of a registered super-network.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    kernels: Vec<Vec<NodeId>>,
    keep_logits: Vec<Vec<NodeId>>,
    head_weight: NodeId,
    head_bias: NodeId,
}

pub fn kernel_param_name(layer: usize, kernel_size: usize) -> String {
    format!("layer{layer}.k{kernel_size}.weight")
}

pub fn keep_param_name(layer: usize, kernel_size: usize) -> String {
    format!("layer{layer}.k{kernel_size}.keep_logit")
}

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl SuperNet {
    /// Builds the full super-network: every slice starts active with
    /// probability `init.keep_init`.
    pub fn build(spec: &SearchSpaceSpec, seed: u64, init: &InitConfig) -> Result<Self> {
        spec.validate()?;
        let bad = init.violations();
        if !bad.is_empty() {
            return Err(Error::Config(bad));
        }
        let layout = SliceLayout::new(spec);
        let keep_logit = crate::sampler::logit(init.keep_init);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (l, layer) in spec.layers.iter().enumerate() {
            let fan_in: usize = layer
                .kernel_sizes
                .iter()
                .map(|s| layer.in_channels * s * s)
                .sum();
            let bound = init.weight_gain * (3.0 / fan_in as f64).sqrt();
            let branches = layer
                .kernel_sizes
                .iter()
                .map(|&s| {
                    let shape = [layer.in_channels, layer.out_channels, s, s];
                    let mut stream = rng::stream(seed, &kernel_param_name(l, s), 0);
                    let numel: usize = shape.iter().product();
                    let data = (0..numel)
                        .map(|_| (2.0 * rng::open_uniform(&mut stream) - 1.0) * bound)
                        .collect();
                    let groups = match init.keep_granularity {
                        KeepGranularity::PerBranch => 1,
                        KeepGranularity::PerSlice => layer.in_channels,
                    };
                    Ok(Branch {
                        kernel_size: s,
                        kernel: Tensor::new(shape.to_vec(), data)?,
                        keep_logits: Tensor::full(&[groups], keep_logit),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            layers.push(branches);
        }
        let features = spec.layers.last().expect("validated").out_channels;
        let bound = (3.0 / features as f64).sqrt();
        let mut stream = rng::stream(seed, HEAD_WEIGHT, 0);
        let head = (0..features * spec.num_classes)
            .map(|_| (2.0 * rng::open_uniform(&mut stream) - 1.0) * bound)
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layout,
            layers,
            head_weight: Tensor::new(vec![features, spec.num_classes], head)?,
            head_bias: Tensor::zeros(&[spec.num_classes]),
            seed,
            granularity: init.keep_granularity,
        })
    }

    pub fn spec(&self) -> &SearchSpaceSpec {
        &self.spec
    }

    pub fn layout(&self) -> &SliceLayout {
        &self.layout
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn granularity(&self) -> KeepGranularity {
        self.granularity
    }

    pub fn layers(&self) -> &[Vec<Branch>] {
        &self.layers
    }

    pub fn head(&self) -> (&Tensor, &Tensor) {
        (&self.head_weight, &self.head_bias)
    }

    pub fn head_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.head_weight, &mut self.head_bias)
    }

    pub fn branch_mut(&mut self, layer: usize, branch: usize) -> &mut Branch {
        &mut self.layers[layer][branch]
    }

    /// Every trainable tensor with its parameter id, in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, branches) in self.layers.iter().enumerate() {
            for b in branches {
                out.push((kernel_param_name(l, b.kernel_size), &b.kernel));
                out.push((keep_param_name(l, b.kernel_size), &b.keep_logits));
            }
        }
        out.push((HEAD_WEIGHT.to_string(), &self.head_weight));
        out.push((HEAD_BIAS.to_string(), &self.head_bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (l, branches) in self.layers.iter_mut().enumerate() {
            for b in branches {
                out.push((kernel_param_name(l, b.kernel_size), &mut b.kernel));
                out.push((keep_param_name(l, b.kernel_size), &mut b.keep_logits));
            }
        }
        out.push((HEAD_WEIGHT.to_string(), &mut self.head_weight));
        out.push((HEAD_BIAS.to_string(), &mut self.head_bias));
        out
    }

    pub fn param_map(&self) -> ParamMap {
        self.params().into_iter().map(|(k, v)| (k, v.clone())).collect()
    }

    /// Overwrites parameters by id; every id must exist with the same shape.
    pub fn load_params(&mut self, params: &ParamMap) -> Result<()> {
        for (name, slot) in self.params_mut() {
            if let Some(v) = params.get(&name) {
                if v.shape() != slot.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "load_params",
                        left: slot.shape().to_vec(),
                        right: v.shape().to_vec(),
                    });
                }
                *slot = v.clone();
            }
        }
        let known: Vec<String> = self.params().into_iter().map(|(k, _)| k).collect();
        if let Some(extra) = params.keys().find(|k| !known.contains(k)) {
            return Err(Error::InvalidArgument(format!("unknown parameter {extra}")));
        }
        Ok(())
    }

    /// Keep probability of every slice, in layout order.
    pub fn keep_probabilities(&self) -> Vec<f64> {
        self.keep_logits_per_slice().into_iter().map(sigmoid).collect()
    }

    pub fn keep_logits_per_slice(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout.num_slices());
        for g in self.layout.groups() {
            let logits = &self.layers[g.layer][g.branch].keep_logits;
            for k in 0..g.channels {
                out.push(if logits.len() == 1 { logits.data()[0] } else { logits.data()[k] });
            }
        }
        out
    }

    /// Mean keep probability of each layer.
    pub fn mean_keep_per_layer(&self) -> Vec<f64> {
        let p = self.keep_probabilities();
        let mut sums = vec![(0.0, 0usize); self.layout.num_layers()];
        for g in self.layout.groups() {
            for k in 0..g.channels {
                sums[g.layer].0 += p[g.offset + k];
                sums[g.layer].1 += 1;
            }
        }
        sums.into_iter().map(|(s, n)| s / n as f64).collect()
    }

    /// `sum_{l,k,s} p_l^s * H_l * s * s` plus the head.
    pub fn expected_param_count(&self) -> f64 {
        let p = self.keep_probabilities();
        let kernels: f64 = self
            .layout
            .groups()
            .iter()
            .map(|g| (0..g.channels).map(|k| p[g.offset + k]).sum::<f64>() * g.slice_params() as f64)
            .sum();
        kernels + self.layout.head_params() as f64
    }

    pub fn full_param_count(&self) -> usize {
        self.layout.full_kernel_params() + self.layout.head_params()
    }

    /// Hex SHA-256 over the spec digest and every parameter's bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.layout.spec_digest().as_bytes());
        for (name, t) in self.params() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn register(&self, g: &mut Graph) -> Result<ParamNodes> {
        let mut kernels = Vec::new();
        let mut keep_logits = Vec::new();
        for (l, branches) in self.layers.iter().enumerate() {
            let mut ks = Vec::new();
            let mut ps = Vec::new();
            for b in branches {
                ks.push(g.param(&kernel_param_name(l, b.kernel_size), b.kernel.clone())?);
                ps.push(g.param(&keep_param_name(l, b.kernel_size), b.keep_logits.clone())?);
            }
            kernels.push(ks);
            keep_logits.push(ps);
        }
        Ok(ParamNodes {
            kernels,
            keep_logits,
            head_weight: g.param(HEAD_WEIGHT, self.head_weight.clone())?,
            head_bias: g.param(HEAD_BIAS, self.head_bias.clone())?,
        })
    }

    pub fn keep_logit_node(&self, nodes: &ParamNodes, layer: usize, branch: usize) -> NodeId {
        nodes.keep_logits[layer][branch]
    }

    pub fn kernel_node(&self, nodes: &ParamNodes, layer: usize, branch: usize) -> NodeId {
        nodes.kernels[layer][branch]
    }

    fn check_masks(&self, masks: &[MaskSample], batch: usize) -> Result<()> {
        if masks.len() != 1 && masks.len() != batch {
            return Err(Error::InvalidArgument(format!(
                "expected 1 or {batch} mask samples, got {}",
                masks.len()
            )));
        }
        let n = self.layout.num_slices();
        if let Some(bad) = masks.iter().find(|m| m.len() != n) {
            return Err(Error::InvalidArgument(format!(
                "mask covers {} slices but the super-network has {n}",
                bad.len()
            )));
        }
        Ok(())
    }

    /// Mask node of one branch, shaped `[B', K_l]` with `B'` 1 or the batch size.
    fn branch_mask(
        &self,
        g: &mut Graph,
        nodes: &ParamNodes,
        masks: MaskInput<'_>,
        layer: usize,
        branch: usize,
    ) -> Result<Option<NodeId>> {
        let group = self.layout.group(layer, branch);
        let (k, off) = (group.channels, group.offset);
        match masks {
            MaskInput::Unmasked => Ok(None),
            MaskInput::Fixed(samples) => {
                let data = samples
                    .iter()
                    .flat_map(|m| m.values[off..off + k].iter().copied())
                    .collect();
                let t = Tensor::new(vec![samples.len(), k], data)?;
                Ok(Some(g.input(t)))
            }
            MaskInput::Relaxed(samples) => {
                let tau = samples[0]
                    .tau
                    .filter(|_| samples.iter().all(|m| m.mode == MaskMode::Relaxed && m.tau == samples[0].tau))
                    .ok_or_else(|| {
                        Error::InvalidArgument("relaxed forward needs relaxed samples sharing one temperature".into())
                    })?;
                let shape = [samples.len(), k];
                let rho = g.expand(nodes.keep_logits[layer][branch], &shape)?;
                let noise = samples
                    .iter()
                    .flat_map(|m| m.noise[off..off + k].iter().copied())
                    .collect();
                let noise = g.input(Tensor::new(shape.to_vec(), noise)?);
                let z = g.add(rho, noise)?;
                let z = g.scale(z, 1.0 / tau.get());
                let eps = g.sigmoid(z);
                Ok(Some(g.clamp(eps, f64::MIN_POSITIVE, BELOW_ONE)))
            }
        }
    }

    /// Records the masked forward pass and returns the logits node.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        nodes: &ParamNodes,
        x: NodeId,
        masks: MaskInput<'_>,
    ) -> Result<NodeId> {
        let [c, h, w] = self.spec.input_shape;
        let xs = g.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1..] != [c, h, w] {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: xs,
                right: vec![c, h, w],
            });
        }
        let batch = xs[0];
        if let MaskInput::Fixed(m) | MaskInput::Relaxed(m) = masks {
            self.check_masks(m, batch)?;
        }
        let mut hidden = x;
        for (l, branches) in self.layers.iter().enumerate() {
            let mut acc: Option<NodeId> = None;
            for (b, br) in branches.iter().enumerate() {
                let input = match self.branch_mask(g, nodes, masks, l, b)? {
                    Some(mask) => g.mask_mul(hidden, mask)?,
                    None => hidden,
                };
                let y = g.conv2d(input, nodes.kernels[l][b], 1, (br.kernel_size - 1) / 2)?;
                acc = Some(match acc {
                    None => y,
                    Some(a) => g.add(a, y)?,
                });
            }
            let sum = acc.expect("validated: every layer has a branch");
            hidden = match self.spec.layers[l].activation {
                Activation::Relu => g.relu(sum),
                Activation::Identity => sum,
            };
        }
        let pooled = g.global_avg_pool(hidden)?;
        g.dense(pooled, nodes.head_weight, nodes.head_bias)
    }

    /// Logits with constant masks (hard or relaxed values), no gradient tracking kept.
    pub fn forward_masked(&self, inputs: &Tensor, masks: &[MaskSample]) -> Result<Tensor> {
        let mut g = Graph::new();
        let nodes = self.register(&mut g)?;
        let x = g.input(inputs.clone());
        let logits = self.forward_graph(&mut g, &nodes, x, MaskInput::Fixed(masks))?;
        Ok(g.value(logits).clone())
    }

    pub fn forward(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let nodes = self.register(&mut g)?;
        let x = g.input(inputs.clone());
        let logits = self.forward_graph(&mut g, &nodes, x, MaskInput::Unmasked)?;
        Ok(g.value(logits).clone())
    }

    pub(crate) fn from_parts(
        spec: SearchSpaceSpec,
        seed: u64,
        granularity: KeepGranularity,
        params: &ParamMap,
    ) -> Result<Self> {
        let init = InitConfig {
            keep_granularity: granularity,
            ..InitConfig::default()
        };
        let mut net = Self::build(&spec, seed, &init)?;
        let missing: Vec<String> = net
            .params()
            .into_iter()
            .map(|(k, _)| k)
            .filter(|k| !params.contains_key(k))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!("missing parameters: {}", missing.join(", "))));
        }
        net.load_params(params)?;
        Ok(net)
    }
}
