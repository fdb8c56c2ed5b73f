//! Monte-Carlo variational objective: data NLL, the keep-probability entropy
//! term and the keep-coupled L2 penalty on kernel slices.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::supernet::{MaskInput, ParamNodes, SuperNet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyForm {
    /// `H = sum_{l,s} k p log p`.
    #[default]
    KeepOnly,
    /// `H = sum_{l,s} k (-p log p - (1-p) log(1-p))`.
    Bernoulli,
    Off,
}

/// Which probability scales the L2 penalty of a slice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2Coupling {
    /// `d^2 (1 - p) / 2N`.
    Drop,
    /// `d^2 p / 2N`.
    #[default]
    Keep,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthScaleOverride {
    pub layer: usize,
    pub kernel_size: usize,
    pub length_scale_sq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// `d^2`, the Gaussian weight-prior precision scale.
    pub length_scale_sq: f64,
    pub overrides: Vec<LengthScaleOverride>,
    /// Architecture drop prior; only 0 is supported.
    pub arch_prior: f64,
    /// `N`; `None` takes the training-set size.
    pub train_size: Option<usize>,
    pub entropy: EntropyForm,
    pub l2_coupling: L2Coupling,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            length_scale_sq: 100.0,
            overrides: Vec::new(),
            arch_prior: 0.0,
            train_size: None,
            entropy: EntropyForm::KeepOnly,
            l2_coupling: L2Coupling::Keep,
        }
    }
}

impl PriorConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let scales = std::iter::once(self.length_scale_sq).chain(self.overrides.iter().map(|o| o.length_scale_sq));
        for d2 in scales {
            if !(d2 > 0.0 && d2.is_finite()) {
                v.push(format!("prior.length_scale_sq must be positive, got {d2}"));
            }
        }
        if self.arch_prior != 0.0 {
            v.push(format!("prior.arch_prior must be 0, got {}", self.arch_prior));
        }
        if self.train_size == Some(0) {
            v.push("prior.train_size must be at least 1".into());
        }
        v
    }

    pub fn length_scale_sq_for(&self, layer: usize, kernel_size: usize) -> f64 {
        self.overrides
            .iter()
            .rev()
            .find(|o| o.layer == layer && o.kernel_size == kernel_size)
            .map_or(self.length_scale_sq, |o| o.length_scale_sq)
    }

    pub fn resolve_n(&self, dataset_len: usize) -> usize {
        self.train_size.unwrap_or(dataset_len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub data_nll: f64,
    pub entropy_term: f64,
    pub adaptive_l2: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("data_nll", self.data_nll),
            ("entropy_term", self.entropy_term),
            ("adaptive_l2", self.adaptive_l2),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(name.into()));
            }
        }
        Ok(())
    }
}

fn plogp(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * p.ln()
    }
}

/// Contribution of one group of `k` slices sharing keep probability `p`.
pub fn entropy_group(p: f64, k: usize, n: usize, form: EntropyForm) -> f64 {
    let h = match form {
        EntropyForm::KeepOnly => plogp(p),
        EntropyForm::Bernoulli => -plogp(p) - plogp(1.0 - p),
        EntropyForm::Off => 0.0,
    };
    -(k as f64) * h / n as f64
}

/// `d^2 c(p) / 2N * |m|^2` for one slice.
pub fn adaptive_l2_slice(d2: f64, p: f64, norm_sq: f64, n: usize, coupling: L2Coupling) -> f64 {
    let c = match coupling {
        L2Coupling::Drop => 1.0 - p,
        L2Coupling::Keep => p,
        L2Coupling::Off => 0.0,
    };
    d2 * c / (2.0 * n as f64) * norm_sq
}

/// Entropy term of the whole network, evaluated directly.
pub fn entropy_term(net: &SuperNet, prior: &PriorConfig, n: usize) -> f64 {
    let p = net.keep_probabilities();
    net.layout()
        .groups()
        .iter()
        .map(|g| (0..g.channels).map(|k| entropy_group(p[g.offset + k], 1, n, prior.entropy)).sum::<f64>())
        .sum()
}

pub fn adaptive_l2(net: &SuperNet, prior: &PriorConfig, n: usize) -> f64 {
    let p = net.keep_probabilities();
    let mut total = 0.0;
    for g in net.layout().groups() {
        let kernel = &net.layers()[g.layer][g.branch].kernel;
        let d2 = prior.length_scale_sq_for(g.layer, g.kernel_size);
        for (k, row) in kernel.data().chunks(g.slice_params()).enumerate() {
            let norm: f64 = row.iter().map(|v| v * v).sum();
            total += adaptive_l2_slice(d2, p[g.offset + k], norm, n, prior.l2_coupling);
        }
    }
    total
}

/// Loss nodes of one recorded objective.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveNodes {
    pub data_nll: NodeId,
    pub entropy_term: Option<NodeId>,
    pub adaptive_l2: Option<NodeId>,
    pub total: NodeId,
}

fn accumulate(g: &mut Graph, acc: Option<NodeId>, term: NodeId) -> Result<NodeId> {
    match acc {
        None => Ok(term),
        Some(a) => g.add(a, term),
    }
}

/// Records the entropy and L2 regularizers on `g`.
pub fn build_regularizers(
    g: &mut Graph,
    net: &SuperNet,
    nodes: &ParamNodes,
    prior: &PriorConfig,
    n: usize,
) -> Result<(Option<NodeId>, Option<NodeId>)> {
    let inv_n = 1.0 / n as f64;
    let mut entropy = None;
    let mut l2 = None;
    for grp in net.layout().groups() {
        let rho = net.keep_logit_node(nodes, grp.layer, grp.branch);
        // A shared logit stands for all K_l slices of its group.
        let weight = if g.value(rho).len() == 1 { grp.channels as f64 } else { 1.0 };
        if prior.entropy != EntropyForm::Off {
            let p = g.sigmoid(rho);
            let logp = g.log_sigmoid(rho);
            let mut h = g.mul(p, logp)?;
            let mut sign = -1.0;
            if prior.entropy == EntropyForm::Bernoulli {
                let neg = g.scale(rho, -1.0);
                let q = g.sigmoid(neg);
                let logq = g.log_sigmoid(neg);
                let qlogq = g.mul(q, logq)?;
                h = g.add(h, qlogq)?;
                sign = 1.0;
            }
            let s = g.sum(h);
            let term = g.scale(s, sign * weight * inv_n);
            entropy = Some(accumulate(g, entropy, term)?);
        }
        if prior.l2_coupling != L2Coupling::Off {
            let kernel = net.kernel_node(nodes, grp.layer, grp.branch);
            let norms = g.row_sum_squares(kernel);
            let coef_in = match prior.l2_coupling {
                L2Coupling::Drop => g.scale(rho, -1.0),
                _ => rho,
            };
            let coef = g.sigmoid(coef_in);
            let coef = g.expand(coef, &[grp.channels])?;
            let weighted = g.mul(coef, norms)?;
            let s = g.sum(weighted);
            let d2 = prior.length_scale_sq_for(grp.layer, grp.kernel_size);
            let term = g.scale(s, d2 * inv_n / 2.0);
            l2 = Some(accumulate(g, l2, term)?);
        }
    }
    Ok((entropy, l2))
}

/// Records the full objective for one minibatch.
#[allow(clippy::too_many_arguments)]
pub fn build_objective(
    g: &mut Graph,
    net: &SuperNet,
    nodes: &ParamNodes,
    inputs: &Tensor,
    labels: &[usize],
    masks: MaskInput<'_>,
    prior: &PriorConfig,
    n: usize,
) -> Result<ObjectiveNodes> {
    let x = g.input(inputs.clone());
    let logits = net.forward_graph(g, nodes, x, masks)?;
    let data_nll = g.softmax_cross_entropy(logits, labels)?;
    let (entropy_term, adaptive_l2) = build_regularizers(g, net, nodes, prior, n)?;
    let mut total = data_nll;
    for term in [entropy_term, adaptive_l2].into_iter().flatten() {
        total = g.add(total, term)?;
    }
    Ok(ObjectiveNodes {
        data_nll,
        entropy_term,
        adaptive_l2,
        total,
    })
}

fn read(g: &Graph, node: Option<NodeId>) -> Result<f64> {
    node.map_or(Ok(0.0), |id| g.value(id).item())
}

/// Evaluates the objective; with `with_grad` also returns gradients for every parameter.
pub fn total_loss(
    net: &SuperNet,
    inputs: &Tensor,
    labels: &[usize],
    masks: MaskInput<'_>,
    prior: &PriorConfig,
    n: usize,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Gradients>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("training-set size must be positive".into()));
    }
    let mut g = Graph::new();
    let nodes = net.register(&mut g)?;
    let obj = build_objective(&mut g, net, &nodes, inputs, labels, masks, prior, n)?;
    let breakdown = LossBreakdown {
        data_nll: g.value(obj.data_nll).item()?,
        entropy_term: read(&g, obj.entropy_term)?,
        adaptive_l2: read(&g, obj.adaptive_l2)?,
        total: g.value(obj.total).item()?,
    };
    breakdown.check_finite()?;
    let grads = if with_grad { Some(g.backward(obj.total)?) } else { None };
    if let Some(gr) = &grads {
        if let Some((name, _)) = gr.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    Ok((breakdown, grads))
}

/// Mean cross-entropy and accuracy of fixed logits.
pub fn classification_metrics(logits: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
    let (_, nll) = crate::tensor::kernels::softmax_nll(logits, labels)?;
    let loss = nll.iter().sum::<f64>() / labels.len() as f64;
    let pred = crate::tensor::kernels::argmax_rows(logits);
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok((correct as f64 / labels.len() as f64, loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{sample_relaxed_logits, MaskSample, Temperature};
    use crate::supernet::tests::{random_inputs, small_spec};
    use crate::supernet::InitConfig;

    #[test]
    fn entropy_examples() {
        let v = entropy_group(0.5, 4, 100, EntropyForm::KeepOnly);
        assert!((v - 0.013862943611198907).abs() < 1e-15, "{v}");
        assert!(entropy_group(1.0, 4, 100, EntropyForm::KeepOnly).abs() < 1e-15);
        assert!(entropy_group(1e-300, 4, 100, EntropyForm::KeepOnly).abs() < 1e-290);
        assert!(entropy_group(0.3, 4, 100, EntropyForm::KeepOnly) > 0.0);
        assert!(entropy_group(0.5, 1, 1, EntropyForm::Bernoulli) < 0.0);
    }

    #[test]
    fn adaptive_l2_examples() {
        assert_eq!(adaptive_l2_slice(1.0, 0.5, 2.0, 100, L2Coupling::Drop), 0.005);
        assert_eq!(adaptive_l2_slice(1.0, 0.3, 0.0, 100, L2Coupling::Drop), 0.0);
        assert_eq!(adaptive_l2_slice(3.0, 1.0, 7.0, 100, L2Coupling::Drop), 0.0);
        assert_eq!(adaptive_l2_slice(1.0, 0.5, 2.0, 100, L2Coupling::Keep), 0.005);
    }

    fn labels(n: usize) -> Vec<usize> {
        (0..n).map(|i| i % 3).collect()
    }

    #[test]
    fn graph_terms_match_direct_evaluation() {
        let net = SuperNet::build(&small_spec(), 2, &InitConfig::default()).unwrap();
        let x = random_inputs(6, 1);
        for coupling in [L2Coupling::Drop, L2Coupling::Keep] {
            for entropy in [EntropyForm::KeepOnly, EntropyForm::Bernoulli] {
                let prior = PriorConfig {
                    l2_coupling: coupling,
                    entropy,
                    length_scale_sq: 3.0,
                    ..PriorConfig::default()
                };
                let (b, _) = total_loss(&net, &x, &labels(6), MaskInput::Unmasked, &prior, 50, false).unwrap();
                assert!((b.entropy_term - entropy_term(&net, &prior, 50)).abs() < 1e-14);
                assert!((b.adaptive_l2 - adaptive_l2(&net, &prior, 50)).abs() < 1e-14);
                assert_eq!(b.total, b.data_nll + b.entropy_term + b.adaptive_l2);
            }
        }
    }

    #[test]
    fn zero_weights_leave_no_l2() {
        let mut net = SuperNet::build(&small_spec(), 2, &InitConfig::default()).unwrap();
        for (name, t) in net.params_mut() {
            if name.ends_with("weight") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x = random_inputs(4, 1);
        let (b, _) =
            total_loss(&net, &x, &labels(4), MaskInput::Unmasked, &PriorConfig::default(), 10, false).unwrap();
        assert_eq!(b.adaptive_l2, 0.0);
        assert!((b.total - (b.data_nll + b.entropy_term)).abs() < 1e-12);
        // Zero weights give uniform logits over 3 classes.
        assert!((b.data_nll - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn doubling_n_halves_regularizers() {
        let net = SuperNet::build(&small_spec(), 2, &InitConfig::default()).unwrap();
        let x = random_inputs(4, 1);
        let prior = PriorConfig::default();
        let (a, _) = total_loss(&net, &x, &labels(4), MaskInput::Unmasked, &prior, 40, false).unwrap();
        let (b, _) = total_loss(&net, &x, &labels(4), MaskInput::Unmasked, &prior, 80, false).unwrap();
        assert_eq!(a.data_nll, b.data_nll);
        assert_eq!(a.entropy_term, 2.0 * b.entropy_term);
        assert_eq!(a.adaptive_l2, 2.0 * b.adaptive_l2);
    }

    #[test]
    fn literal_coupling_rewards_larger_keep() {
        let net = SuperNet::build(&small_spec(), 2, &InitConfig::default()).unwrap();
        let prior = PriorConfig {
            l2_coupling: L2Coupling::Drop,
            entropy: EntropyForm::Off,
            ..PriorConfig::default()
        };
        let mut g = Graph::new();
        let nodes = net.register(&mut g).unwrap();
        let (_, l2) = build_regularizers(&mut g, &net, &nodes, &prior, 10).unwrap();
        let grads = g.backward(l2.unwrap()).unwrap();
        for (name, t) in &grads {
            if name.ends_with("keep_logit") {
                assert!(t.data().iter().all(|&v| v < 0.0), "{name}");
            }
        }
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let net = SuperNet::build(&small_spec(), 2, &InitConfig::default()).unwrap();
        let x = random_inputs(3, 4);
        let y = labels(3);
        let tau = Temperature::new(0.5).unwrap();
        let logits = net.keep_logits_per_slice();
        let masks: Vec<MaskSample> = (0..3).map(|i| sample_relaxed_logits(&logits, tau, 70 + i)).collect();
        for coupling in [L2Coupling::Drop, L2Coupling::Keep] {
            let prior = PriorConfig {
                l2_coupling: coupling,
                length_scale_sq: 5.0,
                ..PriorConfig::default()
            };
            let build = |g: &mut Graph, p: &crate::autodiff::ParamMap| {
                let mut n2 = net.clone();
                n2.load_params(p)?;
                let nodes = n2.register(g)?;
                Ok(build_objective(g, &n2, &nodes, &x, &y, MaskInput::Relaxed(&masks), &prior, 20)?.total)
            };
            let report = crate::autodiff::grad_check(build, &net.param_map(), 1e-4).unwrap();
            assert!(report.max_rel_error < 1e-3, "{report:?}");
        }
    }

    #[test]
    fn non_finite_terms_are_named() {
        let mut net = SuperNet::build(&small_spec(), 2, &InitConfig::default()).unwrap();
        net.branch_mut(0, 0).kernel.data_mut()[0] = f64::INFINITY;
        let x = random_inputs(2, 1);
        let err = total_loss(&net, &x, &labels(2), MaskInput::Unmasked, &PriorConfig::default(), 10, false)
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
    }
}
