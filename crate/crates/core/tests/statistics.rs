use postnas_core::objective::{entropy_group, total_loss, EntropyForm, PriorConfig};
use postnas_core::rng;
use postnas_core::sampler::{sample_hard, sample_relaxed, sample_relaxed_logits, Temperature};
use postnas_core::supernet::MaskInput;
use postnas_core::{Activation, InitConfig, LayerSpec, SearchSpaceSpec, SuperNet, Tensor};

fn toy() -> (SuperNet, Tensor, Vec<usize>) {
    let spec = SearchSpaceSpec {
        input_shape: [2, 4, 4],
        layers: vec![
            LayerSpec { in_channels: 2, out_channels: 3, kernel_sizes: vec![1, 3], activation: Activation::Relu },
            LayerSpec { in_channels: 3, out_channels: 3, kernel_sizes: vec![1, 3], activation: Activation::Relu },
        ],
        num_classes: 3,
    };
    let net = SuperNet::build(&spec, 9, &InitConfig { keep_init: 0.7, ..InitConfig::default() }).unwrap();
    let mut s = rng::stream(4, "stats/inputs", 0);
    let x: Vec<f64> = (0..8 * 32).map(|_| rng::standard_normal(&mut s)).collect();
    let labels = (0..8).map(|i| i % 3).collect();
    (net, Tensor::new(vec![8, 2, 4, 4], x).unwrap(), labels)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn hard_and_relaxed_means_sit_in_the_binomial_interval() {
    let n = 20_000;
    for p in [0.05, 0.3, 0.7, 0.95] {
        let half = 3.0 * (p * (1.0 - p) / n as f64).sqrt();
        let hard = sample_hard(&vec![p; n], 17).unwrap();
        let relaxed = sample_relaxed(&vec![p; n], Temperature::new(0.01).unwrap(), 18).unwrap();
        for m in [mean(&hard.values), mean(&relaxed.values)] {
            assert!((m - p).abs() < half, "p {p}: mean {m}");
        }
    }
}

#[test]
fn relaxed_mean_tends_to_p_as_temperature_falls() {
    let n = 20_000;
    let p = 0.8;
    let gap = |tau: f64| (mean(&sample_relaxed(&vec![p; n], Temperature::new(tau).unwrap(), 5).unwrap().values) - p).abs();
    assert!(gap(0.01) < gap(1.0));
    assert!(gap(1.0) < gap(5.0));
}

#[test]
fn objective_monte_carlo_estimate_is_stable() {
    let (net, x, y) = toy();
    let prior = PriorConfig { length_scale_sq: 10.0, ..PriorConfig::default() };
    let tau = Temperature::new(0.2).unwrap();
    let logits = net.keep_logits_per_slice();
    let draws: Vec<f64> = (0..1000u64)
        .map(|d| {
            let masks: Vec<_> = (0..y.len() as u64)
                .map(|i| sample_relaxed_logits(&logits, tau, rng::derive_seed(d, "stats/mask", i)))
                .collect();
            total_loss(&net, &x, &y, MaskInput::Relaxed(&masks), &prior, 100, false).unwrap().0.total
        })
        .collect();
    let m = mean(&draws);
    let var = draws.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
    let se = (var / draws.len() as f64).sqrt();
    assert!(se < 0.02 * m.abs(), "mean {m} se {se}");
}

#[test]
fn keep_only_entropy_vanishes_at_the_boundary_and_not_between() {
    for form in [EntropyForm::KeepOnly, EntropyForm::Bernoulli] {
        assert!(entropy_group(1.0, 4, 10, form).abs() < 1e-12);
        assert!(entropy_group(1e-12, 4, 10, form).abs() < 1e-9);
        assert!(entropy_group(0.5, 4, 10, form) != 0.0);
    }
}
