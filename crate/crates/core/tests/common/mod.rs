#![allow(dead_code)]

use postnas_core::config::{DataConfig, ExperimentConfig};
use postnas_core::experiment::{load_data, Splits};
use postnas_core::trainer::{train, TrainOutcome};
use postnas_core::data::Dataset;
use postnas_core::{rng, Result, SearchSpaceSpec, SuperNet};

pub const BENCHMARK: &str = include_str!("../../../../configs/planted.toml");

/// The planted benchmark under global seed `seed`, with a teacher of its own.
pub fn benchmark(seed: u64, overrides: &[&str]) -> ExperimentConfig {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    let mut cfg = ExperimentConfig::from_toml(BENCHMARK, &overrides).unwrap();
    cfg.seed = seed;
    if let DataConfig::Planted { teacher_seed, .. } = &mut cfg.data {
        *teacher_seed += seed;
    }
    cfg.validate().unwrap();
    cfg
}

pub fn train_benchmark(cfg: &ExperimentConfig) -> Result<(TrainOutcome, Splits)> {
    let splits = load_data(cfg)?;
    let net = SuperNet::build(&cfg.space, cfg.init_seed(), &cfg.init)?;
    let out = train(net, &splits.train, &cfg.resolved_train(), &cfg.prior, None)?;
    Ok((out, splits))
}

/// Standard-normal inputs with labels cycling through the classes.
pub fn eval_dataset(spec: &SearchSpaceSpec, n: usize, seed: u64) -> Dataset {
    let mut s = rng::stream(seed, "tests/eval", 0);
    let len: usize = spec.input_shape.iter().product();
    let x = (0..n * len).map(|_| rng::standard_normal(&mut s)).collect();
    let labels = (0..n).map(|i| i % spec.num_classes).collect();
    Dataset::new(spec.input_shape, spec.num_classes, x, labels, "tests").unwrap()
}
