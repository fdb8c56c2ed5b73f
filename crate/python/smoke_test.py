"""Smoke test for the postnas extension module.

Build and install the wheel first:
    maturin build --release -m crates/py/Cargo.toml && pip install target/wheels/postnas-*.whl
"""

import json
import random
import sys
import tempfile
from pathlib import Path

import postnas

CONFIG = """
seed = 2

[space]
input_shape = [2, 4, 4]
num_classes = 3

[[space.layers]]
in_channels = 2
out_channels = 3
kernel_sizes = [1, 3]

[[space.layers]]
in_channels = 3
out_channels = 2
kernel_sizes = [1]

[train]
max_steps = 40
batch_size = 8

[search]
candidates = 16

[data]
kind = "planted"
teacher_seed = 4
noise = 0.05
examples = 100
split = [0.6, 0.2, 0.2]
planted = [
  { layer = 0, channel = 0, kernel_size = 3 },
  { layer = 1, channel = 0, kernel_size = 1 },
]
"""


def check(cond, what):
    if not cond:
        print(f"FAIL {what}")
        sys.exit(1)
    print(f"ok   {what}")


def main():
    cfg = postnas.ExperimentConfig.from_toml(CONFIG)
    check(cfg.seed == 2, "config parses")
    check(cfg.with_overrides(["seed=5"]).seed == 5, "overrides apply")
    try:
        postnas.ExperimentConfig.from_toml(CONFIG, ["train.learning_rate=-1"])
        check(False, "bad config rejected")
    except postnas.ConfigError as e:
        check("learning_rate" in str(e), "bad config raises ConfigError")

    hard = postnas.sample_hard([0.3] * 20000, 1)
    check(abs(sum(hard) / len(hard) - 0.3) < 3 * (0.21 / 20000) ** 0.5, "hard sampler mean")
    relaxed = postnas.sample_relaxed([0.3] * 10, 0.01, 1)
    check(all(0.0 < v < 1.0 for v in relaxed), "relaxed values open")
    check(abs(postnas.sign_test_p(9, 10) - 11 / 1024) < 1e-12, "sign test")

    net = postnas.SuperNet.build(cfg)
    rng = random.Random(0)
    x = [[[[rng.gauss(0, 1) for _ in range(4)] for _ in range(4)] for _ in range(2)] for _ in range(3)]
    bits = [True] * net.num_slices()
    bits[1] = False
    masked = net.forward(x, bits)
    pruned = net.prune_forward(bits, x)
    diff = max(abs(a - b) for ra, rb in zip(masked, pruned) for a, b in zip(ra, rb))
    check(diff < 1e-9, f"masked forward equals pruned forward ({diff:.1e})")

    with tempfile.TemporaryDirectory() as tmp:
        cfg.output_dir = tmp
        manifest = postnas.run(cfg)
        run_dir = Path(cfg.run_dir())
        check((run_dir / "manifest.json").exists(), "run writes a manifest")
        check(json.loads((run_dir / "manifest.json").read_text()) == manifest, "manifest matches return value")
        arch = postnas.Architecture.load(run_dir / "architecture.toml", cfg)
        best = postnas.evaluate(cfg, architecture=str(run_dir / "architecture.toml"))
        check(best == manifest["results"]["search"]["val"], "eval reproduces the search score")
        check(arch.param_count() == best["param_count"], "architecture parameter count")
        trained = postnas.SuperNet.load(run_dir / "supernet.ckpt")
        check(trained.digest() == manifest["snapshot_digest"], "checkpoint digest matches manifest")
        again = postnas.run(cfg)
        drop = lambda m: {k: v for k, v in m.items() if k != "wall_time_s"}
        check(drop(again) == drop(manifest), "second run identical apart from wall times")
    print("smoke test passed")


if __name__ == "__main__":
    main()
