"""Train the two-Gaussian toy with and without annealed noise and print P-bar
(noisy and noise-free) and test error along the way."""

from dataclasses import replace

from nsfx.data import DatasetSpec, load_datasets
from nsfx.losses import NoiseSpec
from nsfx.training import TrainConfig, train

data = DatasetSpec(kind="synthetic", n_per_class=100, test_per_class=500, dim=2, separation=2.0)
train_set, test_set = load_datasets(data)
base = TrainConfig(layers=("dense(2, 16)", "prelu(16)"), batch_size=32, total_iterations=300,
                   base_lr=0.05, pbar_interval=50, dtype="float64", dataset=data)

for variant, a2 in (("none", 0.0), ("negative", 0.3), ("annealed", 0.3)):
    cfg = replace(base, noise=NoiseSpec.from_alpha_squared(variant, a2))
    result = train(cfg, (train_set, test_set))
    print(f"{variant} alpha^2={a2}")
    for m in result.metrics:
        print(f"  it {m.iteration:4d}  P-bar {m.p_bar:.4f}  clean {m.p_bar_clean:.4f}  test err {m.test_err:5.2f}%")
