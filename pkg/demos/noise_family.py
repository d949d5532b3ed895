"""Compare what each variant does to the same logits and the same |xi| draws."""

import numpy as np

from nsfx.losses import VARIANTS, HeadParams, NoiseSpec, noisy_forward
from nsfx.numerics import Rng

rng = Rng(7)
head = HeadParams.he_normal(5, 12, rng.substream(0))
X = rng.substream(1).normal((256, 12))
y = (np.arange(256) % 5).astype(np.int64)

print(f"{'variant':>10} {'alpha^2':>8} {'loss':>8} {'mean sigma':>11} {'mean shift':>11}")
for a2 in (0.1, 0.5):
    for variant in VARIANTS:
        spec = NoiseSpec.from_alpha_squared(variant, a2)
        loss, rec = noisy_forward(head, X, y, spec, rng=rng.substream(2))
        shift = rec.noisy_logit - rec.logits[np.arange(len(y)), y]
        print(f"{variant:>10} {a2:8.2f} {loss:8.4f} {rec.sigma.mean():11.4f} {shift.mean():11.4f}")
print("annealed/free/amplitude only lower the target logit (loss rises);")
print("negative raises it (loss falls); normal shifts both ways.")
