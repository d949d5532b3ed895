"""Annealed noise read as an angle: the noisy target logit equals the clean one
with theta widened to theta', and the widening fades as theta shrinks."""

import math

import numpy as np

from nsfx.losses import HeadParams, NoiseSpec, augmentation_angle, noisy_forward

alpha, xi = 0.5, 0.8
W = np.array([[2.0, 0.0], [0.0, 1.0]])
b = np.zeros(2)
head = HeadParams(W, b)
print(f"alpha={alpha} |xi|={xi}")
print(f"{'theta':>8} {'theta_prime':>12} {'clean f_y':>10} {'noisy f_y':>10} {'|W||X|cos th_p':>16}")
for deg in (80, 60, 40, 20, 10, 5, 0):
    th = math.radians(deg)
    X = np.array([[math.cos(th), math.sin(th)]]) * 1.5
    _, rec = noisy_forward(head, X, np.array([0]), NoiseSpec("annealed", alpha), xi=np.array([xi]))
    tp = augmentation_angle(th, alpha, xi)
    via_angle = np.linalg.norm(W[0]) * np.linalg.norm(X) * math.cos(tp)
    print(f"{deg:8d} {math.degrees(tp):12.3f} {rec.logits[0, 0]:10.4f} {rec.noisy_logit[0]:10.4f} {via_angle:16.4f}")
