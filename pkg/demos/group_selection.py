"""Group spike-and-slab selection in a sparse three-equation system.

Half of the six coefficient groups in every equation are zero; the printout
lists posterior inclusion probabilities next to the truth.
"""
import numpy as np

from funvar import favar_core as fc

rng = np.random.default_rng(0)
T, m, G, g = 500, 3, 6, 2
X = np.hstack([np.ones((T, 1)), rng.standard_normal((T, G * g))])
B = np.zeros((1 + G * g, m))
active = np.zeros((m, G), dtype=bool)
for i in range(m):
    for j in rng.choice(G, 3, replace=False):
        active[i, j] = True
        B[1 + j * g:1 + (j + 1) * g, i] = rng.choice([-1, 1], g) * rng.uniform(0.3, 0.8, g)
Omega = np.array([[1.0, 0.5, 0.2], [0.5, 1.0, 0.3], [0.2, 0.3, 1.0]])
Y = X @ B + rng.multivariate_normal(np.zeros(m), Omega, T)

prior = fc.PriorConfig(kind=fc.ASYM, v0=m + 2.0, s2=np.ones(m), B0=np.zeros((1 + G * g, m)),
                       V0=np.full(1 + G * g, 100.0), shrinkage=fc.SpikeSlabConfig(groups=[g] * G, b2=10.0))
state = fc.init_asym_state(np.zeros((1 + G * g, m)), np.eye(m), prior)
gam, sig = [], []
for it in range(3000):
    state = fc.asym_conjugate_draw(X, Y, prior, rng, state)
    if it >= 500:
        gam.append(state.gamma.copy())
        sig.append(state.Sigma)

inc = np.mean(gam, axis=0)
for i in range(m):
    print("equation %d" % (i + 1))
    for j in range(G):
        print("  group %d  %-8s inclusion %.3f" % (j + 1, "active" if active[i, j] else "zero", inc[i, j]))
print("\nposterior mean of the innovation covariance")
print(np.round(np.mean(sig, axis=0), 2))
