"""Simulate a density panel with known dynamics, fit the functional VAR and
compare the estimated responses with the closed-form ones.

A shorter chain than the acceptance run keeps this under a minute.
"""
import numpy as np

from funvar import density_panel as dp
from funvar import favar_core as fc
from funvar import structural as sx
from funvar import tensor_factor as tf
from funvar.dgp_sim import DgpConfig, oracle_irf, simulate

cfg = DgpConfig()
sim = simulate(cfg, seed=1)
print("periods %d, firms per period %d, grid %s" % (cfg.T, cfg.n_obs, cfg.grid.shape))

# kernel densities -> centred log-ratios -> four flat principal components
L = dp.density_panel(sim.cross_sections, cfg.grid)
loading, scores = tf.pca_unfolded(L.flat(), 4, grid_shape=cfg.grid.shape)
print("explained variance of 4 components: %.4f" % loading.explained_variance)

data = fc.StateSpaceData(sim.aggregates, L.flat() - loading.mean[:, None], loading.flat_H)
draws = fc.gibbs_run(data, fc.PriorConfig(), p=1, iterations=4000, burn=1000, seed=1, store_factors=False)
print("kept %d draws, %d explosive" % (draws.n_draws, draws.explosive.sum()))

ir = sx.irf_draws(draws, 24, shock_index=0, names=["tfp", "y2", "f1", "f2", "f3", "f4"])
orc = oracle_irf(cfg, 24)
lo, med, hi = (np.quantile(ir.responses[:, :, 0], q, axis=0) for q in (0.05, 0.5, 0.95))
print("\nTFP response to a TFP shock")
print("  h     true    median   [5%, 95%]")
for h in (0, 1, 4, 8, 16, 24):
    print("%3d  %7.4f  %7.4f   [%7.4f, %7.4f]" % (h, orc.states[h, 0], med[h], lo[h], hi[h]))

fr = sx.firf(ir, loading, sx.steady_state_scores(draws), cfg.grid, 2)
b_lo, b_hi = fr.bands()
print("\nfunctional response: share of grid nodes where the truth is inside the 15-85% band")
for j, h in enumerate(fr.horizons):
    truth = orc.mass_delta[h].ravel(order="F")
    inside = np.mean((truth >= b_lo[j]) & (truth <= b_hi[j]))
    corr = np.corrcoef(truth, np.median(fr.mass_delta[:, j], axis=0))[0, 1]
    print("  h=%2d  coverage %.2f  corr(median, truth) %.2f" % (h, inside, corr))
