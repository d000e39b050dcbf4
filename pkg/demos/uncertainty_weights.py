"""
Uncertainty-driven weights
==========================

The teacher network is run several times with dropout switched on. The
per-voxel spread of its fields and warped images, relative to their mean,
decides how strongly smoothness and teacher consistency are enforced.
"""

import numpy as np

from mtreg.regnet import ArchConfig, init_params
from mtreg.synth import FieldSpec, PhantomSpec, gen_pair
from mtreg.trainer import TrainConfig, train
from mtreg.uncertainty import adaptive_weights, mc_sample, uncertainty_maps

moving, fixed, *_ = gen_pair(PhantomSpec(size=(16, 16, 16), seed=3), FieldSpec(seed=3))

# a fresh network predicts an almost-zero field, so its spread is negligible
# against eps; a few training steps give it something to be unsure about
fresh = uncertainty_maps(mc_sample(init_params(ArchConfig(), seed=0), fixed, moving))
print("fresh network:", adaptive_weights(fresh))
teacher, _ = train(TrainConfig(steps=20), [(fixed, moving)])

samples = mc_sample(teacher, fixed, moving, n=6, base_seed=0)
maps = uncertainty_maps(samples)
lam_phi, lam_c = adaptive_weights(maps)
print(f"fraction of field entries above tau1: {np.mean(maps.u_phi > 0.1):.3f}")
print(f"fraction of voxels above tau2:        {np.mean(maps.u_app > 0.01):.3f}")
print(f"lambda_phi = {lam_phi:.3f} (max 5), lambda_c = {lam_c:.3f} (max 1)")

# without dropout the passes agree exactly and both weights vanish
quiet = init_params(ArchConfig(dropout_rate=0.0), seed=0)
print("no dropout:", adaptive_weights(uncertainty_maps(mc_sample(quiet, fixed, moving))))
