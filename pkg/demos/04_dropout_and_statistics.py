"""
Direction dropout and paired statistics
=======================================

How fast does CSD degrade as gradient directions are removed, and is the
difference between two counts significant voxel by voxel?
"""

import numpy as np

from fodf_kit import csd, evaluation, phantom, sphere
from fodf_kit.volume_io import GradientScheme

scheme = GradientScheme.single_shell(sphere.generate_scheme(96, seed=0), 2000.0, 6)
dwi, mask, _ = phantom.generate_phantom((10, 10, 10), "mixed", scheme,
                                        phantom.ScanProfile(snr=20.0, seed=2), geometry_seed=5)

# reference: CSD on all 96 directions
ref, _ = csd.fit_volume(dwi, scheme, mask, csd.estimate_response(dwi, scheme, mask))

curve = evaluation.degradation_experiment(dwi, scheme, mask, "csd", counts=[45, 60, 75, 96],
                                          repeats=3, seed=0, reference=ref)
for c, m, s in zip(curve.counts, curve.mean, curve.std):
    print("%2d directions: ACC %.3f +/- %.3f" % (c, m, s))

# per-voxel ACC at 45 and 75 directions, same seed, then a signed-rank test
maps = {}
for count in (45, 75):
    est = evaluation.dropout_estimate(dwi, scheme, mask, "csd", count, repeat=0, seed=0)
    maps[count] = evaluation.acc_map(est, ref, mask).acc_map.data[mask.bool_mask(), 0]
stat, p = evaluation.wilcoxon_signed_rank(maps[75], maps[45])
print("75 vs 45 directions: median gain %.3f, W = %.0f, p = %.2g"
      % (np.median(maps[75] - maps[45]), stat, p))
