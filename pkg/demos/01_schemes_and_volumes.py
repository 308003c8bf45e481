"""
Gradient schemes and volume files
=================================

Generate a repulsion scheme, thin it out, and round-trip a volume
through the binary format.
"""

import tempfile
from pathlib import Path

import numpy as np

from fodf_kit import sphere, volume_io
from fodf_kit.volume_io import GradientScheme, Volume4D

# 96 directions by electrostatic repulsion on the half-sphere
dirs = sphere.generate_scheme(96, seed=0)
print("directions:", len(dirs), " min separation %.1f deg" % dirs.min_separation_deg())

# keep 45 of them: the smallest subset that still determines an order-8 fit
sub = sphere.drop_directions(dirs, 45, seed=1)
print("kept %d, uniformity ok: %s" % (len(sub.indices), sphere.uniformity_check(sub, dirs)))

# a single-shell acquisition: 6 b0 volumes then the 96 DW directions
scheme = GradientScheme.single_shell(dirs, 2000.0, 6)

tmp = Path(tempfile.mkdtemp())
volume_io.write_gradients(scheme, tmp / "dwi.bval", tmp / "dwi.bvec")
back = volume_io.read_gradients(tmp / "dwi.bval", tmp / "dwi.bvec")
print("gradients round-trip exactly:", np.array_equal(back.bvecs, scheme.bvecs))

# any X*Y*Z*C float array can be stored; the header records its kind
data = np.random.default_rng(0).normal(size=(4, 5, 6, len(scheme.bvals)))
vol = Volume4D(data, "dwi_signal", (2.0, 2.0, 2.0))
volume_io.write_volume(vol, tmp / "noise.dwv")
again = volume_io.read_volume(tmp / "noise.dwv")
print("volume dims", again.dims, "identical:", np.array_equal(again.data, vol.data.astype(np.float32)))
