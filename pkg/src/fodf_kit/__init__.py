"""fodf_kit: fODF estimation by CSD and by patch networks trained for scan/rescan consistency.

Submodules:
    volume_io   binary volume, gradient table and model file formats
    sphere      direction schemes, dropout and the constraint grid
    sh          real symmetric spherical harmonics and ACC
    phantom     multi-tensor phantoms with analytic ground-truth fODFs
    csd         single-shell single-tissue constrained deconvolution
    net         CNN / MLP with hand-written backpropagation
    trainer     patch datasets, direction-dropout augmentation, training loop
    evaluation  ACC maps, degradation curves, Wilcoxon signed-rank test
    connectome  weighted-graph measures
    cli         ``fodf-kit`` command line
"""

__version__ = "0.1.0"
