"""
Training a patch network
========================

Label a phantom with CSD, then fit the 3x3x3 patch CNN with and without
the scan/rescan consistency term. Widths and epochs are cut down so the
script finishes in a couple of minutes.
"""


from fodf_kit import csd, phantom, sh, sphere, trainer
from fodf_kit.volume_io import GradientScheme

scheme = GradientScheme.single_shell(sphere.generate_scheme(96, seed=0), 2000.0, 6)


def acquire(geometry_seed, noise_seed, shape=(12, 12, 12)):
    prof = phantom.ScanProfile(snr=20.0, seed=noise_seed)
    return phantom.generate_phantom(shape, "mixed", scheme, prof, geometry_seed=geometry_seed)


# the labelled subject: network input is the signal SH, target the CSD fODF
dwi, mask, _ = acquire(1, 11)
labels, _ = csd.fit_volume(dwi, scheme, mask, csd.estimate_response(dwi, scheme, mask))
subject = trainer.Subject("A", trainer.signal_sh(dwi, scheme), labels, mask, dwi, scheme)
train_mask, val_mask = trainer.split_region(mask)

# a second subject scanned twice feeds the consistency term
dwi_b, mask_b, _ = acquire(2, 21)
rescan_b = phantom.make_rescan(dwi_b, scheme, phantom.ScanProfile(snr=20.0, seed=1021))
pair = trainer.PairedSubject("B", trainer.signal_sh(dwi_b, scheme),
                             trainer.signal_sh(rescan_b, scheme), mask_b)

data = trainer.Datasets([subject.with_mask(train_mask)], [subject.with_mask(val_mask)], [pair])

for beta in (0.0, 0.5):
    cfg = trainer.TrainConfig(beta=beta, epochs=8, conv_channels=16, dense_width=64, lr=3e-3)
    res = trainer.train(cfg, data)
    best = res.log["epochs"][res.log["best_epoch"]]
    # reproducibility on the paired subject: ACC between its two predictions
    a = trainer.predict(res.params, pair.scan, pair.mask)
    b = trainer.predict(res.params, pair.rescan, pair.mask)
    idx, _ = trainer.patch_array(pair.scan, pair.mask)
    vals, ok = sh.acc_many(a.data[tuple(idx.T)], b.data[tuple(idx.T)])
    print("beta %.1f: val ACC %.3f, scan/rescan ACC %.3f" % (beta, best["val_acc"], vals[ok].mean()))
