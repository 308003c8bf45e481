import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fodf_kit import sh, trainer
from fodf_kit.errors import KeepBelowShMinimum, NoPairsForBeta, ShapeMismatch
from fodf_kit.volume_io import Volume4D


def vol(data, kind="sh_signal"):
    return Volume4D(np.asarray(data, np.float64), kind, (2.0, 2.0, 2.0), 8 if kind != "dwi_signal" else None)


def mask_of(shape, fill=True):
    return Volume4D.from_mask(np.full(shape, fill), (2.0, 2.0, 2.0))


@pytest.fixture(scope="module")
def subject(mixed_csd, noisy_mixed, scheme96):
    dwi, mask, _ = noisy_mixed
    return trainer.Subject("s", trainer.signal_sh(dwi, scheme96), mixed_csd[1], mask, dwi, scheme96)


def test_patch_counts(rng):
    v = vol(rng.normal(size=(3, 3, 3, 45)))
    idx, p = trainer.patch_array(v, mask_of((3, 3, 3)))
    assert idx.tolist() == [[1, 1, 1]] and p.shape == (1, 3, 3, 3, 45)
    np.testing.assert_array_equal(p[0], v.data)
    idx, p = trainer.patch_array(vol(rng.normal(size=(5, 5, 5, 45))), mask_of((5, 5, 5)))
    assert len(idx) == 27
    assert len(trainer.patch_array(vol(np.zeros((2, 5, 5, 45))), mask_of((2, 5, 5)))[0]) == 0


def test_patch_centres_and_context(rng):
    v = vol(rng.normal(size=(6, 5, 4, 45)))
    m = np.zeros((6, 5, 4), bool)
    m[2:4, 1:3, 1:3] = True
    idx, p = trainer.patch_array(v, Volume4D.from_mask(m, (2.0,) * 3))
    for (i, j, k), patch in zip(idx, p):
        np.testing.assert_array_equal(patch, v.data[i - 1:i + 2, j - 1:j + 2, k - 1:k + 2])
    # neighbours outside the mask stay in the patch
    assert np.abs(p[:, 0, 0, 0]).sum() > 0
    assert [i for i, _ in trainer.extract_patches(v, Volume4D.from_mask(m, (2.0,) * 3))] == \
        [tuple(r) for r in idx.tolist()]


def test_patch_mask_mismatch(rng):
    with pytest.raises(ShapeMismatch):
        trainer.patch_array(vol(np.zeros((4, 4, 4, 45))), mask_of((4, 4, 5)))


def test_signal_sh_reproduces_fit(noisy_mixed, scheme96):
    dwi, mask, _ = noisy_mixed
    out = trainer.signal_sh(dwi, scheme96)
    v = dwi.data[5, 5, 5].astype(np.float64)
    s0 = v[scheme96.b0_mask].mean()
    B = sh.build_design_matrix(scheme96.dw_dirs, 8)
    np.testing.assert_allclose(out.data[5, 5, 5], sh.fit_sh(v[scheme96.dw_mask] / s0, B), rtol=1e-6, atol=1e-7)  # stored as float32
    assert out.kind == "sh_signal" and out.sh_order == 8


def test_drop_scheme_keeps_b0(scheme96):
    sub, rows = trainer.drop_scheme(scheme96, 50, seed=3)
    assert sub.b0_mask.sum() == 6 and sub.dw_mask.sum() == 50
    assert np.all(np.diff(rows) > 0)
    np.testing.assert_array_equal(sub.bvecs, scheme96.bvecs[rows])


def test_augment_full_keep_equals_plain(noisy_mixed, scheme96):
    dwi, _, _ = noisy_mixed
    (v,) = trainer.augment_subject(dwi, scheme96, 1, keep_range=(96, 96))
    np.testing.assert_array_equal(v.data, trainer.signal_sh(dwi, scheme96).data)


def test_augment_variants_distinct(noisy_mixed, scheme96):
    dwi, _, _ = noisy_mixed
    vols, keeps = trainer.augment_subject(dwi, scheme96, 10, keep_range=(45, 45), seed=2,
                                          return_keeps=True)
    assert keeps == [45] * 10
    flat = {v.data.tobytes() for v in vols}
    assert len(flat) == 10
    again = trainer.augment_subject(dwi, scheme96, 10, keep_range=(45, 45), seed=2)
    assert all(a.data.tobytes() == b.data.tobytes() for a, b in zip(vols, again))


def test_augment_bounds(noisy_mixed, scheme96):
    dwi, _, _ = noisy_mixed
    with pytest.raises(KeepBelowShMinimum):
        trainer.augment_subject(dwi, scheme96, 1, keep_range=(44, 60))
    with pytest.raises(ValueError):
        trainer.augment_subject(dwi, scheme96, 1, keep_range=(50, 97))
    _, keeps = trainer.augment_subject(dwi, scheme96, 20, keep_range=(60, 64), return_keeps=True)
    assert all(60 <= k <= 64 for k in keeps)


@settings(max_examples=20, deadline=None)
@given(st.integers(3, 12), st.integers(3, 12), st.floats(0.05, 0.9), st.integers(0, 2))
def test_split_region_partitions(nx, nz, frac, axis):
    m = np.zeros((nx, 4, nz), bool)
    m[1:, :, 1:] = True
    tr, va = trainer.split_region(Volume4D.from_mask(m, (1.0,) * 3), frac, axis)
    a, b = tr.bool_mask(), va.bool_mask()
    assert not (a & b).any()
    assert np.array_equal(a | b, m)
    assert b.any()
    # validation lies strictly beyond every training voxel along the axis
    if a.any():
        assert np.argwhere(b)[:, axis].min() > np.argwhere(a)[:, axis].max()


def test_split_empty():
    with pytest.raises(ValueError):
        trainer.split_region(mask_of((3, 3, 3), False))


def test_config_round_trip():
    cfg = trainer.TrainConfig(architecture="mlp", keep_range=[45, 60], mlp_widths=[8, 45])
    again = trainer.TrainConfig.from_dict(cfg.to_dict())
    assert again == cfg
    with pytest.raises(ValueError):
        trainer.TrainConfig.from_dict({"epochz": 3})
    with pytest.raises(ValueError):
        trainer.TrainConfig(architecture="rnn")
    with pytest.raises(ValueError):
        trainer.TrainConfig(beta=-1)


def small_cfg(**kw):
    base = dict(architecture="cnn", beta=0.0, epochs=2, conv_channels=4, dense_width=8,
                batch_size=16, lr=1e-3, seed=0)
    base.update(kw)
    return trainer.TrainConfig(**base)


def test_beta_needs_pairs(subject):
    with pytest.raises(NoPairsForBeta):
        trainer.train(small_cfg(beta=0.5), trainer.Datasets([subject], []))


def test_train_deterministic(subject):
    tr, va = trainer.split_region(subject.mask)
    ds = trainer.Datasets([subject.with_mask(tr)], [subject.with_mask(va)])
    a = trainer.train(small_cfg(), ds)
    b = trainer.train(small_cfg(), ds)
    assert a.log == b.log
    for la, lb in zip(a.params.layers, b.params.layers):
        for k in la.tensors:
            assert la[k].tobytes() == lb[k].tobytes()
    assert a.log["n_val_samples"] > 0 and len(a.log["epochs"]) == 2
    assert a.log["retained_directions"] == {"96": a.log["n_train_samples"]}


def test_training_reduces_loss(subject):
    res = trainer.train(small_cfg(architecture="mlp", epochs=15, mlp_widths=(32, 45), lr=3e-3),
                        trainer.Datasets([subject], [subject]))
    losses = [e["train_loss"] for e in res.log["epochs"]]
    assert losses[-1] < 0.5 * losses[0]
    assert res.log["epochs"][res.log["best_epoch"]]["val_loss1"] == pytest.approx(res.log["best_val_loss1"])


def test_same_subject_pairs_warn(subject, caplog):
    pair = trainer.PairedSubject("s", subject.signal, subject.signal, subject.mask)
    with caplog.at_level(logging.WARNING):
        res = trainer.train(small_cfg(beta=0.5, epochs=1), trainer.Datasets([subject], [], [pair]))
    assert res.log["warnings"] and "same-subject" in res.log["warnings"][0]
    assert res.log["n_pair_samples"] > 0


def test_augmented_pool_size(subject):
    res = trainer.train(small_cfg(architecture="mlp", mlp_widths=(8, 45), epochs=1, augment=True,
                                  n_variants=2, keep_range=(45, 60)),
                        trainer.Datasets([subject], []))
    n_base = len(trainer.patch_array(subject.signal, subject.mask)[0])
    assert res.log["n_train_samples"] == 3 * n_base
    assert sum(res.log["retained_directions"].values()) == 3 * n_base


def test_predict_fills_patchable_voxels(subject):
    p = trainer.init_model(small_cfg(architecture="mlp", mlp_widths=(8, 45)))
    out = trainer.predict(p, subject.signal, subject.mask)
    idx, _ = trainer.patch_array(subject.signal, subject.mask)
    filled = np.argwhere(np.abs(out.data).sum(-1) > 0)
    assert sorted(map(tuple, filled.tolist())) == sorted(map(tuple, idx.tolist()))
    assert out.kind == "sh_fodf" and out.sh_order == 8
