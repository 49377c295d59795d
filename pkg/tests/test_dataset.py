import filecmp
import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from meshgait import mg3d
from meshgait.dataset import (
    BatchSpec,
    GaitDataset,
    GroundTruth3D,
    SilhouetteSequence,
    crop_indices,
    identity_params,
    load_sequence,
    make_c_true,
    marker_weights,
    preprocess_mask,
    sample_batch,
    synth_generate,
    write_sequence,
)
from meshgait.errors import ConfigError, FormatError, LoadError, SamplingError


def _write_frames(path, frames):
    path.mkdir(parents=True, exist_ok=True)
    for t, f in enumerate(frames):
        Image.fromarray(f).save(path / f"frame_{t:04d}.png")


# ---- mg3d sidecar format


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.integers(0, 2**31 - 1))
def test_mg3d_roundtrip(shape, seed):
    arr = np.random.default_rng(seed).normal(size=shape).astype(np.float32)
    out = mg3d.decode(mg3d.encode(arr))
    assert out.shape == arr.shape
    assert out.tobytes() == arr.tobytes()


def test_mg3d_layout_is_little_endian():
    buf = mg3d.encode(np.array([[1.0, 2.0]], dtype=np.float32))
    assert buf[:4] == b"MG3D"
    assert struct.unpack("<I", buf[4:8]) == (2,)
    assert struct.unpack("<II", buf[8:16]) == (1, 2)
    assert struct.unpack("<2f", buf[16:]) == (1.0, 2.0)


def test_mg3d_rejects_bad_payload():
    buf = mg3d.encode(np.zeros((2, 3), np.float32))
    with pytest.raises(FormatError):
        mg3d.decode(buf[:-4])
    with pytest.raises(FormatError):
        mg3d.decode(b"XXXX" + buf[4:])


# ---- loading


def test_load_without_sidecars(tmp_path):
    frames = [(np.random.default_rng(t).random((64, 44)) > 0.5).astype(np.uint8) * 255 for t in range(30)]
    _write_frames(tmp_path / "seq", frames)
    seq, gt = load_sequence(tmp_path / "seq")
    assert len(seq) == 30 and seq.frames.shape == (30, 1, 64, 44)
    assert gt is None


def test_identity_resize_is_bit_exact(tmp_path):
    masks = [(np.random.default_rng(t).random((64, 44)) > 0.5).astype(np.uint8) for t in range(3)]
    _write_frames(tmp_path / "seq", [m * 255 for m in masks])
    seq, _ = load_sequence(tmp_path / "seq")
    np.testing.assert_array_equal(seq.frames[:, 0], np.stack(masks).astype(np.float32))


def test_binarization_threshold_and_values():
    img = np.array([[0, 127, 128, 255]], dtype=np.uint8).repeat(64, axis=0)
    out = preprocess_mask(np.pad(img, ((0, 0), (20, 20))))
    assert set(np.unique(out)) <= {0.0, 1.0}
    raw = np.zeros((128, 88), np.uint8)
    raw[:, 40:48] = 200
    out = preprocess_mask(raw)
    assert out.shape == (64, 44) and out.sum() > 0


def test_wide_frames_are_cropped_narrow_padded():
    wide = np.zeros((64, 100), np.uint8)
    wide[:, 50] = 255
    assert preprocess_mask(wide).shape == (64, 44)
    assert preprocess_mask(wide)[:, 22].all()
    narrow = np.full((64, 20), 255, np.uint8)
    out = preprocess_mask(narrow)
    assert out[:, :12].sum() == 0 and out[:, 12:32].all() and out[:, 32:].sum() == 0


def test_sidecar_frame_mismatch_is_format_error(tmp_path):
    d = tmp_path / "seq"
    _write_frames(d, [np.zeros((64, 44), np.uint8)] * 29)
    mg3d.write(d / "joints.mg3d", np.zeros((30, 24, 3), np.float32))
    mg3d.write(d / "markers.mg3d", np.zeros((30, 64, 3), np.float32))
    mg3d.write(d / "mesh.mg3d", np.zeros((30, 6890, 3), np.float32))
    with pytest.raises(FormatError):
        load_sequence(d)


def test_partial_sidecars_rejected(tmp_path):
    d = tmp_path / "seq"
    _write_frames(d, [np.zeros((64, 44), np.uint8)] * 2)
    mg3d.write(d / "joints.mg3d", np.zeros((2, 24, 3), np.float32))
    with pytest.raises(FormatError):
        load_sequence(d)


def test_missing_frames_is_load_error(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(LoadError):
        load_sequence(tmp_path / "empty")
    with pytest.raises(LoadError):
        load_sequence(tmp_path / "nope")


def test_write_then_load_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    frames = (rng.random((5, 1, 64, 44)) > 0.5).astype(np.float32)
    gt = GroundTruth3D(
        rng.random((5, 24, 3)).astype(np.float32) * 15,
        rng.random((5, 64, 3)).astype(np.float32) * 15,
        rng.random((5, 6890, 3)).astype(np.float32) * 15,
    )
    d = tmp_path / "0007" / "nm" / "090" / "00"
    write_sequence(d, SilhouetteSequence(frames, "x", 7, "090"), gt)
    seq, back = load_sequence(d)
    np.testing.assert_array_equal(seq.frames, frames)
    assert seq.identity == 7 and seq.view == "090" and seq.covariate == "nm"
    for name in ("joints", "markers", "mesh"):
        assert getattr(back, name).tobytes() == getattr(gt, name).tobytes()


# ---- synthesis


def _dirs_identical(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    if mismatch or errors:
        return False
    return all(_dirs_identical(os.path.join(a, d), os.path.join(b, d)) for d in cmp.common_dirs)


def test_synth_is_deterministic(tmp_path):
    synth_generate(2, 1, 8, 7, tmp_path / "a")
    synth_generate(2, 1, 8, 7, tmp_path / "b")
    assert _dirs_identical(tmp_path / "a", tmp_path / "b")


def test_synth_mesh_is_linear_in_keypoints(tiny_dataset_root):
    ds = GaitDataset.from_root(tiny_dataset_root)
    c_true = mg3d.read(tiny_dataset_root / "c_true.mg3d").astype(np.float64)
    np.testing.assert_array_equal(c_true, make_c_true(3))
    for gt in ds.ground_truth:
        kp = np.concatenate([gt.joints, gt.markers], axis=1).astype(np.float64)
        for t in range(kp.shape[0]):
            # independent product, one vertex row at a time
            expected = np.array([c_true[v] @ kp[t] for v in range(c_true.shape[0])])
            assert np.abs(expected - gt.mesh[t]).max() <= 1e-6


def test_synth_identity_consistency():
    a, b = identity_params(5, 3), identity_params(5, 3)
    assert a == b
    assert identity_params(5, 4) != a
    np.testing.assert_array_equal(marker_weights(5, 3), marker_weights(5, 3))
    w = marker_weights(5, 3)
    assert np.all(w >= 0) and np.allclose(w.sum(1), 1.0)


def test_synth_sequences_differ_in_phase(tiny_dataset_root):
    ds = GaitDataset.from_root(tiny_dataset_root)
    i, j = ds.by_identity[0][:2]
    assert not np.array_equal(ds.ground_truth[i].joints, ds.ground_truth[j].joints)


def test_synth_ground_truth_in_cube(tiny_dataset_root):
    ds = GaitDataset.from_root(tiny_dataset_root)
    for seq, gt in zip(ds.sequences, ds.ground_truth):
        assert set(np.unique(seq.frames)) <= {0.0, 1.0}
        for arr in (gt.joints, gt.markers, gt.mesh):
            assert np.isfinite(arr).all() and arr.min() >= 0 and arr.max() <= 15


def test_synth_argument_validation(tmp_path):
    with pytest.raises(ConfigError):
        synth_generate(1, 2, 8, 0, tmp_path)
    with pytest.raises(ConfigError):
        synth_generate(2, 2, 7, 0, tmp_path)


# ---- batching


def _toy_dataset(lengths_by_id):
    seqs, gts = [], []
    for ident, lengths in lengths_by_id.items():
        for s, n in enumerate(lengths):
            frames = np.zeros((n, 1, 64, 44), np.float32)
            frames[:, 0, 0, 0] = np.arange(n)  # tag frame index
            seqs.append(SilhouetteSequence(frames, f"{ident}/{s}", ident))
            gts.append(None)
    return GaitDataset(seqs, gts)


def test_sample_batch_labels():
    ds = _toy_dataset({10: [8], 20: [8]})
    batch = sample_batch(np.random.default_rng(0), BatchSpec(P=2, K=2, T_fixed=4), ds)
    assert len(batch.identities) == 4
    assert sorted(batch.identities.tolist()) == [10, 10, 20, 20]
    assert batch.identities[0] == batch.identities[1] and batch.identities[2] == batch.identities[3]


def test_cyclic_repeat_for_short_sequences():
    np.testing.assert_array_equal(crop_indices(5, 8, np.random.default_rng(0)), [0, 1, 2, 3, 4, 0, 1, 2])
    ds = _toy_dataset({1: [5], 2: [5]})
    batch = sample_batch(np.random.default_rng(0), BatchSpec(2, 1, 8), ds)
    np.testing.assert_array_equal(batch.frames[0, :, 0, 0, 0], [0, 1, 2, 3, 4, 0, 1, 2])


def test_contiguous_crop_inside_sequence():
    rng = np.random.default_rng(3)
    for _ in range(50):
        idx = crop_indices(40, 30, rng)
        assert idx[0] >= 0 and idx[-1] < 40 and np.all(np.diff(idx) == 1)


def test_sample_batch_deterministic():
    ds = _toy_dataset({i: [10, 12, 9] for i in range(6)})
    spec = BatchSpec(3, 2, 6)
    a = sample_batch(np.random.default_rng(42), spec, ds)
    b = sample_batch(np.random.default_rng(42), spec, ds)
    assert a.seq_ids == b.seq_ids
    np.testing.assert_array_equal(a.frame_index, b.frame_index)


def test_sample_batch_resamples_with_replacement():
    ds = _toy_dataset({1: [6], 2: [6]})
    batch = sample_batch(np.random.default_rng(0), BatchSpec(2, 3, 4), ds)
    assert len(batch.seq_ids) == 6


def test_sample_batch_too_few_identities():
    ds = _toy_dataset({1: [6]})
    with pytest.raises(SamplingError):
        sample_batch(np.random.default_rng(0), BatchSpec(2, 2, 4), ds)


def test_batch_spec_triplet_requirements():
    with pytest.raises(ConfigError):
        BatchSpec(P=1, K=4).validate(triplet=True)
    with pytest.raises(ConfigError):
        BatchSpec(P=4, K=1).validate(triplet=True)
    BatchSpec(P=4, K=1).validate(triplet=False)


def test_every_anchor_has_positive_and_negative():
    ds = _toy_dataset({i: [8, 8] for i in range(5)})
    batch = sample_batch(np.random.default_rng(9), BatchSpec(3, 2, 4), ds)
    ids = batch.identities
    for a in range(len(ids)):
        others = np.delete(ids, a)
        assert (others == ids[a]).any() and (others != ids[a]).any()


def test_loaded_samples_are_immutable(tiny_dataset_root):
    ds = GaitDataset.from_root(tiny_dataset_root)
    with pytest.raises(ValueError):
        ds.sequences[0].frames[0, 0, 0, 0] = 1.0


def test_split_holdout(tiny_dataset_root):
    ds = GaitDataset.from_root(tiny_dataset_root)
    train, held = ds.split_holdout(1)
    assert len(held) == len(ds.identities) and len(train) + len(held) == len(ds)
    assert set(s.seq_id for s in train.sequences).isdisjoint(s.seq_id for s in held.sequences)
