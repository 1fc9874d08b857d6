import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from unittest import mock

from oracles import brute_da_knn, dense_block_single_voxel, random_coords
from pcenhance import sparse as sp
from pcenhance.checkpoint import load_checkpoint, save_checkpoint
from pcenhance.color import frame_to_yuv, rgb_to_yuv
from pcenhance.dae import (DaeConfig, DAENet, DaeSample, _dae_loss, _PreparedDae, amc, aoe,
                           atfe_forward, dae_forward, load_dae, save_dae, train_dae)
from pcenhance.dge import (DgeConfig, DGENet, DgeSample, GfeConfig, GeometryMotionCompensation,
                           dge_forward, gfe_forward, gmc, level_counts, load_dge, occupancy_labels,
                           occupancy_tensor, save_dge, select_top_n, train_dge)
from pcenhance.errors import EmptyFrame, InsufficientCandidates, ShapeMismatch
from pcenhance.harness.codec import degrade_attributes, degrade_geometry
from pcenhance.harness.pipeline import dae_training_samples
from pcenhance.harness.synthetic import make_synthetic_sequence
from pcenhance.metrics import d1_psnr
from pcenhance.sparse import SparseTensor
from pcenhance.voxel import VoxelFrame, frame_from_arrays, morton_keys


def _sorted(coords):
    return coords[np.argsort(morton_keys(coords))]


def _geometry(seed=0, n=300, grid=32):
    return frame_from_arrays(random_coords(np.random.default_rng(seed), n, grid), bit_depth=5)


def _isolated(n, spacing=4):
    # voxels far enough apart that no 3x3x3 kernel sees two of them
    g = np.arange(n) * spacing
    return _sorted(np.stack([g, np.zeros(n, int), np.zeros(n, int)], axis=1))


def _neighbour_mask(curr, prev):
    prev_set = set(map(tuple, prev))
    offs = [np.array(o) - 1 for o in np.ndindex(3, 3, 3)]
    return np.array([any(tuple(c + o) in prev_set for o in offs) for c in curr])


# ---- DGE: feature extraction and alignment

def test_gfe_single_voxel_default_widths():
    model = DGENet(DgeConfig())
    out = gfe_forward(model.gfe, occupancy_tensor(VoxelFrame(np.array([[4, 4, 4]]), bit_depth=4), 1))
    assert out.feats.data.shape == (1, 32) and np.all(np.isfinite(out.feats.data))
    assert GfeConfig().widths() == [32, 64, 128, 256, 512]


def test_gfe_preserves_coordinates_and_pools_four_times():
    model = DGENet(DgeConfig.toy())
    t = occupancy_tensor(frame_from_arrays(random_coords(np.random.default_rng(1), 500, 64), bit_depth=6), 1)
    strides = []
    real = sp.pool

    def spy(x):
        out = real(x)
        strides.append(out.stride)
        return out

    with mock.patch.object(sp, "pool", spy):
        out = gfe_forward(model.gfe, t)
    assert np.array_equal(out.coords, t.coords)
    assert strides == [2, 4, 8, 16]
    with pytest.raises(EmptyFrame):
        occupancy_tensor(VoxelFrame(np.zeros((0, 3), int), bit_depth=4), 1)


def _unnormed_gmc(width=4, seed=0):
    return GeometryMotionCompensation(width, np.random.default_rng(seed), norm=False)


def test_gmc_static_scene_with_identity_alignment():
    m = _unnormed_gmc()
    m.gsconv.weight.data[:] = 0
    m.gsconv.weight.data[13] = np.eye(4)
    coords = _sorted(random_coords(np.random.default_rng(2), 40, 16))
    prev = SparseTensor(coords, np.random.default_rng(3).normal(size=(40, 4)))
    out = gmc(m, prev, coords)
    expected = sp.relu(m.conv2(sp.relu(m.conv1(prev))))
    np.testing.assert_array_equal(out.feats.data, expected.feats.data)


def test_gmc_disjoint_support_is_bias_only():
    m = _unnormed_gmc()
    m.gsconv.bias.data = np.array([0.5, -1.0, 2.0, 0.0])
    prev = SparseTensor(_isolated(3), np.ones((3, 4)))
    far = _sorted(np.array([[40, 40, 40], [50, 40, 40]]))
    aligned = m.gsconv(prev, far)
    np.testing.assert_array_equal(aligned.feats.data, np.broadcast_to(m.gsconv.bias.data, (2, 4)))
    assert np.array_equal(gmc(m, prev, far).coords, far)


def test_gsconv_activation_follows_kernel_membership():
    m = _unnormed_gmc(width=1)
    m.gsconv.weight.data[:] = 1.0
    cube = np.array([[x, y, z] for x in range(4) for y in range(4) for z in range(4)])
    prev, curr = _sorted(cube + 4), _sorted(cube + np.array([6, 4, 4]))
    out = m.gsconv(SparseTensor(prev, np.ones((len(prev), 1))), curr).feats.data[:, 0]
    np.testing.assert_array_equal(out > 0, _neighbour_mask(curr, prev))


# ---- DGE: Top-N selection

def test_top_n_all_candidates():
    coords = random_coords(np.random.default_rng(4), 30, 16)
    idx = select_top_n(coords, np.random.default_rng(5).uniform(size=30), 30)
    keys = morton_keys(coords[idx])
    assert len(idx) == 30 and np.all(np.diff(keys.astype(np.int64)) > 0)


def test_top_n_ties_prefer_small_morton_keys():
    coords = random_coords(np.random.default_rng(6), 50, 16)
    idx = select_top_n(coords, np.full(50, 0.5), 10)
    assert sorted(morton_keys(coords[idx]).tolist()) == sorted(morton_keys(coords).tolist())[:10]


def test_top_n_against_sort_oracle():
    rng = np.random.default_rng(7)
    coords = random_coords(rng, 200, 16)
    probs = np.round(rng.uniform(size=200), 2)         # plenty of ties
    keys = morton_keys(coords)
    ranked = sorted(range(200), key=lambda i: (-probs[i], int(keys[i])))[:60]
    assert set(select_top_n(coords, probs, 60).tolist()) == set(ranked)
    with pytest.raises(InsufficientCandidates) as err:
        select_top_n(coords, probs, 201)
    assert "200" in str(err.value)


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 40), st.integers(0, 40))
def test_top_n_is_monotone_in_n(seed, n, extra):
    rng = np.random.default_rng(seed)
    coords = random_coords(rng, 80, 8)
    probs = np.round(rng.uniform(size=len(coords)), 1)
    small = set(select_top_n(coords, probs, n).tolist())
    large = set(select_top_n(coords, probs, n + extra).tolist())
    assert small <= large


# ---- DGE: end to end

@pytest.fixture(scope="module")
def cube_sequence():
    return make_synthetic_sequence("moving-cube", 3, 5, seed=0, cube_side=8)


def test_dge_output_cardinality_and_determinism(cube_sequence):
    model = DGENet(DgeConfig.toy(seed=3))
    orig = cube_sequence[1]
    prev, curr = degrade_geometry(cube_sequence[0], 2), degrade_geometry(orig, 2)
    a = dge_forward(model, prev, curr, len(orig))
    b = dge_forward(model, prev, curr, len(orig))
    assert len(a) == len(orig) and len({tuple(c) for c in a.coords}) == len(orig)
    assert np.all(np.diff(morton_keys(a.coords).astype(np.int64)) > 0)
    assert np.array_equal(a.coords, b.coords)


def test_dge_multi_pass_uses_level_counts(cube_sequence):
    orig = cube_sequence[1]
    counts = level_counts(orig, 4)
    assert counts[1] == len(orig) and counts[2] == len(np.unique((orig.coords // 2) * 2, axis=0))
    curr = degrade_geometry(orig, 4)
    out = dge_forward(DGENet(DgeConfig.toy()), curr, curr, len(orig), input_stride=4, counts=counts)
    assert len(out) == len(orig)
    with pytest.raises(ValueError):
        dge_forward(DGENet(DgeConfig.toy()), curr, curr, len(orig), input_stride=4)


def test_zeroed_gmc_ignores_previous_frame(cube_sequence):
    model = DGENet(DgeConfig.toy(seed=1))
    model.zero_gmc()
    orig = cube_sequence[2]
    curr = degrade_geometry(orig, 2)
    a = dge_forward(model, degrade_geometry(cube_sequence[0], 2), curr, len(orig))
    b = dge_forward(model, _geometry(9, 50), curr, len(orig))
    assert np.array_equal(a.coords, b.coords)
    # the configuration-level ablation is likewise blind to the previous frame
    no_gmc = DGENet(DgeConfig.toy(seed=1, use_gmc=False))
    a = dge_forward(no_gmc, degrade_geometry(cube_sequence[0], 2), curr, len(orig))
    b = dge_forward(no_gmc, _geometry(9, 50), curr, len(orig))
    assert np.array_equal(a.coords, b.coords)


def test_occupancy_labels_match_set_membership():
    rng = np.random.default_rng(8)
    target = frame_from_arrays(random_coords(rng, 200, 16), bit_depth=4)
    cand = random_coords(rng, 300, 16)
    members = set(map(tuple, target.coords))
    assert occupancy_labels(cand, target, 1).tolist() == [float(tuple(c) in members) for c in cand]
    coarse = set(map(tuple, (target.coords // 2) * 2))
    cand2 = random_coords(rng, 100, 16, 2)
    assert occupancy_labels(cand2, target, 2).tolist() == [float(tuple(c) in coarse) for c in cand2]


def test_dge_training_reduces_loss_and_helps(cube_sequence):
    samples = [DgeSample(degrade_geometry(cube_sequence[t - 1], 2), degrade_geometry(cube_sequence[t], 2),
                         cube_sequence[t]) for t in (1, 2)]
    from pcenhance.training import TrainConfig
    model, hist = train_dge(samples, DgeConfig.toy(), TrainConfig(epochs=20))
    assert hist[-1] < hist[0]
    orig = cube_sequence[2]
    dec = degrade_geometry(orig, 2)
    out = dge_forward(model, degrade_geometry(cube_sequence[1], 2), dec, len(orig))
    assert d1_psnr(orig, out).symmetric >= d1_psnr(orig, dec).symmetric


def test_dge_overfits_a_single_sample():
    from pcenhance.training import TrainConfig
    orig = frame_from_arrays(np.array([[0, 0, 0], [1, 1, 1], [2, 0, 0], [3, 1, 0]]), bit_depth=3)
    dec = degrade_geometry(orig, 2)
    sample = DgeSample(dec, dec, orig)
    model, hist = train_dge([sample], DgeConfig.toy(), TrainConfig(epochs=400, lr=0.01))
    assert hist[-1] <= 1e-6
    out = dge_forward(model, dec, dec, len(orig))
    assert np.array_equal(out.coords, orig.coords)


def test_dge_checkpoint_round_trip(tmp_path, cube_sequence):
    model = DGENet(DgeConfig.toy(seed=5))
    save_dge(tmp_path / "g.bin", model)
    again = load_dge(tmp_path / "g.bin")
    assert again.config == model.config
    orig = cube_sequence[1]
    args = (degrade_geometry(cube_sequence[0], 2), degrade_geometry(orig, 2), len(orig))
    assert np.array_equal(dge_forward(model, *args).coords, dge_forward(again, *args).coords)
    with pytest.raises(ValueError):
        load_dae(tmp_path / "g.bin")


# ---- DAE

def _yuv_frame(seed, n=200, grid=16):
    rng = np.random.default_rng(seed)
    coords = random_coords(rng, n, grid)
    return frame_to_yuv(frame_from_arrays(coords, rng.uniform(0, 255, (len(coords), 3)), bit_depth=4))


def _tensor(frame):
    order = np.argsort(morton_keys(frame.coords))
    return SparseTensor(frame.coords[order], frame.attrs[order])


def test_atfe_shapes_and_zero_input():
    model = DAENet(DaeConfig.toy())
    f = _yuv_frame(0)
    out = atfe_forward(model.atfe, _tensor(f))
    assert out.feats.data.shape == (len(f), model.config.width)
    zero = SparseTensor(_isolated(5), np.zeros((5, 3)))
    z = atfe_forward(model.atfe, zero).feats.data
    # with no input signal every isolated voxel sees the same bias-driven path
    np.testing.assert_array_equal(z, np.broadcast_to(z[0], z.shape))
    with pytest.raises(EmptyFrame):
        atfe_forward(model.atfe, SparseTensor(np.zeros((0, 3), int), np.zeros((0, 3))))


def _layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(((x - mu) ** 2).mean(axis=1, keepdims=True) + eps) * gamma + beta


def test_atfe_single_voxel_manual_composition():
    model = DAENet(DaeConfig.toy(seed=2))
    x = np.random.default_rng(3).normal(size=(1, 3))
    ext = model.atfe
    h = x
    for conv, norm, dense in zip(ext.convs, ext.norms, ext.dense):
        pre = h @ conv.weight.data[13] + conv.bias.data
        h = dense_block_single_voxel(dense, np.maximum(_layer_norm(pre, norm.gamma.data, norm.beta.data), 0))
    out = atfe_forward(ext, SparseTensor(np.array([[5, 5, 5]]), x)).feats.data
    np.testing.assert_allclose(out, h, rtol=1e-10, atol=1e-12)


def test_amc_static_and_disjoint_cases():
    model = DAENet(DaeConfig.toy(seed=4, layer_norm=False))
    m, w = model.amc, model.config.width
    m.gsconv.weight.data[:] = 0
    m.gsconv.weight.data[13] = np.eye(w)
    coords = _sorted(random_coords(np.random.default_rng(5), 30, 16))
    prev = SparseTensor(coords, np.random.default_rng(6).normal(size=(30, w)))
    np.testing.assert_array_equal(amc(m, prev, coords).feats.data, m.conv(m.dense(prev)).feats.data)
    m.gsconv.bias.data = np.linspace(-1, 1, w)
    far = _sorted(np.array([[60, 60, 60]]))
    np.testing.assert_array_equal(m.gsconv(prev, far).feats.data[0], m.gsconv.bias.data)


def test_amc_alignment_membership():
    model = DAENet(DaeConfig.toy(seed=4, layer_norm=False))
    m = model.amc
    m.gsconv.weight.data[:] = 1.0
    cube = np.array([[x, y, z] for x in range(3) for y in range(3) for z in range(3)])
    prev, curr = _sorted(cube + 4), _sorted(cube + np.array([7, 4, 4]))
    t = SparseTensor(prev, np.ones((len(prev), model.config.width)))
    out = m.gsconv(t, curr).feats.data[:, 0]
    np.testing.assert_array_equal(out > 0, _neighbour_mask(curr, prev))


def test_aoe_linear_map():
    model = DAENet(DaeConfig.toy())
    w = model.config.width
    fused = SparseTensor(_isolated(4), np.random.default_rng(7).normal(size=(4, 2 * w)))
    assert not aoe(model.aoe, fused).feats.data.any()          # zero-initialised
    model.aoe.weight.data = np.random.default_rng(8).normal(size=(2 * w, 3))
    model.aoe.bias.data = np.array([0.1, -0.2, 0.3])
    out = aoe(model.aoe, fused).feats.data
    np.testing.assert_allclose(out, fused.feats.data @ model.aoe.weight.data + model.aoe.bias.data, rtol=1e-13)
    twice = aoe(model.aoe, fused.with_feats(2 * fused.feats.data)).feats.data
    np.testing.assert_allclose(twice - model.aoe.bias.data, 2 * (out - model.aoe.bias.data), rtol=1e-12)
    with pytest.raises(ShapeMismatch):
        aoe(model.aoe, fused.with_feats(np.ones((4, 5))))


def test_zero_offset_is_exact_identity():
    model = DAENet(DaeConfig.toy(seed=9))
    curr, prev = _yuv_frame(1), _yuv_frame(2)
    out = dae_forward(model, curr, prev)
    assert np.array_equal(out.attrs, curr.attrs) and np.array_equal(out.coords, curr.coords)


@pytest.mark.parametrize("variant", ["full", "no_amc", "no_atfe"])
def test_dae_variants_from_configuration(variant):
    kw = {"no_amc": {"use_amc": False}, "no_atfe": {"use_atfe": False}}.get(variant, {})
    model = DAENet(DaeConfig.toy(seed=1, **kw))
    assert (model.atfe is None) == (variant == "no_atfe")
    model.aoe.weight.data = np.random.default_rng(0).normal(size=model.aoe.weight.data.shape)
    curr = _yuv_frame(3)
    a = dae_forward(model, curr, _yuv_frame(4)).attrs
    b = dae_forward(model, curr, _yuv_frame(5)).attrs
    assert np.all(np.isfinite(a))
    assert np.array_equal(a, b) == (variant == "no_amc")


def test_zeroed_amc_ignores_previous_frame():
    model = DAENet(DaeConfig.toy(seed=2))
    model.zero_amc()
    model.aoe.weight.data = np.random.default_rng(1).normal(size=model.aoe.weight.data.shape)
    curr = _yuv_frame(3)
    assert np.array_equal(dae_forward(model, curr, _yuv_frame(4)).attrs,
                          dae_forward(model, curr, _yuv_frame(5)).attrs)


def test_dae_rejects_rgb_input():
    f = _yuv_frame(0)
    rgb = f.with_attrs(np.full(f.attrs.shape, 10.0), "rgb")
    with pytest.raises(ValueError):
        dae_forward(DAENet(DaeConfig.toy()), rgb, rgb)


def test_identity_target_gives_zero_loss():
    f = _yuv_frame(6)
    prepared = _PreparedDae(DaeSample(f, f, f), np.float64)
    assert float(_dae_loss(DAENet(DaeConfig.toy()), prepared).data) == 0.0


@pytest.fixture(scope="module")
def dae_pairs():
    seq = make_synthetic_sequence("moving-cube", 3, 5, seed=1, cube_side=8)
    clean = [frame_to_yuv(f) for f in seq]
    dec = [frame_to_yuv(degrade_attributes(f, 16)[0]) for f in seq]
    return clean, dec


def test_dae_training_reduces_loss_and_error(dae_pairs):
    from pcenhance.training import TrainConfig
    clean, dec = dae_pairs
    sample = DaeSample(dec[0], dec[1], clean[1])
    model, hist = train_dae([sample], DaeConfig.toy(), TrainConfig(epochs=20, lr=1e-3))
    assert hist[-1] < hist[0]
    out = dae_forward(model, dec[1], dec[0])
    mse_in = np.mean((dec[1].attrs - clean[1].attrs) ** 2)
    mse_out = np.mean((out.attrs - clean[1].attrs) ** 2)
    assert mse_out < mse_in
    off = out.attrs - dec[1].attrs
    assert np.all(np.isfinite(np.abs(off).mean(axis=0)))


def test_dae_checkpoint_round_trip(tmp_path, dae_pairs):
    clean, dec = dae_pairs
    model = DAENet(DaeConfig.toy(seed=3))
    model.aoe.weight.data = np.random.default_rng(2).normal(size=model.aoe.weight.data.shape)
    save_dae(tmp_path / "a.bin", model)
    again = load_dae(tmp_path / "a.bin")
    assert again.config == model.config
    assert np.array_equal(dae_forward(model, dec[1], dec[0]).attrs, dae_forward(again, dec[1], dec[0]).attrs)
    with pytest.raises(ValueError):
        load_dge(tmp_path / "a.bin")


def test_dae_training_targets_are_recolored_originals():
    seq = make_synthetic_sequence("moving-cube", 3, 5, seed=2, cube_side=8)
    dge = DGENet(DgeConfig.toy(seed=0))
    samples = dae_training_samples(seq, dge, factor=2, qstep=16.0)
    assert len(samples) == 2
    for t, s in zip((1, 2), samples):
        orig = seq[t]
        expected = brute_da_knn(s.target.coords, orig.coords, orig.attrs, 8, morton_keys(orig.coords))
        np.testing.assert_allclose(s.target.attrs, rgb_to_yuv(expected), rtol=0, atol=1e-12)
        assert len(s.curr) == len(orig)


# ---- checkpoint format

def test_checkpoint_format_round_trip(tmp_path):
    tensors = {"w": np.arange(24, dtype=np.float32).reshape(2, 3, 4), "b": np.array([1.5, -2.0]),
               "i": np.array([[1, 2]], dtype=np.int64), "empty": np.zeros((0, 3))}
    save_checkpoint(tmp_path / "c.bin", tensors, {"note": "x"})
    back, meta = load_checkpoint(tmp_path / "c.bin")
    assert list(back) == list(tensors) and meta == {"note": "x"}
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype and np.array_equal(back[k], tensors[k])
    (tmp_path / "bad.bin").write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.bin")


def test_checkpoint_payload_is_aligned_little_endian(tmp_path):
    save_checkpoint(tmp_path / "c.bin", {"a": np.array([1.0, 2.0], dtype=">f8")})
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:8] == b"PCECKPT1"
    (mlen,) = struct.unpack("<Q", raw[8:16])
    json.loads(raw[16:16 + mlen])
    start = -(-(16 + mlen) // 64) * 64
    assert np.frombuffer(raw[start:start + 16], dtype="<f8").tolist() == [1.0, 2.0]
    assert len(raw) % 64 == 0
    back, _ = load_checkpoint(tmp_path / "c.bin")
    assert back["a"].tolist() == [1.0, 2.0]


def test_state_dict_mismatch_is_reported():
    model = DAENet(DaeConfig.toy())
    state = model.state_dict()
    state.pop(next(iter(state)))
    with pytest.raises(KeyError):
        model.load_state_dict(state)
