import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from splatmaps.gsmap import (
    SH_C0,
    BadMagicError,
    DegenerateRotationError,
    EmptyGaussianSetError,
    GaussianSet,
    GsMap,
    RawGsMap,
    TruncatedPayloadError,
    VersionMismatchError,
    activate,
    activate_tensor,
    covariance,
    export_ply,
    import_ply,
    load_gsmap,
    merge,
    quat_to_rotmat,
    save_gsmap,
)


def raw_map(values, mask=None):
    values = np.asarray(values, dtype=np.float64)
    if mask is None:
        mask = np.ones(values.shape[:3], bool)
    return RawGsMap(values, mask)


def one_pixel(**channels):
    v = np.zeros((1, 1, 1, 14))
    v[..., 6] = 1.0
    for k, val in channels.items():
        v[0, 0, 0, int(k[1:])] = val
    return v


def test_activation_closed_forms():
    g = activate(raw_map(one_pixel(c0=5.0, c1=-7.0, c3=0.0, c10=0.0))).values[0, 0, 0]
    assert g[0] == 1.0 and g[1] == -1.0
    assert g[3] == pytest.approx(0.1 * math.log(2), abs=1e-12)
    assert g[10] == 0.5
    q = activate(raw_map(one_pixel(c6=2.0))).values[0, 0, 0, 6:10]
    assert np.array_equal(q, [1, 0, 0, 0])


def test_degenerate_quaternion_raises_only_at_valid_pixels():
    v = np.zeros((1, 1, 2, 14))
    v[0, 0, 0, 6] = 1.0
    with pytest.raises(DegenerateRotationError):
        activate(raw_map(v))
    out = activate(raw_map(v, np.array([[[True, False]]])))
    out.check()


def test_raw_map_rejects_non_finite():
    v = one_pixel()
    v[0, 0, 0, 11] = np.nan
    with pytest.raises(ValueError):
        RawGsMap(v, np.ones((1, 1, 1), bool))


@given(arrays(np.float64, (2, 3, 3, 14), elements=st.floats(-30, 30)))
def test_activate_satisfies_invariants(values):
    values[..., 6] = np.where(np.abs(values[..., 6]) < 1e-3, 1.0, values[..., 6])
    out = activate(raw_map(values))
    out.check()
    again = activate(raw_map(out.values))
    # the position clamp is idempotent
    assert np.array_equal(again.values[..., 0:3], out.values[..., 0:3])


def test_activate_tensor_matches_numpy(rng):
    raw = rng.normal(0, 3, (2, 4, 5, 14))
    mask = rng.random((2, 4, 5)) > 0.2
    ref = activate(raw_map(raw, mask)).values
    got = activate_tensor(torch.from_numpy(raw), torch.from_numpy(mask)).numpy()
    assert np.allclose(got, ref, atol=1e-12)
    with pytest.raises(DegenerateRotationError):
        activate_tensor(torch.zeros(1, 14))


def test_covariance_examples(rng):
    s = np.array([0.3, 0.2, 0.1])
    assert np.allclose(covariance(s, [1, 0, 0, 0]), np.diag(s**2))
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    assert np.allclose(covariance([0.2] * 3, q), 0.04 * np.eye(3), atol=1e-15)


@given(
    s=arrays(np.float64, 3, elements=st.floats(1e-3, 2.0)),
    q=arrays(np.float64, 4, elements=st.floats(-1, 1)),
)
def test_covariance_eigenvalues_are_squared_scales(s, q):
    if np.linalg.norm(q) < 1e-2:
        q = np.array([1.0, 0, 0, 0])
    q = q / np.linalg.norm(q)
    cov = covariance(s, q)
    assert np.allclose(cov, cov.T, atol=1e-15)
    ev = np.linalg.eigvalsh(cov)
    assert ev.min() >= -1e-9
    assert np.allclose(np.sort(ev), np.sort(s**2), atol=1e-6)


def test_rotmat_is_orthonormal(rng):
    q = rng.normal(size=(20, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    r = quat_to_rotmat(q)
    assert np.allclose(r @ np.swapaxes(r, 1, 2), np.eye(3), atol=1e-12)
    assert np.allclose(np.linalg.det(r), 1.0)


def _activated(rng, n, h, w):
    raw = rng.normal(size=(n, h, w, 14))
    raw[..., 6] += 3.0
    return activate(raw_map(raw))


def test_merge_counts_and_order(rng):
    gm = _activated(rng, 2, 4, 4)
    gs = merge(gm)
    assert len(gs) == 32
    assert np.array_equal(gs.to_rows()[0], gm.values[0, 0, 0])
    assert np.array_equal(gs.to_rows()[16], gm.values[1, 0, 0])
    mask = gm.mask.copy()
    mask[0, 0, :3] = False
    mask[1, 2, 1:3] = False
    assert len(merge(GsMap(gm.values, mask))) == 27
    with pytest.raises(EmptyGaussianSetError):
        merge(GsMap(gm.values, np.zeros_like(mask)))


def test_merge_rejects_mixed_resolutions(rng):
    with pytest.raises(ValueError):
        merge([_activated(rng, 1, 4, 4), _activated(rng, 1, 3, 4)])


def test_gsmap_file_round_trip_is_bitwise(tmp_path, rng):
    gm = _activated(rng, 3, 5, 4)
    gm = GsMap(gm.values.astype(np.float32), rng.random((3, 5, 4)) > 0.3)
    save_gsmap(gm, tmp_path / "m.gsm")
    back = load_gsmap(tmp_path / "m.gsm")
    assert back.values.tobytes() == gm.values.tobytes()
    assert np.array_equal(back.mask, gm.mask)
    raw = (tmp_path / "m.gsm").read_bytes()
    assert raw[:4] == b"GSMP"
    assert np.frombuffer(raw[4:20], "<u4").tolist() == [1, 3, 5, 4]


def test_gsmap_file_errors(tmp_path, rng):
    save_gsmap(_activated(rng, 1, 2, 2), tmp_path / "m.gsm")
    raw = (tmp_path / "m.gsm").read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "version").write_bytes(raw[:4] + np.uint32(2).tobytes() + raw[8:])
    (tmp_path / "short").write_bytes(raw[:-3])
    with pytest.raises(BadMagicError):
        load_gsmap(tmp_path / "magic")
    with pytest.raises(VersionMismatchError):
        load_gsmap(tmp_path / "version")
    with pytest.raises(TruncatedPayloadError):
        load_gsmap(tmp_path / "short")


def test_ply_round_trip(tmp_path, rng):
    q = rng.normal(size=(6, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    gs = GaussianSet(
        rng.uniform(-1, 1, (6, 3)), rng.uniform(0.01, 0.2, (6, 3)), q, rng.uniform(0.05, 0.95, 6),
        rng.uniform(0.05, 0.95, (6, 3)),
    )
    export_ply(gs, tmp_path / "g.ply")
    back = import_ply(tmp_path / "g.ply")
    for a, b in zip(gs.to_rows().T, back.to_rows().T):
        assert np.allclose(a, b, atol=1e-5)
    header = (tmp_path / "g.ply").read_bytes().split(b"end_header")[0].decode()
    assert "element vertex 6" in header and "format binary_little_endian 1.0" in header


def test_ply_color_half_is_zero_dc(tmp_path):
    gs = GaussianSet([[0, 0, 0]], [[0.1] * 3], [[1, 0, 0, 0]], [0.5], [[0.5, 0.5, 0.5]])
    export_ply(gs, tmp_path / "g.ply")
    raw = (tmp_path / "g.ply").read_bytes()
    body = np.frombuffer(raw[raw.index(b"end_header\n") + 11 :], "<f4")
    assert body.size == 14
    # field order x y z opacity scale_0..2 rot_0..3 f_dc_0..2
    assert np.all(body[-3:] == 0.0)
    assert SH_C0 == pytest.approx(0.28209479177)


def test_ply_rejects_empty(tmp_path):
    with pytest.raises(EmptyGaussianSetError):
        export_ply(GaussianSet.empty(), tmp_path / "g.ply")
