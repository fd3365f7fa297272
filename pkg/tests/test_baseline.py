import numpy as np
import pytest

from pclink.baseline import (
    BaselineError,
    LdpcCode,
    OctreeCode,
    OctreeDecodeError,
    baseline_transmit,
    deserialize_octree,
    ldpc_decode,
    ldpc_encode,
    make_ldpc,
    octree_decode,
    octree_encode,
    serialize_octree,
)
from pclink.link import LinkConfig, demodulate_llr, modulate
from pclink.pcdata import PointCloud, SceneParams, synth_scene

BBOX = ((-70.0, -70.0, -5.0), (70.0, 70.0, 5.0))


def cube_bbox(edge=140.0):
    h = edge / 2
    return (-h, -h, -h), (h, h, h)


# ---------------------------------------------------------------------------
# Octree
# ---------------------------------------------------------------------------

def test_single_point_stream_is_depth_bytes():
    pc = PointCloud(points=np.array([[1.0, 2.0, 3.0]]))
    for depth in (1, 4, 10):
        code = octree_encode(pc, depth, *cube_bbox())
        assert len(code.occupancy) == depth
        assert all(bin(b).count("1") == 1 for b in code.occupancy)


def test_octree_deterministic():
    pair = synth_scene(1, SceneParams(n_points=256))
    a = octree_encode(pair.tx, 8, *BBOX)
    b = octree_encode(pair.tx, 8, *BBOX)
    assert a.occupancy == b.occupancy


def test_octree_roundtrip_error_bound_cube():
    # depth 10, 140 m cube: max error <= 140*sqrt(3)/2^11 ~ 0.118 m
    rng = np.random.default_rng(0)
    pts = rng.uniform(-69, 69, size=(16, 3))
    pc = PointCloud(points=pts)
    code = octree_encode(pc, 10, *cube_bbox())
    recon = octree_decode(code)
    d2 = ((pts[:, None, :] - recon.points[None, :, :]) ** 2).sum(-1)
    max_err = np.sqrt(d2.min(axis=1)).max()
    assert max_err <= 140.0 * np.sqrt(3) / 2**11 + 1e-12


@pytest.mark.parametrize("depth", range(6, 13))
def test_octree_roundtrip_bound_random_depths(depth):
    rng = np.random.default_rng(depth)
    pts = rng.uniform(-60, 60, size=(100, 3)) * np.array([1.0, 1.0, 0.05])
    pc = PointCloud(points=pts)
    code = octree_encode(pc, depth, *BBOX)
    recon = octree_decode(code)
    half_diag = float(np.linalg.norm(code.leaf_size)) / 2
    d2 = ((pts[:, None, :] - recon.points[None, :, :]) ** 2).sum(-1)
    assert np.sqrt(d2.min(axis=1)).max() <= half_diag + 1e-12


def test_octree_leaf_count_at_most_n():
    pair = synth_scene(2, SceneParams(n_points=512))
    code = octree_encode(pair.tx, 7, *BBOX)
    recon = octree_decode(code)
    assert len(recon) <= 512


def test_octree_point_outside_bbox():
    pc = PointCloud(points=np.array([[100.0, 0.0, 0.0]]))
    with pytest.raises(BaselineError):
        octree_encode(pc, 6, *BBOX)


def test_octree_bit_flip_changes_decode():
    pair = synth_scene(3, SceneParams(n_points=256))
    code = octree_encode(pair.tx, 8, *BBOX)
    corrupted = bytearray(code.occupancy)
    corrupted[1] ^= 0x10  # flip an occupancy bit near the root
    bad = OctreeCode(code.depth, code.bbox_min, code.bbox_max, bytes(corrupted))
    recon_bad = octree_decode(bad, strict=False)
    recon_ok = octree_decode(code)
    assert len(recon_bad) != len(recon_ok)


def test_octree_truncated_strict_raises():
    pair = synth_scene(4, SceneParams(n_points=256))
    code = octree_encode(pair.tx, 7, *BBOX)
    bad = OctreeCode(code.depth, code.bbox_min, code.bbox_max, code.occupancy[:-10])
    with pytest.raises(OctreeDecodeError):
        octree_decode(bad, strict=True)
    recon = octree_decode(bad, strict=False)  # best-effort still yields points
    assert len(recon) >= 1


def test_octree_overrun_strict_raises():
    pc = PointCloud(points=np.array([[0.0, 0.0, 0.0]]))
    code = octree_encode(pc, 4, *cube_bbox())
    bad = OctreeCode(code.depth, code.bbox_min, code.bbox_max, code.occupancy + b"\xff")
    with pytest.raises(OctreeDecodeError):
        octree_decode(bad, strict=True)


def test_octree_serialization_roundtrip():
    pair = synth_scene(5, SceneParams(n_points=256))
    code = octree_encode(pair.tx, 6, *BBOX)
    data = serialize_octree(code)
    assert data[0] == 6 and len(data) == 25 + len(code.occupancy)
    back = deserialize_octree(data)
    assert back.occupancy == code.occupancy
    assert np.allclose(back.bbox_min, code.bbox_min)


# ---------------------------------------------------------------------------
# LDPC
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def code_half():
    return make_ldpc(n=1024, rate="1/2", seed=0)


@pytest.fixture(scope="module")
def code_three_quarter():
    return make_ldpc(n=1024, rate="3/4", seed=0)


def test_ldpc_structure(code_half, code_three_quarter):
    for code, m in ((code_half, 512), (code_three_quarter, 256)):
        assert code.h_dense.shape == (m, 1024)
        assert np.all(code.h_dense.sum(axis=0) == 3)  # column weight 3
        assert code.k == 1024 - m
    assert code_half.k == 512  # rate 1/2 keeps 512 payload bits per block


def test_ldpc_full_rank(code_half):
    from pclink.baseline import _gf2_rref

    _, _, rank = _gf2_rref(code_half.h_dense)
    assert rank == 512


def test_ldpc_zero_maps_to_zero(code_half):
    out = ldpc_encode(np.zeros(code_half.k, dtype=np.uint8), code_half)
    assert not out.any()


def test_ldpc_codewords_satisfy_checks(code_half):
    rng = np.random.default_rng(1)
    payload = rng.integers(0, 2, size=3 * code_half.k).astype(np.uint8)
    coded = ldpc_encode(payload, code_half).reshape(3, -1)
    syn = (coded @ code_half.h_dense.T) % 2
    assert not syn.any()


def test_ldpc_systematic(code_half):
    rng = np.random.default_rng(2)
    payload = rng.integers(0, 2, size=code_half.k).astype(np.uint8)
    coded = ldpc_encode(payload, code_half)
    assert np.array_equal(coded[code_half.info_cols], payload)


def test_ldpc_noiseless_decode(code_half):
    rng = np.random.default_rng(3)
    payload = rng.integers(0, 2, size=code_half.k).astype(np.uint8)
    coded = ldpc_encode(payload, code_half)
    llrs = (1.0 - 2.0 * coded) * 20.0
    decoded, converged = ldpc_decode(llrs, code_half)
    assert converged.all()
    assert np.array_equal(decoded, payload)


def test_ldpc_corrects_five_flips(code_half):
    rng = np.random.default_rng(4)
    successes = 0
    for trial in range(100):
        payload = rng.integers(0, 2, size=code_half.k).astype(np.uint8)
        coded = ldpc_encode(payload, code_half)
        llrs = (1.0 - 2.0 * coded) * 8.0
        flip = rng.choice(code_half.n, size=5, replace=False)
        llrs[flip] *= -1.0
        decoded, converged = ldpc_decode(llrs, code_half)
        if converged.all() and np.array_equal(decoded, payload):
            successes += 1
    assert successes >= 99


def test_ldpc_nonconvergence_flagged(code_half):
    rng = np.random.default_rng(5)
    llrs = rng.normal(scale=0.3, size=code_half.n)  # pure noise, no structure
    decoded, converged = ldpc_decode(llrs, code_half)
    assert decoded.shape == (code_half.k,)
    assert not converged.all()


def test_ldpc_batch_and_length_checks(code_half):
    with pytest.raises(BaselineError):
        ldpc_encode(np.zeros(100, dtype=np.uint8), code_half)
    with pytest.raises(BaselineError):
        ldpc_decode(np.zeros(1000), code_half)


def test_ldpc_rate_validation():
    with pytest.raises(BaselineError):
        make_ldpc(rate="2/3")


# ---------------------------------------------------------------------------
# End-to-end baseline
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def scene_cloud():
    return synth_scene(6, SceneParams(n_points=512)).tx


def test_baseline_high_snr_equals_noiseless_roundtrip(scene_cloud, code_half):
    cfg = LinkConfig(snr_db=20.0)
    rng = np.random.default_rng(0)
    recon, record, info = baseline_transmit(
        scene_cloud, 8, "1/2", cfg, rng, ldpc=code_half, frame_id="f0"
    )
    assert info["converged"].all()
    clean = octree_decode(octree_encode(scene_cloud, 8, *BBOX))
    assert np.allclose(np.sort(recon.points, axis=0), np.sort(clean.points, axis=0))
    assert record.cd > 0 and not record.failed


def test_baseline_bpp_accounting(scene_cloud, code_half):
    cfg = LinkConfig(snr_db=20.0)
    _, record, info = baseline_transmit(scene_cloud, 8, "1/2", cfg, np.random.default_rng(1), ldpc=code_half)
    # anchor eighth uncoded plus actually transmitted coded blocks
    assert record.bpp == pytest.approx(info["transmitted_bits"] / 512)
    l = info["occupancy_bits"]
    n_blocks = -(-(l - l // 8) // code_half.k)
    assert info["transmitted_bits"] == l // 8 + n_blocks * code_half.n


def test_baseline_low_snr_degrades(scene_cloud, code_half):
    high = baseline_transmit(scene_cloud, 8, "1/2", LinkConfig(snr_db=12.0), np.random.default_rng(2), ldpc=code_half)[1]
    low = baseline_transmit(scene_cloud, 8, "1/2", LinkConfig(snr_db=-6.0), np.random.default_rng(3), ldpc=code_half)[1]
    assert low.failed or not np.isfinite(low.cd) or low.cd > 10 * high.cd


def test_baseline_rate_flag_validation(scene_cloud):
    with pytest.raises(BaselineError):
        baseline_transmit(scene_cloud, 8, "5/6", LinkConfig(), np.random.default_rng(0))
