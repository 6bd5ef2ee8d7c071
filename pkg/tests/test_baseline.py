"""Octree codec, threshold link model, finite-blocklength bound."""

import numpy as np
import pytest

from pcjscc.baseline import (
    LinkModel,
    OctreeCode,
    OctreeParseError,
    baseline_sweep,
    baseline_transmit,
    capacity_limit_uses,
    default_threshold_table,
    finite_blocklength_uses,
    link_transmit,
    octree_decode,
    octree_encode,
    q_inv,
)
from pcjscc.geometry import DatasetSpec, generate_dataset


class TestOctreeEncode:
    def test_single_point_depth1(self):
        code = octree_encode(np.array([[0.1, 0.2, 0.3]]), depth=1)
        assert code.occupancy == bytes([0b00000001])  # octant (0,0,0) -> bit 0

    def test_chain_one_bit_per_level(self):
        # points clustered near the origin stay in octant 0 down to depth 3
        pts = np.full((5, 3), 0.01)
        code = octree_encode(pts, depth=3)
        assert len(code.occupancy) == 3
        for byte in code.occupancy:
            assert bin(byte).count("1") == 1

    def test_all_octants_depth1(self):
        corners = np.array(
            [[x, y, z] for x in (0.25, 0.75) for y in (0.25, 0.75) for z in (0.25, 0.75)]
        )
        code = octree_encode(corners, depth=1)
        assert code.occupancy == bytes([0xFF])

    def test_boundary_point_goes_to_higher_child(self):
        code = octree_encode(np.array([[0.5, 0.0, 0.0]]), depth=1)
        assert code.occupancy == bytes([0b00000010])  # ix=1, iy=0, iz=0 -> bit 1

    def test_coordinate_one_is_valid(self):
        code = octree_encode(np.array([[1.0, 1.0, 1.0]]), depth=2)
        assert len(code.occupancy) == 2
        assert code.occupancy[0] == 0b10000000

    def test_outside_cube_rejected(self):
        with pytest.raises(ValueError, match="unit cube"):
            octree_encode(np.array([[1.2, 0.0, 0.0]]), depth=1)


class TestOctreeDecode:
    def test_single_point_round_trip(self):
        code = octree_encode(np.array([[0.1, 0.2, 0.3]]), depth=1)
        decoded = octree_decode(code)
        assert np.allclose(decoded, [[0.25, 0.25, 0.25]])

    def test_leaf_count_bounded_by_input(self):
        rng = np.random.default_rng(0)
        pts = rng.random((100, 3))
        for depth in (1, 3, 5):
            decoded = octree_decode(octree_encode(pts, depth))
            assert decoded.shape[0] <= 100

    def test_round_trip_error_bound(self):
        rng = np.random.default_rng(1)
        for depth in range(1, 9):
            pts = rng.random((50, 3))
            decoded = octree_decode(octree_encode(pts, depth))
            bound = np.sqrt(3.0) * 2.0 ** (-depth - 1)
            # every original point is within half a leaf diagonal of a decoded one
            d_orig = np.sqrt(
                np.min(np.sum((pts[:, None] - decoded[None]) ** 2, axis=2), axis=1)
            )
            # and every decoded point is near some original point
            d_dec = np.sqrt(
                np.min(np.sum((decoded[:, None] - pts[None]) ** 2, axis=2), axis=1)
            )
            assert d_orig.max() <= bound + 1e-12
            assert d_dec.max() <= bound + 1e-12

    def test_canonical_reencode_byte_identical(self):
        rng = np.random.default_rng(2)
        for depth in (2, 4, 6):
            pts = rng.random((64, 3))
            code = octree_encode(pts, depth)
            again = octree_encode(octree_decode(code), depth)
            assert again.occupancy == code.occupancy
            assert again.depth == code.depth

    def test_truncated_stream_rejected(self):
        code = octree_encode(np.random.default_rng(3).random((20, 3)), depth=4)
        broken = OctreeCode(depth=4, occupancy=code.occupancy[:-1])
        with pytest.raises(OctreeParseError, match="truncated"):
            octree_decode(broken)

    def test_blob_round_trip(self):
        code = octree_encode(np.array([[0.6, 0.6, 0.6]]), depth=3)
        blob = code.to_bytes()
        assert blob[0] == 3
        back = OctreeCode.from_bytes(blob)
        assert back.depth == 3 and back.occupancy == code.occupancy


class TestLink:
    def model(self, **kw):
        base = dict(modulation="QPSK", code_rate=0.5)
        base.update(kw)
        return LinkModel(**base)

    def test_below_threshold_fails(self):
        model = self.model()
        res = link_transmit(b"\xab" * 10, model.threshold_db - 0.5, model)
        assert not res.delivered
        assert res.payload is None

    def test_above_threshold_intact_and_level(self):
        model = self.model()
        payload = bytes(range(64))
        res1 = link_transmit(payload, model.threshold_db, model)
        res2 = link_transmit(payload, model.threshold_db + 15.0, model)
        assert res1.delivered and res2.delivered
        assert res1.payload == payload == res2.payload
        assert res1.channel_uses == res2.channel_uses

    def test_cost_arithmetic(self):
        model = self.model()  # QPSK rate 1/2: 1 information bit per complex use
        res = link_transmit(bytes(3072 // 8), 30.0, model)
        assert res.channel_uses == 3072

    def test_threshold_ordering(self):
        table = default_threshold_table()
        # higher spectral efficiency needs higher SNR
        assert table[("BPSK", 0.5)] < table[("QPSK", 0.5)] < table[("16QAM", 0.5)]
        assert table[("QPSK", 0.5)] < table[("QPSK", 0.75)]


class TestFiniteBlocklength:
    def test_q_inv(self):
        assert q_inv(0.5) == pytest.approx(0.0, abs=1e-12)
        assert q_inv(1e-3) == pytest.approx(3.0902, abs=1e-3)

    def test_exceeds_capacity_limit(self):
        n_fb = finite_blocklength_uses(3072, 10.0, 1e-3)
        n_cap = capacity_limit_uses(3072, 10.0)
        assert n_cap == 889
        assert n_fb > n_cap

    def test_converges_to_capacity_limit_as_eps_grows(self):
        previous = None
        for eps in (1e-3, 1e-2, 0.1, 0.3, 0.5):
            n = finite_blocklength_uses(3072, 10.0, eps)
            if previous is not None:
                assert n <= previous
            previous = n
        assert abs(previous - capacity_limit_uses(3072, 10.0)) <= 3

    def test_nonincreasing_in_snr(self):
        values = [finite_blocklength_uses(3072, snr, 1e-3) for snr in np.arange(0, 20, 2.5)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_always_at_least_capacity_limit(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            k = int(rng.integers(64, 10_000))
            snr = float(rng.uniform(-2, 20))
            assert finite_blocklength_uses(k, snr, 1e-3) >= capacity_limit_uses(k, snr)


@pytest.fixture(scope="module")
def clouds():
    return generate_dataset(DatasetSpec("torus", count=4, points_per_cloud=128, seed=21))


class TestBaselineTransmit:
    def test_step_function_sweep(self, clouds):
        model = LinkModel(modulation="16QAM", code_rate=0.75)
        snrs = list(np.arange(0.0, 20.0, 2.0))
        rows = baseline_sweep(clouds, depth=6, snr_list=snrs, model=model, floor_db=0.0)
        below = [r for r in rows if r["snr_db"] < model.threshold_db]
        above = [r for r in rows if r["snr_db"] >= model.threshold_db]
        assert below and above
        assert all(not r["delivered"] and r["d1_db"] == 0.0 for r in below)
        top = [r["d1_db"] for r in above]
        assert all(r["delivered"] for r in above)
        assert max(top) - min(top) <= 0.1  # leveling: identical above threshold

    def test_depth_improves_d1(self, clouds):
        model = LinkModel(modulation="QPSK", code_rate=0.5)
        snr = model.threshold_db + 5.0
        d1_5 = baseline_sweep(clouds, 5, [snr], model)[0]["d1_db"]
        d1_6 = baseline_sweep(clouds, 6, [snr], model)[0]["d1_db"]
        assert d1_6 >= d1_5

    def test_failure_path_flags(self, clouds):
        model = LinkModel(modulation="16QAM", code_rate=0.75)
        res = baseline_transmit(clouds[0], 6, model.threshold_db - 3.0, model)
        assert not res.delivered and res.cloud is None
        assert res.channel_uses > 0 and res.n_bits > 0

    def test_finite_blocklength_mode_cost(self, clouds):
        model = LinkModel(modulation="QPSK", code_rate=0.5, mode="finite-blocklength")
        res = baseline_transmit(clouds[0], 4, 10.0, model)
        assert res.channel_uses == finite_blocklength_uses(res.n_bits, 10.0, model.eps)
