import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csnn.kernels import (
    ConvConfig,
    MacCounter,
    conv3x3_via_nine_1x1,
    gather_weights,
    prefix_sum_arbitrate,
    route_and_sum,
    sparse_dense_conv,
    sparse_dense_linear,
    sparse_sparse_conv,
    sparse_sparse_linear,
    split_into_taps,
    stem_conv7x7,
)
from csnn.kwta import KwtaConfig, SparseActivation, SparseMap, global_kwta_histogram
from csnn.oracle import dense_conv_reference, dense_linear_reference
from csnn.packing import ComplementarySet, combine, pack_kernels
from csnn.tensor import SparseKernel

from helpers import dense_from_kernels, random_int8, random_kernels, random_sparse_map


class TestGather:
    def test_perfectly_packed_64_to_64(self):
        ks = random_kernels((64,), 4, 64, seed=0)
        awt = pack_kernels(ks)
        assert awt.n_sets == 4  # S = C_out * N / C_in
        for index in (0, 17, 63):
            entries = gather_weights(awt, index)
            assert len(entries) == 4
            assert len({e.kernel_id for e in entries}) == 4

    def test_vacant_position_gathers_nothing(self):
        k = SparseKernel.from_entries(0, (2, 2), [((0, 0), 5)])
        awt = pack_kernels([k])
        assert gather_weights(awt, 3) == []

    def test_manual_overlay_position(self):
        k0 = SparseKernel.from_entries(0, (2, 2), [((0, 0), 3), ((1, 1), -2)])
        k1 = SparseKernel.from_entries(1, (2, 2), [((0, 1), 1), ((1, 0), 4)])
        awt = combine(ComplementarySet((0, 1), (2, 2)), [k0, k1])
        entries = gather_weights(awt, 1)  # position (0, 1)
        assert [(e.weight, e.kernel_id) for e in entries] == [(1, 1)]

    def test_out_of_range(self):
        awt = pack_kernels(random_kernels((4,), 1, 2, seed=1))
        with pytest.raises(IndexError):
            gather_weights(awt, 4)


class TestArbitration:
    def test_hand_counted(self):
        assert prefix_sum_arbitrate([2, 0, 2, 1]) == [0, 0, 1, 0]

    def test_all_distinct(self):
        assert prefix_sum_arbitrate([5, 3, 9, 0]) == [0, 0, 0, 0]

    def test_all_equal(self):
        assert prefix_sum_arbitrate([7, 7, 7, 7]) == [0, 1, 2, 3]

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 9), max_size=50))
    def test_slots_unique_and_contiguous(self, ids):
        offsets = prefix_sum_arbitrate(ids)
        pairs = list(zip(ids, offsets))
        assert len(set(pairs)) == len(pairs)
        for kid in set(ids):
            slots = sorted(o for i, o in pairs if i == kid)
            assert slots == list(range(len(slots)))


class TestRouteAndSum:
    def test_empty(self):
        assert np.array_equal(route_and_sum([], 3), np.zeros(3, np.int32))

    def test_hand_summed(self):
        assert route_and_sum([(0, 5), (1, 7), (0, -2)], 2).tolist() == [3, 7]

    def test_matches_serial_accumulator(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n_out = int(rng.integers(1, 8))
            batch = [
                (int(rng.integers(0, n_out)), int(rng.integers(-(2**20), 2**20)))
                for _ in range(int(rng.integers(0, 40)))
            ]
            expect = [0] * n_out
            for kid, p in batch:
                expect[kid] += p
            assert route_and_sum(batch, n_out).tolist() == expect

    def test_bad_kernel_id(self):
        with pytest.raises(ValueError):
            route_and_sum([(4, 1)], 2)


def oracle_conv(x, kernels, n_out, cfg):
    return dense_conv_reference(
        x, dense_from_kernels(kernels, n_out, (cfg.kernel_size, cfg.kernel_size, cfg.in_channels)), cfg
    ).output


class TestSparseDenseConv:
    def test_zero_input(self):
        ks = random_kernels((1, 1, 8), 2, 8, seed=3)
        cfg = ConvConfig(1, 8, 8)
        out = sparse_dense_conv(np.zeros((3, 3, 8), np.int8), pack_kernels(ks), cfg)
        assert not out.any()

    def test_identity_permutation(self):
        # kernel k holds a unit weight at channel (k + 1) % 4
        ks = [
            SparseKernel.from_entries(k, (1, 1, 4), [((0, 0, (k + 1) % 4), 1)])
            for k in range(4)
        ]
        cfg = ConvConfig(1, 4, 4)
        rng = np.random.default_rng(4)
        x = random_int8(rng, (2, 2, 4))
        out = sparse_dense_conv(x, pack_kernels(ks), cfg)
        for k in range(4):
            assert np.array_equal(out[:, :, k], x[:, :, (k + 1) % 4].astype(np.int32))

    def test_gsc_conv1_shape_matches_oracle(self):
        rng = np.random.default_rng(5)
        ks = random_kernels((5, 5, 1), 5, 64, seed=5)
        cfg = ConvConfig(5, 1, 64)
        x = random_int8(rng, (12, 12, 1))
        got = sparse_dense_conv(x, pack_kernels(ks), cfg)
        assert np.array_equal(got, oracle_conv(x, ks, 64, cfg))

    def test_counter_counts_packed_nonzeros(self):
        ks = random_kernels((1, 1, 8), 2, 8, seed=6)
        cfg = ConvConfig(1, 8, 8)
        counter = MacCounter()
        sparse_dense_conv(np.zeros((3, 3, 8), np.int8), pack_kernels(ks), cfg, counter)
        assert counter.mults == counter.adds == 9 * 8 * 2  # sites * sum(N_k)


class TestSparseSparseConv:
    def test_32_mults_per_location(self):
        ks = random_kernels((64,), 4, 64, seed=7)
        awt = pack_kernels(ks)
        smap = random_sparse_map(np.random.default_rng(7), 3, 3, 64, k=8)
        cfg = ConvConfig(1, 64, 64)
        counter = MacCounter()
        sparse_sparse_conv(smap, awt, cfg, counter)
        assert counter.mults == counter.adds == 9 * 32  # K*S = 8*4 per site

    def test_empty_activation(self):
        ks = random_kernels((64,), 4, 64, seed=8)
        smap = SparseMap(
            2, 2, 64, [SparseActivation(64, np.empty(0, np.int64), np.empty(0, np.int8), 0)] * 4
        )
        counter = MacCounter()
        out = sparse_sparse_conv(smap, pack_kernels(ks), ConvConfig(1, 64, 64), counter)
        assert not out.any()
        assert counter.mults == 0

    def test_random_instances_match_oracle(self):
        rng = np.random.default_rng(9)
        cfg = ConvConfig(1, 8, 8)
        for trial in range(100):
            ks = random_kernels((8,), 2, 8, seed=trial)
            awt = pack_kernels(ks)
            smap = random_sparse_map(rng, 3, 3, 8, k=3)
            got = sparse_sparse_conv(smap, awt, cfg)
            kernels3d = [
                SparseKernel(k.kernel_id, (1, 1, 8), k.positions, k.weights) for k in ks
            ]
            expect = oracle_conv(smap.densify(), kernels3d, 8, cfg)
            assert np.array_equal(got, expect)

    def test_strided_padded_5x5_matches_oracle(self):
        rng = np.random.default_rng(10)
        cfg = ConvConfig(5, 8, 12, stride=2, padding=2)
        ks = random_kernels((5, 5, 8), 20, 12, seed=10)
        awt = pack_kernels(ks)
        smap = random_sparse_map(rng, 9, 9, 8, k=3)
        got = sparse_sparse_conv(smap, awt, cfg)
        assert np.array_equal(got, oracle_conv(smap.densify(), ks, 12, cfg))


class TestConv3x3Taps:
    def build(self, c, n_per_tap, n_kernels, seed):
        """Kernels occupying every tap with n_per_tap channels, tiling per tap."""
        rng = np.random.default_rng(seed)
        kernels = []
        per_set = c // n_per_tap
        for kid in range(n_kernels):
            lane = kid % per_set
            chans = range(lane * n_per_tap, (lane + 1) * n_per_tap)
            entries = []
            for tap in range(9):
                for ch in chans:
                    w = int(rng.integers(1, 100)) * int(rng.choice([-1, 1]))
                    entries.append((tap * c + ch, w))
            kernels.append(SparseKernel.from_entries(kid, (3, 3, c), entries))
        return kernels

    def test_zero_taps_zero_output(self):
        ks = random_kernels((3, 3, 8), 4, 8, seed=11)
        taps = split_into_taps(ks, 3, 8)
        smap = SparseMap(
            3, 3, 8, [SparseActivation(8, np.empty(0, np.int64), np.empty(0, np.int8), 0)] * 9
        )
        out = conv3x3_via_nine_1x1(smap, taps, ConvConfig(3, 8, 8))
        assert not out.any()

    def test_single_tap_is_a_shifted_1x1(self):
        # all weight mass on tap (1, 1): the conv reduces to a centered 1x1
        c = 8
        ks = []
        for kid in range(c):
            entries = [(4 * c + ch, (kid + 1)) for ch in range(2)]
            ks.append(SparseKernel.from_entries(kid, (3, 3, c), entries))
        taps = split_into_taps(ks, 3, c)
        rng = np.random.default_rng(12)
        smap = random_sparse_map(rng, 5, 5, c, k=3)
        cfg = ConvConfig(3, c, c)
        got = conv3x3_via_nine_1x1(smap, taps, cfg)
        expect = oracle_conv(smap.densify(), ks, c, cfg)
        assert np.array_equal(got, expect)

    def test_random_instances_match_direct_conv(self):
        rng = np.random.default_rng(13)
        cfg = ConvConfig(3, 8, 8)
        for trial in range(50):
            ks = random_kernels((3, 3, 8), 9, 8, seed=100 + trial)
            taps = split_into_taps(ks, 3, 8)
            smap = random_sparse_map(rng, 4, 4, 8, k=3)
            via_taps = conv3x3_via_nine_1x1(smap, taps, cfg)
            direct = sparse_sparse_conv(smap, pack_kernels(ks), cfg)
            assert np.array_equal(via_taps, direct)
            assert np.array_equal(via_taps, oracle_conv(smap.densify(), ks, 8, cfg))

    def test_missing_tap(self):
        ks = random_kernels((3, 3, 8), 4, 8, seed=14)
        taps = split_into_taps(ks, 3, 8)[:8]
        smap = random_sparse_map(np.random.default_rng(1), 3, 3, 8, k=2)
        with pytest.raises(ValueError, match="9 tap"):
            conv3x3_via_nine_1x1(smap, taps, ConvConfig(3, 8, 8))

    def test_mac_law_nine_k_s(self):
        c, n_per_tap, k = 16, 2, 4
        ks = self.build(c, n_per_tap, 16, seed=15)
        taps = split_into_taps(ks, 3, c)
        smap = random_sparse_map(np.random.default_rng(2), 3, 3, c, k=k)
        counter = MacCounter()
        conv3x3_via_nine_1x1(smap, taps, ConvConfig(3, c, c), counter)
        s = 16 * (9 * n_per_tap) // (9 * c)  # = C_out * N / window positions
        assert counter.mults == 9 * k * s  # one interior output site


class TestStem:
    def stem_kernels(self, n_spatial, n_kernels, seed):
        rng = np.random.default_rng(seed)
        kernels = []
        per_set = 49 // n_spatial
        for kid in range(n_kernels):
            lane = kid % per_set
            taps = range(lane * n_spatial, (lane + 1) * n_spatial)
            entries = []
            for tap in taps:
                for ch in range(3):
                    w = int(rng.integers(1, 100)) * int(rng.choice([-1, 1]))
                    entries.append((tap * 3 + ch, w))
            kernels.append(SparseKernel.from_entries(kid, (7, 7, 3), entries))
        return kernels

    def test_zero_image(self):
        ks = self.stem_kernels(5, 9, seed=16)
        out = stem_conv7x7(np.zeros((9, 9, 3), np.int8), pack_kernels(ks), ConvConfig(7, 3, 9))
        assert not out.any()

    def test_matches_oracle(self):
        rng = np.random.default_rng(17)
        ks = self.stem_kernels(5, 9, seed=17)
        cfg = ConvConfig(7, 3, 9, stride=2, padding=3)
        x = random_int8(rng, (12, 12, 3))
        got = stem_conv7x7(x, pack_kernels(ks), cfg)
        assert np.array_equal(got, oracle_conv(x, ks, 9, cfg))

    def test_block_violation_rejected(self):
        bad = [SparseKernel.from_entries(0, (7, 7, 3), [(0, 5), (1, 6)])]  # tap 0 missing ch 2
        with pytest.raises(ValueError, match="partially occupied"):
            stem_conv7x7(np.zeros((8, 8, 3), np.int8), pack_kernels(bad), ConvConfig(7, 3, 1))

    def test_sparsity_ratio_1_8x(self):
        # same kernel count at N_spatial 9 vs 5 cuts per-site multiplies by 1.8
        cfg = ConvConfig(7, 3, 45)
        x = np.zeros((7, 7, 3), np.int8)
        counts = {}
        for n_spatial in (9, 5):
            counter = MacCounter()
            ks = self.stem_kernels(n_spatial, 45, seed=18)
            stem_conv7x7(x, pack_kernels(ks), cfg, counter)
            counts[n_spatial] = counter.mults
        assert counts[9] == counts[5] * 9 / 5  # exactly 1.8x


class TestLinear:
    def test_empty_activation(self):
        ks = random_kernels((16,), 4, 8, seed=19)
        act = SparseActivation(16, np.empty(0, np.int64), np.empty(0, np.int8), 0)
        counter = MacCounter()
        out = sparse_sparse_linear(act, pack_kernels(ks), 8, counter)
        assert not out.any()
        assert counter.mults == 0

    def test_matches_oracle(self):
        rng = np.random.default_rng(20)
        for trial in range(100):
            n_in, n_out = 32, 24
            ks = random_kernels((n_in,), 8, n_out, seed=trial)
            awt = pack_kernels(ks)
            act = global_kwta_histogram(random_int8(rng, n_in), KwtaConfig(5))
            got = sparse_sparse_linear(act, awt, n_out)
            expect = dense_linear_reference(
                act.densify(), dense_from_kernels(ks, n_out, (n_in,))
            ).output
            assert np.array_equal(got, expect)

    def test_executed_ratio_is_da_times_dw(self):
        n_in, n_out, n, k = 1600, 1500, 160, 160
        ks = random_kernels((n_in,), n, n_out, seed=21)
        awt = pack_kernels(ks)
        rng = np.random.default_rng(21)
        act = global_kwta_histogram(random_int8(rng, n_in), KwtaConfig(k))
        counter = MacCounter()
        sparse_sparse_linear(act, awt, n_out, counter)
        dense = n_in * n_out
        # executed/dense = (K/in) * (N/in), compared as exact integers
        assert counter.mults * n_in * n_in == dense * k * n
        assert counter.mults * 100 == dense  # 90% + 90% sparsity -> 1% of dense

    def test_length_mismatch(self):
        ks = random_kernels((16,), 4, 8, seed=22)
        act = SparseActivation(8, np.array([0]), np.array([1], np.int8), 1)
        with pytest.raises(ValueError):
            sparse_sparse_linear(act, pack_kernels(ks), 8)

    def test_sparse_dense_linear_matches_oracle(self):
        rng = np.random.default_rng(23)
        ks = random_kernels((32,), 8, 24, seed=23)
        x = random_int8(rng, 32)
        got = sparse_dense_linear(x, pack_kernels(ks), 24)
        expect = dense_linear_reference(x, dense_from_kernels(ks, 24, (32,))).output
        assert np.array_equal(got, expect)


class TestMacLaw:
    @pytest.mark.parametrize("n,k", [(1, 16), (4, 8), (8, 4), (16, 2)])
    def test_square_1x1_ratio(self, n, k):
        c = 64
        ks = random_kernels((c,), n, c, seed=n * 100 + k)
        awt = pack_kernels(ks)
        smap = random_sparse_map(np.random.default_rng(k), 2, 2, c, k=k)
        counter = MacCounter()
        sparse_sparse_conv(smap, awt, ConvConfig(1, c, c), counter)
        sites = 4
        dense = sites * c * c
        assert dense / counter.mults == (c / k) * (c / n)


class TestDeterminism:
    def test_identical_runs(self):
        ks = random_kernels((5, 5, 4), 10, 16, seed=24)
        awt = pack_kernels(ks)
        cfg = ConvConfig(5, 4, 16)
        smap = random_sparse_map(np.random.default_rng(3), 7, 7, 4, k=2)
        c1, c2 = MacCounter(), MacCounter()
        a = sparse_sparse_conv(smap, awt, cfg, c1)
        b = sparse_sparse_conv(smap, awt, cfg, c2)
        assert np.array_equal(a, b)
        assert (c1.mults, c1.adds) == (c2.mults, c2.adds)

    def test_route_matches_vectorized_scatter(self):
        rng = np.random.default_rng(25)
        batch = [(int(rng.integers(0, 6)), int(rng.integers(-1000, 1000))) for _ in range(64)]
        explicit = route_and_sum(batch, 6)
        scatter = np.zeros(6, np.int64)
        np.add.at(scatter, [kid for kid, _ in batch], [p for _, p in batch])
        assert np.array_equal(explicit, scatter.astype(np.int32))
