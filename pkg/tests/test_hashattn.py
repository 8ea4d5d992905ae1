"""Hash attention: hand-evaluated hash codes, stable bucketing invariants,
a brute-force masked-attention oracle for bucketed attention and the round
weights, locality, the LSH collision property, and gradient checks with a
frozen gating plan."""

import numpy as np
import pytest

import cst.tensor as T
from cst.errors import ConfigError, NumericError
from cst.hashattn import (AttentionParams, BucketAssignment, GatingPlan,
                          SahMsa, bucket_attention, bucketize, draw_hash_params,
                          hash_codes, multi_round_attention)
from cst.rng import RandomStream
from cst.sasm import BinaryPatchMask
from cst.tensor import Tensor, backward, grad_check


def softmax_np(v):
    e = np.exp(v - np.max(v))
    return e / e.sum()


def bucket_attention_oracle(tokens, perm, m, u, v, wp):
    """Single head, single round: dense attention restricted to each bucket."""
    n, _ = tokens.shape
    d = u.shape[0]
    bucket_of = np.empty(n, dtype=int)
    for pos, orig in enumerate(perm):
        bucket_of[orig] = pos // m
    q = tokens @ u.T
    k = tokens @ v.T
    val = tokens @ wp.T
    out = np.zeros((n, d))
    mass = np.zeros(n)
    exp_sums = np.zeros(n)
    for i in range(n):
        keys = [j for j in range(n) if bucket_of[j] == bucket_of[i]]
        logits = np.array([q[i] @ k[j] / np.sqrt(d) for j in keys])
        a = softmax_np(logits)
        mass[i] = a.sum()
        exp_sums[i] = np.exp(logits).sum()
        for a_j, j in zip(a, keys):
            out[i] += a_j * val[j]
    return out, mass, exp_sums


def multi_round_oracle(tokens, perms, m, params, mode):
    """Full attention op: per-head round outputs combined by the round-weight
    rule, then output-projected and summed over heads."""
    n = tokens.shape[0]
    c = params.channels
    out = np.zeros((n, c))
    for h in range(params.n_heads):
        u = params.u.data[h]
        v = params.v.data[h]
        wp = params.wp.data[h]
        wo = params.wo.data[h]
        round_outs, masses, exps = [], [], []
        for perm in perms:
            o, mass, ex = bucket_attention_oracle(tokens, perm, m, u, v, wp)
            round_outs.append(o)
            masses.append(mass)
            exps.append(ex)
        if mode == "literal":
            weights = np.stack(masses) / np.stack(masses).sum(axis=0)
        else:
            weights = np.stack(exps) / np.stack(exps).sum(axis=0)
        combined = sum(w[:, None] * o for w, o in zip(weights, round_outs))
        out += combined @ wo.T
    return out


def make_params(channels, head_dim, seed=0):
    return AttentionParams(channels, head_dim, RandomStream(seed, 9))


class TestHashCodes:
    def test_zero_projection_constant_code(self):
        tokens = np.random.default_rng(0).normal(size=(10, 4))
        codes = hash_codes(tokens, np.zeros(4), 0.3, 1.0)
        assert np.all(codes == 0)

    def test_hand_evaluated_projection(self):
        # a=(1,0), b=0.3, r=1, x=(1.7, 9.9): floor(1.7+0.3) = 2
        codes = hash_codes(np.array([[1.7, 9.9]]), np.array([1.0, 0.0]), 0.3, 1.0)
        assert codes.tolist() == [2]

    def test_floor_toward_minus_inf(self):
        codes = hash_codes(np.array([[-0.2]]), np.array([1.0]), 0.0, 1.0)
        assert codes.tolist() == [-1]

    def test_translation_by_one_code_width(self):
        rng = np.random.default_rng(1)
        tokens = rng.normal(size=(32, 6))
        a = rng.normal(size=6)
        delta = a / (a @ a)  # a . delta == 1 == r
        c1 = hash_codes(tokens, a, 0.37, 1.0)
        c2 = hash_codes(tokens + delta, a, 0.37, 1.0)
        np.testing.assert_array_equal(c2, c1 + 1)

    def test_non_finite_tokens_rejected(self):
        with pytest.raises(NumericError):
            hash_codes(np.array([[np.inf]]), np.array([1.0]), 0.0, 1.0)


class TestBucketize:
    def test_reference_bucket_count(self):
        codes = np.random.default_rng(2).integers(-5, 5, size=256)
        ba = bucketize(codes, 64)
        assert ba.n_buckets == 4
        assert ba.perm.size == 256

    def test_equal_codes_keep_index_order(self):
        ba = bucketize(np.zeros(8, dtype=int), 4)
        np.testing.assert_array_equal(ba.perm, np.arange(8))

    def test_reversed_ramp_reverses_chunks(self):
        codes = np.arange(8)[::-1].copy()  # 7,6,...,0
        ba = bucketize(codes, 4)
        np.testing.assert_array_equal(ba.perm, np.arange(8)[::-1])

    def test_sort_is_stable_on_ties(self):
        codes = np.array([1, 0, 1, 0, 1, 0])
        ba = bucketize(codes, 3)
        np.testing.assert_array_equal(ba.perm, [1, 3, 5, 0, 2, 4])

    def test_indivisible_rejected(self):
        with pytest.raises(ConfigError):
            bucketize(np.zeros(10, dtype=int), 4)

    def test_invariants_over_random_sets(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            codes = rng.integers(-8, 8, size=64)
            ba = bucketize(codes, 16)
            assert np.array_equal(np.sort(ba.perm), np.arange(64))  # bijection
            sorted_codes = codes[ba.perm]
            assert np.all(np.diff(sorted_codes) >= 0)  # sorted
            # stability: equal codes in ascending original-index order
            for code in np.unique(codes):
                idx = ba.perm[sorted_codes == code]
                assert np.all(np.diff(idx) > 0)


class TestBucketAttention:
    def test_matches_dense_masked_oracle(self, f64):
        rng = np.random.default_rng(4)
        tokens = rng.normal(size=(8, 5))
        params = make_params(5, 5, seed=1)
        perm = rng.permutation(8)
        ba = BucketAssignment(perm=perm, bucket_size=4)
        heads, masses = bucket_attention(Tensor(tokens), ba, params)
        want, mass_want, _ = bucket_attention_oracle(
            tokens, perm, 4, params.u.data[0], params.v.data[0], params.wp.data[0])
        np.testing.assert_allclose(heads[0].data, want, atol=1e-10)
        np.testing.assert_allclose(masses[0], mass_want, atol=1e-12)

    def test_multi_head_matches_oracle(self, f64):
        rng = np.random.default_rng(5)
        tokens = rng.normal(size=(8, 6))
        params = make_params(6, 3, seed=2)  # 2 heads
        perm = rng.permutation(8)
        ba = BucketAssignment(perm=perm, bucket_size=2)
        heads, _ = bucket_attention(Tensor(tokens), ba, params)
        for h in range(2):
            want, _, _ = bucket_attention_oracle(
                tokens, perm, 2, params.u.data[h], params.v.data[h],
                params.wp.data[h])
            np.testing.assert_allclose(heads[h].data, want, atol=1e-10)

    def test_singleton_buckets_apply_value_projection(self, f64):
        tokens = np.random.default_rng(6).normal(size=(4, 3))
        params = make_params(3, 3, seed=3)
        ba = BucketAssignment(perm=np.arange(4), bucket_size=1)
        heads, masses = bucket_attention(Tensor(tokens), ba, params)
        np.testing.assert_allclose(heads[0].data, tokens @ params.wp.data[0].T,
                                   atol=1e-12)
        np.testing.assert_allclose(masses, 1.0, atol=1e-15)

    def test_zero_query_key_maps_give_bucket_means(self, f64):
        tokens = np.random.default_rng(7).normal(size=(6, 3))
        params = make_params(3, 3, seed=4)
        params.u.data = np.zeros_like(params.u.data)
        params.v.data = np.zeros_like(params.v.data)
        ba = BucketAssignment(perm=np.arange(6), bucket_size=3)
        heads, _ = bucket_attention(Tensor(tokens), ba, params)
        vals = tokens @ params.wp.data[0].T
        want = np.vstack([np.tile(vals[:3].mean(axis=0), (3, 1)),
                          np.tile(vals[3:].mean(axis=0), (3, 1))])
        np.testing.assert_allclose(heads[0].data, want, atol=1e-12)

    def test_rows_stochastic_to_1e12(self, f64):
        rng = np.random.default_rng(8)
        params = make_params(8, 8, seed=5)
        for _ in range(25):
            tokens = rng.normal(size=(16, 8)) * 3
            perm = rng.permutation(16)
            _, masses = bucket_attention(
                Tensor(tokens), BucketAssignment(perm=perm, bucket_size=4), params)
            np.testing.assert_allclose(masses, 1.0, atol=1e-12)

    def test_locality_zeroing_other_bucket(self, f64):
        rng = np.random.default_rng(9)
        tokens = rng.normal(size=(8, 4))
        params = make_params(4, 4, seed=6)
        ba = BucketAssignment(perm=np.arange(8), bucket_size=4)
        base, _ = bucket_attention(Tensor(tokens), ba, params)
        tokens2 = tokens.copy()
        tokens2[4:] = 0.0  # wipe the second bucket
        pert, _ = bucket_attention(Tensor(tokens2), ba, params)
        np.testing.assert_array_equal(base[0].data[:4], pert[0].data[:4])


class TestMultiRound:
    def test_round_weights_sum_to_one_and_uniform(self, f64):
        rng = np.random.default_rng(10)
        tokens = rng.normal(size=(8, 4))
        params = make_params(4, 4, seed=7)
        perms = [rng.permutation(8) for _ in range(3)]
        masses = []
        for perm in perms:
            _, mass = bucket_attention(
                Tensor(tokens), BucketAssignment(perm=perm, bucket_size=4), params)
            masses.append(mass)
        weights = np.stack(masses) / np.stack(masses).sum(axis=0)
        np.testing.assert_allclose(weights.sum(axis=0), 1.0, atol=1e-12)
        np.testing.assert_allclose(weights, 1.0 / 3.0, atol=1e-12)

    def test_single_round_reduces_to_projected_bucket_attention(self, f64):
        rng = np.random.default_rng(11)
        tokens = rng.normal(size=(8, 4))
        params = make_params(4, 4, seed=8)
        perm = rng.permutation(8)
        ba = BucketAssignment(perm=perm, bucket_size=4)
        got = multi_round_attention(Tensor(tokens), [ba], params).data
        heads, _ = bucket_attention(Tensor(tokens), ba, params)
        want = heads[0].data @ params.wo.data[0].T
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_duplicate_rounds_equal_single_round(self, f64):
        rng = np.random.default_rng(12)
        tokens = rng.normal(size=(8, 4))
        params = make_params(4, 4, seed=9)
        perm = rng.permutation(8)
        ba = BucketAssignment(perm=perm, bucket_size=4)
        one = multi_round_attention(Tensor(tokens), [ba], params).data
        two = multi_round_attention(Tensor(tokens), [ba, ba], params).data
        np.testing.assert_allclose(two, one, atol=1e-12)

    @pytest.mark.parametrize("mode", ["literal", "logit_mass"])
    def test_matches_full_oracle(self, f64, mode):
        rng = np.random.default_rng(13)
        tokens = rng.normal(size=(8, 6))
        params = make_params(6, 3, seed=10)  # 2 heads
        perms = [rng.permutation(8) for _ in range(2)]
        bas = [BucketAssignment(perm=p, bucket_size=4) for p in perms]
        got = multi_round_attention(Tensor(tokens), bas, params,
                                    weight_mode=mode).data
        want = multi_round_oracle(tokens, perms, 4, params, mode)
        np.testing.assert_allclose(got, want, atol=1e-10)


class TestSahMsaLayer:
    def make_layer(self, channels=4, head_dim=4, patch=4, bucket=4, rounds=2,
                   seed=0, **kw):
        return SahMsa(channels, head_dim, patch, bucket, rounds, 1.0,
                      RandomStream(seed, 9), name="test", **kw)

    def feature(self, h, w, c, seed=14):
        data = np.random.default_rng(seed).normal(size=(h, w, c))
        return Tensor(data, dtype=np.float64)

    def all_mask(self, gh, gw, patch):
        grid = np.ones((gh, gw), dtype=np.int8)
        return BinaryPatchMask(grid=grid, k=gh * gw, patch_size=patch)

    def test_all_zero_mask_contributes_zero(self, f64):
        layer = self.make_layer()
        x = self.feature(8, 8, 4)
        mask = BinaryPatchMask(grid=np.zeros((2, 2), dtype=np.int8), k=0,
                               patch_size=4)
        out = layer(x, mask)
        assert np.all(out.data == 0)

    def test_single_full_patch_equals_multi_round_attention(self, f64):
        layer = self.make_layer()
        x = self.feature(4, 4, 4)
        mask = self.all_mask(1, 1, 4)
        got = layer(x, mask).data.reshape(16, 4)
        tokens = x.data.reshape(16, 4)
        bas = []
        for r in range(layer.rounds):
            codes = hash_codes(tokens, layer.hash.a[r], layer.hash.b[r],
                               layer.hash.r)
            bas.append(bucketize(codes, layer.bucket_size))
        want = multi_round_attention(Tensor(tokens), bas, layer.params).data
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_checkerboard_touches_only_selected_windows(self, f64):
        layer = self.make_layer()
        x = self.feature(8, 8, 4)
        grid = np.array([[1, 0], [0, 1]], dtype=np.int8)
        mask = BinaryPatchMask(grid=grid, k=2, patch_size=4)
        out = layer(x, mask).data
        assert np.all(out[0:4, 4:8] == 0)
        assert np.all(out[4:8, 0:4] == 0)
        # selected windows match the single-window computation
        full = layer(x, self.all_mask(2, 2, 4)).data
        np.testing.assert_allclose(out[0:4, 0:4], full[0:4, 0:4], atol=1e-12)
        np.testing.assert_allclose(out[4:8, 4:8], full[4:8, 4:8], atol=1e-12)

    def test_partition_covers_all_tokens_each_round(self, f64):
        layer = self.make_layer()
        x = self.feature(8, 8, 4)
        plan = GatingPlan()
        layer(x, self.all_mask(2, 2, 4), plan=plan)
        perms = plan.entries["test/perms"]
        assert perms.shape == (2, 4, 16)
        for r in range(2):
            for p in range(4):
                assert np.array_equal(np.sort(perms[r, p]), np.arange(16))

    def test_gradient_with_frozen_plan(self, f64):
        layer = self.make_layer(channels=4, head_dim=2, patch=4, bucket=4,
                                rounds=2, seed=3)
        mask = self.all_mask(1, 2, 4)
        x0 = self.feature(4, 8, 4, seed=15)
        plan = GatingPlan()
        layer(x0, mask, plan=plan)
        plan.freeze()
        target = np.random.default_rng(16).normal(size=(4, 8, 4))

        def f(x):
            d = layer(x, mask, plan=plan) - Tensor(target)
            return (d * d).mean()

        assert grad_check(f, x0, eps=1e-5, coords=range(0, 128, 2)) < 1e-4

    def test_gradient_logit_mass_mode(self, f64):
        layer = self.make_layer(channels=4, head_dim=4, patch=4, bucket=2,
                                rounds=2, seed=4, weight_mode="logit_mass")
        mask = self.all_mask(1, 1, 4)
        x0 = self.feature(4, 4, 4, seed=17)
        plan = GatingPlan()
        layer(x0, mask, plan=plan)
        plan.freeze()

        def f(x):
            out = layer(x, mask, plan=plan)
            return (out * out).mean()

        assert grad_check(f, x0, eps=1e-5) < 1e-4

    def test_hash_params_fixed_across_forwards(self, f64):
        layer = self.make_layer()
        a0 = layer.hash.a.copy()
        x = self.feature(4, 4, 4)
        layer(x, self.all_mask(1, 1, 4))
        layer(x, self.all_mask(1, 1, 4))
        assert np.array_equal(layer.hash.a, a0)

    def test_resample_stream_changes_hash_per_forward(self, f64):
        layer = self.make_layer(resample_stream=RandomStream(0, 123))
        x = self.feature(4, 4, 4)
        layer(x, self.all_mask(1, 1, 4))
        a1 = layer.hash.a.copy()
        layer(x, self.all_mask(1, 1, 4))
        assert not np.array_equal(layer.hash.a, a1)


class TestCollisionProperty:
    def test_collision_probability_non_increasing_with_distance(self):
        """Over random pairs at graded distances, the chance of landing in the
        same hash code never increases with distance."""
        rng = RandomStream(42, 8)
        channels = 8
        distances = [0.1, 0.5, 1.0, 2.0, 4.0]
        draws = 200
        pairs = 200  # per distance bin -> 1000 pairs total
        rates = []
        for dist in distances:
            x = rng.normal((pairs, channels))
            direction = rng.normal((pairs, channels))
            direction /= np.linalg.norm(direction, axis=1, keepdims=True)
            y = x + dist * direction
            hp = draw_hash_params(draws, channels, 1.0, rng)
            hits = 0
            for r in range(draws):
                cx = hash_codes(x, hp.a[r], hp.b[r], hp.r)
                cy = hash_codes(y, hp.a[r], hp.b[r], hp.r)
                hits += int((cx == cy).sum())
            rates.append(hits / (draws * pairs))
        assert all(a >= b for a, b in zip(rates, rates[1:])), rates
        assert rates[0] > 0.9 and rates[-1] < 0.2


def test_assignment_csv_dump(tmp_path):
    ba = bucketize(np.array([3, 1, 2, 1]), 2)
    path = tmp_path / "assign.csv"
    from cst.hashattn import write_assignment_csv
    write_assignment_csv(path, ba)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "sorted_pos,bucket,original_index"
    # sorted order by (code, index): tokens 1,3 (code 1), 2 (code 2), 0 (code 3)
    assert lines[1:] == ["0,0,1", "1,0,3", "2,1,2", "3,1,0"]
