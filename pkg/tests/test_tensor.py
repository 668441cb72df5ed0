import math

import numpy as np
import pytest

from conftest import FD_RTOL, directional_check, weighted_sum
from mitos_rcnn.tensor import (GradTape, ShapeError, TapeError, Tensor, add, concat_channels, conv2d,
                               cross_entropy, deconv2d, fully_connected, l2_normalize_channels, maxpool2d,
                               mul, record_switches, relu, reshape, roi_pool, smooth_l1, softmax, take_rows, transpose, tsum)


def leaf(rng, *shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


# ---------------------------------------------------------------------------
# forward examples
# ---------------------------------------------------------------------------

class TestConv2d:
    def test_scalar_kernel_scales(self):
        x = Tensor([[[1.0, 2.0], [3.0, 4.0]]])
        out = conv2d(x, Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor([0.0]))
        np.testing.assert_array_equal(out.data[0], [[2, 4], [6, 8]])

    def test_padded_ones(self):
        out = conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]), pad=1)
        np.testing.assert_array_equal(out.data[0], [[4, 4], [4, 4]])

    def test_vgg_shape(self, rng):
        x = Tensor(rng.normal(size=(3, 299, 299)))
        out = conv2d(x, Tensor(rng.normal(size=(64, 3, 3, 3))), Tensor(np.zeros(64)), pad=1)
        assert out.shape == (64, 299, 299)

    def test_matches_direct_loops(self, rng):
        x = rng.normal(size=(2, 6, 7))
        k = rng.normal(size=(3, 2, 3, 2))
        b = rng.normal(size=3)
        out = conv2d(Tensor(x), Tensor(k), Tensor(b), stride=2, pad=1).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        oh, ow = (6 + 2 - 3) // 2 + 1, (7 + 2 - 2) // 2 + 1
        ref = np.zeros((3, oh, ow))
        for o in range(3):
            for r in range(oh):
                for c in range(ow):
                    ref[o, r, c] = np.sum(xp[:, 2 * r:2 * r + 3, 2 * c:2 * c + 2] * k[o]) + b[o]
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)

    def test_channel_mismatch_names_dims(self, rng):
        with pytest.raises(ShapeError, match="C_in=3.*C=2"):
            conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


class TestMaxpool:
    def test_two_by_two(self):
        out = maxpool2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), 2, 2)
        np.testing.assert_array_equal(out.data, [[[4.0]]])

    def test_constant(self):
        out = maxpool2d(Tensor(np.full((2, 6, 6), 3.5)), 2, 2)
        assert out.shape == (2, 3, 3)
        assert np.all(out.data == 3.5)

    def test_brute_force(self, rng):
        x = rng.normal(size=(1, 8, 8))
        out = maxpool2d(Tensor(x), 2, 2).data
        ref = np.array([[x[0, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max() for j in range(4)] for i in range(4)])
        np.testing.assert_array_equal(out[0], ref)

    def test_odd_size_floors(self, rng):
        assert maxpool2d(Tensor(rng.normal(size=(1, 75, 75))), 2, 2).shape == (1, 37, 37)

    def test_window_too_large(self):
        with pytest.raises(ShapeError):
            maxpool2d(Tensor(np.ones((1, 1, 3))), 2, 2)


def test_relu_cases():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert np.all(relu(Tensor(-np.arange(1.0, 5.0))).data == 0)
    x = Tensor([3.0, -3.0], requires_grad=True)
    with GradTape() as tape:
        loss = tsum(relu(x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [1.0, 0.0])


class TestFullyConnected:
    def test_identity(self):
        out = fully_connected(Tensor([1.0, -2.0, 3.0]), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, [1, -2, 3])

    def test_hand_sum(self):
        out = fully_connected(Tensor([2.0, 3.0]), Tensor([[1.0, 1.0]]), Tensor([1.0]))
        np.testing.assert_array_equal(out.data, [6.0])

    def test_loop_oracle(self, rng):
        x, w, b = rng.normal(size=4), rng.normal(size=(3, 4)), rng.normal(size=3)
        out = fully_connected(Tensor(x), Tensor(w), Tensor(b)).data
        ref = [sum(w[i, j] * x[j] for j in range(4)) + b[i] for i in range(3)]
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            fully_connected(Tensor([1.0, 2.0, 3.0]), Tensor(np.ones((2, 2))), Tensor(np.zeros(2)))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)

    def test_ln2(self):
        np.testing.assert_allclose(softmax(Tensor([math.log(2.0), 0.0])).data, [2 / 3, 1 / 3], atol=1e-15)

    def test_shift_invariance_and_normalization(self, rng):
        z = rng.uniform(-2, 2, size=7)
        p = softmax(Tensor(z)).data
        assert abs(p.sum() - 1.0) <= 1e-12
        np.testing.assert_allclose(softmax(Tensor(z + 123.4)).data, p, atol=1e-12)

    def test_large_logits_stay_finite(self):
        p = softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(p)) and p[0] == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            softmax(Tensor(np.zeros(0)))


class TestL2Normalize:
    def test_three_four_five(self):
        out = l2_normalize_channels(Tensor(np.array([3.0, 4.0]).reshape(2, 1, 1)), Tensor([1.0, 1.0]))
        np.testing.assert_allclose(out.data.ravel(), [0.6, 0.8], atol=1e-15)

    def test_uniform_scale_sets_norm(self, rng):
        out = l2_normalize_channels(Tensor(rng.normal(size=(5, 3, 3))), Tensor(np.full(5, 10.0)))
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=0), 10.0, atol=1e-9)

    def test_unit_norm_before_scaling(self, rng):
        out = l2_normalize_channels(Tensor(rng.normal(size=(8, 4, 4))), Tensor(np.ones(8)))
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=0), 1.0, atol=1e-9)

    def test_zero_vector_is_clamped(self):
        out = l2_normalize_channels(Tensor(np.zeros((3, 2, 2))), Tensor(np.ones(3)))
        assert np.all(out.data == 0)


class TestDeconv:
    def test_single_stamp(self):
        out = deconv2d(Tensor(np.ones((1, 1, 1))), Tensor(np.ones((1, 1, 2, 2))), stride=2)
        np.testing.assert_array_equal(out.data, np.ones((1, 2, 2)))

    def test_doubles_size(self, rng):
        out = deconv2d(Tensor(rng.normal(size=(3, 37, 37))), Tensor(rng.normal(size=(3, 4, 2, 2))), stride=2)
        assert out.shape == (4, 74, 74)

    @pytest.mark.parametrize("stride,k", [(2, 2), (1, 3), (2, 3)])
    def test_adjoint_of_conv(self, rng, stride, k):
        x = rng.normal(size=(3, 4, 5))
        kern = rng.normal(size=(3, 2, k, k))
        up = deconv2d(Tensor(x), Tensor(kern), stride=stride).data
        y = rng.normal(size=up.shape)
        # conv2d kernels are (C_out, C_in, ...): the deconv's (C_in, C_out) layout is already that
        down = conv2d(Tensor(y), Tensor(kern), stride=stride).data
        assert abs(np.sum(up * y) - np.sum(x * down)) <= 1e-9

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            deconv2d(Tensor(np.ones((2, 2, 2))), Tensor(np.ones((3, 1, 2, 2))), stride=2)


class TestConcat:
    def test_shape_and_slices(self, rng):
        a, b = rng.normal(size=(2, 4, 4)), rng.normal(size=(3, 4, 4))
        out = concat_channels(Tensor(a), Tensor(b)).data
        assert out.shape == (5, 4, 4)
        np.testing.assert_array_equal(out[:2], a)
        np.testing.assert_array_equal(out[2:], b)

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            concat_channels(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 3, 2))))


@pytest.mark.parametrize("x,expected", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5), (1.0, 0.5)])
def test_smooth_l1_values(x, expected):
    assert smooth_l1(Tensor([x])).data[0] == pytest.approx(expected, abs=1e-15)


class TestCrossEntropy:
    def test_certain(self):
        assert cross_entropy(Tensor([1.0, 0.0]), 0).item() == 0.0

    def test_half(self):
        assert cross_entropy(Tensor([0.5, 0.5]), 1).item() == pytest.approx(math.log(2.0), abs=1e-15)

    def test_monotone(self):
        losses = [cross_entropy(Tensor([p, 1 - p]), 0).item() for p in np.linspace(0.05, 0.95, 10)]
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_floor(self):
        assert cross_entropy(Tensor([0.0, 1.0]), 0).item() == pytest.approx(-math.log(1e-12))

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            cross_entropy(Tensor([0.5, 0.5]), 2)

    def test_batch_form(self):
        out = cross_entropy(Tensor([[0.5, 0.5], [0.25, 0.75]]), np.array([0, 1]))
        np.testing.assert_allclose(out.data, [math.log(2), -math.log(0.75)])


class TestRoiPool:
    @staticmethod
    def oracle(f, boxes, k=7):
        out = np.zeros((len(boxes), f.shape[0], k, k))
        for r, (c0, r0, c1, r1) in enumerate(boxes):
            hs, ws = r1 - r0, c1 - c0
            if hs <= 0 or ws <= 0:
                continue
            for i in range(k):
                ys, ye = math.floor(i * hs / k), math.ceil((i + 1) * hs / k)
                for j in range(k):
                    xs, xe = math.floor(j * ws / k), math.ceil((j + 1) * ws / k)
                    if ye > ys and xe > xs:
                        out[r, :, i, j] = f[:, r0 + ys:r0 + ye, c0 + xs:c0 + xe].max(axis=(1, 2))
        return out

    def test_matches_bin_oracle(self, rng):
        f = rng.normal(size=(4, 20, 23))
        boxes = []
        for _ in range(150):
            c0, r0 = rng.integers(0, 22), rng.integers(0, 19)
            boxes.append((c0, r0, min(rng.integers(c0, 24), 23), min(rng.integers(r0, 21), 20)))
        boxes = np.array(boxes)
        np.testing.assert_array_equal(roi_pool(Tensor(f), boxes).data, self.oracle(f, boxes))

    def test_small_region_has_no_empty_bins(self, rng):
        f = rng.normal(size=(2, 10, 10))
        out = roi_pool(Tensor(f), np.array([[2, 3, 5, 5]])).data
        assert set(np.unique(out[0, 0])) <= set(f[0, 3:5, 2:5].ravel())

    def test_empty_region_is_zero(self, rng):
        out = roi_pool(Tensor(rng.normal(size=(2, 5, 5))), np.array([[3, 3, 3, 4]]))
        assert np.all(out.data == 0)

    def test_no_regions(self, rng):
        assert roi_pool(Tensor(rng.normal(size=(2, 5, 5))), np.zeros((0, 4))).shape == (0, 2, 7, 7)


# ---------------------------------------------------------------------------
# tape semantics
# ---------------------------------------------------------------------------

class TestTape:
    def test_sum_gives_ones(self, rng):
        x = leaf(rng, 3, 4)
        with GradTape() as tape:
            loss = tsum(x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_softmax_ce_gradient(self):
        z = Tensor([0.0, 0.0], requires_grad=True)
        with GradTape() as tape:
            loss = cross_entropy(softmax(z), 0)
        tape.backward(loss)
        np.testing.assert_allclose(z.grad, [-0.5, 0.5], atol=1e-15)

    def test_second_backward_rejected(self, rng):
        x = leaf(rng, 2)
        with GradTape() as tape:
            loss = tsum(x)
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)

    def test_non_scalar_rejected(self, rng):
        x = leaf(rng, 2)
        with GradTape() as tape:
            out = mul(x, 2.0)
        with pytest.raises(ShapeError):
            tape.backward(out)

    def test_reuse_accumulates(self):
        x = Tensor([1.5], requires_grad=True)
        with GradTape() as tape:
            loss = tsum(add(mul(x, x), x))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [2 * 1.5 + 1])

    def test_grads_accumulate_across_tapes(self):
        x = Tensor([2.0], requires_grad=True)
        for _ in range(2):
            with GradTape() as tape:
                loss = tsum(mul(x, 3.0))
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_visits_in_reverse_order(self, rng):
        x = leaf(rng, 3)
        with GradTape() as tape:
            loss = tsum(mul(relu(x), 2.0))
        n = len(tape)
        assert tape.backward(loss) == list(range(n - 1, -1, -1))

    def test_no_recording_without_grad(self):
        with GradTape() as tape:
            tsum(mul(Tensor([1.0]), 2.0))
        assert len(tape) == 0

    def test_forward_is_deterministic(self, rng):
        x, k = rng.normal(size=(3, 9, 9)), rng.normal(size=(4, 3, 3, 3))
        a = conv2d(Tensor(x), Tensor(k), pad=1).data
        b = conv2d(Tensor(x), Tensor(k), pad=1).data
        assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# finite-difference oracles, one per differentiable op
# ---------------------------------------------------------------------------

class TestRecordSwitches:
    def test_records_relu_and_pool_choices(self):
        x = Tensor(np.array([[[-1.0, 2.0], [3.0, -4.0]]]))
        with record_switches() as log:
            maxpool2d(relu(x))
        assert len(log.choices) == 2
        np.testing.assert_array_equal(log.choices[0], x.data > 0)
        assert log.choices[1].ravel().tolist() == [2]

    def test_replay_holds_branches(self):
        with record_switches() as base:
            relu(Tensor(np.array([1.0, -1.0])))
        with record_switches(replay=base):
            out = relu(Tensor(np.array([-0.5, 0.5])))
        # the recorded mask passes the first entry and blocks the second
        np.testing.assert_array_equal(out.data, [-0.5, 0.0])

    def test_replay_roi_winner(self):
        fmap = np.arange(16.0).reshape(1, 4, 4)
        with record_switches() as base:
            roi_pool(Tensor(fmap), np.array([[0, 0, 4, 4]]), (1, 1))
        changed = fmap.copy()
        changed[0, 0, 0] = 100.0
        with record_switches(replay=base):
            out = roi_pool(Tensor(changed), np.array([[0, 0, 4, 4]]), (1, 1))
        assert out.data.ravel().tolist() == [15.0]

    def test_replay_mismatch_rejected(self):
        with record_switches() as base:
            relu(Tensor(np.ones(3)))
        with pytest.raises(TapeError):
            with record_switches(replay=base):
                relu(Tensor(np.ones(4)))

    def test_inactive_by_default(self):
        relu(Tensor(np.ones(2)))
        with record_switches() as log:
            pass
        assert log.choices == []


def _fd_case(name, rng):
    """Build (loss_fn, params) for one op on random inputs in [-2, 2]."""
    if name == "conv2d":
        x, k, b = leaf(rng, 2, 6, 6), leaf(rng, 3, 2, 3, 3), leaf(rng, 3)
        w = rng.normal(size=(3, 3, 3))
        return (lambda: weighted_sum(conv2d(x, k, b, stride=2, pad=1), w)), {"x": x, "k": k, "b": b}
    if name == "deconv2d":
        x, k = leaf(rng, 2, 3, 3), leaf(rng, 2, 3, 2, 2)
        w = rng.normal(size=(3, 6, 6))
        return (lambda: weighted_sum(deconv2d(x, k, stride=2), w)), {"x": x, "k": k}
    if name == "maxpool2d":
        x = leaf(rng, 2, 6, 6)
        w = rng.normal(size=(2, 3, 3))
        return (lambda: weighted_sum(maxpool2d(x, 2, 2), w)), {"x": x}
    if name == "relu":
        x = Tensor(rng.choice([-1, 1], size=(4, 5)) * rng.uniform(0.1, 2, size=(4, 5)), requires_grad=True)
        w = rng.normal(size=(4, 5))
        return (lambda: weighted_sum(relu(x), w)), {"x": x}
    if name == "fully_connected":
        x, wt, b = leaf(rng, 5), leaf(rng, 3, 5), leaf(rng, 3)
        w = rng.normal(size=3)
        return (lambda: weighted_sum(fully_connected(x, wt, b), w)), {"x": x, "w": wt, "b": b}
    if name == "fully_connected_batch":
        x, wt, b = leaf(rng, 4, 5), leaf(rng, 3, 5), leaf(rng, 3)
        w = rng.normal(size=(4, 3))
        return (lambda: weighted_sum(fully_connected(x, wt, b), w)), {"x": x, "w": wt, "b": b}
    if name == "softmax":
        z = leaf(rng, 4, 3)
        w = rng.normal(size=(4, 3))
        return (lambda: weighted_sum(softmax(z), w)), {"z": z}
    if name == "l2_normalize_channels":
        x, s = leaf(rng, 4, 3, 3), leaf(rng, 4)
        w = rng.normal(size=(4, 3, 3))
        return (lambda: weighted_sum(l2_normalize_channels(x, s), w)), {"x": x, "s": s}
    if name == "concat_channels":
        a, b = leaf(rng, 2, 3, 3), leaf(rng, 1, 3, 3)
        w = rng.normal(size=(3, 3, 3))
        return (lambda: weighted_sum(concat_channels(a, b), w)), {"a": a, "b": b}
    if name == "smooth_l1":
        x = Tensor(rng.choice([-1, 1], size=12) * rng.uniform(0.05, 2, size=12), requires_grad=True)
        w = rng.normal(size=12)
        return (lambda: weighted_sum(smooth_l1(x), w)), {"x": x}
    if name == "cross_entropy":
        z = leaf(rng, 5, 3)
        labels = rng.integers(0, 3, size=5)
        return (lambda: tsum(cross_entropy(softmax(z), labels))), {"z": z}
    if name == "roi_pool":
        f = leaf(rng, 3, 9, 9)
        boxes = np.array([[0, 0, 9, 9], [2, 1, 6, 8], [4, 4, 5, 6]])
        w = rng.normal(size=(3, 3, 2, 2))
        return (lambda: weighted_sum(roi_pool(f, boxes, (2, 2)), w)), {"f": f}
    if name == "reshape_transpose_take":
        x = leaf(rng, 3, 4)
        w = rng.normal(size=(2, 4, 3))
        return (lambda: weighted_sum(reshape(take_rows(transpose(x, (1, 0)), [0, 2, 2, 1, 3, 0, 1, 3]),
                                             (2, 4, 3)), w)), {"x": x}
    if name == "add_mul":
        a, b = leaf(rng, 3, 1), leaf(rng, 1, 4)
        w = rng.normal(size=(3, 4))
        return (lambda: weighted_sum(mul(add(a, b), add(a, 1.0)), w)), {"a": a, "b": b}
    raise KeyError(name)


FD_OPS = ["conv2d", "deconv2d", "maxpool2d", "relu", "fully_connected", "fully_connected_batch", "softmax",
          "l2_normalize_channels", "concat_channels", "smooth_l1", "cross_entropy", "roi_pool",
          "reshape_transpose_take", "add_mul"]


@pytest.mark.parametrize("op", FD_OPS)
def test_gradient_matches_finite_differences(op):
    rng = np.random.default_rng(FD_OPS.index(op))
    loss_fn, params = _fd_case(op, rng)
    errors = directional_check(loss_fn, params, rng, probes=20)
    assert len(errors) >= 20
    assert max(errors) <= FD_RTOL, errors
