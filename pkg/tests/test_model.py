import numpy as np
import pytest
from scipy import stats

from lnet import fht
from lnet.model import (LNetModel, build, flop_count, forward,
                        forward_backward, init_weights, layer_param_counts,
                        load_model, save_model)
from lnet.ops import conv2d, relu
from lnet.train import weighted_mse


def grad_fixture(variant, seed, n=32):
    """Model/image/target fixture for finite-difference checks.  Biases are
    shifted away from 0 so the exact zeros flowing out of the Hough layer's
    zero region do not sit on the ReLU kink (central differences straddle
    the kink and disagree with any one-sided subgradient convention there).
    """
    r = np.random.default_rng(seed)
    image = r.random((n, n))
    target = np.clip(r.random(fht.hough_shape(n)) - 0.7, 0, None)
    m = init_weights(build(variant), r, 1e-2)
    for b in m.biases:
        b += r.uniform(0.05, 0.15, b.shape)
    return m, image, target


class TestBuild:
    def test_param_totals(self):
        assert build("fast").param_count == 55
        assert build("acc").param_count == 1334

    def test_layer_counts(self):
        assert len(build("fast").layers) == 3
        assert len(build("acc").layers) == 6

    def test_per_layer_params(self):
        assert layer_param_counts(build("fast")) == [10, 40, 5]
        assert layer_param_counts(build("acc")) == [40, 37, 80, 584, 584, 9]

    def test_single_channel_junctions(self):
        for v in ("fast", "acc"):
            arch = build(v)
            assert arch.conv_a[-1].out_channels == 1
            assert arch.conv_b[-1].out_channels == 1

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            build("huge")


class TestFlopCount:
    def test_fast_totals(self):
        t = flop_count(build("fast"), 256)
        assert t["total_mflop"] == pytest.approx(27.6, abs=0.5)
        assert t["fht_mflop"] == pytest.approx(4.1, abs=0.1)

    def test_acc_total(self):
        t = flop_count(build("acc"), 256)
        assert t["total_mflop"] == pytest.approx(666.4, abs=10.0)

    def test_fast_conv_a_row(self):
        t = flop_count(build("fast"), 256)
        assert t["rows"][0][2] == pytest.approx(1.2, abs=0.1)

    def test_per_layer_rows(self):
        rows = [r[2] for r in flop_count(build("acc"), 256)["rows"]]
        for got, want in zip(rows, (5.0, 4.8, 4.1, 39.8, 304.1, 304.1, 4.5)):
            assert got == pytest.approx(want, abs=0.15)


class TestInit:
    def test_identity_fast_equals_fht(self, rng):
        m = init_weights(build("fast"), rng, noise_scale=0.0)
        for _ in range(5):
            img = rng.random((32, 32))
            assert np.array_equal(forward(m, img), fht.fht_forward(img))

    def test_identity_acc_equals_fht_to_1ulp(self, rng):
        m = init_weights(build("acc"), rng, noise_scale=0.0)
        img = rng.random((32, 32))
        pred = forward(m, img)
        ref = fht.fht_forward(img)
        # the 8-channel average reduce can round the last bit
        assert np.allclose(pred, ref, rtol=3e-16, atol=0)

    def test_noise_bound_and_uniformity(self):
        rng = np.random.default_rng(0)
        arch = build("fast")
        m = init_weights(arch, rng, noise_scale=1e-2)
        spec = arch.conv_b[0]  # 4x3x3x1: fan_in 9
        bound = np.sqrt(6.0 / 9.0) * 1e-2
        noise = m.weights[1].ravel().copy()
        noise[np.abs(noise - 1.0) < 0.5] -= 1.0  # remove identity taps
        assert np.max(np.abs(noise)) <= bound
        # pool noise from many inits for a meaningful KS test
        samples = []
        for seed in range(40):
            mm = init_weights(arch, np.random.default_rng(seed), 1e-2)
            w = mm.weights[1].ravel().copy()
            w[np.abs(w - 1.0) < 0.5] -= 1.0
            samples.append(w)
        samples = np.concatenate(samples)
        p = stats.kstest(samples, stats.uniform(-bound, 2 * bound).cdf).pvalue
        assert p > 0.01

    def test_biases_zero(self, rng):
        m = init_weights(build("acc"), rng)
        for b in m.biases:
            assert not b.any()

    def test_deterministic(self):
        a = init_weights(build("acc"), np.random.default_rng(5))
        b = init_weights(build("acc"), np.random.default_rng(5))
        for wa, wb in zip(a.params(), b.params()):
            assert np.array_equal(wa, wb)


class TestForward:
    def test_zero_image_zero_bias_gives_zero(self, rng):
        m = init_weights(build("fast"), rng, 1e-2)
        out = forward(m, np.zeros((32, 32)))
        assert not out.any()

    def test_compositional_oracle(self, rng):
        # the network must equal the same ops applied step by step
        m = init_weights(build("fast"), rng, 1e-2)
        img = rng.random((32, 32))
        x = img[None]
        for k, spec in enumerate(m.arch.conv_a):
            x = relu(conv2d(x, spec, m.weights[k], m.biases[k]))
        planes = fht.fht_forward(x[0])
        na = len(m.arch.conv_a)
        out = np.empty_like(planes)
        for q in range(4):
            y = planes[q][None]
            for k, spec in enumerate(m.arch.conv_b):
                y = relu(conv2d(y, spec, m.weights[na + k], m.biases[na + k]))
            out[q] = y[0]
        assert np.allclose(forward(m, img), out, atol=1e-12, rtol=0)

    def test_branch_weight_sharing_permutation(self, rng):
        # the conv_b stack treats the four planes as a batch with shared
        # weights, so permuting branches commutes with the stack
        from lnet.ops import conv2d_nchw
        m, _, _ = grad_fixture("fast", 3)
        na = len(m.arch.conv_a)
        planes = rng.random((4, 1, 32, 63))

        def conv_b(x):
            for k, spec in enumerate(m.arch.conv_b):
                x = conv2d_nchw(x, spec, m.weights[na + k],
                                m.biases[na + k], relu=True)
            return x

        perm = np.array([2, 0, 3, 1])
        out = conv_b(planes)
        out_perm = conv_b(np.ascontiguousarray(planes[perm]))
        assert np.array_equal(out_perm, out[perm])

    def test_shape_errors(self, rng):
        m = init_weights(build("fast"), rng)
        with pytest.raises(ValueError):
            forward(m, np.zeros((32, 31)))
        m.weights[0] = np.zeros((2, 1, 3, 3))
        with pytest.raises(ValueError):
            forward(m, np.zeros((32, 32)))


class TestForwardBackward:
    def test_zero_cotangent(self, rng):
        m, img, _ = grad_fixture("fast", 1)
        grads, gimg = forward_backward(m, img, np.zeros(fht.hough_shape(32)))
        assert not any(g.any() for g in grads)
        assert not gimg.any()

    def test_all_55_gradients_match_fd(self):
        m, img, target = grad_fixture("fast", 11)
        params = m.params()

        def loss_of():
            return weighted_mse(forward(m, img), target)[0]

        _, gpred = weighted_mse(forward(m, img), target)
        grads, _ = forward_backward(m, img, gpred)
        h = 1e-6
        checked = 0
        for pi, p in enumerate(params):
            flat = p.ravel()
            gflat = grads[pi].ravel()
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                up = loss_of()
                flat[k] = orig - h
                dn = loss_of()
                flat[k] = orig
                fd = (up - dn) / (2 * h)
                rel = abs(fd - gflat[k]) / max(abs(fd), abs(gflat[k]), 1e-12)
                assert rel <= 1e-4, (pi, k, rel)
                checked += 1
        assert checked == 55

    def test_acc_spot_check_fd(self):
        m, img, target = grad_fixture("acc", 11)
        params = m.params()

        def loss_of():
            return weighted_mse(forward(m, img), target)[0]

        _, gpred = weighted_mse(forward(m, img), target)
        grads, _ = forward_backward(m, img, gpred)
        flat_index = [(pi, k) for pi, p in enumerate(params)
                      for k in range(p.size)]
        picker = np.random.default_rng(99)
        h = 1e-6
        for i in picker.choice(len(flat_index), 25, replace=False):
            pi, k = flat_index[i]
            flat = params[pi].ravel()
            orig = flat[k]
            flat[k] = orig + h
            up = loss_of()
            flat[k] = orig - h
            dn = loss_of()
            flat[k] = orig
            fd = (up - dn) / (2 * h)
            rel = abs(fd - grads[pi].ravel()[k]) / max(abs(fd),
                                                       abs(grads[pi].ravel()[k]),
                                                       1e-12)
            assert rel <= 1e-4

    def test_branch_decomposition(self, rng):
        # conv_b gradients equal the sum of the four single-branch passes
        m, img, _ = grad_fixture("fast", 5)
        g = np.random.default_rng(8).random(fht.hough_shape(32))
        grads, _ = forward_backward(m, img, g)
        parts = None
        for q in range(4):
            gq = np.zeros_like(g)
            gq[q] = g[q]
            gr, _ = forward_backward(m, img, gq)
            parts = gr if parts is None else [a + b for a, b in zip(parts, gr)]
        for a, b in zip(parts, grads):
            assert np.allclose(a, b, rtol=1e-12, atol=1e-12)

    def test_input_gradient_matches_fd(self):
        m, img, target = grad_fixture("fast", 21)

        def loss_of():
            return weighted_mse(forward(m, img), target)[0]

        _, gpred = weighted_mse(forward(m, img), target)
        _, gimg = forward_backward(m, img, gpred)
        h = 1e-6
        for (i, j) in ((0, 0), (5, 20), (31, 31), (16, 3)):
            orig = img[i, j]
            img[i, j] = orig + h
            up = loss_of()
            img[i, j] = orig - h
            dn = loss_of()
            img[i, j] = orig
            fd = (up - dn) / (2 * h)
            assert abs(fd - gimg[i, j]) <= 1e-5 * max(1.0, abs(fd))


class TestReceptiveField:
    @pytest.mark.parametrize("variant,margin", [("fast", 8.0), ("acc", 16.0)])
    def test_locality(self, variant, margin):
        n = 64
        r = np.random.default_rng(17)
        m = init_weights(build(variant), r, 1e-2)
        for b in m.biases:
            b += r.uniform(0.05, 0.15, b.shape)
        img = r.random((n, n))
        base = forward(m, img)
        probes = 0
        while probes < 60:
            q = int(r.integers(0, 4))
            s = int(r.integers(0, n))
            x = int(r.integers(-s, n))
            if x > n - 1:
                continue
            cell = fht.DyadicLine(q, x, s, n)
            try:
                line = fht.line_from_cell(cell)
            except ValueError:
                continue  # corner grazer, no line to measure against
            (x0, y0), (x1, y1) = line.endpoints()
            dx, dy = x1 - x0, y1 - y0
            norm = np.hypot(dx, dy)
            px = int(r.integers(0, n))
            py = int(r.integers(0, n))
            dist = abs(dx * (py - y0) - dy * (px - x0)) / norm
            if dist <= margin:
                continue
            perturbed = img.copy()
            perturbed[py, px] += 1.0
            out = forward(m, perturbed)
            assert out[q, s, cell.col] == base[q, s, cell.col]
            probes += 1


class TestCheckpoint:
    def test_round_trip_byte_exact(self, tmp_path, rng):
        m = init_weights(build("acc"), rng, 1e-2)
        m.meta["note"] = "fixture"
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_model(m, p1)
        m2 = load_model(p1)
        save_model(m2, p2)
        assert p1.read_bytes() == p2.read_bytes()
        for a, b in zip(m.params(), m2.params()):
            assert np.array_equal(a, b)
        assert m2.meta["note"] == "fixture"

    def test_wrong_file_rejected(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b'{"format": "other"}\n')
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_model(p)

    def test_truncated_blob_rejected(self, tmp_path, rng):
        m = init_weights(build("fast"), rng)
        p = tmp_path / "t.ckpt"
        save_model(m, p)
        data = p.read_bytes()
        p.write_bytes(data[:-16])
        with pytest.raises(ValueError, match="parameters"):
            load_model(p)
