import numpy as np
import pytest

from octoconv import tensor as T
from octoconv.equivariance import act_on_features, check_equivariance, random_gconv_stack, rotate_volume, run_stack
from octoconv.filters import spatial_permutation
from octoconv.groups import GroupName, get_group
from octoconv.layers import Dense, Dropout, EquivariantBatchNorm, GConv3d, MaxPool3d, OrientationPool, ReLU

from oracles import layer_gradient_errors

ALL = [g.value for g in GroupName]


def _random_gconv(group, n_in, n_out, first, rng, kernel=(3, 3, 3)):
    layer = GConv3d(group, n_in, n_out, first_layer=first, kernel=kernel)
    layer.params["filters"][...] = rng.standard_normal(layer.filter_shape)
    layer.params["bias"][...] = rng.standard_normal(n_out)
    return layer


# -- group convolution --------------------------------------------------------


def test_trivial_gconv_is_plain_conv():
    rng = np.random.default_rng(0)
    layer = _random_gconv("Z3", 2, 3, True, rng)
    x = rng.standard_normal((2, 2, 5, 6, 4)).astype(np.float32)
    want = T.conv3d_forward(x, layer.params["filters"]) + layer.params["bias"][None, :, None, None, None]
    out = layer.forward(x)
    assert np.array_equal(out, want)
    g = rng.standard_normal(out.shape).astype(np.float32)
    gx = layer.backward(g)
    ref_gx, ref_gw = T.conv3d_backward(g, x, layer.params["filters"])
    assert np.array_equal(gx, ref_gx) and np.array_equal(layer.grads["filters"], ref_gw)
    assert np.array_equal(layer.grads["bias"], g.sum(axis=(0, 2, 3, 4)))


def test_gconv_impulse_probe_d4():
    g = get_group("D4")
    layer = GConv3d("D4", 1, 1, first_layer=True, bias=False)
    hot = (1, 0, 2)  # filter one-hot at (z, y, x)
    layer.params["filters"][0, 0][hot] = 1.0
    x = np.zeros((1, 1, 5, 5, 5), np.float32)
    s = np.array([2, 2, 2])
    x[0, 0, 2, 2, 2] = 1.0
    out = layer.forward(x)
    assert out.shape == (1, 8, 5, 5, 5)
    src = np.ravel_multi_index(hot, (3, 3, 3))
    for j, m in enumerate(g.elements):
        r = np.array(np.unravel_index(int(np.flatnonzero(spatial_permutation(m, (3, 3, 3)) == src)[0]), (3, 3, 3)))
        # cross-correlation: out[p] = w[r] x[p + r - c] is hot where p = s - (r - c)
        p = tuple(s - (r - 1))
        assert out[0, j][p] == 1.0 and out[0, j].sum() == 1.0


def test_gconv_bias_shared_and_param_count():
    for name in ALL:
        n = get_group(name).order
        first = GConv3d(name, 2, 3, first_layer=True)
        higher = GConv3d(name, 2, 3, first_layer=False)
        assert first.params["bias"].shape == (3,)
        assert first.n_params() == 3 * 2 * 27 + 3
        assert higher.n_params() == 3 * 2 * n * 27 + 3
        assert higher.in_channels == 2 * n and higher.out_channels == 3 * n


def test_gconv_shape_errors():
    layer = GConv3d("D4", 2, 1, first_layer=False)
    with pytest.raises(ValueError):
        layer.forward(np.zeros((1, 2, 3, 3, 3), np.float32))


def test_gconv_zero_grad_out():
    rng = np.random.default_rng(1)
    layer = _random_gconv("O", 1, 2, False, rng)
    x = rng.standard_normal((1, 24, 3, 3, 3)).astype(np.float32)
    out = layer.forward(x, training=True)
    gx = layer.backward(np.zeros_like(out))
    assert not gx.any() and not layer.grads["filters"].any() and not layer.grads["bias"].any()


@pytest.mark.parametrize("name", ALL)
def test_first_layer_equivariance(name):
    rep = check_equivariance(name, depth=1, size=5, seed=3)
    assert rep.worst_integer == 0.0
    assert rep.worst_float <= 1e-4
    assert len(rep.errors) == get_group(name).order


@pytest.mark.parametrize("name", ["D4", "D4h"])
def test_stacked_equivariance_with_batchnorm(name):
    rep = check_equivariance(name, depth=3, size=5, seed=4, with_bn=True)
    assert rep.passed(1e-4), (rep.worst_integer, rep.worst_float)


def test_corrupted_representation_is_detected():
    from octoconv.groups import PermutationRep, get_rho

    rho = get_rho("D4")
    bad = rho.perms.copy()
    bad[1] = bad[1][::-1]
    rep = check_equivariance("D4", depth=1, size=5, rho=PermutationRep(rho.group_name, bad))
    assert not rep.passed()


@pytest.mark.parametrize("name", ["D4", "O"])
def test_orientation_pool_invariance(name):
    g = get_group(name)
    rng = np.random.default_rng(5)
    layers = random_gconv_stack(name, 2, rng=rng, integer=True)
    pool = OrientationPool(g.order)
    x = rng.integers(-2, 3, (1, 1, 5, 5, 5)).astype(np.float32)
    base = pool.forward(run_stack(layers, x))
    for h, m in enumerate(g.elements):
        got = pool.forward(run_stack(layers, rotate_volume(x, m)))
        assert np.array_equal(got, rotate_volume(base, m))


def test_act_on_features_is_a_group_action():
    g = get_group("D4h")
    y = np.random.default_rng(6).standard_normal((1, 2 * 16, 3, 3, 3))
    for i, j in [(1, 2), (3, 7), (5, 11), (15, 9)]:
        lhs = act_on_features(y, g.cayley[i, j], g)
        rhs = act_on_features(act_on_features(y, j, g), i, g)
        assert np.array_equal(lhs, rhs)


# -- batch norm ---------------------------------------------------------------


def test_bn_constant_input_gives_beta():
    bn = EquivariantBatchNorm(2, 8)
    bn.params["beta"][...] = [0.5, -1.0]
    x = np.full((3, 16, 2, 2, 2), 7.25, np.float32)
    out = bn.forward(x, training=True).reshape(3, 2, -1)
    assert np.all(out[:, 0] == 0.5) and np.all(out[:, 1] == -1.0)


def test_bn_param_count_and_sharing():
    bn = EquivariantBatchNorm(3, 24)
    assert bn.n_params() == 6
    x = np.random.default_rng(0).standard_normal((4, 72, 2, 2, 2)).astype(np.float32)
    out = bn.forward(x, training=True).reshape(4, 3, -1).astype(np.float64)
    assert np.allclose(out.mean(axis=(0, 2)), 0, atol=1e-5)
    assert np.allclose(out.var(axis=(0, 2)), 1, atol=1e-3)


def test_bn_running_stats_and_eval():
    bn = EquivariantBatchNorm(1, 1, momentum=0.5)
    x = np.arange(8, dtype=np.float32).reshape(2, 1, 1, 2, 2)
    bn.forward(x, training=True)
    # the first update replaces the initial values outright
    assert bn.running_mean[0] == pytest.approx(3.5)
    assert bn.running_var[0] == pytest.approx(np.var(np.arange(8), ddof=1))
    # later ones are debiased averages: weights 0.5 * 0.5 and 0.5 over (1 - 0.25)
    bn.forward(x + 1, training=True)
    assert bn.running_mean[0] == pytest.approx((0.25 * 3.5 + 0.5 * 4.5) / 0.75)
    out = bn.forward(x, training=False)
    want = (x - bn.running_mean[0]) / np.sqrt(bn.running_var[0] + 1e-5)
    assert np.allclose(out, want, atol=1e-6)
    with pytest.raises(ValueError):
        bn.forward(np.zeros((0, 1, 1, 1, 1), np.float32), training=True)


# -- other layers -------------------------------------------------------------


def test_orientation_pool_values():
    x = np.tile(np.arange(8, dtype=np.float32), 3).reshape(1, 24, 1, 1, 1)
    out = OrientationPool(8).forward(x)
    assert out.shape == (1, 3, 1, 1, 1) and np.all(out == 7)
    y = np.random.default_rng(0).standard_normal((2, 5, 2, 2, 2)).astype(np.float32)
    assert np.array_equal(OrientationPool(1).forward(y), y)
    with pytest.raises(ValueError):
        OrientationPool(4).forward(np.zeros((1, 6, 1, 1, 1), np.float32))


def test_dropout():
    x = np.ones((4, 3, 5, 5, 5), np.float32)
    assert Dropout(0.0).forward(x, training=True) is x
    d = Dropout(0.3, np.random.default_rng(0))
    assert d.forward(x, training=False) is x
    out = d.forward(x, training=True)
    kept = out != 0
    assert np.allclose(out[kept], 1 / 0.7)
    assert abs(kept.mean() - 0.7) < 0.03
    assert np.array_equal(d.backward(np.ones_like(x)), out)
    for p in (-0.1, 1.0):
        with pytest.raises(ValueError):
            Dropout(p)


def test_dense():
    d = Dense(4, 2)
    d.params["weight"][...] = np.arange(8).reshape(2, 4)
    d.params["bias"][...] = [1, -1]
    out = d.forward(np.ones((1, 1, 1, 2, 2), np.float32))
    assert out.tolist() == [[7.0, 21.0]]
    with pytest.raises(ValueError):
        d.forward(np.ones((1, 5), np.float32))


# -- gradients ------------------------------------------------------------------


def _well_separated(rng, shape, gap=0.05):
    """Distinct values at least ``gap`` apart and away from zero."""
    n = int(np.prod(shape))
    v = (rng.permutation(n) - n / 2 + 0.5) * gap
    return v.reshape(shape)


def gradient_cases(seed):
    """One randomised small instance per layer type."""
    rng = np.random.default_rng(seed)
    name = ALL[seed % len(ALL)]
    n = get_group(name).order
    s = lambda: tuple(int(v) for v in rng.integers(2, 4, 3))  # noqa: E731
    dense = Dense(12, 3)
    dense.params["weight"][...] = rng.standard_normal((3, 12))
    dense.params["bias"][...] = rng.standard_normal(3)
    bn_train = EquivariantBatchNorm(2, n)
    bn_eval = EquivariantBatchNorm(2, n)
    bn_eval.running_mean[...] = rng.standard_normal(2)
    bn_eval.running_var[...] = rng.uniform(0.5, 2, 2)
    for layer in (bn_train, bn_eval):
        layer.params["gamma"][...] = rng.uniform(0.5, 1.5, 2)
        layer.params["beta"][...] = rng.standard_normal(2)
    drop = Dropout(0.4)
    return [
        ("gconv-first", _random_gconv(name, 2, 2, True, rng), rng.standard_normal((2, 2, *s())), {}),
        ("gconv-higher", _random_gconv(name, 1, 2, False, rng), rng.standard_normal((1, n, *s())), {}),
        ("batchnorm-train", bn_train, rng.standard_normal((3, 2 * n, *s())), {}),
        ("relu", ReLU(), _well_separated(rng, (2, 3, *s())), {}),
        ("maxpool", MaxPool3d(2), _well_separated(rng, (2, 2, 3, 3, 3)), {}),
        ("orientation-pool", OrientationPool(n), _well_separated(rng, (2, 2 * n, 1, 2, 2)), {}),
        ("dense", dense, rng.standard_normal((4, 3, 1, 2, 2)), {}),
        ("batchnorm-eval", bn_eval, rng.standard_normal((2, 2 * n, 2, 2, 2)), {"training": False}),
        ("dropout", drop, rng.standard_normal((2, 3, 2, 2, 2)),
         {"before_forward": lambda: setattr(drop, "rng", np.random.default_rng(seed))}),
    ]


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    for label, layer, x, kw in gradient_cases(seed):
        errs = layer_gradient_errors(layer, x, rng=seed, **kw)
        for k, e in errs.items():
            assert e <= 1e-3, (label, k, e)
