import math

import numpy as np
import pytest

from plumebias.impute import MEDIAN
from plumebias.model import (
    ModelKind, ModelParams, TrainConfig, channel_groups, dataset_loss, forward, forward_batch,
    init_params, load_checkpoint, logits_batch, loss_and_grad, save_checkpoint, train,
)
from plumebias.synthgen import GenConfig, generate_dataset
from plumebias import metrics as M
from plumebias.impute import impute_dataset_arrays
from plumebias.rng import derive_seed

KINDS = list(ModelKind)


def test_param_counts():
    assert init_params(ModelKind.VANILLA, 3, 0).size == 4 * 3 * 9 + 4 + 4 + 1 == 117
    # two branches: 4*1*9 + 4 and 4*2*9 + 4, head 8 + 1
    assert init_params(ModelKind.MULTIBRANCH, 3, 0).size == 40 + 76 + 9 == 125


def test_channel_groups():
    assert channel_groups(ModelKind.VANILLA, 3) == [[0, 1, 2]]
    assert channel_groups(ModelKind.MULTIBRANCH, 3) == [[0], [1, 2]]
    with pytest.raises(ValueError):
        channel_groups(ModelKind.MULTIBRANCH, 1)


@pytest.mark.parametrize("kind", KINDS)
def test_init_deterministic_and_seed_sensitive(kind):
    a, b = init_params(kind, 3, 1), init_params(kind, 3, 1)
    assert a == b
    assert a != init_params(kind, 3, 2)
    flat = a.flat()
    assert np.abs(flat).max() <= 0.1
    assert all((bias == 0).all() for bias in a.conv_b) and a.head_b[0] == 0
    np.testing.assert_array_equal(flat, flat.astype(np.float32).astype(np.float64))


def _zeroed(kind, c):
    p = init_params(kind, c, 0)
    return p.with_flat(np.zeros(p.size))


@pytest.mark.parametrize("kind", KINDS)
def test_zero_params_score_half(kind, rng):
    x = rng.normal(size=(3, 3, 8, 8))
    np.testing.assert_array_equal(forward_batch(_zeroed(kind, 3), x), 0.5)


@pytest.mark.parametrize("kind", KINDS)
def test_logit_linear_in_head_weights(kind, rng):
    p = init_params(kind, 3, 4)
    x = rng.normal(size=(5, 3, 8, 8))
    z0 = logits_batch(p, x)
    for scale in (0.5, 2.0, 3.0):
        q = p.with_flat(p.flat())
        q.head_w = p.head_w * scale
        z = logits_batch(q, x)
        np.testing.assert_allclose(z, scale * z0, rtol=1e-12, atol=1e-15)
        # score moves away from 0.5 in the logit's sign direction when scale grows
        s0, s = forward_batch(p, x), forward_batch(q, x)
        moved = np.sign(s - s0) * np.sign(z0) * np.sign(scale - 1)
        assert (moved[z0 != 0] > 0).all()


@pytest.mark.parametrize("kind", KINDS)
def test_forward_is_bit_stable(kind, rng):
    p = init_params(kind, 3, 2)
    tile = rng.normal(size=(3, 32, 32)).astype(np.float32)
    assert forward(p, tile) == forward(p, tile)
    assert 0 < forward(p, tile) < 1
    batch = np.stack([tile] * 300)
    np.testing.assert_array_equal(forward_batch(p, batch, batch_size=7), forward(p, tile))


def test_forward_rejects_non_finite():
    p = init_params(ModelKind.VANILLA, 1, 0)
    x = np.zeros((1, 4, 4))
    x[0, 1, 1] = np.nan
    with pytest.raises(ValueError):
        forward(p, x)


def test_loss_half_score_is_ln2(rng):
    p = _zeroed(ModelKind.VANILLA, 2)
    loss, _ = loss_and_grad(p, rng.normal(size=(6, 2, 5, 5)), np.array([0, 1, 1, 0, 1, 0]))
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_loss_confident_correct_goes_to_zero(rng):
    p = _zeroed(ModelKind.VANILLA, 1)
    x = rng.normal(size=(4, 1, 5, 5))
    losses = []
    for b in (10.0, 40.0):
        p.head_b = np.array([b])
        losses.append(loss_and_grad(p, x, np.ones(4))[0])
    assert losses[1] < losses[0] < 1e-4
    assert losses[1] < 1e-15


def test_empty_batch_rejected():
    p = init_params(ModelKind.VANILLA, 1, 0)
    with pytest.raises(ValueError):
        loss_and_grad(p, np.zeros((0, 1, 4, 4)), np.zeros(0))


def _fd_check(kind, rng):
    c = int(rng.integers(2, 5))
    h = int(rng.integers(3, 11))
    n = int(rng.integers(1, 7))
    p = init_params(kind, c, int(rng.integers(1 << 30)))
    p = p.with_flat(rng.uniform(-0.6, 0.6, p.size))
    x = rng.normal(0, 1, (n, c, h, h))
    y = rng.integers(0, 2, n)
    _, g = loss_and_grad(p, x, y)
    analytic = g.flat()
    theta = p.flat()
    hstep = 1e-4
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[i] += hstep
        dn[i] -= hstep
        numeric[i] = (loss_and_grad(p.with_flat(up), x, y)[0] - loss_and_grad(p.with_flat(dn), x, y)[0]) / (2 * hstep)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


@pytest.mark.parametrize("kind", KINDS)
def test_gradient_matches_central_differences(kind):
    rng = np.random.default_rng(100 + KINDS.index(kind))
    worst = max(_fd_check(kind, rng).max() for _ in range(20))
    assert worst < 1e-4


def test_train_config_roundtrip():
    cfg = TrainConfig(epochs=3, imputation=MEDIAN, resample=True, seed=9)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


@pytest.fixture(scope="module")
def small_ds():
    return generate_dataset(GenConfig(n_tiles=64, seed=5, size=12, plume_width=2.0))


@pytest.mark.parametrize("kind", KINDS)
def test_zero_epochs_returns_init(kind, small_ds):
    cfg = TrainConfig(epochs=0, seed=3)
    assert train(small_ds, kind, cfg) == init_params(kind, 3, derive_seed(3, "init"))


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("resample", [False, True])
def test_train_deterministic(kind, resample, small_ds):
    cfg = TrainConfig(epochs=2, seed=1, resample=resample, imputation=MEDIAN, learning_rate=0.5)
    a, b = train(small_ds, kind, cfg), train(small_ds, kind, cfg)
    assert a == b
    assert a != train(small_ds, kind, TrainConfig(epochs=2, seed=2, resample=resample,
                                                 imputation=MEDIAN, learning_rate=0.5))


def test_checkpoint_roundtrip(tmp_path, small_ds):
    cfg = TrainConfig(epochs=1, seed=4, learning_rate=0.3, resample=True)
    for kind in KINDS:
        p = train(small_ds, kind, cfg)
        root = save_checkpoint(p, tmp_path / kind.value, cfg, {"note": "x"})
        back, bcfg, extra = load_checkpoint(root)
        assert back == p and bcfg == cfg and extra == {"note": "x"}
        assert (root / "params.bin").stat().st_size == 4 * p.size


def test_checkpoint_refuses_lossy_params(tmp_path):
    p = init_params(ModelKind.VANILLA, 1, 0)
    p = p.with_flat(p.flat() + 1e-12)
    with pytest.raises(ValueError):
        save_checkpoint(p, tmp_path / "c")


@pytest.fixture(scope="module")
def toy():
    # separable: a bright blob in the centre of channel 0, nothing else varies
    cfg = GenConfig(n_tiles=400, seed=1, coverage_min=1.0, noise_sigma=0.0, tile_jitter=0.0,
                    texture_amplitude=0.0, plume_centered=True, plume_amplitude=3.0)
    return generate_dataset(cfg)


@pytest.mark.parametrize("kind", KINDS)
def test_toy_set_learned_with_monotone_loss(kind, toy):
    cfg = TrainConfig()  # defaults: 50 epochs, batch 32, lr 0.05
    x, _ = impute_dataset_arrays(toy, cfg.imputation, 0)
    y = toy.labels()
    losses = [dataset_loss(init_params(kind, 3, derive_seed(cfg.seed, "init")), x, y)]
    params = train(toy, kind, cfg, on_epoch=lambda e, p: losses.append(dataset_loss(p, x, y)))
    c = M.confusion(forward_batch(params, x), y)
    assert M.balanced_accuracy(c) >= 0.95
    violations = sum(b > a for a, b in zip(losses, losses[1:]))
    assert violations <= 0.05 * cfg.epochs
