import numpy as np
import pytest

from rollgen.context import HistoryContext, toy_plan
from rollgen.latent import DimensionError
from rollgen.nn.dit import (
    CheckpointError, DitConfig, ToyDiT, check_params, load_checkpoint, patchify, save_checkpoint, unpatchify,
)
from gradcheck import check_entries
from reference_dit import reference_forward


def _inputs(model, rng, b=2, stage=3):
    h, w = model.plan.height, model.plan.width
    f = 2 ** (model.cfg.stages - stage)
    noisy = rng.standard_normal((b, model.cfg.channels, 3, h // f, w // f))
    hist = rng.standard_normal((b, model.cfg.channels, model.plan.window, h, w))
    text = rng.standard_normal((b, 4, model.cfg.text_dim))
    lam = rng.uniform(0.1, 0.9, b)
    return noisy, hist, text, lam


def _perturbed(model, rng):
    """Random non-identity weights everywhere (init leaves amp at 1 and biases at 0)."""
    for k, v in model.params.items():
        model.params[k] = v + 0.3 * rng.standard_normal(v.shape)
    return model


@pytest.mark.parametrize("stage", [1, 3])
def test_matches_reference_four_layers(rng, stage):
    model = _perturbed(ToyDiT(DitConfig(n_layers=4), toy_plan(), seed=3), rng)
    noisy, hist, text, lam = _inputs(model, rng, stage=stage)
    u = model(noisy, hist, text, lam, stage)
    ref = reference_forward(model, noisy, hist, text, lam, stage)
    assert np.max(np.abs(u - ref)) < 1e-5


def test_matches_reference_pre_patch_positions(rng):
    model = _perturbed(ToyDiT(DitConfig(rope_temporal="pre"), toy_plan(), seed=1), rng)
    noisy, hist, text, lam = _inputs(model, rng, b=1)
    # the reference only knows the post-patch layout; "pre" must differ from it
    assert np.max(np.abs(model(noisy, hist, text, lam, 3) - reference_forward(model, noisy, hist, text, lam, 3))) > 1e-6


def test_patchify_roundtrip(rng):
    x = rng.standard_normal((2, 3, 4, 8, 8))
    for k in ((1, 2, 2), (2, 4, 4), (4, 8, 8)):
        np.testing.assert_array_equal(unpatchify(patchify(x, k), k, x.shape), x)
    with pytest.raises(DimensionError):
        patchify(x, (3, 2, 2))


def _loss_fn(model, noisy, hist, text, lam, stage, r, taps_r=None):
    def f():
        u, _, tap = model.forward(noisy, hist, text, lam, stage, taps=tuple(taps_r or ()))
        val = float(np.sum(u * r))
        for l, rr in (taps_r or {}).items():
            val += float(np.sum(tap[l] * rr))
        return val
    return f


def test_full_gradient_check(rng):
    model = _perturbed(ToyDiT(DitConfig(n_layers=2, d_model=32, n_heads=4), toy_plan(), seed=0), rng)
    noisy, hist, text, lam = _inputs(model, rng, stage=2)
    u, cache, tap = model.forward(noisy, hist, text, lam, 2, taps=(0,))
    r = rng.standard_normal(u.shape)
    tr = {0: rng.standard_normal(tap[0].shape)}
    grads, g_noisy = model.backward(r, cache, tr)
    f = _loss_fn(model, noisy, hist, text, lam, 2, r, tr)
    worst = {}
    for name, arr in model.params.items():
        worst[name] = check_entries(f, arr, grads[name], n=3)
    worst["noisy"] = check_entries(f, noisy, g_noisy, n=4)
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    assert not bad, bad
    assert set(grads) == set(model.params)


def test_zero_grad_and_linearity(rng):
    model = _perturbed(ToyDiT(DitConfig(), toy_plan(), seed=0), rng)
    noisy, hist, text, lam = _inputs(model, rng)
    u, cache, _ = model.forward(noisy, hist, text, lam, 3)
    zero, _ = model.backward(np.zeros_like(u), cache)
    assert all(not g.any() for g in zero.values())
    r = rng.standard_normal(u.shape)
    g1, _ = model.backward(r, cache)
    g2, _ = model.backward(2 * r, cache)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=1e-14)
    g3, _ = model.backward(r, cache)
    for k in g1:
        np.testing.assert_array_equal(g1[k], g3[k])
    with pytest.raises(RuntimeError):
        model.backward(r, None)


def test_history_conditioning_ignores_timestep(rng):
    model = _perturbed(ToyDiT(DitConfig(), toy_plan(), seed=0), rng)
    noisy, hist, text, _ = _inputs(model, rng)
    _, c1, _ = model.forward(noisy, hist, text, 0.1, 3)
    _, c2, _ = model.forward(noisy, hist, text, 0.9, 3)
    np.testing.assert_array_equal(c1.extra["c_h"], c2.extra["c_h"])
    assert not np.array_equal(c1.extra["c_n"], c2.extra["c_n"])
    # history tokens entering the first block are identical too
    nn = c1.shapes["nn"]
    np.testing.assert_array_equal(c1.layers[0]["x"][:, nn:], c2.layers[0]["x"][:, nn:])


def test_zero_history_equals_text_only(rng):
    model = _perturbed(ToyDiT(DitConfig(), toy_plan(), seed=0), rng)
    noisy, hist, text, lam = _inputs(model, rng)
    zeros = HistoryContext(np.zeros_like(hist[:1]), False, np.ones(model.plan.window, dtype=bool))
    np.testing.assert_array_equal(model(noisy, zeros, text, lam, 3), model(noisy, None, text, lam, 3))


def test_cross_attention_passes_history_through(rng):
    model = _perturbed(ToyDiT(DitConfig(), toy_plan(), seed=0), rng)
    noisy, hist, text, lam = _inputs(model, rng)
    _, c1, _ = model.forward(noisy, hist, text, lam, 3)
    _, c2, _ = model.forward(noisy, hist, text + rng.standard_normal(text.shape), lam, 3)
    nn = c1.shapes["nn"]
    for layer in c1.layers:
        np.testing.assert_array_equal(layer["x2"][:, nn:], layer["x1"][:, nn:])
    np.testing.assert_array_equal(c1.layers[0]["x2"][:, nn:], c2.layers[0]["x2"][:, nn:])
    assert not np.array_equal(c1.layers[0]["x2"][:, :nn], c2.layers[0]["x2"][:, :nn])


def test_amp_initialized_to_ones():
    model = ToyDiT(DitConfig(), toy_plan())
    for l in range(model.cfg.n_layers):
        assert model.params[f"blocks.{l}.amp"].shape == (4, 8)
        assert np.all(model.params[f"blocks.{l}.amp"] == 1)
    assert all(np.all(np.isfinite(v)) for v in model.params.values())


def test_shape_errors(rng):
    model = ToyDiT(DitConfig(), toy_plan())
    noisy, hist, text, lam = _inputs(model, rng)
    with pytest.raises(DimensionError):
        model(noisy, hist, text, lam, 2)
    with pytest.raises(DimensionError):
        model(noisy, hist[:, :, :3], text, lam, 3)
    with pytest.raises(ValueError):
        model(noisy, hist, text, lam, 4)
    with pytest.raises(ValueError):
        DitConfig(d_model=30, n_heads=4)


def test_hist_token_count():
    assert ToyDiT(DitConfig(), toy_plan()).hist_token_count() == 37


def test_checkpoint_roundtrip(tmp_path, rng):
    model = _perturbed(ToyDiT(DitConfig(), toy_plan()), rng)
    save_checkpoint(model.params, tmp_path / "m.ckpt")
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    check_params(loaded, model.params)
    for k in model.params:
        np.testing.assert_array_equal(loaded[k], model.params[k])


def test_checkpoint_errors(tmp_path):
    model = ToyDiT(DitConfig(), toy_plan())
    other = ToyDiT(DitConfig(d_model=16), toy_plan())
    with pytest.raises(CheckpointError):
        check_params(other.params, model.params)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model.params, path)
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-100])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short")
