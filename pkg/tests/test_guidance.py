"""Noise schedule, placement energy, mask activation, guided sampling."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from textground import autodiff as ad
from textground.autodiff import Tensor
from textground.errors import (ConfigError, DataError, GuidanceEmptyError,
                               NumericError, ShapeError)
from textground.guidance import (GuidanceConfig, ToyDenoiser, activate_and_dilate,
                                 build_mask, build_noise_schedule, energy,
                                 guided_latent_update, in_mask_fraction,
                                 resize_guidance, sample_with_guidance)
from textground.nn import ParameterRegistry

from oracles import energy_oracle, fd_gradient, rel_err


def tiny_denoiser(seed=0, channels=3, text_dim=16, width=16, heads=2):
    reg = ParameterRegistry()
    dn = ToyDenoiser(reg, channels, text_dim, np.random.default_rng(seed), width=width, heads=heads)
    return reg, dn


# -- schedule ---------------------------------------------------------------


def test_schedule_endpoints_and_monotone_signal():
    sch = build_noise_schedule(50)
    assert sch.steps == 50
    assert sch.betas[0] == pytest.approx(1e-4, abs=0)
    assert sch.betas[-1] == pytest.approx(0.02, abs=0)
    assert np.all(np.diff(sch.alpha_bars) < 0)
    assert np.all((sch.alpha_bars > 0) & (sch.alpha_bars < 1))


def test_schedule_too_short_rejected():
    with pytest.raises(ConfigError):
        build_noise_schedule(1)


# -- energy -----------------------------------------------------------------


def test_energy_full_mask_is_zero():
    rng = np.random.default_rng(0)
    s = rng.random((16, 3)) + 0.1
    assert energy(Tensor(s), np.ones((4, 4))).item() == 0.0


def test_energy_disjoint_mask_is_one():
    s = np.zeros((16, 3))
    s[:8] = 1.0  # all mass in the top half
    mask = np.zeros((4, 4))
    mask[2:] = 1.0  # mask is the bottom half
    assert energy(Tensor(s), mask).item() == pytest.approx(1.0, abs=0)


def test_energy_uniform_half_mask_is_quarter():
    s = np.ones((16, 3))
    mask = np.zeros((4, 4))
    mask[:2] = 1.0
    assert energy(Tensor(s), mask).item() == pytest.approx(0.25, abs=1e-15)


def test_energy_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        s = rng.random((64, 5)) + 1e-3
        mask = (rng.random((8, 8)) > 0.5).astype(np.float64)
        got = energy(Tensor(s), mask).item()
        assert got == pytest.approx(energy_oracle(s, mask), abs=1e-15)


def test_energy_scale_invariant():
    rng = np.random.default_rng(2)
    s = rng.random((16, 4)) + 0.05
    mask = (rng.random((4, 4)) > 0.4).astype(np.float64)
    base = energy(Tensor(s), mask).item()
    for c in (1e-6, 0.3, 7.0, 1e6):
        assert energy(Tensor(c * s), mask).item() == pytest.approx(base, rel=1e-12)


def test_energy_shape_mismatch():
    with pytest.raises(ShapeError):
        energy(Tensor(np.ones((16, 2))), np.ones((3, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_property_energy_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    s = rng.random((16, 3)) + 1e-9
    mask = (rng.random((4, 4)) > rng.random()).astype(np.float64)
    e = energy(Tensor(s), mask).item()
    assert 0.0 <= e <= 1.0


def test_in_mask_fraction_bounds_and_full():
    rng = np.random.default_rng(3)
    s = rng.random((16, 3)) + 1e-3
    mask = (rng.random((4, 4)) > 0.5).astype(np.float64)
    frac = in_mask_fraction(s, mask)
    assert 0.0 <= frac <= 1.0
    assert in_mask_fraction(s, np.ones((4, 4))) == pytest.approx(1.0, abs=0)


def test_energy_gradient_through_denoiser_matches_fd():
    _, dn = tiny_denoiser(seed=4)
    sch = build_noise_schedule(50)
    rng = np.random.default_rng(5)
    z0 = rng.standard_normal((4, 4, 3))
    la = rng.normal(size=(2, 16))
    mask = np.zeros((4, 4))
    mask[1:3, 1:3] = 1.0

    def objective(leaf: Tensor) -> Tensor:
        _, s_t = dn.forward(leaf, 25, Tensor(la), sch)
        return energy(s_t, mask)

    got = ad.gradient(objective, Tensor(z0)).data

    def scalar(a: np.ndarray) -> float:
        _, s_t = dn.forward(Tensor(a.copy()), 25, Tensor(la), sch)
        return energy(s_t, mask).item()

    want = fd_gradient(scalar, z0.copy())
    assert rel_err(got, want) < 1e-6


# -- mask activation --------------------------------------------------------


def test_activation_threshold_is_strict():
    g = np.array([[1.0, 0.5], [0.2, 0.1]])
    mask = activate_and_dilate(g, beta_frac=0.5, use_dilation=False)
    assert np.array_equal(mask, [[1, 0], [0, 0]])  # 0.5 == threshold stays out


def test_activation_bbox_fills_rectangle():
    g = np.zeros((5, 6))
    g[1, 1] = 1.0
    g[3, 4] = 0.9
    mask = activate_and_dilate(g, beta_frac=0.5, mode="bbox")
    want = np.zeros((5, 6))
    want[1:4, 1:5] = 1.0
    assert np.array_equal(mask, want)


def test_activation_morph_k_square():
    g = np.zeros((5, 5))
    g[2, 2] = 1.0
    mask = activate_and_dilate(g, beta_frac=0.5, mode="morph-k", morph_k=3)
    want = np.zeros((5, 5))
    want[1:4, 1:4] = 1.0
    assert np.array_equal(mask, want)


def test_activation_morph_k_clips_at_border():
    g = np.zeros((4, 4))
    g[0, 0] = 1.0
    mask = activate_and_dilate(g, beta_frac=0.5, mode="morph-k", morph_k=3)
    want = np.zeros((4, 4))
    want[0:2, 0:2] = 1.0
    assert np.array_equal(mask, want)


def test_activation_empty_raises():
    with pytest.raises(GuidanceEmptyError):
        activate_and_dilate(np.ones((3, 3)), beta_frac=1.0)


def test_build_mask_retries_with_fallback_threshold():
    cfg = GuidanceConfig(beta_frac=1.0, retry_beta_frac=0.5, use_dilation=False)
    g = Tensor(np.array([[1.0, 0.6], [0.3, 0.1]]))
    mask = build_mask(g, (2, 2), cfg)
    assert np.array_equal(mask, [[1, 1], [0, 0]])


def test_build_mask_soft_when_activation_off():
    cfg = GuidanceConfig(use_activation=False)
    g = np.array([[1.0, 0.25], [0.5, 0.125]])
    mask = build_mask(Tensor(g), (2, 2), cfg)
    assert np.array_equal(mask, g)


def test_resize_guidance_renormalizes_to_max_one():
    rng = np.random.default_rng(6)
    g = Tensor(rng.random((2, 2)) + 0.1)
    up = resize_guidance(g, (8, 8))
    assert up.shape == (8, 8)
    assert up.data.max() == 1.0
    same = resize_guidance(g, (2, 2))
    assert np.array_equal(same.data, g.data)


def test_guidance_config_validation():
    with pytest.raises(ConfigError):
        GuidanceConfig(eta=-1.0)
    with pytest.raises(ConfigError):
        GuidanceConfig(repeats=0)
    with pytest.raises(ConfigError):
        GuidanceConfig(dilation="blur")
    with pytest.raises(ConfigError):
        GuidanceConfig(beta_frac=0.0)


# -- denoiser ---------------------------------------------------------------


def test_denoiser_shapes_and_row_stochastic_attention():
    _, dn = tiny_denoiser(seed=7)
    sch = build_noise_schedule(50)
    rng = np.random.default_rng(8)
    z = Tensor(rng.standard_normal((4, 6, 3)))
    la = Tensor(rng.normal(size=(3, 16)))
    eps, s_t = dn.forward(z, 10, la, sch)
    assert eps.shape == (4, 6, 3)
    assert s_t.shape == (24, 3)
    assert np.allclose(s_t.data.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(s_t.data > 0)


def test_denoiser_input_validation():
    _, dn = tiny_denoiser(seed=9)
    sch = build_noise_schedule(10)
    rng = np.random.default_rng(10)
    la = Tensor(rng.normal(size=(2, 16)))
    with pytest.raises(ShapeError):
        dn.forward(Tensor(rng.standard_normal((3, 4, 3))), 5, la, sch)  # odd grid
    with pytest.raises(ShapeError):
        dn.forward(Tensor(rng.standard_normal((4, 4, 2))), 5, la, sch)  # wrong channels
    with pytest.raises(DataError):
        dn.forward(Tensor(rng.standard_normal((4, 4, 3))), 5, Tensor(np.zeros((0, 16))), sch)


def test_denoiser_width_heads_mismatch():
    reg = ParameterRegistry()
    with pytest.raises(ConfigError):
        ToyDenoiser(reg, 3, 16, np.random.default_rng(0), width=15, heads=2)


# -- guided update and sampling ---------------------------------------------


def test_guided_update_reduces_energy():
    _, dn = tiny_denoiser(seed=11)
    sch = build_noise_schedule(50)
    rng = np.random.default_rng(12)
    z = rng.standard_normal((8, 8, 3))
    la = Tensor(rng.normal(size=(2, 16)))
    mask = np.zeros((8, 8))
    mask[2:5, 2:5] = 1.0
    cfg = GuidanceConfig(eta=35.0, repeats=3)
    t = 40

    def e_at(a):
        _, s_t = dn.forward(Tensor(a), t, la, sch)
        return energy(s_t, mask).item()

    before = e_at(z)
    after = e_at(guided_latent_update(z, t, mask, dn, la, sch, cfg))
    assert after < before


def sample_setup(seed=13, hw=8):
    _, dn = tiny_denoiser(seed=seed)
    sch = build_noise_schedule(50)
    rng = np.random.default_rng(seed + 1)
    g = np.zeros((hw, hw))
    g[2:5, 2:5] = 1.0
    la = Tensor(rng.normal(size=(2, 16)))
    z0 = np.random.default_rng([seed, 999]).standard_normal((hw, hw, 3))
    return dn, sch, Tensor(g), la, z0


def test_sampling_trace_shape_and_guided_count():
    dn, sch, g, la, z0 = sample_setup()
    cfg = GuidanceConfig(eta=10.0, guided_steps=5, repeats=1)
    z, trace = sample_with_guidance(z0, g, la, sch, cfg, dn, seed=3)
    assert z.shape == z0.shape and np.all(np.isfinite(z))
    assert len(trace.rows) == sch.steps
    assert trace.guided_steps == 5
    guided_rows = [r for r in trace.rows if r[0] < 5]
    assert all(r[1] != r[2] for r in guided_rows)  # update moved the energy
    unguided = [r for r in trace.rows if r[0] >= 5]
    assert all(r[1] == r[2] for r in unguided)


def test_sampling_disabled_guidance_never_updates():
    dn, sch, g, la, z0 = sample_setup()
    cfg = GuidanceConfig(eta=10.0, guided_steps=5, repeats=1, enabled=False)
    _, trace = sample_with_guidance(z0, g, la, sch, cfg, dn, seed=3)
    assert trace.guided_steps == 0
    assert all(r[1] == r[2] for r in trace.rows)


def test_sampling_zero_eta_counts_nothing():
    dn, sch, g, la, z0 = sample_setup()
    cfg = GuidanceConfig(eta=0.0, guided_steps=5, repeats=1)
    _, trace = sample_with_guidance(z0, g, la, sch, cfg, dn, seed=3)
    assert trace.guided_steps == 0


def test_sampling_deterministic_per_seed():
    dn, sch, g, la, z0 = sample_setup()
    cfg = GuidanceConfig(eta=10.0, guided_steps=3, repeats=1)
    za, _ = sample_with_guidance(z0, g, la, sch, cfg, dn, seed=5)
    zb, _ = sample_with_guidance(z0, g, la, sch, cfg, dn, seed=5)
    zc, _ = sample_with_guidance(z0, g, la, sch, cfg, dn, seed=6)
    assert np.array_equal(za, zb)
    assert not np.array_equal(za, zc)


def test_sampling_guided_steps_exceeding_schedule_rejected():
    dn, sch, g, la, z0 = sample_setup()
    cfg = GuidanceConfig(eta=10.0, guided_steps=51, repeats=1)
    with pytest.raises(ConfigError):
        sample_with_guidance(z0, g, la, sch, cfg, dn, seed=3)


def test_sampling_nonfinite_latent_raises():
    dn, sch, g, la, z0 = sample_setup()
    z0 = z0.copy()
    z0[0, 0, 0] = np.nan
    cfg = GuidanceConfig(eta=0.0, guided_steps=0, repeats=1)
    with pytest.raises(NumericError):
        with np.errstate(invalid="ignore", over="ignore"):
            sample_with_guidance(z0, g, la, sch, cfg, dn, seed=3)


def test_trace_lines_format():
    dn, sch, g, la, z0 = sample_setup()
    cfg = GuidanceConfig(eta=10.0, guided_steps=2, repeats=1)
    _, trace = sample_with_guidance(z0, g, la, sch, cfg, dn, seed=3)
    lines = trace.lines().splitlines()
    assert len(lines) == sch.steps
    for ln in lines:
        parts = ln.split("\t")
        assert len(parts) == 4
        assert int(parts[0]) >= 0
        for p in parts[1:]:
            float(p)
