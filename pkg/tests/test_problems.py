from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rwfbsde.errors import ConfigurationError, DomainError, NoReferenceError, RegistryError, ValidationError
from rwfbsde.problems import (
    ProblemSpec,
    ReferenceKind,
    bachelier_call,
    builtin_problem,
    load_problem_config,
    reference_solution,
    registry_names,
    validate_problem,
)

EXACT = ["brownian-identity", "brownian-square", "exp-diffusion", "discounted-bond"]


def _zero(t, x, y, z):
    return np.zeros(np.broadcast(t, x, y, z).shape)


def test_registry_lists_all_problems():
    assert set(registry_names()) == {
        "brownian-identity", "brownian-square", "exp-diffusion",
        "discounted-bond", "lipschitz-call", "sine-coeffs",
    }


def test_brownian_identity_fields():
    p = builtin_problem("brownian-identity", {"T": 1.0})
    x = np.linspace(-3, 3, 7)
    assert np.all(p.b(0.3, x) == 0) and np.all(p.sigma(0.3, x) == 1)
    assert np.all(p.f(0.3, x, x, x) == 0)
    assert np.array_equal(p.g(x), x)
    y, z = reference_solution(p, 0.4, x)
    assert np.array_equal(y, x) and np.all(z == 1.0)


def test_brownian_square_reference():
    p = builtin_problem("brownian-square", {"T": 1.0})
    y, z = reference_solution(p, 0.0, 2.0)
    assert y == pytest.approx(5.0, abs=1e-15)
    assert z == pytest.approx(4.0, abs=1e-15)


def test_discounted_bond_reference():
    p = builtin_problem("discounted-bond", {"r": 0.05, "T": 1.0})
    for x in (-4.0, 0.0, 3.3):
        y, z = reference_solution(p, 0.0, x)
        assert y == pytest.approx(math.exp(-0.05), abs=1e-15)
        assert z == 0.0
    assert p.f(0.0, 0.0, 2.0, 0.0) == pytest.approx(-0.1)


@pytest.mark.parametrize("name", ["brownian-identity", "brownian-square", "exp-diffusion",
                                  "discounted-bond", "lipschitz-call"])
def test_terminal_condition(name):
    p = builtin_problem(name)
    x = np.random.default_rng(1).uniform(-3, 3, 100)
    y, z = reference_solution(p, p.T, x)
    assert np.allclose(y, p.g(x), atol=1e-10, rtol=0)
    if name != "lipschitz-call":
        assert np.allclose(z, p.sigma(p.T, x) * p.g_prime(x), atol=1e-10, rtol=0)


@pytest.mark.parametrize("name", EXACT)
def test_exact_reference_bit_exact_at_horizon(name):
    p = builtin_problem(name)
    assert p.reference.kind == ReferenceKind.EXACT
    x = np.random.default_rng(2).uniform(-3, 3, 100)
    assert np.array_equal(np.asarray(p.reference.y(p.T, x), float), np.asarray(p.g(x), float))


@pytest.mark.parametrize("name", EXACT)
def test_exact_reference_z_is_sigma_times_gradient(name):
    p = builtin_problem(name)
    rng = np.random.default_rng(3)
    t = rng.uniform(0, p.T, 50)
    x = rng.uniform(-2, 2, 50)
    step = 1e-5
    ux = (p.reference.y(t, x + step) - p.reference.y(t, x - step)) / (2 * step)
    z = p.reference.z(t, x)
    assert np.all(np.abs(z - p.sigma(t, x) * ux) <= 1e-6 * np.maximum(1.0, np.abs(z)))


def test_lipschitz_call_quadrature_matches_bachelier():
    p = builtin_problem("lipschitz-call", {"K": 0.2, "s": 1.0})
    assert p.reference.kind == ReferenceKind.QUADRATURE
    t = np.array([0.0, 0.3, 0.9])
    x = np.array([-1.0, 0.2, 1.5])
    y, z = reference_solution(p, t, x)
    yb, zb = bachelier_call(t, x, p.T, 0.2, 1.0)
    assert np.allclose(y, yb, atol=1e-12, rtol=0)
    assert np.allclose(z, zb, atol=1e-12, rtol=0)


def test_reference_is_deterministic():
    p = builtin_problem("exp-diffusion")
    a = reference_solution(p, 0.25, np.linspace(-1, 1, 11))
    b = reference_solution(p, 0.25, np.linspace(-1, 1, 11))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_unknown_name_lists_valid_names():
    with pytest.raises(RegistryError) as info:
        builtin_problem("heston")
    for name in registry_names():
        assert name in str(info.value)


def test_ellipticity_violating_params_rejected():
    with pytest.raises(ValidationError):
        builtin_problem("lipschitz-call", {"s": 0.0})
    with pytest.raises(ValidationError):
        builtin_problem("exp-diffusion", {"s": -1.0})


def test_missing_reference_is_explicit():
    base = builtin_problem("brownian-identity")
    bare = ProblemSpec(name="bare", T=1.0, b=base.b, sigma=base.sigma, f=base.f, g=base.g)
    with pytest.raises(NoReferenceError):
        reference_solution(bare, 0.0, 0.0)


def test_time_beyond_horizon_rejected():
    with pytest.raises(DomainError):
        reference_solution(builtin_problem("brownian-square"), 1.5, 0.0)


def test_validate_constant_coefficients_pass():
    assert validate_problem(builtin_problem("brownian-identity"), probes=1000, seed=0).passed


def test_validate_flags_degenerate_volatility():
    base = builtin_problem("brownian-identity")
    p = ProblemSpec(
        name="linear-vol", T=1.0, b=base.b, sigma=lambda t, x: np.asarray(x, float) * np.ones(np.shape(t)),
        f=_zero, g=base.g, delta=0.1,
    )
    report = validate_problem(p, probes=1000, seed=0)
    assert not report.passed
    assert any(v.check == "ellipticity" for v in report.violations)
    assert report.as_dict()["pass"] is False


def test_validate_sine_coeffs_pass():
    p = builtin_problem("sine-coeffs")
    assert p.reference.kind == ReferenceKind.PDE
    assert validate_problem(p, probes=1000, seed=0).passed


def test_validate_flags_wrong_derivative():
    base = builtin_problem("brownian-square")
    p = ProblemSpec(
        name="bad-derivative", T=1.0, b=base.b, sigma=base.sigma, f=base.f, g=base.g,
        b_x=base.b_x, sigma_x=base.sigma_x, g_prime=lambda x: 3.0 * np.asarray(x, float),
    )
    report = validate_problem(p, probes=200, seed=0)
    assert any(v.check == "derivative:g'" for v in report.violations)


def test_validate_rejects_zero_probes():
    with pytest.raises(ValidationError):
        validate_problem(builtin_problem("brownian-identity"), probes=0)


@pytest.mark.parametrize("name", ["brownian-square", "exp-diffusion", "discounted-bond", "lipschitz-call"])
def test_registry_derivatives_match_central_differences(name):
    assert validate_problem(builtin_problem(name), probes=100, seed=5).passed


def test_invalid_horizon_rejected():
    with pytest.raises(ValidationError):
        builtin_problem("brownian-square", {"T": 0.0})


def test_load_problem_config(tmp_path):
    path = tmp_path / "problem.json"
    path.write_text(json.dumps({"problem": "brownian-square", "params": {"T": 2.0}}))
    p = load_problem_config(path)
    assert p.name == "brownian-square" and p.T == 2.0
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_problem_config(bad)


def test_sine_coeffs_reference_from_pde():
    p = builtin_problem("sine-coeffs")
    x = np.array([-0.5, 0.0, 0.7])
    y, z = reference_solution(p, p.T, x)
    assert np.allclose(y, p.g(x), atol=1e-10)
    y0, z0 = reference_solution(p, 0.0, x)
    assert np.all(np.isfinite(y0)) and np.all(np.isfinite(z0))


@settings(max_examples=50, deadline=None)
@given(t=st.floats(0.0, 1.0), x=st.floats(-10.0, 10.0))
def test_brownian_square_closed_form(t, x):
    y, z = reference_solution(builtin_problem("brownian-square"), t, x)
    assert y == pytest.approx(x * x + 1.0 - t, rel=1e-12, abs=1e-12)
    assert z == pytest.approx(2 * x, rel=1e-12, abs=1e-12)
