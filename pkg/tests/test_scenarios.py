import numpy as np
import pytest

from csvelab.scenarios import (CONFIG_DIR, ConfigError, apply_overrides, build_scenario,
                               config_hash, load_config, load_scenario, shipped_configs,
                               validate_scenario)


def raw(name="example38_linear"):
    return load_config(CONFIG_DIR / f"{name}.yaml")


def test_shipped_set():
    names = {p.stem for p in shipped_configs()}
    assert {"example38_linear", "example311_quadratic", "nonconvex_demo"} <= names


@pytest.mark.parametrize("path", shipped_configs(), ids=lambda p: p.stem)
def test_shipped_validate(path):
    rep = validate_scenario(load_scenario(path))
    assert rep["passed"], rep["problems"]


def test_overrides_are_yaml_values():
    tree = apply_overrides(raw(), ["sim.N=16", "kernel.H=0.25", "controls.atoms=[[0.0], [1.0]]",
                                   "new.section.key=abc"])
    assert tree["sim"]["N"] == 16 and tree["kernel"]["H"] == 0.25
    assert tree["controls"]["atoms"] == [[0.0], [1.0]] and tree["new"]["section"]["key"] == "abc"


def test_override_syntax():
    with pytest.raises(ConfigError):
        apply_overrides(raw(), ["sim.N"])


def test_missing_keys_all_listed():
    tree = raw()
    del tree["sim"]["N"], tree["sim"]["seed"], tree["optimizer"]["crn_seed"]
    with pytest.raises(ConfigError) as e:
        build_scenario(tree)
    assert set(e.value.problems) == {"missing sim.N", "missing sim.seed", "missing optimizer.crn_seed"}


def test_invalid_values_collected():
    tree = apply_overrides(raw(), ["kernel.H=1.5", "strictify.mode=magic"])
    with pytest.raises(ConfigError) as e:
        build_scenario(tree)
    assert len(e.value.problems) == 2


def test_hash_is_order_free():
    a = {"x": 1, "y": {"b": 2, "a": 3}}
    b = {"y": {"a": 3, "b": 2}, "x": 1}
    assert config_hash(a) == config_hash(b) != config_hash({**a, "x": 2})


def test_linear_family_values():
    sc = load_scenario(CONFIG_DIR / "example38_linear.yaml")
    x = np.array([[2.0]])
    np.testing.assert_allclose(sc.coeffs.b(0.0, x, np.array([0.5])), [[0.5 - 1.0]])
    np.testing.assert_allclose(sc.coeffs.sigma(0.0, x, np.array([0.5])).ravel(), [0.5])
    np.testing.assert_allclose(sc.cost.l(0.0, x, np.array([1.0])), [1.1 + 4.0])


def test_quadratic_family_values():
    sc = load_scenario(CONFIG_DIR / "example311_quadratic.yaml")
    x = np.array([[1.0]])
    u = np.array([0.5])
    np.testing.assert_allclose(sc.coeffs.b(0.0, x, u), [[-0.2 - 0.25]])
    np.testing.assert_allclose(sc.coeffs.sigma(0.0, x, u).ravel(), [0.25])


def test_table_family_loads():
    sc = load_scenario(CONFIG_DIR / "table_demo.yaml")
    x = np.array([[0.0], [1.0]])
    np.testing.assert_allclose(sc.coeffs.b(0.0, x, np.array([1.0])).ravel(), [0.5, -0.5], atol=1e-12)


def test_with_changes_and_restricted():
    sc = load_scenario(CONFIG_DIR / "example38_linear.yaml")
    small = sc.restricted(N=2, n_atoms=3)
    assert small.sim.N == 2 and small.grid.atoms[:, 0].tolist() == [-1.0, 0.0, 1.0]
    assert sc.with_changes(**{"sim.M": 7}).sim.M == 7 and sc.sim.M == 2000


def test_declared_budget_mismatch():
    sc = load_scenario(CONFIG_DIR / "frac_noise.yaml", ["validation.expect_feasible=true"])
    rep = validate_scenario(sc)
    assert not rep["passed"] and not rep["budget_matches_declared"]


def test_coercivity_failure_reported():
    sc = load_scenario(CONFIG_DIR / "example38_linear.yaml", ["cost.C2=0.001"])
    rep = validate_scenario(sc)
    assert not rep["passed"] and any("coercivity" in p for p in rep["problems"])
