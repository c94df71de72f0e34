import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hydroaction.config import (
    DEFAULTS,
    PRESETS,
    build_model,
    build_potential,
    build_profile,
    build_scenario,
    load,
    resolve,
)
from hydroaction.errors import ConfigError


def test_defaults_resolve():
    cfg = resolve()
    assert cfg["model"] == {"kind": "zrp", "g": "linear", "N_max": None}
    assert cfg["lattice"]["L"] == [4, 6, 8]
    assert cfg["grid"]["M"] == 256
    assert cfg["engine"]["n_traj"] == 10000
    assert build_model(cfg).is_linear_zrp
    assert build_profile(cfg)(0.0) == pytest.approx(1.5)
    pot = build_potential(cfg)
    assert pot.V.is_zero and not pot.H.is_zero


def test_sep_preset():
    cfg = resolve(preset="sep")
    assert cfg["model"]["N_max"] == 1
    assert build_model(cfg).kind == "sep"
    assert cfg["lattice"]["L"] == [4, 6, 8, 10]
    assert set(PRESETS) == {"zrp-linear", "sep"}
    with pytest.raises(ConfigError) as exc:
        resolve(preset="nope")
    assert exc.value.pointer == "/preset"


def test_partial_documents_merge_with_defaults():
    cfg = resolve({"time": {"T": 0.1}, "engine": {"seed": 7}})
    assert cfg["time"] == {"T": 0.1, "n_times": DEFAULTS["time"]["n_times"]}
    assert cfg["engine"]["seed"] == 7 and cfg["engine"]["n_traj"] == 10000
    # Fourier blocks are replaced wholesale and then completed
    cfg = resolve({"potential": {"V": {"modes": [{"k": 2, "sin": 0.5}]}}})
    assert cfg["potential"]["V"] == {"modes": [{"k": 2, "sin": 0.5, "cos": 0.0}], "constant": 0.0}
    assert cfg["potential"]["H"] == DEFAULTS["potential"]["H"]


@pytest.mark.parametrize(
    "doc,pointer",
    [
        ({"lattice": {"LL": [4]}}, "/lattice/LL"),
        ({"bogus": 1}, "/bogus"),
        ({"potential": {"V": {"modes": [{"k": 1, "tan": 1.0}]}}}, "/potential/V/modes/0/tan"),
        ({"time": {"T": -1.0}}, "/time/T"),
        ({"grid": {"M": 4}}, "/grid/M"),
        ({"engine": {"mode": "fast"}}, "/engine/mode"),
        ({"model": {"kind": "sep", "g": [1.0, 2.0]}}, "/model/g"),
        ({"model": {"kind": "sep", "N_max": 3}}, "/model/N_max"),
        ({"model": {"kind": "zrp", "N_max": 3}}, "/model/N_max"),
        ({"lattice": {"L": [8, 4]}}, "/lattice/L"),
        ({"lattice": {"d": 2}}, "/potential/H/modes/0/k"),
        ({"lattice": {"d": 2}, "potential": {"H": {"modes": [{"k": [1, 0]}]}}}, "/profile/modes/0/k"),
    ],
)
def test_errors_carry_pointers(doc, pointer):
    with pytest.raises(ConfigError) as exc:
        resolve(doc)
    assert exc.value.pointer == pointer
    assert str(exc.value).startswith(pointer)


def test_load_files(tmp_path):
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"engine": {"seed": 3}}))
    assert load(good)["engine"]["seed"] == 3
    assert load(None, preset="sep")["model"]["kind"] == "sep"
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="malformed"):
        load(bad)
    with pytest.raises(ConfigError, match="cannot read"):
        load(tmp_path / "missing.json")
    with pytest.raises(ConfigError):
        resolve([1, 2])


@settings(max_examples=40, deadline=None)
@given(
    T=st.floats(1e-3, 1.0),
    M=st.integers(8, 512),
    seed=st.integers(0, 2**63),
    amp=st.floats(-1, 1),
    env=st.sampled_from([
        {"kind": "constant", "value": 0.5},
        {"kind": "polynomial", "coeffs": [0.1, 2.0]},
        {"kind": "cosine", "amplitude": 1.0, "omega": 3.0},
    ]),
)
def test_resolved_configs_round_trip(T, M, seed, amp, env):
    doc = {
        "time": {"T": T},
        "grid": {"M": M},
        "engine": {"seed": seed},
        "potential": {"V": {"modes": [{"k": 1, "cos": amp}]}, "envelope": env},
    }
    cfg = resolve(doc)
    again = resolve(json.loads(json.dumps(cfg)))
    assert again == cfg
    sc = build_scenario(cfg)
    assert sc.T == T and sc.M == M and sc.seed == seed
    assert sc.potential.envelope.to_dict() == cfg["potential"]["envelope"]
