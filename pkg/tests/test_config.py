import hashlib
from pathlib import Path

import numpy as np
import pytest

from truncllt.config import (ConfigError, ConfigReadError, apply_overrides, build_decomp, build_ensemble,
                             content_hash, evaluation_points, parse_config, validate_config)

CONFIGS = sorted((Path(__file__).parent.parent / "configs").glob("*.toml"))


def test_minimal_config_gets_defaults():
    cfg = parse_config("inline", '[model]\nname = "iid"\n')
    assert cfg.seed == 0 and cfg.scheme.n == 64 and cfg.model.dim == 1
    ens = build_ensemble(cfg)
    assert ens.c_value == 0.5 and ens.p_value == 16


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.stem)
def test_shipped_configs_validate(path):
    parse_config(path)


def test_c_must_be_below_alpha():
    with pytest.raises(ConfigError, match=r"scheme.c"):
        validate_config({"model": {"name": "iid"}, "decomp": {"preset": "heavy"}, "scheme": {"c": 0.6}})


def test_kappa_below_four_rejected():
    with pytest.raises(ConfigError, match="kappa"):
        validate_config({"model": {"name": "iid"}, "decomp": {"preset": "heavy", "kappa": 3}})


def test_all_problems_reported_together():
    raw = {"model": {"name": "iid", "dim": 2}, "scheme": {"x0": [0.0], "n": 0}, "decomp": {"kappa": 3}}
    with pytest.raises(ConfigError) as info:
        validate_config(raw)
    text = "\n".join(info.value.problems)
    assert len(info.value.problems) >= 3
    assert "x0" in text and "kappa" in text and "n" in text


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="colour"):
        validate_config({"model": {"name": "iid", "colour": "red"}})


def test_syntax_error_and_missing_file():
    with pytest.raises(ConfigError, match="syntax"):
        parse_config("inline", "[model\n")
    with pytest.raises(ConfigReadError):
        parse_config("/nonexistent/run.toml")


def test_overrides_parse_toml_values():
    raw = apply_overrides({"model": {"name": "iid"}}, ["scheme.x0=[0,0]", "model.dim=2", "decomp.preset=heavy"])
    assert raw["scheme"]["x0"] == [0, 0] and raw["model"]["dim"] == 2 and raw["decomp"]["preset"] == "heavy"
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


def test_content_hash_is_git_blob_of_canonical_json():
    body = b'{"a":1,"b":[1,2]}'
    assert content_hash({"b": [1, 2], "a": 1}) == hashlib.sha1(b"blob 17\0" + body).hexdigest()
    assert content_hash({"a": np.int64(1), "b": np.array([1, 2])}) == content_hash({"a": 1, "b": [1, 2]})


def test_default_evaluation_points_follow_x0():
    cfg = parse_config("inline", '[model]\nname = "iid"\n[scheme]\nx0 = [1.0]\n')
    pts = evaluation_points(cfg)
    assert pts.shape == (13, 1) and pts[0, 0] == -2.0 and pts[-1, 0] == 4.0


def test_explicit_decomposition_is_built():
    cfg = parse_config("inline", """
[model]
name = "iid"
[decomp]
alpha = 0.5
ball = { center = [0.0], radius = 1.0 }
nu = { kind = "point", params = { at = 0.0 } }
""")
    decomp = build_decomp(cfg)
    assert decomp.alpha == 0.5 and decomp.ball.radius == 1.0 and decomp.nu.kind == "point"
