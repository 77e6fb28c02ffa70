import json

import pytest

from splitlora.config import ExperimentConfig, load_config, output_dir
from splitlora.errors import ConfigError


def test_defaults_validate_and_roundtrip():
    cfg = ExperimentConfig().validate()
    assert cfg.cuts == [1, 1, 2, 2, 3, 3] and cfg.alpha == 0.5
    assert ExperimentConfig.from_dict(json.loads(cfg.to_json())) == cfg


@pytest.mark.parametrize("doc, field", [
    ({"rounds": 0}, "rounds"),
    ({"agg_every": -1}, "agg_every"),
    ({"alpha": 0}, "alpha"),
    ({"schemes": ["sl", "ring"]}, "schemes"),
    ({"cuts": [1, 9]}, "cuts[1]"),
    ({"policy": "lifo"}, "policy"),
    ({"preset": "nowhere"}, "preset"),
    ({"bogus": 1}, "bogus"),
    ({"model": {"hidden": 30}}, "model"),
    ({"model": {"depth": 3}}, "model.depth"),
])
def test_bad_fields_are_named(doc, field):
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_dict(doc)
    assert exc.value.field == field
    assert str(exc.value).startswith(field)


def test_json_errors_report_line_and_column(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{\n  "rounds": 3,\n  "seed": \n}')
    with pytest.raises(ConfigError, match="line 4 column 1"):
        load_config(p)
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")


def test_overrides_win_over_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"rounds": 3, "seed": 4}))
    cfg = load_config(p, {"rounds": 9, "seed": None})
    assert cfg.rounds == 9 and cfg.seed == 4


def test_inline_preset_and_cost_model_merge():
    doc = {"preset": {"server": {"name": "s", "tflops": 10}, "clients": [{"name": "c", "tflops": 1,
                                                                         "client_layers": 1}]},
           "cost_model": {"num_classes": 2}}
    cfg = ExperimentConfig.from_dict(doc)
    assert cfg.load_preset().server.tflops == 10
    assert cfg.cost_model.hidden == 768 and cfg.cost_model.num_classes == 2


def test_output_dir_precedence(monkeypatch):
    cfg = ExperimentConfig(output_dir="from-config")
    monkeypatch.delenv("SPLITLORA_OUT", raising=False)
    assert str(output_dir(cfg)) == "from-config"
    monkeypatch.setenv("SPLITLORA_OUT", "from-env")
    assert str(output_dir(cfg)) == "from-env"
    assert str(output_dir(cfg, "from-flag")) == "from-flag"
