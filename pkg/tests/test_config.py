import json
from pathlib import Path

import jsonschema
import pytest

from goalcomp.config import RunConfig, apply_overrides, config_from_dict, load_config, parse_override
from goalcomp.errors import ConfigError, InvalidArgumentError

ROOT = Path(__file__).resolve().parent.parent
SCHEMA = json.loads((ROOT / "docs" / "config.schema.json").read_text())


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.n == 8 and cfg.epochs == [50, 50, 100] and cfg.lr == 0.01
    assert RunConfig().validate(sweep=True).cr_list == [2, 4, 8]


def test_toy_config_matches_schema_and_validates():
    data = json.loads((ROOT / "configs" / "toy.json").read_text())
    jsonschema.validate(data, SCHEMA)
    cfg = config_from_dict(data).validate(sweep=True)
    assert (cfg.S, cfg.d, cfg.C, cfg.dataset.n_samples) == (2, 16, 4, 4000)


def test_resolved_config_matches_schema():
    jsonschema.validate(RunConfig().to_dict(), SCHEMA)


def test_schema_rejects_unknown_key():
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate({"sed": 1}, SCHEMA)


def test_overrides_dotted_and_json_typed():
    data = apply_overrides({"dataset": {"kind": "synth"}}, ["dataset.noise=0.25", "epochs=[1,2,3]", "output_dir=runs/x"])
    assert data == {"dataset": {"kind": "synth", "noise": 0.25}, "epochs": [1, 2, 3], "output_dir": "runs/x"}
    assert parse_override("widths.fusion=[8, 4]") == ("widths.fusion", [8, 4])
    with pytest.raises(ConfigError):
        parse_override("no-equals")
    with pytest.raises(ConfigError):
        apply_overrides({"seed": 1}, ["seed.x=2"])


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="dataset.colour"):
        config_from_dict({"dataset": {"colour": 1}})
    with pytest.raises(ConfigError, match="'sed'"):
        config_from_dict({"sed": 1})


def test_budget_violation_names_key_and_rule():
    with pytest.raises(ConfigError, match=r"n <= R") as err:
        RunConfig(d=16, R=4, cr=2).validate()
    assert err.value.key == "cr"
    assert isinstance(err.value, InvalidArgumentError)
    with pytest.raises(ConfigError) as err:
        RunConfig(d=16, R=4, cr=4, cr_list=[4, 2]).validate(sweep=True)
    assert err.value.key == "cr_list"


@pytest.mark.parametrize(
    "kw, key",
    [
        ({"epochs": [1, 1]}, "epochs"),
        ({"epochs": [1, 0, 1]}, "epochs"),
        ({"lr": 0}, "lr"),
        ({"C": 1}, "C"),
        ({"seed": -1}, "seed"),
        ({"seed": 2**64}, "seed"),
        ({"cr": 0.5}, "cr"),
        ({"batch_size": 0}, "batch_size"),
    ],
)
def test_validation_errors(kw, key):
    with pytest.raises(ConfigError) as err:
        RunConfig(**kw).validate()
    assert err.value.key == key


def test_dataset_validation():
    with pytest.raises(ConfigError, match="dataset.kind"):
        config_from_dict({"dataset": {"kind": "csv"}}).validate()
    with pytest.raises(ConfigError, match="dataset.images"):
        config_from_dict({"S": 2, "C": 11, "dataset": {"kind": "idx_pairs"}}).validate()
    with pytest.raises(ConfigError, match="dataset.path"):
        config_from_dict({"dataset": {"kind": "dset"}}).validate()
    with pytest.raises(ConfigError, match="split"):
        config_from_dict({"split": {"train": 0.9, "test": 0.2}}).validate()


def test_load_config_file_overrides_and_seed(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 5, "d": 8, "R": 8}))
    cfg = load_config(p, ["cr=4"], seed=11)
    assert (cfg.seed, cfg.d, cfg.cr, cfg.n) == (11, 8, 4, 2)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(bad)
    bad.write_text("[1]")
    with pytest.raises(ConfigError, match="object"):
        load_config(bad)


def test_to_json_round_trips():
    cfg = RunConfig(seed=7, cr=4)
    back = config_from_dict(json.loads(cfg.to_json()))
    assert back == cfg
