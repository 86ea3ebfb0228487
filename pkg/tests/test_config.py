import json
from pathlib import Path

import pytest

from eae import config as cfgmod
from eae.config import DEFAULTS, SCHEMA, ConfigError, load, resolve, shipped_configs


class TestResolve:
    def test_defaults_expand(self):
        cfg = resolve({})
        assert cfg["trainer"] == DEFAULTS["trainer"]
        assert cfg["thermostat"]["seed"] == cfg["seed"] == 0

    def test_partial_section_merges(self):
        cfg = resolve({"trainer": {"lr": 0.5}})
        assert cfg["trainer"]["lr"] == 0.5
        assert cfg["trainer"]["ensemble_size"] == DEFAULTS["trainer"]["ensemble_size"]

    def test_overrides(self):
        cfg = resolve({"seed": 3}, seed=7, output_dir="x")
        assert cfg["seed"] == 7 and cfg["output_dir"] == "x"
        assert cfg["thermostat"]["seed"] == 7

    def test_explicit_thermostat_seed_kept(self):
        assert resolve({"thermostat": {"seed": 11}}, seed=2)["thermostat"]["seed"] == 11

    def test_options_replaced_not_merged(self):
        cfg = resolve({"dataset": {"options": {"n": 5}}})
        assert cfg["dataset"]["options"] == {"n": 5}

    def test_does_not_mutate_input(self):
        doc = {"trainer": {"lr": 0.1}}
        resolve(doc)
        assert doc == {"trainer": {"lr": 0.1}}


class TestRejects:
    @pytest.mark.parametrize("doc,where", [
        ({"bogus": 1}, "<root>"),
        ({"trainer": {"kind": "gan"}}, "trainer/kind"),
        ({"thermostat": {"temperature": 0}}, "thermostat/temperature"),
        ({"model": {"latent_dim": 0}}, "model/latent_dim"),
        ({"thermostat": {"extra": 1}}, "thermostat"),
        ({"dataset": {"split": [0.5, 0.5]}}, "dataset/split"),
    ])
    def test_schema(self, doc, where):
        with pytest.raises(ConfigError, match=where):
            resolve(doc)

    def test_split_sum(self):
        with pytest.raises(ConfigError, match="sum to 1"):
            resolve({"dataset": {"split": [0.5, 0.2, 0.2]}})

    def test_burn_in(self):
        with pytest.raises(ConfigError):
            resolve({"trainer": {"ensemble_size": 3, "burn_in_discard": 3}})

    def test_dynamics_needs_eae(self):
        with pytest.raises(ConfigError):
            resolve({"trainer": {"kind": "vae"}, "dynamics": {"enabled": True}})

    def test_missing_file(self, tmp_path):
        path = tmp_path / "nope.json"
        with pytest.raises(ConfigError, match=str(path)):
            load(path)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load(path)

    def test_non_object(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[]")
        with pytest.raises(ConfigError):
            load(path)


class TestShipped:
    def test_all_valid(self):
        configs = shipped_configs()
        assert {"quadratic-toy.json", "mnist-small.json", "oscillator-dynamics.json"} <= set(configs)
        for path in configs.values():
            load(path)

    def test_schema_doc_in_sync(self):
        doc = Path(__file__).parent.parent / "docs" / "config-schema.json"
        assert json.loads(doc.read_text()) == json.loads(json.dumps(SCHEMA))

    def test_dump_roundtrip(self, tmp_path):
        cfg = load(shipped_configs()["gmm-eae.json"])
        cfgmod.dump(cfg, tmp_path / "r.json")
        assert load(tmp_path / "r.json") == cfg
