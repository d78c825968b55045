from __future__ import annotations

import json

import pytest

from bestrq_desk.config import (
    PRESETS,
    ConfigError,
    RunConfig,
    dump_config,
    load_config_file,
    parse_override,
    resolve_config,
)


def test_defaults_validate():
    cfg = resolve_config()
    assert cfg.quantizer.n_codebooks == 1
    assert cfg.encoder.vocab == cfg.quantizer.codebook_size
    assert cfg.encoder.input_dim == 80
    assert cfg.loss.w_ce == 1.0 and cfg.loss.w_kl == 0.1


def test_baseline_preset():
    cfg = resolve_config("baseline")
    assert cfg.quantizer.n_codebooks == 1
    assert cfg.quantizer.codebook_size == 8192
    assert cfg.loss.w_kl == 0.0
    assert not cfg.loss.cluster_weighting


def test_proposed_preset():
    cfg = resolve_config("proposed")
    assert cfg.quantizer.n_codebooks == 6
    assert cfg.encoder.n_outputs == 6
    assert cfg.loss.w_kl == 0.1
    assert cfg.loss.cluster_weighting
    assert (cfg.loss.w_primary, cfg.loss.w_secondary) == (2.0, 0.8)


def test_best_single_preset():
    cfg = resolve_config("best-single")
    assert (cfg.quantizer.codebook_size, cfg.quantizer.codebook_dim) == (10240, 32)
    assert cfg.encoder.vocab == 10240


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_every_preset_resolves(name):
    resolve_config(name).validate()


def test_unknown_preset():
    with pytest.raises(ConfigError):
        resolve_config("huge")


def test_unknown_key_and_section_rejected():
    with pytest.raises(ConfigError):
        resolve_config(overrides=["train.stpes=3"])
    with pytest.raises(ConfigError):
        resolve_config(overrides=["optimizer.lr=3"])


def test_override_syntax():
    assert parse_override("train.steps=12") == {"train": {"steps": 12}}
    assert parse_override("loss.cluster_weighting=true") == {"loss": {"cluster_weighting": True}}
    assert parse_override("quantizer.seed=") == {"quantizer": {"seed": None}}
    with pytest.raises(ConfigError):
        parse_override("steps=12")


def test_precedence(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text("train:\n  steps: 50\n  seed: 3\nquantizer:\n  n_codebooks: 3\n", encoding="utf-8")
    cfg = resolve_config(
        "proposed",
        p,
        overrides=["train.steps=70"],
        flags={"train": {"seed": 9, "batch_utterances": None}},
    )
    assert cfg.quantizer.n_codebooks == 3
    assert cfg.train.steps == 70
    assert cfg.train.seed == 9
    assert cfg.train.batch_utterances == 8
    assert cfg.loss.cluster_weighting


def test_json_file_loads(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps({"mask": {"p_start": 0.2}}), encoding="utf-8")
    assert resolve_config(config_path=p).mask.p_start == 0.2


def test_config_file_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config_file(tmp_path / "none.yaml")
    p = tmp_path / "list.yaml"
    p.write_text("- 1\n- 2\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config_file(p)


def test_derived_encoder_key_mismatch():
    with pytest.raises(ConfigError):
        resolve_config(overrides=["encoder.vocab=100"])
    cfg = resolve_config(overrides=["encoder.vocab=8192"])
    assert cfg.encoder.vocab == 8192


@pytest.mark.parametrize(
    "item",
    [
        "encoder.n_heads=5",
        "mask.p_start=1.5",
        "mask.target_mode=some",
        "train.dtype=float16",
        "loss.w_primary=1.0",
        "quantizer.temperature=0",
        "quantizer.stack_factor=2",
        "train.val_fraction=1.0",
    ],
)
def test_invalid_values(item):
    with pytest.raises(ConfigError):
        resolve_config("proposed", overrides=[item])


def test_weight_ratio_checked_only_with_weighting():
    resolve_config("baseline", overrides=["loss.w_primary=1.0"])


def test_dump_round_trips():
    cfg = resolve_config("proposed", overrides=["train.steps=5"])
    assert RunConfig.from_dict(json.loads(dump_config(cfg))) == cfg


def test_quantizer_seed_follows_run_seed():
    assert resolve_config(overrides=["train.seed=13"]).quantizer_seed == 13
    assert resolve_config(overrides=["train.seed=13", "quantizer.seed=4"]).quantizer_seed == 4
