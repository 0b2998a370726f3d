# tests/test_config.py

from __future__ import annotations

import json

import pytest

from attention_reid import __version__
from attention_reid.config import DEFAULTS, RunConfig, env_overrides, flatten, resolve_steps
from attention_reid.errors import ConfigurationError
from attention_reid.models import BatchMode, LossMode, PoolingMode, TapLayer

MICRO = {"backbone.preset": "micro", "data.image_size": "8,8", "train.augment": False}


def _write_toml(tmp_path, text: str):
    path = tmp_path / "run.toml"
    path.write_text(text, encoding="utf-8")
    return path


def test_defaults_resolve_to_the_desk_setup():
    config = RunConfig.resolve(environ={})
    assert config.attention().steps == (2, 4, 8)
    assert config.attention().glimpses == 8
    assert config.loss().margin == 0.3
    assert config.pretrain_optim().eta0 == 0.01
    assert config.train_optim().eta0 == 0.001
    assert config.dataset().train_identities == 20


def test_file_then_environment_then_flags(tmp_path):
    path = _write_toml(tmp_path, "[loss]\nmargin = 0.5\n[attention]\nglimpses = 4\nsteps = [2, 4]\n")
    from_file = RunConfig.resolve(path, environ={})
    assert from_file["loss.margin"] == 0.5
    assert from_file.attention().steps == (2, 4)

    env = {"ATTENTION_REID_LOSS__MARGIN": "0.7"}
    from_env = RunConfig.resolve(path, environ=env)
    assert from_env["loss.margin"] == 0.7

    from_flags = RunConfig.resolve(path, environ=env, overrides={"loss.margin": 0.9, "run.seed": None})
    assert from_flags["loss.margin"] == 0.9
    assert from_flags.seed == 0


def test_process_environment_is_read_by_default(monkeypatch):
    monkeypatch.setenv("ATTENTION_REID_RUN__SEED", "17")
    assert RunConfig.resolve().seed == 17


def test_env_keys_map_to_dotted_names():
    env = {"ATTENTION_REID_OPTIM__E2E__MAX_ITERS": "9", "OTHER": "x"}
    assert env_overrides(env) == {"optim.e2e.max_iters": "9"}


def test_unknown_key_is_rejected(tmp_path):
    path = _write_toml(tmp_path, "[loss]\nmargn = 0.5\n")
    with pytest.raises(ConfigurationError, match="loss.margn"):
        RunConfig.resolve(path, environ={})


def test_malformed_file_is_a_configuration_error(tmp_path):
    path = _write_toml(tmp_path, "[loss\nmargin = ")
    with pytest.raises(ConfigurationError):
        RunConfig.resolve(path, environ={})


@pytest.mark.parametrize(
    "key, value",
    [
        ("loss.margin", "wide"),
        ("train.augment", "maybe"),
        ("attention.glimpses", 2.5),
        ("loss.margin", -1.0),
        ("attention.pooling", "median"),
        ("backbone.preset", "huge"),
        ("attention.steps", "2,9"),
    ],
)
def test_bad_values_are_rejected(key, value):
    with pytest.raises(ConfigurationError):
        RunConfig.resolve(environ={}, overrides={key: value})


def test_image_size_must_fit_the_backbone():
    with pytest.raises(ConfigurationError, match="backbone"):
        RunConfig.resolve(environ={}, overrides={"backbone.preset": "micro"})


def test_small_images_need_augmentation_off():
    with pytest.raises(ConfigurationError, match="augment"):
        RunConfig.resolve(environ={}, overrides={"backbone.preset": "micro", "data.image_size": "8,8"})
    assert RunConfig.resolve(environ={}, overrides=MICRO).backbone().tap_shape() == (2, 2, 4)


@pytest.mark.parametrize("spec, expected", [("all", (1, 2, 3)), ("last", (3,)), ("1, 3", (1, 3))])
def test_step_presets(spec, expected):
    assert resolve_steps(spec, 3) == expected


def test_typed_views_follow_the_flat_keys():
    config = RunConfig.resolve(
        environ={},
        overrides={
            **MICRO,
            "attention.pooling": "max_pool",
            "loss.mode": "triplet",
            "train.batch_mode": "label_shuffle",
            "backbone.tap": "post_conv",
            "train.freeze_backbone": "yes",
        },
    )
    assert config.attention().pooling is PoolingMode.MAX_POOL
    assert config.loss().mode is LossMode.TRIPLET
    assert config.schedule().batch_mode is BatchMode.LABEL_SHUFFLE
    assert config.schedule().regime == "non-end-to-end"
    backbone = config.backbone()
    assert backbone.tap_layer is TapLayer.POST_CONV
    assert backbone.tap_shape() == (4, 4, 4)


def test_hardened_levels_yield_to_explicit_values():
    config = RunConfig.resolve(environ={}, overrides={"data.hardened": True, "data.occlusion_prob": 0.0})
    dataset = config.dataset()
    assert dataset.occlusion_prob == 0.0
    assert dataset.color_shift > DEFAULTS["data.color_shift"]


def test_flatten_nested_tables():
    assert flatten({"a": {"b": 1, "c": {"d": 2}}, "e": 3}) == {"a.b": 1, "a.c.d": 2, "e": 3}


def test_echo_round_trip(tmp_path):
    config = RunConfig.resolve(environ={}, overrides={"run.seed": 4, "loss.margin": 0.25})
    path = config.echo(tmp_path / "run")
    payload = json.loads(path.read_text())
    assert payload["version"] == __version__
    assert payload["seed"] == 4
    assert RunConfig.from_echo(path).values == config.values
