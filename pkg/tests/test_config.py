import pytest
from hypothesis import given, strategies as st

from m2hx.config import DOCS, SEED_ENV, Config, ConfigError, echo, parse_config, parse_text, schema


def test_defaults_documented():
    assert set(schema()) == set(DOCS)


def test_echo_round_trip():
    cfg = parse_text("train.steps = 7\nctm.enabled = false\nbackbone.tap_layers = 1,3,5,7\n", env={})
    assert parse_text(echo(cfg), env={}) == cfg


def test_echo_with_docs_parses():
    assert parse_text(echo(Config(), docs=True), env={}) == Config()


@given(st.integers(1, 10_000), st.booleans(), st.sampled_from(["f32", "f64"]))
def test_round_trip_property(steps, msca, dtype):
    cfg = parse_text(f"train.steps={steps}\nmsca.enabled={str(msca).lower()}\ntrain.dtype={dtype}", env={})
    assert parse_text(echo(cfg), env={}) == cfg


def test_unknown_key():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_text("train.stpes = 3", env={})


def test_duplicate_key():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_text("train.steps = 3\ntrain.steps = 4", env={})


def test_bad_value():
    with pytest.raises(ConfigError, match="train.steps"):
        parse_text("train.steps = many", env={})


def test_cross_field_error_names_both_keys():
    with pytest.raises(ConfigError) as info:
        parse_text("heads.depth.d_min = 9", env={})
    assert "heads.depth.d_min" in str(info.value) and "heads.depth.d_max" in str(info.value)


def test_image_size_cross_check():
    with pytest.raises(ConfigError, match="backbone.image_size"):
        parse_text("data.image_size = 32\ndata.max_side = 20", env={})


def test_precedence(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("train.steps = 5  # file value\ntrain.lr = 0.01\n")
    cfg = parse_config(path, ["--train.steps=9"], env={SEED_ENV: "3"})
    assert cfg.train.steps == 9 and cfg.train.lr == 0.01
    assert cfg.train.seed == 3 and cfg.data.seed == 3


def test_env_seed_does_not_override_file():
    cfg = parse_text("train.seed = 11", env={SEED_ENV: "3"})
    assert cfg.train.seed == 11 and cfg.data.seed == 3


def test_renamed_keys():
    cfg = parse_text("rgm.register_feed.enabled = false\nheads.sem.num_classes = 5", env={})
    assert cfg.rgm.register_feed is False and cfg.heads.num_classes == 5


def test_missing_file():
    with pytest.raises(ConfigError):
        parse_config("/nonexistent/config.txt", env={})


def test_model_config_tasks():
    cfg = parse_text("train.tasks = sem,depth", env={})
    assert cfg.model_config().tasks == ("sem", "depth")
