import pytest

from motionbox.config import Config, ConfigError, config_from_dict, dump_config, load_config


def test_defaults():
    cfg = load_config()
    assert cfg == Config()
    assert cfg.run.train.lr == 0.01 and cfg.run.train.momentum == 0.9
    assert cfg.run.train.weight_decay == 1e-4 and cfg.run.train.grad_clip == 10.0
    assert cfg.run.train.iterations == 5000 and cfg.run.train.batch_size == 8
    assert cfg.run.supervision.tau_flow == 0.6 and cfg.run.supervision.theta_flow == 0.5
    assert cfg.run.supervision.kernel_size == 3 and cfg.run.supervision.dilation == 1


def test_round_trip(tmp_path):
    cfg = config_from_dict(
        {
            "scene": {"height": 48, "width": 48, "camouflage": True, "camera_pan": [1, 0]},
            "model": {"widths": [4, 8, 8], "fusion": {"mask_fusion": "sum"}},
            "train": {"iterations": 10},
        },
        env={},
    )
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(cfg))
    assert load_config(str(p), env={}) == cfg
    assert cfg.scene.camera_pan == (1, 0) and cfg.run.model.widths == (4, 8, 8)


@pytest.mark.parametrize(
    "doc,name",
    [
        ({"train": {"itertions": 5}}, "itertions"),
        ({"trainig": {}}, "trainig"),
        ({"model": {"fusion": {"mode": "max"}}}, "mode"),
    ],
)
def test_unknown_keys_named(doc, name):
    with pytest.raises(ConfigError, match=f"'{name}'"):
        config_from_dict(doc, env={})


def test_invalid_values():
    with pytest.raises(ConfigError):
        config_from_dict({"supervision": {"kernel_size": 4}}, env={})
    with pytest.raises(ConfigError):
        config_from_dict({"train": []}, env={})


def test_seed_env_overrides_both():
    cfg = config_from_dict({"scene": {"seed": 3}}, env={"MSW_SEED": "11"})
    assert cfg.scene.seed == 11 and cfg.run.train.seed == 11
    with pytest.raises(ConfigError):
        config_from_dict({}, env={"MSW_SEED": "x"})


def test_bad_yaml(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("train: [1,\n")
    with pytest.raises(ConfigError):
        load_config(str(p), env={})
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(str(p), env={})
