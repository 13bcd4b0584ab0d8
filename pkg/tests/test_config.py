import pytest

from filmrestore.config import RunConfig, load_config, parse_config_text
from filmrestore.errors import ConfigurationError


def test_defaults_and_parsing(tmp_path):
    cfg = RunConfig()
    assert cfg.T == 1000 and cfg.alpha_p == 1.0 and cfg.alpha_d == 81.0 and cfg.sampler_steps == 20
    p = tmp_path / "a.cfg"
    p.write_text("# comment\nseed = 5\nkv_cache = false  # trailing\n\nlr = 3e-4\n")
    cfg = load_config(p, {"frames": "12"})
    assert (cfg.seed, cfg.kv_cache, cfg.lr, cfg.frames) == (5, False, 3e-4, 12)
    assert cfg.stage_lr(1) == 3e-4
    assert parse_config_text(cfg.dump()) == {k: str(v) for k, v in cfg.items()}


@pytest.mark.parametrize("bad", [{"patch_size": 0}, {"overlap_pixels": 32}, {"stage": 3}, {"seed": "x"},
                                 {"unknown": 1}, {"ae_crop": 6}, {"alpha_d": -1}, {"sampler_steps": 2000},
                                 {"defect_weighting": "snr"}])
def test_rejects_bad_values(bad):
    with pytest.raises(ConfigurationError):
        RunConfig(bad)


def test_missing_file_and_bad_line(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "nope.cfg")
    with pytest.raises(ConfigurationError):
        parse_config_text("just words")


def test_default_stage_rates():
    cfg = RunConfig()
    assert cfg.stage_lr(1) == 1e-4 and cfg.stage_lr(2) == 5e-5
