import pytest

from partgraph.config import RunConfig, load_config
from partgraph.errors import ConfigError


def test_defaults_are_valid():
    cfg = RunConfig()
    assert cfg.stride == 4 and cfg.C == 0.002 and cfg.workdir == "."


def test_file_then_flags_precedence(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text('count = 7\nnoise = 0.1\nseed = 3\n')
    cfg = load_config(str(p))
    assert (cfg.count, cfg.noise, cfg.seed) == (7, 0.1, 3)
    cfg = load_config(str(p), {"count": 9})
    assert (cfg.count, cfg.noise) == (9, 0.1)


def test_unknown_keys_rejected(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text("strid = 2\n")
    with pytest.raises(ConfigError, match="unknown config keys"):
        load_config(str(p))
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(None, {"strid": 2})


def test_type_checks(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text('count = "ten"\n')
    with pytest.raises(ConfigError, match="expects int"):
        load_config(str(p))
    with pytest.raises(ConfigError, match="expects int"):
        load_config(None, {"stride": True})
    # ints are fine where floats are expected
    assert load_config(None, {"noise": 0}).noise == 0.0


def test_missing_or_broken_file():
    with pytest.raises(ConfigError, match="not found"):
        load_config("/nonexistent/run.toml")


def test_range_validation():
    for bad in ({"stride": 0}, {"C": -1.0}, {"alpha": 1.5},
                {"patch_size": 2}, {"count": 0}, {"num_levels": 0},
                {"width": 8}, {"max_iters": 0}, {"tol_outer": -1e-9}):
        with pytest.raises(ConfigError):
            load_config(None, bad)


def test_mix_table():
    assert load_config(None, {"mix": "0:5,3:5"}).mix_table() == {0: 5, 3: 5}
    assert RunConfig().mix_table() is None
    with pytest.raises(ConfigError, match="bad mix entry"):
        load_config(None, {"mix": "0=5"})


def test_scale_tuple():
    assert load_config(None, {"scales": "0.5,1.0"}).scale_tuple() == (0.5, 1.0)
    assert RunConfig().scale_tuple() is None
    with pytest.raises(ConfigError, match="bad scales"):
        load_config(None, {"scales": "a,b"})
    with pytest.raises(ConfigError, match="positive"):
        load_config(None, {"scales": "-1.0"})


def test_workdir_paths():
    cfg = load_config(None, {"workdir": "/base", "model": "m.json"})
    assert cfg.path("model") == "/base/m.json"
    cfg = RunConfig()
    with pytest.raises(ConfigError, match="missing required path"):
        cfg.path("manifest")


def test_thread_resolution(monkeypatch):
    monkeypatch.delenv("PARTGRAPH_THREADS", raising=False)
    assert RunConfig().resolve_threads() == 1
    assert load_config(None, {"threads": 3}).resolve_threads() == 3
    monkeypatch.setenv("PARTGRAPH_THREADS", "2")
    assert load_config(None, {"threads": 8}).resolve_threads() == 2
    assert RunConfig().resolve_threads() == 2
    monkeypatch.setenv("PARTGRAPH_THREADS", "zero")
    with pytest.raises(ConfigError):
        RunConfig().resolve_threads()
