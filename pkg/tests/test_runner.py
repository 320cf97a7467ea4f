import json

import numpy as np
import pytest

from pamlab import runner
from pamlab.runner import ConfigError, SeedBook, parse_config, run, seed_derive

SMALL_SPECTRUM = """
[run]
experiment = spectrum
n_seeds = 2
[geometry]
L = 2
h = 0.5
eps = 0.5
[physics]
K = 3
"""


class TestConfig:
    def test_defaults_per_experiment(self):
        cfg = parse_config("", {"experiment": "fk-compare"})
        assert (cfg.L, cfg.h, cfg.t) == (4.0, 0.125, 0.5)

    def test_unknown_key_and_section(self):
        with pytest.raises(ConfigError):
            parse_config("[geometry]\nsize = 3\n", {"experiment": "spectrum"})
        with pytest.raises(ConfigError):
            parse_config("[extra]\na = 1\n", {"experiment": "spectrum"})

    def test_bad_values(self):
        with pytest.raises(ConfigError):
            parse_config("[geometry]\nL = 3\nh = 0.7\n", {"experiment": "spectrum"})
        with pytest.raises(ConfigError):
            parse_config("[geometry]\nd = 4\n", {"experiment": "spectrum"})
        with pytest.raises(ConfigError):
            parse_config("[run]\nsave_fields = maybe\n", {"experiment": "spectrum"})
        with pytest.raises(ConfigError):
            parse_config("not an ini", {"experiment": "spectrum"})

    def test_experiment_required_and_consistent(self):
        with pytest.raises(ConfigError):
            parse_config("")
        with pytest.raises(ConfigError):
            parse_config(SMALL_SPECTRUM, {"experiment": "tails"})
        with pytest.raises(ConfigError):
            parse_config("", {"experiment": "nope"})

    def test_ini_round_trip(self):
        cfg = parse_config(SMALL_SPECTRUM)
        again = parse_config(cfg.to_ini())
        assert again == cfg and again.digest == cfg.digest
        assert parse_config(SMALL_SPECTRUM, {"seed": 5}).digest != cfg.digest


class TestSeeds:
    def test_empty_labels(self):
        assert seed_derive(42, []) == 42

    def test_deterministic_and_distinct(self):
        assert seed_derive(1, ["a", 3]) == seed_derive(1, ["a", 3])
        assert seed_derive(1, ["a", 3]) != seed_derive(1, ["a", 4])
        assert seed_derive(1, ["a", 3]) != seed_derive(2, ["a", 3])
        assert seed_derive(1, ["3"]) != seed_derive(1, [3])

    def test_no_collisions(self):
        seeds = {seed_derive(0, ("probe", i)) for i in range(10**6)}
        assert len(seeds) == 10**6

    def test_seedbook_rejects_reuse(self):
        book = SeedBook(7)
        s = book.derive("x", 1)
        assert s == seed_derive(7, ("x", 1))
        with pytest.raises(ValueError):
            book.derive("x", 1)


class TestRun:
    def test_deterministic_tables(self):
        cfg = parse_config(SMALL_SPECTRUM)
        a, b = run(cfg), run(cfg)
        assert a.failed is None and a.passed
        assert {k: t.to_csv() for k, t in a.tables.items()} == {k: t.to_csv() for k, t in b.tables.items()}

    def test_threads_do_not_change_results(self):
        cfg = parse_config(SMALL_SPECTRUM)
        a, b = run(cfg, threads=1), run(cfg, threads=2)
        assert {k: t.to_csv() for k, t in a.tables.items()} == {k: t.to_csv() for k, t in b.tables.items()}

    def test_failure_is_recorded(self, tmp_path, monkeypatch):
        def boom(*args):
            raise RuntimeError("broken module")

        monkeypatch.setitem(runner.DISPATCH, "spectrum", boom)
        rec = run(parse_config(SMALL_SPECTRUM))
        assert not rec.passed and "broken module" in rec.failed
        folder = runner.persist(rec, tmp_path)
        assert (folder / "FAILED").exists()
        assert json.loads((folder / "record.json").read_text())["failed"]

    def test_persist_layout(self, tmp_path):
        cfg = parse_config(SMALL_SPECTRUM)
        folder = runner.persist(run(cfg), tmp_path)
        assert folder.name == f"spectrum-{cfg.digest[:12]}"
        assert parse_config((folder / "config.ini").read_text()) == cfg
        assert not (folder / "FAILED").exists()
        assert any(p.suffix == ".csv" for p in folder.iterdir())


class TestCLI:
    def test_exit_zero_and_folder(self, tmp_path, capsys):
        cfgfile = tmp_path / "c.ini"
        cfgfile.write_text(SMALL_SPECTRUM)
        code = runner.main(["spectrum", "--config", str(cfgfile), "--out", str(tmp_path / "o")])
        out = capsys.readouterr().out
        assert code == 0 and "PASS" in out
        assert len(list((tmp_path / "o").iterdir())) == 1

    def test_config_error_exit_one(self, tmp_path, capsys):
        cfgfile = tmp_path / "c.ini"
        cfgfile.write_text("[geometry]\nbogus = 1\n")
        assert runner.main(["spectrum", "--config", str(cfgfile)]) == 1
        assert "bogus" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert runner.main(["spectrum", "--config", str(tmp_path / "none.ini")]) == 1

    def test_invariant_failure_exit_two(self, tmp_path, monkeypatch):
        def bad(cfg, rec, seeds, threads):
            rec.check("always false", False, 1.0)

        monkeypatch.setitem(runner.DISPATCH, "spectrum", bad)
        assert runner.main(["spectrum", "--out", str(tmp_path)]) == 2

    def test_output_root_precedence(self, tmp_path, monkeypatch):
        cfgfile = tmp_path / "c.ini"
        cfgfile.write_text(SMALL_SPECTRUM.replace("n_seeds = 2", f"n_seeds = 2\nout = {tmp_path / 'cfg'}"))
        monkeypatch.delenv(runner.OUT_ENV, raising=False)
        runner.main(["spectrum", "--config", str(cfgfile)])
        assert (tmp_path / "cfg").exists()
        monkeypatch.setenv(runner.OUT_ENV, str(tmp_path / "env"))
        runner.main(["spectrum", "--config", str(cfgfile)])
        assert (tmp_path / "env").exists()
        runner.main(["spectrum", "--config", str(cfgfile), "--out", str(tmp_path / "flag")])
        assert (tmp_path / "flag").exists()
        assert len(list((tmp_path / "env").iterdir())) == 1

    def test_constants_pipeline(self, tmp_path, capsys):
        cfgfile = tmp_path / "c.ini"
        cfgfile.write_text("[run]\nexperiment = constants\n[physics]\nkappa_N = 200\n")
        code = runner.main(["constants", "--config", str(cfgfile), "--out", str(tmp_path)])
        out = capsys.readouterr().out
        assert code == 0, out
        folder = next(tmp_path.glob("constants-*"))
        assert (folder / "record.json").exists()
