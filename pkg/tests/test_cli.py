import json

import pytest
from numpy.testing import assert_array_equal

from conviction.cli import main, read_network_checkpoint, thread_cap
from conviction.config import DEFAULTS, apply_override, derive_seed, load_config
from conviction.errors import ConfigError
from conviction.imaging import shepp_logan
from conviction.io import read_cimg, read_csv
from conviction.networks import LOANet


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def dataset(tmp_path):
    d = tmp_path / "data"
    assert run("phantom", "--n", 8, "--count", 5, "--out", d) == 0
    return d


SMALL_NET = ["--set", "model.features=2", "--set", "model.T=2"]


class TestConfig:
    def test_defaults(self):
        cfg = load_config()
        assert cfg["solver"]["a"] == 1e5 and cfg["solver"]["sigma"] == 1e3
        assert cfg["bilevel"]["delta_tol"] == 4.35e-6
        assert cfg == load_config()
        assert cfg is not DEFAULTS

    def test_file_then_overrides_then_seed(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"seed": 3, "mask": {"ratio": 0.25}, "model": {"kind": "loa", "T": 4}}))
        cfg = load_config(p, ["mask.ratio=0.5", "solver.T_max=7"], seed=9)
        assert cfg["seed"] == 9
        assert cfg["mask"] == {"pattern": "radial", "ratio": 0.5}
        assert cfg["solver"]["T_max"] == 7
        assert cfg["model"]["T"] == 4

    @pytest.mark.parametrize("bad", ["solver.nope=1", "model.wings=2", "mask=3", "nokey"])
    def test_unknown_keys(self, bad):
        with pytest.raises(ConfigError):
            load_config(None, [bad])

    def test_loss_weight_override_extends_defaults(self):
        cfg = load_config(None, ['loss.kind="ch3-multi"', "loss.weights.eta=0.5"])
        assert cfg["loss"]["weights"] == {"gamma": 1e-3, "eta": 0.5}

    def test_string_values(self):
        cfg = apply_override(load_config(), "mask.pattern=cartesian-rows")
        assert cfg["mask"]["pattern"] == "cartesian-rows"

    def test_bad_json_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_seed_split(self):
        assert derive_seed(0, "mask") == derive_seed(0, "mask")
        assert derive_seed(0, "mask") != derive_seed(0, "phantom")
        assert derive_seed(0, "mask") != derive_seed(1, "mask")

    def test_thread_cap(self, monkeypatch):
        monkeypatch.setenv("CONVICTION_THREADS", "2")
        assert thread_cap({"threads": 8}) == 2
        monkeypatch.setenv("CONVICTION_THREADS", "x")
        with pytest.raises(ConfigError):
            thread_cap({"threads": 1})


class TestPhantom:
    def test_single_file_pair(self, tmp_path):
        assert run("phantom", "--n", 32, "--count", 1, "--out", tmp_path) == 0
        files = sorted(p.name for p in tmp_path.iterdir())
        assert files == ["phantom_000.cimg", "phantom_000.pgm"]
        assert (tmp_path / "phantom_000.cimg").stat().st_size == 16 + 32 * 32 * 16

    def test_deterministic(self, tmp_path):
        for d in ("a", "b"):
            assert run("phantom", "--n", 16, "--count", 2, "--seed", 4, "--out", tmp_path / d) == 0
        for name in ("phantom_000.cimg", "phantom_001.cimg", "phantom_001.pgm"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_no_jitter_gives_canonical(self, tmp_path):
        assert run("phantom", "--n", 16, "--count", 1, "--set", "image.jitter=0", "--out", tmp_path) == 0
        assert_array_equal(read_cimg(tmp_path / "phantom_000.cimg"), shepp_logan(16))

    def test_too_small(self, tmp_path, capsys):
        assert run("phantom", "--n", 4, "--out", tmp_path) == 2
        assert "at least 8" in capsys.readouterr().err


class TestRecon:
    def test_full_mask_zero_weight(self, tmp_path):
        code = run("recon", "--out", tmp_path, "--set", "image.size=16", "--set", "image.count=1",
                   "--set", 'mask.pattern="full"', "--set", "mask.ratio=1", "--set", "regularizer.weight=0")
        assert code == 0
        m = read_csv(tmp_path / "metrics.csv")[0]
        assert float(m["psnr"]) > 250  # exact up to FFT round-off
        trace = read_csv(tmp_path / "trace_000.csv")
        assert len(trace) == int(m["phases"])
        assert m["terminated_by"] == "tolerance"
        for name in ("mask.pbm", "recon_000.cimg", "recon_000.pgm", "recon_000.png", "zerofilled_000.pgm",
                     "reference_000.pgm", "trace_000.png"):
            assert (tmp_path / name).exists(), name

    def test_untrained_beats_zero_filled(self, tmp_path):
        code = run("recon", "--out", tmp_path, "--set", "image.count=1", "--set", "image.jitter=0")
        assert code == 0
        m = read_csv(tmp_path / "metrics.csv")[0]
        assert float(m["psnr"]) > float(m["zf_psnr"])

    def test_unrolled_untrained(self, tmp_path):
        code = run("recon", "--out", tmp_path, "--set", 'recon.method="unrolled"', "--set", "image.size=16",
                   "--set", "image.count=2", "--set", "recon.report=false", *SMALL_NET)
        assert code == 0
        assert len(read_csv(tmp_path / "metrics.csv")) == 2
        assert len(read_csv(tmp_path / "trace_001.csv")) == 3
        assert not (tmp_path / "recon_000.png").exists()

    def test_missing_inputs(self, tmp_path):
        assert run("recon", "--out", tmp_path, "--set", f'recon.inputs="{tmp_path / "none"}"') == 2


class TestTrain:
    def test_zero_epochs_is_initialisation(self, tmp_path, dataset):
        out = tmp_path / "t0"
        assert run("train", "--out", out, "--set", f'dataset.train="{dataset}"', "--set", "train.epochs=0",
                   *SMALL_NET) == 0
        _, net, params, _, _ = read_network_checkpoint(out / "checkpoint.json")
        cfg = load_config(None, ["model.features=2", "model.T=2"])
        from conviction.config import derive_rng

        init = LOANet(T=2, features=2).init_params(derive_rng(cfg["seed"], "model"))
        assert net == LOANet(T=2, features=2)
        for k in init:
            assert_array_equal(params[k], init[k])
        assert read_csv(out / "history.csv") == []

    def test_history_and_resume(self, tmp_path, dataset):
        common = ["--set", f'dataset.train="{dataset}"', "--set", "train.batch_size=2", "--set", "train.lr=0.01",
                  *SMALL_NET]
        assert run("train", "--out", tmp_path / "full", "--set", "train.epochs=2", *common) == 0
        assert run("train", "--out", tmp_path / "half", "--set", "train.epochs=1", *common) == 0
        ck = tmp_path / "half" / "checkpoint.json"
        assert run("train", "--out", tmp_path / "rest", "--set", "train.epochs=1",
                   "--set", f'train.resume="{ck}"', *common) == 0
        full = read_csv(tmp_path / "full" / "history.csv")
        assert len(full) == 2
        assert read_csv(tmp_path / "rest" / "history.csv") == full
        a = read_network_checkpoint(tmp_path / "full" / "checkpoint.json")[2]
        b = read_network_checkpoint(tmp_path / "rest" / "checkpoint.json")[2]
        for k in a:
            assert_array_equal(a[k], b[k])
        assert (tmp_path / "full" / "history.png").exists()

    def test_empty_dataset(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert run("train", "--out", tmp_path / "o", "--set", f'dataset.train="{tmp_path / "empty"}"') == 2

    def test_bilevel_smoke(self, tmp_path, dataset):
        out = tmp_path / "bl"
        code = run("train-bilevel", "--out", out, "--set", f'dataset.train="{dataset}"', *SMALL_NET,
                   "--set", "bilevel.max_outer=2", "--set", "bilevel.inner_cap=1",
                   "--set", "bilevel.batch_train=2", "--set", "bilevel.batch_val=1")
        assert code == 0
        rows = read_csv(out / "history.csv")
        assert [int(r["outer"]) for r in rows] == [0, 1]
        assert "psnr_task1" in rows[0]
        _, net, params, _, _ = read_network_checkpoint(out / "checkpoint.json")
        assert net.n_tasks == 2 and params["omega"].shape == (2,)


class TestCheck:
    @pytest.mark.parametrize("suite", ["adjoint", "sandwich"])
    def test_suite_passes(self, tmp_path, suite):
        assert run("check", suite, "--out", tmp_path, "--set", "check.cases=10") == 0
        rows = read_csv(tmp_path / f"check_{suite}.csv")
        assert len(rows) == 30 if suite == "sandwich" else len(rows) == 20
        assert all(r["passed"] == "True" for r in rows)

    def test_failure_exit_code(self, tmp_path, monkeypatch):
        from conviction import checks

        def broken(**kw):
            return [checks._row("adjoint", "dot-product", 0, 1.0, 1e-10)]

        monkeypatch.setitem(checks.SUITES, "adjoint", broken)
        assert run("check", "adjoint", "--out", tmp_path) == 1

    def test_unknown_suite(self):
        with pytest.raises(SystemExit) as e:
            run("check", "nonsense")
        assert e.value.code == 2
