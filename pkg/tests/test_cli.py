import io
import json
import subprocess
import sys

import numpy as np
import pytest

from fkd import config as config_mod
from fkd import label_store as ls
from fkd.cli import bench_counts, estimate_rows, main
from fkd.train import read_metrics

TINY = {
    "world": {"seed": 1, "num_images": 8, "image_size": 16, "num_classes": 4},
    "teacher": {"seed": 1, "num_classes": 4, "resolution": 6},
    "crop": {"resolution": 6},
    "labels": {"mode": "full", "num_crops": 4, "seed": 2},
    "train": {"batch_size": 8, "crops_per_image": 2, "passes": 2, "hidden": 8, "seed": 0},
    "analysis": {"scenario": {"num_images": 4, "crops_per_image": 4}},
    "bench": {"batch_size": 8, "crops": [1, 2, 4, 8]},
}


def run(*argv):
    out = io.StringIO()
    code = main(list(argv), out=out)
    return code, out.getvalue()


@pytest.fixture
def cfg_file(tmp_path):
    data = json.loads(json.dumps(TINY))
    data["paths"] = {"store": str(tmp_path / "store"), "output": str(tmp_path / "run")}
    path = tmp_path / "run.json"
    path.write_text(json.dumps(data))
    return path


def store_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


class TestGenerate:
    def test_minimal_store_replays(self, tmp_path, cfg_file):
        code, out = run("generate", "--config", str(cfg_file), "--set", "labels.num_crops=1")
        assert code == 0 and "bytes written" in out
        f = ls.read_label_file(tmp_path / "store/labels/img000000.fkdl")
        assert len(f) == 1

    def test_deterministic(self, tmp_path, cfg_file):
        run("generate", "--config", str(cfg_file))
        first = store_bytes(tmp_path / "store")
        run("generate", "--config", str(cfg_file))
        assert store_bytes(tmp_path / "store") == first

    def test_run_metadata_round_trips(self, tmp_path, cfg_file):
        run("generate", "--config", str(cfg_file))
        effective = config_mod.load(cfg_file)
        assert config_mod.load(tmp_path / "store/run.json") == effective


class TestTrain:
    def test_oracle_matches(self, tmp_path, cfg_file):
        run("generate", "--config", str(cfg_file))
        assert run("train", "--config", str(cfg_file))[0] == 0
        assert run("train", "--config", str(cfg_file), "--oracle")[0] == 0
        a = read_metrics(tmp_path / "run/metrics.csv")
        b = read_metrics(tmp_path / "run/oracle_metrics.csv")
        assert [r["loss"] for r in a] == [r["loss"] for r in b]

    def test_lr_zero_keeps_weights(self, tmp_path, cfg_file):
        run("generate", "--config", str(cfg_file))
        run("train", "--config", str(cfg_file), "--set", "train.base_lr=0", "--stop-after", "0")
        init = np.load(tmp_path / "run/checkpoint.npz")["theta"]
        run("train", "--config", str(cfg_file), "--set", "train.base_lr=0")
        assert np.array_equal(np.load(tmp_path / "run/checkpoint.npz")["theta"], init)

    def test_resume(self, tmp_path, cfg_file):
        run("generate", "--config", str(cfg_file))
        run("train", "--config", str(cfg_file))
        full = (tmp_path / "run/metrics.csv").read_text()
        run("train", "--config", str(cfg_file), "--stop-after", "1")
        ckpt = tmp_path / "mid.npz"
        (tmp_path / "run/checkpoint.npz").rename(ckpt)
        run("train", "--config", str(cfg_file), "--resume", str(ckpt))
        assert (tmp_path / "run/metrics.csv").read_text() == full

    def test_missing_store(self, cfg_file):
        assert run("train", "--config", str(cfg_file))[0] == 2


class TestEstimate:
    def test_imagenet_scale_parameters(self):
        sizes = {name: size for name, _, size in estimate_rows(1_200_000, 200, 1000)}
        ref = {"full": 0.9 * ls.TIB, "hard": 5.3 * ls.GIB, "smooth": 6.2 * ls.GIB,
               "marginal_smooth@5": 13.3 * ls.GIB, "marginal_renorm@5": 13.3 * ls.GIB,
               "marginal_smooth@10": 22.2 * ls.GIB, "relabel_full": 1.0 * ls.TIB,
               "relabel_top5": 10 * ls.GIB}
        for name, want in ref.items():
            assert abs(sizes[name] - want) / want <= 0.03, name

    def test_zero_images(self):
        code, out = run("estimate", "--n", "0", "--json")
        assert code == 0 and all(v == 0 for v in json.loads(out).values())

    def test_doubling_m(self):
        a = dict((n, s) for n, _, s in estimate_rows(1000, 10, 100))
        b = dict((n, s) for n, _, s in estimate_rows(1000, 20, 100))
        for name in a:
            assert b[name] == (a[name] if name.startswith("relabel") else 2 * a[name])

    def test_table_output(self):
        code, out = run("estimate")
        assert code == 0 and "0.877 TiB" in out and "13.41 GiB" in out


class TestAnalyze:
    def test_demo_flag_and_rerun(self, tmp_path, cfg_file):
        code, out = run("analyze", "--config", str(cfg_file))
        assert code == 0 and "D_RF_gt_others=true" in out
        first = (tmp_path / "run/distance.csv").read_bytes()
        run("analyze", "--config", str(cfg_file))
        assert (tmp_path / "run/distance.csv").read_bytes() == first

    def test_single_source_rejected(self, cfg_file):
        code, _ = run("analyze", "--config", str(cfg_file), "--set", 'analysis.sources=["FKD"]')
        assert code == 1

    def test_missing_student(self, cfg_file):
        code, _ = run("analyze", "--config", str(cfg_file), "--set",
                      'analysis.students=[["S", "/nonexistent.npz"]]')
        assert code == 2

    def test_student_source(self, tmp_path, cfg_file):
        run("generate", "--config", str(cfg_file))
        run("train", "--config", str(cfg_file))
        ckpt = str(tmp_path / "run/checkpoint.npz")
        over = {"analysis.scenario.num_classes": 4, "analysis.scenario.resolution": 6}
        sets = [f"{k}={v}" for k, v in over.items()]
        sets.append(f'analysis.students=[["Student", "{ckpt}"]]')
        args = ["analyze", "--config", str(cfg_file)]
        for s in sets:
            args += ["--set", s]
        code, _ = run(*args)
        assert code == 0
        assert "Student->FKD" in (tmp_path / "run/distance.csv").read_text()


class TestBench:
    def test_counts(self, tmp_path, cfg_file):
        run("generate", "--config", str(cfg_file))
        code, out = run("bench", "--config", str(cfg_file))
        assert code == 0
        lines = out.split("# timings")[0].strip().splitlines()[2:]
        got = [tuple(int(v) for v in line.split(",")) for line in lines]
        assert got == [(m, 0, 8 // m, 8 // m, 8 // m) for m in (1, 2, 4, 8)]

    def test_counts_independent_of_seed(self, tmp_path, cfg_file):
        from fkd.pipeline import DiskStore
        run("generate", "--config", str(cfg_file))

        def counts():
            store = DiskStore(tmp_path / "store")
            store.resolution = 6
            return bench_counts(store, 8, [2, 8])
        a = counts()
        run("generate", "--config", str(cfg_file), "--set", "labels.seed=99")
        b = counts()
        strip = lambda rows: [(r["m"], r["images_loaded"], r["label_files_loaded"]) for r in rows]
        assert strip(a) == strip(b)


class TestInspect:
    def test_dump(self, tmp_path, cfg_file):
        run("generate", "--config", str(cfg_file))
        code, out = run("inspect", str(tmp_path / "store/labels/img000003.fkdl"))
        assert code == 0 and out.startswith("FKDL v1 mode=full C=4 K=0 M=4")

    def test_corrupt_file(self, tmp_path):
        bad = tmp_path / "bad.fkdl"
        bad.write_bytes(b"nope")
        assert run("inspect", str(bad))[0] == 2


class TestConfig:
    def test_unknown_field(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"train": {"bogus": 1}}))
        with pytest.raises(config_mod.ConfigError, match="bogus"):
            config_mod.load(path)
        assert run("generate", "--config", str(path))[0] == 1

    def test_round_trip(self):
        cfg = config_mod.from_dict(TINY)
        assert config_mod.from_dict(json.loads(config_mod.dumps(cfg))) == cfg

    def test_inconsistent_sections(self):
        with pytest.raises(config_mod.ConfigError):
            config_mod.from_dict({"teacher": {"num_classes": 3}})

    def test_bad_override(self):
        with pytest.raises(config_mod.ConfigError):
            config_mod.apply_overrides({}, ["novalue"])


def test_usage_error_exit_code():
    proc = subprocess.run([sys.executable, "-m", "fkd", "nosuchcommand"], capture_output=True)
    assert proc.returncode == 1
