import csv
import json

import pytest

from glarisk import cli

FAST = ["--outer-k", "3", "--inner-k", "3", "--inner-iterations", "1", "--swarm-size", "2",
        "--generations", "1", "--n-models", "3", "--max-iterations", "2000"]


def _read(path):
    return path.read_bytes()


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "data"
    assert cli.main(["synth", "--out", str(d), "--n-patients", "600", "--true-positive-fraction", "0.12",
                     "--seed", "11"]) == 0
    return d


@pytest.fixture(scope="module")
def bench_dir(data_dir):
    out = data_dir.parent / "bench"
    assert cli.main(["benchmark", "--data", str(data_dir), "--out", str(out), "--features", "age_gender",
                     "--learner", "cwsvm", "--seed", "2", *FAST]) == 0
    return out


class TestSynth:
    def test_files_and_manifest(self, data_dir):
        names = {p.name for p in data_dir.iterdir()}
        assert {"patients.csv", "records.jsonl", "labels.csv", "manifest.json"} <= names
        m = json.loads((data_dir / "manifest.json").read_text())
        assert m["command"] == "synth" and m["config"]["seed"] == 11
        assert {"tool_version", "started", "finished", "inputs", "seeds"} <= set(m)

    def test_seed_repeat_identical(self, data_dir, tmp_path):
        again = tmp_path / "again"
        assert cli.main(["synth", "--out", str(again), "--n-patients", "600", "--true-positive-fraction", "0.12",
                         "--seed", "11"]) == 0
        for p in data_dir.iterdir():
            if p.name != "manifest.json":
                assert _read(p) == _read(again / p.name), p.name

    def test_invalid_fraction(self, tmp_path, capsys):
        code = cli.main(["synth", "--out", str(tmp_path / "x"), "--labeled-fraction", "1.5"])
        assert code == 2
        assert "labeled" in capsys.readouterr().err


class TestBenchmark:
    def test_single_row_report(self, bench_dir):
        lines = (bench_dir / "benchmark.tsv").read_text().splitlines()
        assert len(lines) == 2 and lines[1].startswith("age_gender\tcwsvm\t")
        assert lines[1].endswith("3/3")
        assert len(list((bench_dir / "folds").glob("*fold?.json"))) == 3
        assert (bench_dir / "utest.csv").read_text().startswith("fold,U,z,p\n")
        assert json.loads((bench_dir / "manifest.json").read_text())["seeds"]["master_seed"] == 2

    def test_missing_dataset(self, tmp_path):
        assert cli.main(["benchmark", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2

    def test_unknown_feature_set(self, data_dir, tmp_path):
        assert cli.main(["benchmark", "--data", str(data_dir), "--out", str(tmp_path / "o"),
                         "--features", "atc9"]) == 2

    def test_oracle_csv(self, data_dir, tmp_path):
        out = tmp_path / "o"
        assert cli.main(["benchmark", "--data", str(data_dir), "--out", str(out), "--features", "age_gender",
                         "--learner", "cwsvm", "--oracle", *FAST]) == 0
        rows = list(csv.DictReader(open(out / "oracle.csv")))
        assert len(rows) == 3 and all(0 <= float(r["true_auc"]) <= 1 for r in rows)

    def test_config_file_with_override(self, data_dir, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text(f'[benchmark]\ndata = "{data_dir}"\nfeatures = ["age_gender"]\nlearners = ["cwsvm"]\n'
                       'outer-k = 2\ninner-k = 3\ninner-iterations = 1\nswarm-size = 1\ngenerations = 0\n')
        out = tmp_path / "o"
        assert cli.main(["benchmark", "--config", str(cfg), "--out", str(out), "--outer-k", "3"]) == 0
        m = json.loads((out / "manifest.json").read_text())
        assert m["config"]["outer_k"] == 3 and m["config"]["inner_k"] == 3
        bad = tmp_path / "bad.toml"
        bad.write_text("[benchmark]\nno_such_flag = 1\n")
        assert cli.main(["benchmark", "--config", str(bad), "--out", str(out)]) == 2


class TestCurves:
    def _artifact(self, bench_dir):
        return str(sorted((bench_dir / "folds").glob("*fold0.json"))[0])

    def test_equal_betas_identical_files(self, bench_dir, tmp_path):
        out = tmp_path / "c"
        assert cli.main(["curves", "--artifact", self._artifact(bench_dir), "--beta-lo", "0.07",
                         "--beta-up", "0.07", "--out", str(out)]) == 0
        assert _read(out / "roc_lower.csv") == _read(out / "roc_upper.csv")
        assert _read(out / "pr_lower.csv") == _read(out / "pr_upper.csv")

    def test_plot_ready(self, bench_dir, tmp_path):
        out = tmp_path / "c"
        assert cli.main(["curves", "--artifact", self._artifact(bench_dir), "--out", str(out)]) == 0
        rows = list(csv.reader(open(out / "roc_lower.csv")))
        assert rows[0] == ["fpr", "tpr"]
        assert all(len(r) == 2 and all(0 <= float(v) <= 1 for v in r) for r in rows[1:])

    def test_beta_out_of_range(self, bench_dir, tmp_path):
        assert cli.main(["curves", "--artifact", self._artifact(bench_dir), "--beta-up", "1.2",
                         "--out", str(tmp_path / "c")]) == 2


class TestTrainAndImportance:
    def test_full_list_and_groups(self, data_dir, tmp_path):
        model = tmp_path / "m"
        assert cli.main(["train", "--data", str(data_dir), "--features", "atc1_5", "--learner", "bagging",
                         "--n-U", "100", "--C-U", "0.1", "--n-models", "3", "--out", str(model)]) == 0
        n_features = len((model / "feature_manifest.csv").read_text().splitlines()) - 1
        imp = tmp_path / "imp.csv"
        assert cli.main(["importance", "--model", str(model / "model.json"),
                         "--manifest", str(model / "feature_manifest.csv"), "--top-k", "0",
                         "--out", str(imp)]) == 0
        rows = list(csv.DictReader(open(imp)))
        assert len(rows) == n_features
        coefs = [float(r["coefficient"]) for r in rows]
        assert coefs == sorted(coefs, reverse=True)
        grouped = tmp_path / "g.csv"
        assert cli.main(["importance", "--model", str(model / "model.json"),
                         "--manifest", str(model / "feature_manifest.csv"), "--by-atc-group",
                         "--out", str(grouped)]) == 0
        groups = [r["feature"] for r in csv.DictReader(open(grouped))]
        assert len(groups) == len(set(groups)) and all(len(g) == 1 for g in groups)


class TestUtest:
    def test_explicit_ranks(self, tmp_path):
        out = tmp_path / "u.csv"
        assert cli.main(["utest", "--train-ranks", "1,2,3", "--test-ranks", "4,5,6", "--out", str(out)]) == 0
        assert out.read_text().splitlines()[1].endswith(",0.05")

    def test_artifacts(self, bench_dir):
        arts = [str(p) for p in sorted((bench_dir / "folds").glob("*fold?.json"))]
        assert cli.main(["utest", "--artifacts", *arts]) == 0

    def test_bad_ranks(self):
        assert cli.main(["utest", "--train-ranks", "1,x", "--test-ranks", "2"]) == 2


def test_version(capsys):
    with pytest.raises(SystemExit):
        cli.build_parser()[0].parse_args(["--version"])
    assert capsys.readouterr().out.strip()
