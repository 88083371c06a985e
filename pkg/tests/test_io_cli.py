import csv
import hashlib
import io
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsuq import sim
from lsuq.calibration import epsilon_bound
from lsuq.cli import main
from lsuq.core import RngStream
from lsuq.io import (
    FileFormatError,
    PredictionFile,
    load_config,
    read_predictions,
    read_weights,
    write_predictions,
)

CONFIGS = Path(sim.__file__).parent / "configs"


def write_pf(path, P, labels=None):
    ids = [f"r{i}" for i in range(len(P))]
    write_predictions(path, PredictionFile(ids, np.asarray(P), None if labels is None
                                           else np.asarray(labels)))
    return str(path)


def mixture_files(tmp_path, name, spec, n, seed, predictor_spec=None):
    d = sim.sample_mixture(spec, n, RngStream(seed))
    P = sim.bayes_posterior_matrix(predictor_spec or spec, d.features)
    return write_pf(tmp_path / f"{name}.csv", P, d.labels)


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


class TestPredictionFiles:
    @given(st.lists(st.lists(st.integers(0, 10**6), min_size=3, max_size=3)
                    .filter(lambda v: sum(v) > 0), min_size=1, max_size=20),
           st.booleans())
    @settings(max_examples=40)
    def test_round_trip(self, raw, with_labels):
        P = np.asarray(raw, float)
        P = P / P.sum(axis=1, keepdims=True)
        labels = np.arange(len(P)) % 3 if with_labels else None
        buf = io.StringIO()
        write_predictions(buf, PredictionFile([str(i) for i in range(len(P))], P, labels))
        import tempfile
        with tempfile.NamedTemporaryFile("w", suffix=".csv", delete=False) as fh:
            fh.write(buf.getvalue())
        back = read_predictions(fh.name)
        Path(fh.name).unlink()
        assert back.probs.tobytes() == P.tobytes()
        if with_labels:
            np.testing.assert_array_equal(back.labels, labels)
        else:
            assert back.labels is None

    def test_labels_one_based_on_disk(self, tmp_path):
        p = write_pf(tmp_path / "a.csv", [[0.3, 0.7]], [1])
        assert Path(p).read_text().splitlines() == ["id,p_1,p_2,label", "r0,0.29999999999999999,0.69999999999999996,2"]
        assert read_predictions(p).labels.tolist() == [1]

    @pytest.mark.parametrize("body", [
        "id,p_1,p_2\nr,0.5,0.6\n",
        "id,p_1,p_2,label\nr,0.5,0.5,3\n",
        "id,p_1\nr,1.0\n",
        "name,p_1,p_2\nr,0.5,0.5\n",
        "id,p_1,p_2\nr,0.5\n",
        "",
    ])
    def test_malformed(self, tmp_path, body):
        f = tmp_path / "bad.csv"
        f.write_text(body)
        with pytest.raises(FileFormatError):
            read_predictions(f)

    def test_weights(self, tmp_path):
        f = tmp_path / "w.json"
        f.write_text("[3, 0.3333, 1.6667]")
        np.testing.assert_allclose(read_weights(f), [3, 0.3333, 1.6667])
        f.write_text('{"w": 1}')
        with pytest.raises(FileFormatError):
            read_weights(f)

    def test_config_rejects_tables_and_unknown(self, tmp_path):
        f = tmp_path / "c.toml"
        f.write_text('scenario = "toy3class"\n[extra]\nx = 1\n')
        with pytest.raises(FileFormatError):
            load_config(f)
        f.write_text('scenario = "toy3class"\nbogus = 1\n')
        with pytest.raises(FileFormatError):
            load_config(f)

    @pytest.mark.parametrize("name", ["toy3class", "binary_calibration", "randomization"])
    def test_bundled_configs_parse(self, name):
        load_config(CONFIGS / f"{name}.toml")


class TestSimulate:
    def test_bundled(self, capsys):
        code, out, _ = run(["simulate", str(CONFIGS / "toy3class.toml"), "--replications", "2"],
                           capsys)
        assert code == 0
        r = rows(out)
        assert len(r) == 2 * 4
        assert list(r[0]) == ["replication", "method", "coverage", "mean_size",
                              "per_class_coverage", "thresholds", "weight_error_sup", "ece",
                              "wall_time_ms", "error"]

    def test_missing_file(self, capsys):
        code, _, err = run(["simulate", "/nonexistent/cfg.toml"], capsys)
        assert code == 2 and "/nonexistent/cfg.toml" in err

    def test_deterministic(self, tmp_path, capsys):
        outs = []
        for k in range(2):
            p = tmp_path / f"o{k}.csv"
            assert main(["simulate", str(CONFIGS / "toy3class.toml"), "--replications", "1",
                         "--seed", "7", "--out", str(p)]) == 0
            outs.append(p.read_bytes())
        assert outs[0] == outs[1]

    def test_bad_override(self, capsys):
        code, _, _ = run(["simulate", str(CONFIGS / "toy3class.toml"), "--replications", "0"],
                         capsys)
        assert code == 2


class TestEstimateWeights:
    def planted(self, tmp_path):
        # perfect classifier: soft confusion is diag(p), target marginal is q
        p_counts, q_counts = [100, 600, 300], [300, 200, 500]
        eye = np.eye(3)
        src_labels = np.repeat(np.arange(3), p_counts)
        tgt_labels = np.repeat(np.arange(3), q_counts)
        src = write_pf(tmp_path / "src.csv", eye[src_labels], src_labels)
        tgt = write_pf(tmp_path / "tgt.csv", eye[tgt_labels])
        return src, tgt

    def test_planted(self, tmp_path, capsys):
        src, tgt = self.planted(tmp_path)
        code, out, err = run(["estimate-weights", "--source", src, "--target", tgt], capsys)
        assert code == 0
        np.testing.assert_allclose(json.loads(out), [3, 1 / 3, 5 / 3], atol=1e-12)
        diag = json.loads(err)
        assert diag["estimator"] == "bbse-soft" and diag["clipped_classes"] == []

    def test_missing_labels(self, tmp_path, capsys):
        src, tgt = self.planted(tmp_path)
        code, _, _ = run(["estimate-weights", "--source", tgt, "--target", tgt], capsys)
        assert code == 2

    def test_hard_and_soft(self, tmp_path, capsys):
        src_spec = sim.scenario_spec("toy3class")
        s = mixture_files(tmp_path, "s", src_spec, 3000, 1)
        t = mixture_files(tmp_path, "t", src_spec.with_priors((0.3, 0.2, 0.5)), 3000, 2, src_spec)
        ws = []
        for flag in ([], ["--hard"]):
            code, out, _ = run(["estimate-weights", "--source", s, "--target", t, "--quiet"] + flag,
                               capsys)
            assert code == 0
            ws.append(np.array(json.loads(out)))
        for w in ws:
            assert w.min() >= 0 and np.max(np.abs(w - [3, 1 / 3, 5 / 3])) < 0.6
        assert not np.array_equal(ws[0], ws[1])

    def test_singular(self, tmp_path, capsys):
        P = np.full((10, 2), 0.5)
        s = write_pf(tmp_path / "s.csv", P, [0, 1] * 5)
        code, _, _ = run(["estimate-weights", "--source", s, "--target", s], capsys)
        assert code == 3

    def test_inputs_unchanged(self, tmp_path, capsys):
        src, tgt = self.planted(tmp_path)
        before = [hashlib.sha256(Path(f).read_bytes()).hexdigest() for f in (src, tgt)]
        run(["estimate-weights", "--source", src, "--target", tgt], capsys)
        after = [hashlib.sha256(Path(f).read_bytes()).hexdigest() for f in (src, tgt)]
        assert before == after


class TestConformal:
    @pytest.fixture
    def files(self, tmp_path):
        spec = sim.scenario_spec("toy3class")
        return (mixture_files(tmp_path, "cal", spec, 2000, 10),
                mixture_files(tmp_path, "test", spec, 5000, 11))

    def test_standard_coverage(self, files, capsys):
        cal, test = files
        code, out, err = run(["conformal", "--calib", cal, "--test", test, "--alpha", "0.1"], capsys)
        assert code == 0
        summary = json.loads(err)
        se = np.sqrt(0.09 / 5000 + 0.09 / 2000)
        assert summary["coverage"] >= 0.9 - 3 * se
        r = rows(out)
        assert len(r) == 5000 and set(r[0]) == {"id", "set", "size", "covered"}
        assert all(int(x["size"]) == (len(x["set"].split(";")) if x["set"] else 0) for x in r)

    def test_weighted_uniform_equals_standard(self, files, tmp_path, capsys):
        cal, test = files
        wf = tmp_path / "uniform.json"
        wf.write_text("[1, 1, 1]")
        _, a, _ = run(["conformal", "--calib", cal, "--test", test, "--alpha", "0.1", "--quiet"],
                      capsys)
        _, b, _ = run(["conformal", "--calib", cal, "--test", test, "--alpha", "0.1", "--quiet",
                       "--mode", "weighted", "--weights", str(wf)], capsys)
        assert a == b

    def test_label_conditional_absent_class(self, tmp_path, capsys):
        P = np.array([[0.7, 0.2, 0.1], [0.2, 0.7, 0.1]] * 10)
        cal = write_pf(tmp_path / "c.csv", P, [0, 1] * 10)
        code, _, err = run(["conformal", "--calib", cal, "--test", cal, "--alpha", "0.1",
                            "--mode", "label-conditional"], capsys)
        assert code == 0 and "warning" in err
        summary = json.loads(err[err.index("{"):])
        assert summary["thresholds"][2] == 1.0

    def test_weighted_requires_weights(self, files, capsys):
        cal, test = files
        code, _, _ = run(["conformal", "--calib", cal, "--test", test, "--alpha", "0.1",
                          "--mode", "weighted"], capsys)
        assert code == 2

    def test_missing_weight(self, files, tmp_path, capsys):
        cal, test = files
        wf = tmp_path / "w.json"
        wf.write_text("[1, 1]")
        code, _, _ = run(["conformal", "--calib", cal, "--test", test, "--alpha", "0.1",
                          "--mode", "weighted", "--weights", str(wf)], capsys)
        assert code == 4

    def test_bad_alpha(self, files):
        with pytest.raises(SystemExit) as e:
            main(["conformal", "--calib", files[0], "--test", files[1], "--alpha", "1.5"])
        assert e.value.code == 2

    def test_seed_reproducible(self, files, capsys):
        cal, test = files
        outs = [run(["conformal", "--calib", cal, "--test", test, "--alpha", "0.2", "--seed", s,
                     "--quiet"], capsys)[1] for s in ("3", "3", "4")]
        assert outs[0] == outs[1] and outs[0] != outs[2]

    def test_force_top(self, files, capsys):
        cal, test = files
        _, out, _ = run(["conformal", "--calib", cal, "--test", test, "--alpha", "0.6",
                         "--scheme", "randomized", "--force-top", "--quiet"], capsys)
        assert all(int(r["size"]) >= 1 for r in rows(out))


class TestCalibrate:
    @pytest.fixture
    def files(self, tmp_path):
        spec = sim.scenario_spec("binary")
        tgt = spec.with_priors((0.2, 0.8))
        (tmp_path / "oracle.json").write_text("[0.4, 1.6]")
        return (mixture_files(tmp_path, "cal", spec, 1000, 20),
                mixture_files(tmp_path, "test", tgt, 5000, 21, spec),
                str(tmp_path / "oracle.json"))

    def test_reweighting_improves_ece(self, files, tmp_path, capsys):
        cal, test, oracle = files
        cert = tmp_path / "cert.json"
        code, out, _ = run(["calibrate", "--calib", cal, "--test", test, "--bins", "10",
                            "--weights", oracle, "--true-weights", oracle,
                            "--certificate", str(cert)], capsys)
        assert code == 0
        c = json.loads(cert.read_text())
        assert c["ece"] < c["ece_uncorrected"]
        assert c["target_bound"] == pytest.approx(2 * 4 * c["epsilon_max"])

    def test_counts_and_epsilon(self, files, capsys):
        cal, test, _ = files
        code, out, _ = run(["calibrate", "--calib", cal, "--test", test, "--bins", "10",
                            "--quiet"], capsys)
        assert code == 0
        r = rows(out)
        assert list(r[0]) == ["bin_index", "lower_edge", "upper_edge", "predicted", "observed",
                              "count", "cal_count", "epsilon"]
        assert [int(x["cal_count"]) for x in r] == [100] * 10
        for x in r:
            assert float(x["epsilon"]) == epsilon_bound(int(x["cal_count"]), 10, 2, 0.1)

    def test_too_few(self, tmp_path, capsys):
        f = write_pf(tmp_path / "few.csv", [[0.2, 0.8], [0.6, 0.4]], [0, 1])
        code, _, _ = run(["calibrate", "--calib", f, "--test", f, "--bins", "10"], capsys)
        assert code == 2

    def test_multiclass_needs_projection(self, tmp_path, capsys):
        P = np.random.default_rng(0).dirichlet(np.ones(3), 50)
        f = write_pf(tmp_path / "k3.csv", P, np.arange(50) % 3)
        assert run(["calibrate", "--calib", f, "--test", f, "--bins", "5"], capsys)[0] == 2
        assert run(["calibrate", "--calib", f, "--test", f, "--bins", "5", "--projection", "top",
                    "--quiet"], capsys)[0] == 0


def test_simulate_file_scenario(tmp_path, capsys):
    spec = sim.scenario_spec("toy3class", (1 / 3, 1 / 3, 1 / 3))
    mixture_files(tmp_path, "pool", spec, 4000, 30)
    cfg = tmp_path / "file.toml"
    cfg.write_text('scenario = "file"\npool = "pool.csv"\n'
                   "source_priors = [0.1, 0.6, 0.3]\ntarget_priors = [0.3, 0.2, 0.5]\n"
                   "n_cal = 500\nn_est_source = 1000\nn_est_target = 1000\nn_test = 1000\n"
                   'modes = ["standard", "weighted"]\nweight_sources = ["oracle", "bbse-soft"]\n'
                   "replications = 20\nseed = 1\n")
    code, out, _ = run(["simulate", str(cfg)], capsys)
    assert code == 0
    r = rows(out)
    assert all(x["error"] == "" for x in r)
    med = {m: np.median([float(x["coverage"]) for x in r if x["method"] == m])
           for m in ("standard", "weighted-oracle", "weighted-bbse-soft")}
    assert len(r) == 60
    assert med["weighted-oracle"] > 0.88 and med["weighted-bbse-soft"] > 0.87
