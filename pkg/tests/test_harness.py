import io
import json
import os
import xml.etree.ElementTree as ET

import numpy as np
import pytest
import scipy.sparse as sp
import yaml

from blockcubic.harness.cli import main
from blockcubic.harness.data import (
    Dataset,
    ParseError,
    gen_synthetic_cubic,
    gen_synthetic_logistic,
    gen_synthetic_poisson,
    parse_libsvm,
    write_libsvm,
)
from blockcubic.harness.experiment import ExperimentConfig, load_config, run_experiment
from blockcubic.harness.svgplot import Series, line_plot
from blockcubic.problem import objective
from blockcubic.rbcn import RunTrace


def test_parse_single_line():
    ds = parse_libsvm("1 3:0.5 7:1.2\n")
    assert ds.m == 1 and ds.d == 7
    np.testing.assert_array_equal(ds.labels, [1.0])
    B = ds.B.tocoo()
    assert sorted(zip(B.col.tolist(), B.data.tolist())) == [(2, 0.5), (6, 1.2)]


def test_parse_labels_and_width_override():
    ds = parse_libsvm("-1 1:2\n+1 2:4\n\n# comment\n", d=5)
    assert ds.m == 2 and ds.d == 5
    np.testing.assert_array_equal(ds.labels, [-1.0, 1.0])
    np.testing.assert_array_equal(ds.dense(), [[2, 0, 0, 0, 0], [0, 4, 0, 0, 0]])
    with pytest.raises(ValueError):
        parse_libsvm("1 4:1\n", d=2)


@pytest.mark.parametrize("text,line", [("1 1:2\nx 1:3\n", 2), ("1 1:2\n1 2:abc\n", 2), ("1 0:2\n", 1),
                                       ("\n\n1 a:2\n", 3), ("1 3\n", 1)])
def test_parse_errors_report_line(text, line):
    with pytest.raises(ParseError) as err:
        parse_libsvm(text)
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


def test_parse_empty_input_is_invalid():
    with pytest.raises(ValueError):
        parse_libsvm("")
    with pytest.raises(ValueError):
        parse_libsvm("# only a comment\n")


def test_libsvm_round_trip_is_exact():
    rng = np.random.default_rng(0)
    B = rng.normal(size=(6, 9)) * (rng.random((6, 9)) < 0.4)
    ds = Dataset(sp.csr_matrix(B), rng.integers(0, 5, 6))
    buf = io.StringIO()
    write_libsvm(ds, buf)
    back = parse_libsvm(buf.getvalue(), d=9)
    np.testing.assert_array_equal(back.dense(), B)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_dataset_rejects_nonfinite_entries():
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan]]), [1.0])
    with pytest.raises(ValueError):
        Dataset(np.ones((2, 2)), [1.0])


def test_synthetic_cubic_structure():
    p = gen_synthetic_cubic(16, 3)
    b = p.g.d
    assert objective(p, np.zeros(16)) == pytest.approx(0.5 * b @ b, rel=1e-14)
    A = p.g.C
    assert np.linalg.eigvalsh(A).min() >= -1e-10
    assert np.linalg.matrix_rank(A) <= 10
    c = 2.0 * np.array([float(phi.loss.c) for phi in p.phi])
    assert np.all(c >= 1)
    np.testing.assert_allclose(p.block_hess_lipschitz, c)
    with pytest.raises(ValueError):
        gen_synthetic_cubic(0, 0)


def test_synthetic_cubic_quadratic_form():
    p = gen_synthetic_cubic(8, 1, form="quadratic")
    r = gen_synthetic_cubic(8, 1)
    np.testing.assert_array_equal(p.g.M, r.g.C)
    assert objective(p, np.zeros(8)) == 0.0


def test_synthetic_poisson_statistics_and_determinism():
    a, b = gen_synthetic_poisson(4, 3, 7), gen_synthetic_poisson(4, 3, 7)
    assert a.B.tobytes() == b.B.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    big = gen_synthetic_poisson(100_000, 1, 0)
    assert abs(big.labels.mean() - 1.0) <= 0.02
    assert np.all(big.labels >= 0) and np.all(big.labels == np.round(big.labels))
    assert abs(big.B.mean()) < 0.02 and abs(big.B.std() - 1) < 0.02


def test_synthetic_logistic_labels():
    ds = gen_synthetic_logistic(50, 20, 0)
    assert set(np.unique(ds.labels)) <= {-1.0, 1.0}


def test_svg_plot_is_well_formed():
    svg = line_plot([Series("a", [0, 1, 2], [1.0, 1e-3, 1e-9]), Series("b", [0, 1], [0.0, 2.0])],
                    "t", "x", "y", logy=True, markers=True)
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")
    assert "a" in svg and "b" in svg
    ET.fromstring(line_plot([], "empty", "x", "y"))


@pytest.mark.parametrize("bad", [dict(taus=[]), dict(methods=[]), dict(methods=["sdca"]), dict(taus=[0]),
                                 dict(generator=None), dict(dataset="x.svm"), dict(task="nope"),
                                 dict(target=0.0), dict(generator={"N": 4, "bogus": 1})])
def test_config_validation(bad):
    base = dict(task="synthetic_cubic", methods=["rbcn"], taus=[1], generator={"N": 4})
    base.update(bad)
    with pytest.raises(ValueError):
        ExperimentConfig(**base)


def test_config_file_loading(tmp_path):
    (tmp_path / "d.svm").write_text("1 1:1\n")
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(dict(task="poisson_dual", methods="sdca", taus=2, dataset="d.svm")))
    cfg = load_config(str(path))
    assert cfg.methods == ("sdca",) and cfg.taus == (2,)
    assert cfg.dataset == str(tmp_path / "d.svm")
    assert cfg.target == 1e-6
    path.write_text("task: synthetic_cubic\nmethods: [rbcn]\ntaus: [1]\ngenerator: {N: 4}\nextra: 1\n")
    with pytest.raises(ValueError):
        load_config(str(path))


def strip_timing(text):
    return "\n".join(",".join(line.split(",")[:-1]) for line in text.splitlines())


def test_run_experiment_primal_artifacts(tmp_path):
    cfg = ExperimentConfig(task="synthetic_cubic", methods=("rbcn", "bcgd"), taus=(4, 8),
                           generator={"N": 8, "seed": 1, "form": "quadratic"}, target=1e-10,
                           max_iterations=20000, output=str(tmp_path / "a"))
    res = run_experiment(cfg)
    files = set(os.listdir(cfg.output))
    assert {"rbcn_tau4.csv", "rbcn_tau8.csv", "bcgd_tau4.csv", "bcgd_tau8.csv",
            "summary.json", "convergence.svg", "time_vs_tau.svg"} <= files
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["measure"] == "objective_residual"
    for run in summary["runs"]:
        assert run["status"] == "target"
        with open(os.path.join(cfg.output, run["trace"])) as f:
            tr = RunTrace.read_csv(f)
        # summary numbers are the terminal trace row
        assert run["iterations"] == tr.k[-1]
        assert run["time_ms"] == pytest.approx(tr.elapsed_ms[-1], abs=1e-3)
        assert run["final"] == pytest.approx(tr.objective[-1] - summary["f_star"], abs=1e-15)
        assert run["final"] <= 1e-10
    assert not res.all_failed

    again = run_experiment(cfg.replace(output=str(tmp_path / "b")))
    for run in again.runs:
        a = (tmp_path / "a" / run["trace"]).read_text()
        b = (tmp_path / "b" / run["trace"]).read_text()
        assert strip_timing(a) == strip_timing(b)


def test_run_experiment_dual_artifacts(tmp_path):
    cfg = ExperimentConfig(task="poisson_synthetic", methods=("sdcna", "sdca", "sdna"), taus=(5,),
                           generator={"m": 30, "d": 5, "seed": 2}, target=1e-6, output=str(tmp_path))
    res = run_experiment(cfg)
    assert res.summary["measure"] == "duality_gap"
    for run in res.runs:
        assert run["reached"]
        header = (tmp_path / run["trace"]).read_text().splitlines()[0]
        assert header == "epoch,primal,dual,gap,H"


def test_run_experiment_rejects_tau_above_dimension(tmp_path):
    cfg = ExperimentConfig(task="synthetic_cubic", methods=("rbcn",), taus=(9,), generator={"N": 8},
                           output=str(tmp_path))
    with pytest.raises(ValueError):
        run_experiment(cfg)


def test_cli_gen_and_run(tmp_path, capsys):
    data = tmp_path / "p.svm"
    assert main(["gen", "poisson", "-o", str(data), "--m", "20", "--d", "4", "--seed", "1"]) == 0
    assert parse_libsvm(data.read_text()).m == 20
    cfg = tmp_path / "c.yaml"
    cfg.write_text("task: poisson_dual\nmethods: [sdcna]\ntaus: [4]\ndataset: p.svm\n")
    out = tmp_path / "out"
    assert main(["run", str(cfg), "--output", str(out), "--tau", "2", "--quiet"]) == 0
    assert (out / "sdcna_tau2.csv").exists()
    assert "sdcna" in capsys.readouterr().out

    npz = tmp_path / "c.npz"
    assert main(["gen", "cubic", "-o", str(npz), "--N", "6"]) == 0
    z = np.load(npz)
    assert z["C"].shape == (6, 6) and np.all(z["c"] >= 1)


def test_cli_solve_sub(tmp_path, capsys):
    f = tmp_path / "s.yaml"
    f.write_text("Q: [[1.0]]\nb: [-1.0]\nH: 6.0\n")
    assert main(["solve-sub", str(f)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["y"][0] == pytest.approx((-1 + 13**0.5) / 6)
    f.write_text("Q: [[1.0, 0.0], [0.0, 1.0]]\nb: [1.0, 1.0]\nH: 1.0\ncoupling: {B: [[1.0, 1.0]]}\n")
    assert main(["solve-sub", str(f)]) == 0
    assert main(["solve-sub", str(tmp_path / "missing.yaml")]) == 2


def test_cli_certify(capsys):
    assert main(["certify", "--N", "8", "--tau", "2", "--runs", "2", "--eps", "1e-4",
                 "--form", "quadratic"]) == 0
    out = capsys.readouterr().out
    fields = dict(line.split(" = ") for line in out.strip().splitlines())
    assert fields["rate"] == "sublinear" and int(fields["K"]) > 0
    assert fields["D_estimated"] == "true"


def test_cli_reports_errors_with_exit_status(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("task: synthetic_cubic\nmethods: [rbcn]\ntaus: []\ngenerator: {N: 4}\n")
    assert main(["run", str(cfg)]) == 2
    assert "taus" in capsys.readouterr().err
