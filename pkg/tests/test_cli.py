import csv
import json

import numpy as np
import pytest

from fedlmm import ipd, load_summary
from fedlmm.cli import end_to_end, main, write_bundle_csv
from fedlmm.summaries import SiteData


def run(args):
    return main(args)


@pytest.fixture
def clinic_csv(tmp_path):
    path = tmp_path / "cardio.csv"
    path.write_text(
        "ct,result,sex,drive\n"
        "30.0,0,0,0\n"
        "25.5,1,0,0\n"
        "28.25,0,1,0\n"
    )
    return path


class TestSummarize:
    def test_binary_gram_block(self, clinic_csv, tmp_path, capsys):
        out = tmp_path / "sums"
        rc = run([
            "summarize", "--csv", str(clinic_csv), "--outcome", "ct",
            "--covariates", "result,sex,drive", "--no-intercept", "--out", str(out),
        ])
        assert rc == 0
        summary = load_summary(out / "site.json")
        np.testing.assert_array_equal(summary.s_xx, [[1, 0, 0], [0, 1, 0], [0, 0, 0]])
        assert summary.n == 3

    def test_empty_csv(self, tmp_path, capsys):
        empty = tmp_path / "empty.csv"
        empty.write_text("")
        rc = run(["summarize", "--csv", str(empty), "--outcome", "y",
                  "--covariates", "x", "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "empty CSV" in capsys.readouterr().err
        header_only = tmp_path / "h.csv"
        header_only.write_text("y,x\n")
        rc = run(["summarize", "--csv", str(header_only), "--outcome", "y",
                  "--covariates", "x", "--out", str(tmp_path / "o")])
        assert rc == 1

    def test_non_numeric_cell_reported(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("y,x\n1.0,2.0\n3.0,oops\n")
        rc = run(["summarize", "--csv", str(bad), "--outcome", "y",
                  "--covariates", "x", "--out", str(tmp_path / "o")])
        assert rc == 1
        err = capsys.readouterr().err
        assert "oops" in err and "'x'" in err and "row 2" in err

    def test_missing_column(self, clinic_csv, tmp_path, capsys):
        rc = run(["summarize", "--csv", str(clinic_csv), "--outcome", "ct",
                  "--covariates", "nothere", "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "missing columns" in capsys.readouterr().err

    def test_site_column_split(self, tmp_path):
        path = tmp_path / "two.csv"
        path.write_text(
            "site,y,x\n"
            "a,1.0,0\n"
            "a,2.0,1\n"
            "b,3.0,1\n"
            "a,0.5,0\n"
        )
        out = tmp_path / "sums"
        rc = run(["summarize", "--csv", str(path), "--outcome", "y",
                  "--covariates", "x", "--site-col", "site", "--out", str(out)])
        assert rc == 0
        a = load_summary(out / "a.json")
        b = load_summary(out / "b.json")
        assert a.n == 3 and b.n == 1


@pytest.fixture
def summary_files(tmp_path):
    bundle = write_bundle_csv(tmp_path / "bundle.csv")
    out = tmp_path / "sums"
    rc = run(["summarize", "--csv", str(bundle), "--outcome", "y",
              "--covariates", "x1,x2,x3", "--site-col", "site", "--out", str(out)])
    assert rc == 0
    return sorted(out.glob("*.json"))


class TestFit:
    def test_matches_pooled_gls_oracle(self, tmp_path, summary_files):
        report_path = tmp_path / "report.json"
        rc = run(["fit", *map(str, summary_files), "--method", "ml",
                  "--out", str(report_path)])
        assert rc == 0
        report = json.loads(report_path.read_text())
        assert report["fit"]["converged"]
        # dense GLS on the pooled raw rows at the fitted variance components
        rows = list(csv.DictReader(open(tmp_path / "bundle.csv")))
        sites = {}
        for r in rows:
            sites.setdefault(r["site"], []).append(
                [float(r["y"]), float(r["x1"]), float(r["x2"]), float(r["x3"])]
            )
        site_data = []
        for sid, vals in sorted(sites.items()):
            arr = np.array(vals)
            X = np.column_stack([np.ones(len(arr)), arr[:, 1:]])
            site_data.append(SiteData(site_id=sid, y=arr[:, 0], X=X))
        beta_ref = ipd.gls_beta(report["fit"]["sigma2"], report["fit"]["tau2"], site_data)
        np.testing.assert_allclose(report["fit"]["beta"], beta_ref, atol=1e-8)

    def test_reml_refuses_privatized(self, tmp_path, summary_files, capsys):
        dp = tmp_path / "dp.json"
        rc = run(["privatize", "--in", str(summary_files[0]), "--out", str(dp),
                  "--epsilon0", "8", "--delta", "0.01", "--seed", "1"])
        assert rc == 0
        rc = run(["fit", str(dp), *map(str, summary_files[1:]), "--method", "reml",
                  "--out", str(tmp_path / "r.json")])
        assert rc == 1
        assert "determinant amplification" in capsys.readouterr().err

    def test_narrower_interval_at_lower_level(self, tmp_path, summary_files):
        paths = []
        for level in ("0.9", "0.95"):
            p = tmp_path / f"report{level}.json"
            rc = run(["fit", *map(str, summary_files), "--level", level, "--out", str(p)])
            assert rc == 0
            paths.append(p)
        r90, r95 = [json.loads(p.read_text()) for p in paths]
        w90 = [hi - lo for lo, hi in r90["ci"]["intervals"]]
        w95 = [hi - lo for lo, hi in r95["ci"]["intervals"]]
        assert all(a < b for a, b in zip(w90, w95))

    def test_coefficient_csv_schema(self, tmp_path, summary_files):
        coef = tmp_path / "coef.csv"
        rc = run(["fit", *map(str, summary_files), "--correction", "cr1p",
                  "--out", str(tmp_path / "r.json"), "--coef-csv", str(coef)])
        assert rc == 0
        rows = list(csv.DictReader(open(coef)))
        assert list(rows[0]) == ["coefficient", "estimate", "se", "ci_lo", "ci_hi", "correction"]
        assert len(rows) == 4
        assert all(r["correction"] == "cr1p" for r in rows)

    def test_tampered_summary_rejected(self, tmp_path, summary_files, capsys):
        obj = json.loads(summary_files[0].read_text())
        obj["S"][1] += 1.0
        bad = tmp_path / "tampered.json"
        bad.write_text(json.dumps(obj))
        rc = run(["fit", str(bad), "--out", str(tmp_path / "r.json")])
        assert rc == 1
        assert "symmetric" in capsys.readouterr().err


class TestPrivatizeCommand:
    def test_deterministic_bytes(self, tmp_path, summary_files):
        a = tmp_path / "a.json"
        b = tmp_path / "b.json"
        for target in (a, b):
            rc = run(["privatize", "--in", str(summary_files[0]), "--out", str(target),
                      "--epsilon0", "4", "--delta", "0.01", "--seed", "33"])
            assert rc == 0
        assert a.read_bytes() == b.read_bytes()

    def test_subset_needs_sensitive(self, tmp_path, summary_files, capsys):
        rc = run(["privatize", "--in", str(summary_files[0]), "--out", str(tmp_path / "x.json"),
                  "--epsilon0", "4", "--delta", "0.01", "--scope", "subset"])
        assert rc == 1
        assert "--sensitive" in capsys.readouterr().err

    def test_budget_recorded(self, tmp_path, summary_files):
        target = tmp_path / "dp.json"
        rc = run(["privatize", "--in", str(summary_files[0]), "--out", str(target),
                  "--epsilon0", "4", "--delta", "0.01", "--seed", "1"])
        assert rc == 0
        loaded = load_summary(target)
        assert loaded.privatized
        assert loaded.budget_used.epsilon == 2 * 4 * 4.0  # 2 p eps0 with p=4


class TestAttackCommand:
    def test_csv_schema(self, tmp_path):
        out = tmp_path / "rates.csv"
        rc = run(["attack", "--n", "3", "--p", "3", "--epsilon0", "8",
                  "--delta", "0.01", "--reps", "20", "--seed", "2", "--out", str(out)])
        assert rc == 0
        rows = list(csv.DictReader(open(out)))
        assert list(rows[0]) == ["n", "p", "epsilon0", "matrix_rate", "element_rate", "reps"]
        assert rows[0]["reps"] == "20"

    def test_reference_run(self, tmp_path):
        out = tmp_path / "rates.csv"
        rc = run(["attack", "--n", "3", "--p", "3", "--reps", "20",
                  "--seed", "2", "--out", str(out)])
        assert rc == 0
        row = next(csv.DictReader(open(out)))
        assert row["epsilon0"] == "ref"
        assert float(row["matrix_rate"]) > 0.5


class TestSimulateCommands:
    def test_estimation_smoke(self, tmp_path):
        out = tmp_path / "metrics.csv"
        rc = run(["simulate-estimation", "--scenario", "ri-correct", "--K", "8",
                  "--epsilon0", "8", "--reps", "2", "--seed", "3", "--out", str(out)])
        assert rc == 0
        rows = list(csv.DictReader(open(out)))
        assert len(rows) == 6
        assert {r["arm"] for r in rows} == {"ipd", "dp", "dp2"}

    def test_reconstruction_smoke(self, tmp_path):
        out = tmp_path / "rates.csv"
        rc = run(["simulate-reconstruction", "--n", "2,3", "--p", "2", "--epsilon0",
                  "ref,8", "--reps", "10", "--seed", "3", "--out", str(out)])
        assert rc == 0
        rows = list(csv.DictReader(open(out)))
        assert len(rows) == 4
        assert {r["epsilon0"] for r in rows} == {"ref", "8.0"}


class TestEndToEnd:
    def test_byte_identical_artifacts(self, tmp_path):
        a = end_to_end(tmp_path / "run_a", seed=7)
        b = end_to_end(tmp_path / "run_b", seed=7)
        for key in ("fit_dp", "fit_plain", "attack"):
            assert (a[key]).read_bytes() == (b[key]).read_bytes()
        for fa, fb in zip(a["private"], b["private"]):
            assert open(fa, "rb").read() == open(fb, "rb").read()

    def test_weak_noise_pipeline_close_to_plain(self, tmp_path):
        artifacts = end_to_end(tmp_path / "weak", seed=7, epsilon0=20.0)
        dp = json.loads(artifacts["fit_dp"].read_text())
        plain = json.loads(artifacts["fit_plain"].read_text())
        diff = np.linalg.norm(np.array(dp["fit"]["beta"]) - np.array(plain["fit"]["beta"]))
        assert diff < 0.05

    def test_out_dir_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FEDLMM_OUT_DIR", str(tmp_path))
        bundle = write_bundle_csv(tmp_path / "bundle.csv")
        rc = run(["summarize", "--csv", str(bundle), "--outcome", "y",
                  "--covariates", "x1,x2,x3", "--site-col", "site", "--out", "rel_sums"])
        assert rc == 0
        assert (tmp_path / "rel_sums" / "clinic0.json").exists()
