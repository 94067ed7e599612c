"""End-to-end checks of the command-line stages and the pipeline driver."""

import json
from pathlib import Path

import numpy as np
import pytest

from gelwarp.cli import (
    DEFAULT_CONFIG,
    main,
    merge_config,
    model_config_from,
    read_truth_labels,
)
from gelwarp.core import read_manifest, read_traces_csv
from gelwarp.peakdetect import PeakTable
from gelwarp.refalign import apply_map, read_maps

SIM_SPEC = {
    "n_gels": 2,
    "lanes_per_gel": 3,
    "B": 400,
    "L": 30,
    "signatures": [[4, 12, 24], [8, 18, 27], [6, 15, 21]],
    "n_replicates": 2,
    "warp_amplitude": 0.02,
    "refwarp_amplitude": 0.01,
    "sigma_eps": 0.004,
    "noise_sd": 0.005,
}

MODEL = {
    "L": 30,
    "T_nu": 5,
    "T_u": 4,
    "iterations": 300,
    "burnin": 150,
    "thin": 2,
    "restarts": 2,
    "restart_sweeps": 50,
}


def run(argv):
    rc = main(argv)
    assert rc == 0, f"command failed: {argv}"


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One simulated batch plus a full pipeline run, shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    spec = root / "sim.json"
    spec.write_text(json.dumps(SIM_SPEC))
    run(["simulate", "--spec", str(spec), "--seed", "7", "--out", str(root / "sim")])

    cfg = {
        "seed": 7,
        "out": str(root / "run"),
        "inputs": {
            "traces": str(root / "sim" / "traces.csv"),
            "manifest": str(root / "sim" / "manifest.json"),
            "truth": str(root / "sim" / "truth.json"),
        },
        "detect": {"h": 8, "c0": 0.05},
        "refalign": {"template": "g1"},
        "dewarp": MODEL,
        "cluster": {"nboot": 50, "draw_thin": 5},
    }
    cfg_path = root / "pipe.json"
    cfg_path.write_text(json.dumps(cfg))
    run(["pipeline", "--config", str(cfg_path)])
    return root


class TestConfig:
    def test_defaults_survive_partial_override(self):
        cfg = merge_config({"detect": {"h": 4}})
        assert cfg["detect"]["h"] == 4
        assert cfg["detect"]["c0"] == DEFAULT_CONFIG["detect"]["c0"]
        assert cfg["dewarp"]["iterations"] == 5500

    def test_default_draw_budget(self):
        cfg = merge_config({})
        assert cfg["dewarp"]["iterations"] - cfg["dewarp"]["burnin"] == 5000
        assert cfg["dewarp"]["L"] == 100
        assert cfg["dewarp"]["T_nu"] == 10
        assert cfg["dewarp"]["T_u"] == 6
        assert cfg["detect"]["h"] == 10

    def test_unknown_section_rejected(self):
        with pytest.raises(ValueError, match="unknown config section"):
            merge_config({"dewarping": {}})

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="detect.hh"):
            merge_config({"detect": {"hh": 3}})

    def test_unknown_model_setting_rejected(self):
        with pytest.raises(ValueError, match="unknown dewarp settings"):
            model_config_from({"L": 10, "sweeps": 5}, seed=0)

    def test_model_config_carries_seed(self):
        mc = model_config_from(dict(MODEL), seed=11)
        assert mc.seed == 11
        assert mc.L == 30


class TestSimulate:
    def test_artifacts_exist(self, workdir):
        for name in ("traces.csv", "manifest.json", "truth.json"):
            assert (workdir / "sim" / name).is_file()

    def test_traces_parse(self, workdir):
        manifest = read_manifest(workdir / "sim" / "manifest.json")
        grid = read_traces_csv(workdir / "sim" / "traces.csv", manifest)
        assert grid.B == 400
        # 3 sample lanes plus one reference lane per gel
        assert all(g.n_lanes == 4 for g in grid.gels)

    def test_unknown_spec_key_fails(self, workdir, capsys):
        bad = workdir / "bad_spec.json"
        bad.write_text(json.dumps({"n_gels": 1, "bands": 3}))
        rc = main(["simulate", "--spec", str(bad), "--seed", "1",
                   "--out", str(workdir / "nowhere")])
        assert rc == 1
        assert "bands" in capsys.readouterr().err


class TestStages:
    def test_detect_output_parses(self, workdir):
        peaks = PeakTable.from_json(workdir / "run" / "peaks_raw.json")
        assert peaks.total > 0
        assert peaks.B == 400

    def test_detect_threshold_monotone(self, workdir):
        loose = workdir / "loose.json"
        strict = workdir / "strict.json"
        traces = str(workdir / "sim" / "traces.csv")
        manifest = str(workdir / "sim" / "manifest.json")
        run(["detect", "--input", traces, "--manifest", manifest,
             "--h", "6", "--c0", "0.02", "--out", str(loose)])
        run(["detect", "--input", traces, "--manifest", manifest,
             "--h", "16", "--c0", "0.30", "--out", str(strict)])
        assert PeakTable.from_json(strict).total <= PeakTable.from_json(loose).total

    def test_refalign_outputs(self, workdir):
        maps = read_maps(workdir / "run" / "refmaps.json")
        assert set(maps) == {"g1", "g2"}
        # template gel maps to itself
        x = np.linspace(0.05, 0.95, 7)
        assert np.allclose(apply_map(maps["g1"], x), x)

    def test_dewarp_outputs(self, workdir):
        post = workdir / "run" / "posterior"
        for name in ("warp.json", "zmap.json", "landmarks.json",
                     "chain.log", "signatures.csv", "summary.json"):
            assert (post / name).is_file()
        summary = json.loads((post / "summary.json").read_text())
        assert summary["violations"] == 0
        assert summary["saved_draws"] == 75

    def test_zmap_assignments_in_range(self, workdir):
        payload = json.loads((workdir / "run" / "posterior" / "zmap.json").read_text())
        assert payload["L"] == 30
        for entry in payload["lanes"].values():
            z = entry["z_map"]
            assert all(1 <= ell <= 30 for ell in z)
            assert z == sorted(z)

    def test_align_writes_grid(self, workdir):
        manifest = read_manifest(workdir / "sim" / "manifest.json")
        grid = read_traces_csv(workdir / "run" / "exact.csv", manifest)
        assert grid.B == 400

    def test_align_sample_source(self, workdir):
        out = workdir / "exact_s3.csv"
        run(["align", "--input", str(workdir / "run" / "aligned.csv"),
             "--manifest", str(workdir / "sim" / "manifest.json"),
             "--zmap", str(workdir / "run" / "posterior" / "zmap.json"),
             "--z-source", "sample:3", "--out", str(out)])
        assert out.is_file()

    def test_align_bad_source(self, workdir, capsys):
        rc = main(["align", "--input", str(workdir / "run" / "aligned.csv"),
                   "--manifest", str(workdir / "sim" / "manifest.json"),
                   "--zmap", str(workdir / "run" / "posterior" / "zmap.json"),
                   "--z-source", "best", "--out", str(workdir / "nope.csv")])
        assert rc == 1
        assert "z-source" in capsys.readouterr().err

    def test_cluster_outputs(self, workdir):
        clusters = workdir / "run" / "clusters"
        nwk = (clusters / "dendrogram.nwk").read_text()
        assert nwk.strip().endswith(";")
        conf = json.loads((clusters / "confidence.json").read_text())
        assert set(conf) == {"confidence", "strong"}
        rows = (clusters / "metrics.csv").read_text().splitlines()
        assert rows[0] == "n,ari_mean,ari_lo,ari_hi,silhouette"
        # six sample lanes -> cuts at n = 2..6
        assert len(rows) == 6

    def test_cluster_recovers_truth(self, workdir):
        rows = (workdir / "run" / "clusters" / "metrics.csv").read_text().splitlines()
        by_n = {int(r.split(",")[0]): r.split(",") for r in rows[1:]}
        assert float(by_n[3][1]) == pytest.approx(1.0)


class TestTruthLabels:
    def test_from_simulator_json(self, workdir):
        manifest = read_manifest(workdir / "sim" / "manifest.json")
        grid = read_traces_csv(workdir / "sim" / "traces.csv", manifest)
        keys = grid.lane_keys(include_reference=False)
        labels = read_truth_labels(workdir / "sim" / "truth.json", keys)
        assert labels.shape == (6,)
        assert len(set(labels.tolist())) == 3

    def test_from_csv(self, tmp_path):
        path = tmp_path / "truth.csv"
        path.write_text("lane,label\ng1:2,1\ng1:3,2\n")
        labels = read_truth_labels(path, [("g1", 2), ("g1", 3)])
        assert labels.tolist() == [1, 2]

    def test_missing_lane_named(self, tmp_path):
        path = tmp_path / "truth.csv"
        path.write_text("lane,label\ng1:2,1\n")
        with pytest.raises(ValueError, match="g1:3"):
            read_truth_labels(path, [("g1", 2), ("g1", 3)])

    def test_bad_header(self, tmp_path):
        path = tmp_path / "truth.csv"
        path.write_text("sample,cluster\na,1\n")
        with pytest.raises(ValueError, match="lane,label"):
            read_truth_labels(path, [])


class TestPipeline:
    def test_resume_skips_everything(self, workdir, capsys):
        run(["pipeline", "--config", str(workdir / "pipe.json"), "--resume"])
        out = capsys.readouterr().out
        assert out.count("skipped") == 6

    def test_resume_reruns_on_config_change(self, workdir, capsys):
        cfg = json.loads((workdir / "pipe.json").read_text())
        cfg["cluster"]["nboot"] = 60
        alt = workdir / "pipe_alt.json"
        alt.write_text(json.dumps(cfg))
        run(["pipeline", "--config", str(alt), "--resume"])
        out = capsys.readouterr().out
        assert out.count("skipped") == 5
        assert "stage cluster: wrote" in out

    def test_rerun_bytes_identical(self, workdir):
        cfg = json.loads((workdir / "pipe.json").read_text())
        outs = []
        for name in ("rep1", "rep2"):
            cfg["out"] = str(workdir / name)
            path = workdir / f"pipe_{name}.json"
            path.write_text(json.dumps(cfg))
            run(["pipeline", "--config", str(path)])
            outs.append(workdir / name)
        a, b = outs
        files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        for rel in files:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

    def test_corrupt_traces_names_stage_and_lane(self, workdir, capsys):
        lines = (workdir / "sim" / "traces.csv").read_text().splitlines(keepends=True)
        broken = workdir / "broken.csv"
        with open(broken, "w") as fh:
            fh.writelines(ln for ln in lines if not ln.startswith("g1,2,100,"))
        cfg = json.loads((workdir / "pipe.json").read_text())
        cfg["inputs"]["traces"] = str(broken)
        cfg["out"] = str(workdir / "run_broken")
        path = workdir / "pipe_broken.json"
        path.write_text(json.dumps(cfg))
        rc = main(["pipeline", "--config", str(path)])
        assert rc == 1
        err = capsys.readouterr().err
        assert "stage detect" in err
        assert "g1" in err and "lane 2" in err


class TestPlotdata:
    def test_export(self, workdir):
        run(["plotdata", "--run", str(workdir / "run")])
        plot = workdir / "run" / "plotdata"
        for name in ("fig_quality.csv", "fig_dendrogram.csv", "fig_warps.csv",
                     "fig_connections.csv", "fig_landmarks.csv"):
            assert (plot / name).is_file()

    def test_warp_series_shape(self, workdir):
        rows = (workdir / "run" / "plotdata" / "fig_warps.csv").read_text().splitlines()
        # header + (L + 2) grid points x 6 sample lanes
        assert len(rows) == 1 + 32 * 6
        header = rows[0].split(",")
        assert header == ["gel", "lane", "landmark", "nu", "s"]
        s = [float(r.split(",")[4]) for r in rows[1:]]
        assert all(0.0 <= v <= 1.0 for v in s)

    def test_connection_probabilities(self, workdir):
        rows = (workdir / "run" / "plotdata" / "fig_connections.csv").read_text().splitlines()
        assert rows[0].split(",")[:3] == ["gel", "lane", "peak"]
        for r in rows[1:]:
            parts = r.split(",")
            assert 1 <= int(parts[4]) <= 30
            assert 0.0 <= float(parts[6]) <= 1.0

    def test_quality_matches_metrics(self, workdir):
        a = (workdir / "run" / "plotdata" / "fig_quality.csv").read_bytes()
        b = (workdir / "run" / "clusters" / "metrics.csv").read_bytes()
        assert a == b
