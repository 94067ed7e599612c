"""Command-line pipeline: detect -> refalign -> dewarp -> align -> cluster.

Each stage is a standalone subcommand; ``pipeline`` chains them from one
JSON config with content-hash resume, and ``plotdata`` exports CSV series
for the standard summary figures (cluster quality vs n, warp curves with
peak-landmark connections, dendrogram with subtree confidences).
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .cluster import (
    adjusted_rand,
    average_silhouette,
    bootstrap_confidence,
    cut,
    distance_matrix,
    hclust_complete,
    posterior_clustering_summary,
    to_newick,
    write_confidence,
    write_metrics,
)
from .core import (
    LandmarkGrid,
    Standardizer,
    read_manifest,
    read_traces_csv,
    standardize_intensities,
    write_manifest,
    write_traces_csv,
)
from .dewarp import (
    ModelConfig,
    read_zmap,
    run_mcmc,
    write_chain_log,
    write_landmarks,
    write_signatures_csv,
    write_warp_json,
    write_zmap,
)
from .exactalign import exact_align
from .peakdetect import Peak, PeakConfig, PeakTable, detect_peaks
from .refalign import reference_align, write_maps
from .simulate import SimSpec, read_truth, simulate_gels, write_truth
from .spline import eval_warp_grid, read_warp_fields

# All stage settings live in one config; these are the pre-filled defaults
# (5500 - 500 keeps 5000 posterior draws).
DEFAULT_CONFIG = {
    "seed": 7,
    "threads": 1,
    "out": "run",
    "inputs": {"traces": "traces.csv", "manifest": "manifest.json", "truth": None},
    "detect": {"h": 10, "c0": 0.05, "standardize": "minmax"},
    "refalign": {"template": None},
    "dewarp": {
        "L": 100,
        "T_nu": 10,
        "T_u": 6,
        "a0": None,
        "iterations": 5500,
        "burnin": 500,
        "thin": 1,
        "restarts": 4,
    },
    "align": {"z_source": "map"},
    "cluster": {"nboot": 1000, "n_values": None, "draw_thin": 1},
}

PIPELINE_STAGES = ("detect", "refalign", "redetect", "dewarp", "align", "cluster")


class StageError(Exception):
    """Failure attributed to one named pipeline stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------


def merge_config(user: dict) -> dict:
    """User settings over the defaults; unknown sections or keys are errors.

    The dewarp section additionally admits any model setting (seed excluded,
    it comes from the top level) so sampler details stay overridable.
    """
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)} - {"seed"}
    for section, value in user.items():
        if section not in cfg:
            raise ValueError(f"unknown config section {section!r}")
        if isinstance(cfg[section], dict):
            if not isinstance(value, dict):
                raise ValueError(f"config section {section!r} must be an object")
            for key, v in value.items():
                if key not in cfg[section] and not (
                    section == "dewarp" and key in model_keys
                ):
                    raise ValueError(f"unknown config key {section}.{key}")
                cfg[section][key] = v
        else:
            cfg[section] = value
    return cfg


def load_config(path) -> dict:
    with open(path) as fh:
        user = json.load(fh)
    return merge_config(user)


def model_config_from(section: dict, seed: int) -> ModelConfig:
    fields = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(section) - fields
    if unknown:
        raise ValueError(f"unknown dewarp settings: {', '.join(sorted(unknown))}")
    return ModelConfig(seed=seed, **section)


def _hash_parts(*parts) -> str:
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, (str, Path)) and Path(part).is_file():
            h.update(Path(part).read_bytes())
        else:
            h.update(json.dumps(part, sort_keys=True, default=str).encode())
        h.update(b"\x00")
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Stage implementations (shared by subcommands and the pipeline)
# ---------------------------------------------------------------------------


def stage_simulate(spec_path, seed: int, out_dir) -> list[Path]:
    with open(spec_path) as fh:
        raw = json.load(fh)
    fields = {f.name for f in dataclasses.fields(SimSpec)}
    unknown = set(raw) - fields
    if unknown:
        raise ValueError(f"unknown simulator settings: {', '.join(sorted(unknown))}")
    if "signatures" in raw:
        raw["signatures"] = tuple(tuple(int(b) for b in s) for s in raw["signatures"])
    for key in ("exposure_scales", "reference_kda"):
        if key in raw:
            raw[key] = tuple(raw[key])
    spec = SimSpec(**raw)
    grid, manifest, truth = simulate_gels(spec, np.random.default_rng(seed))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "traces.csv", out / "manifest.json", out / "truth.json"]
    write_traces_csv(grid, paths[0])
    write_manifest(manifest, paths[1])
    write_truth(truth, paths[2])
    return paths


def stage_detect(traces_path, manifest_path, h: int, c0: float, out_path,
                 threads: int = 1, standardize: str = "minmax") -> Path:
    manifest = read_manifest(manifest_path) if manifest_path else None
    grid = read_traces_csv(traces_path, manifest)
    grid = standardize_intensities(grid, method=standardize)
    peaks = detect_peaks(grid, PeakConfig(h=h, c0=c0), threads=threads)
    if manifest:
        peaks = peaks.drop_masked(manifest)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    peaks.to_json(out_path)
    return out_path


def stage_refalign(traces_path, manifest_path, peaks_path, template,
                   out_path, map_out_path) -> tuple[Path, Path]:
    manifest = read_manifest(manifest_path) if manifest_path else None
    grid = read_traces_csv(traces_path, manifest)
    peaks = PeakTable.from_json(peaks_path)
    if template is None:
        template = sorted(g.gel_id for g in grid.gels)[0]
    expected = 7
    if manifest and template in manifest:
        expected = len(manifest[template].get("reference_kda", [])) or 7
    aligned, maps = reference_align(grid, peaks, template, expected_count=expected)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_traces_csv(aligned, out_path)
    write_maps(maps, map_out_path)
    return out_path, Path(map_out_path)


def stage_dewarp(peaks_path, model_cfg: ModelConfig, out_dir,
                 manifest_path=None) -> Path:
    peaks = PeakTable.from_json(peaks_path)
    if manifest_path:
        manifest = read_manifest(manifest_path)
        peaks = peaks.drop_reference_lanes(manifest).drop_masked(manifest)
    result = run_mcmc(peaks, model_cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_warp_json(result, out / "warp.json")
    write_zmap(result, out / "zmap.json")
    write_landmarks(result, out / "landmarks.json")
    write_chain_log(result, out / "chain.log")
    write_signatures_csv(result, out / "signatures.csv")
    with open(out / "summary.json", "w") as fh:
        json.dump(
            {
                "violations": int(result.violations),
                "lambda_accept": float(result.lambda_accept),
                "stationary": bool(result.stationary),
                "stationary_detail": result.stationary_detail,
                "saved_draws": len(result.states),
            },
            fh, sort_keys=True, default=float,
        )
        fh.write("\n")
    return out


def peaks_from_zmap(payload: dict, B: int) -> PeakTable:
    """Reconstruct the detected peaks recorded alongside the assignments."""
    entries = []
    for key in sorted(payload["locations"]):
        gel_id, lane = key
        locs = payload["locations"][key]
        bins = payload["bins"][key]
        for j, (b, loc) in enumerate(zip(bins, locs), start=1):
            entries.append(Peak(gel_id, int(lane), j, int(b), float(loc), 1.0))
    return PeakTable(tuple(entries), B)


def select_assignments(payload: dict, z_source: str) -> dict:
    if z_source == "map":
        return payload["z_map"]
    if z_source.startswith("sample:"):
        k = int(z_source.split(":", 1)[1])
        n_draws = min(len(v) for v in payload["z_draws"].values())
        if not 0 <= k < n_draws:
            raise ValueError(f"draw index {k} outside 0..{n_draws - 1}")
        return {key: draws[k] for key, draws in payload["z_draws"].items()}
    raise ValueError(f"z-source must be 'map' or 'sample:k', got {z_source!r}")


def stage_align(traces_path, manifest_path, zmap_path, z_source, out_path) -> Path:
    manifest = read_manifest(manifest_path) if manifest_path else None
    grid = read_traces_csv(traces_path, manifest)
    payload = read_zmap(zmap_path)
    peaks = peaks_from_zmap(payload, grid.B)
    z = select_assignments(payload, z_source)
    aligned = exact_align(grid, peaks, z, payload["L"])
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_traces_csv(aligned, out_path)
    return out_path


def read_truth_labels(path, lane_keys) -> np.ndarray:
    """True cluster labels for the given lanes, from the simulator's truth
    JSON or a two-column lane,label CSV."""
    path = Path(path)
    if path.suffix == ".json":
        truth = read_truth(path)
        by_key = {k: v["cluster"] for k, v in truth["samples"].items()}
    else:
        by_key = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or {"lane", "label"} - set(reader.fieldnames):
                raise ValueError("truth CSV needs columns lane,label")
            for row in reader:
                by_key[row["lane"]] = int(row["label"])
    labels = []
    for gel_id, lane in lane_keys:
        key = f"{gel_id}:{lane}"
        if key not in by_key:
            raise ValueError(f"truth file has no label for lane {key}")
        labels.append(int(by_key[key]))
    return np.asarray(labels, dtype=int)


def stage_cluster(traces_path, manifest_path, out_dir, nboot: int, seed: int,
                  truth_path=None, n_values=None, zmap_path=None,
                  aligned_path=None, draw_thin: int = 1) -> Path:
    manifest = read_manifest(manifest_path) if manifest_path else None
    grid = read_traces_csv(traces_path, manifest)
    lane_keys = grid.lane_keys(include_reference=False)
    if len(lane_keys) < 2:
        raise ValueError("need at least two sample lanes to cluster")

    D = distance_matrix(grid)
    dend = hclust_complete(D)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "dendrogram.nwk", "w") as fh:
        fh.write(to_newick(dend) + "\n")

    conf = bootstrap_confidence(grid, nboot, np.random.default_rng(seed))
    write_confidence(conf, out / "confidence.json")

    truth = None
    if truth_path:
        truth = read_truth_labels(truth_path, lane_keys)

    N = len(lane_keys)
    if n_values is None:
        n_values = list(range(2, N + 1))
    if zmap_path and aligned_path:
        # quality bands across the stored assignment draws
        amanifest = read_manifest(manifest_path) if manifest_path else None
        agrid = read_traces_csv(aligned_path, amanifest)
        payload = read_zmap(zmap_path)
        peaks = peaks_from_zmap(payload, agrid.B)
        rows = posterior_clustering_summary(
            agrid, peaks, payload["z_draws"], payload["L"],
            truth=truth, n_values=n_values, thin=draw_thin,
        )
    else:
        rows = []
        for n in n_values:
            labels = cut(dend, n)
            row = {"n": n, "silhouette": average_silhouette(D, labels)}
            if truth is not None:
                a = adjusted_rand(labels, truth)
                row.update(ari_mean=a, ari_lo=a, ari_hi=a)
            rows.append(row)
    write_metrics(rows, out / "metrics.csv")

    plot = out / "plotdata"
    plot.mkdir(exist_ok=True)
    write_metrics(rows, plot / "fig_quality.csv")
    _write_merge_table(dend, conf, plot / "fig_dendrogram.csv")
    return out


def _write_merge_table(dend, conf: dict, path) -> None:
    """Merge-by-merge dendrogram series with subtree confidences."""
    leaf_names = {
        i: f"{k[0]}:{k[1]}" if isinstance(k, tuple) else str(k)
        for i, k in enumerate(dend.labels)
    }
    members = {i: frozenset([i]) for i in range(dend.n_leaves)}
    conf_by_leafset = {frozenset(k): c for k, c in conf.items()}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["merge", "left", "right", "height", "confidence", "leaves"])
        for k, (a, b, h) in enumerate(dend.merges):
            node = dend.n_leaves + k
            members[node] = members[a] | members[b]
            keys = frozenset(dend.labels[i] for i in members[node])
            c = conf_by_leafset.get(keys, "")
            names = "|".join(sorted(leaf_names[i] for i in members[node]))
            writer.writerow([k, a, b, f"{h:.10g}",
                             "" if c == "" else f"{c:.10g}", names])


def stage_plotdata(run_dir, out_dir) -> Path:
    run = Path(run_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    metrics = run / "clusters" / "metrics.csv"
    if metrics.is_file():
        (out / "fig_quality.csv").write_bytes(metrics.read_bytes())
    merge_table = run / "clusters" / "plotdata" / "fig_dendrogram.csv"
    if merge_table.is_file():
        (out / "fig_dendrogram.csv").write_bytes(merge_table.read_bytes())

    zmap_path = run / "posterior" / "zmap.json"
    warp_path = run / "posterior" / "warp.json"
    if zmap_path.is_file() and warp_path.is_file():
        with open(zmap_path) as fh:
            zpayload = json.load(fh)
        L = zpayload["L"]
        ax = Standardizer.from_dict(zpayload["axis_standardizer"])
        nu = LandmarkGrid(L).nu
        fields = read_warp_fields(warp_path)
        with open(out / "fig_warps.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["gel", "lane", "landmark", "nu", "s"])
            for gel_id in sorted(fields):
                field, std = fields[gel_id]
                values = ax.invert(
                    eval_warp_grid(field, ax.apply(nu), np.asarray(std["u_std"]))
                )
                for col, lane in enumerate(std["lanes"]):
                    for ell in range(L + 2):
                        writer.writerow([
                            gel_id, lane, ell,
                            f"{nu[ell]:.10g}", f"{values[ell, col]:.10g}",
                        ])
        with open(out / "fig_connections.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["gel", "lane", "peak", "location", "landmark",
                             "landmark_nu", "probability"])
            for key in sorted(zpayload["lanes"]):
                entry = zpayload["lanes"][key]
                for j, (loc, ell) in enumerate(
                    zip(entry["locations"], entry["z_map"]), start=1
                ):
                    prob = entry["marginals"][j - 1][ell]
                    writer.writerow([
                        entry["gel_id"], entry["lane"], j, f"{loc:.10g}",
                        ell, f"{nu[ell]:.10g}", f"{prob:.10g}",
                    ])

    landmarks_path = run / "posterior" / "landmarks.json"
    if landmarks_path.is_file():
        with open(landmarks_path) as fh:
            lpayload = json.load(fh)
        with open(out / "fig_landmarks.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["lane", "landmark", "probability"])
            for key in sorted(lpayload["lanes"]):
                for ell, p in enumerate(lpayload["lanes"][key], start=1):
                    writer.writerow([key, ell, f"{p:.10g}"])
    return out


# ---------------------------------------------------------------------------
# Pipeline orchestration
# ---------------------------------------------------------------------------


def run_pipeline(config_path, resume: bool = False, threads: int | None = None) -> Path:
    cfg = load_config(config_path)
    if threads is not None:
        cfg["threads"] = threads
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    hash_file = out / "hashes.json"
    hashes = {}
    if resume and hash_file.is_file():
        with open(hash_file) as fh:
            hashes = json.load(fh)

    traces = cfg["inputs"]["traces"]
    manifest = cfg["inputs"]["manifest"]
    truth = cfg["inputs"]["truth"]
    seed = cfg["seed"]

    def done(stage: str, digest: str, outputs: list[Path]) -> bool:
        return (
            resume
            and hashes.get(stage) == digest
            and all(Path(p).exists() for p in outputs)
        )

    def record(stage: str, digest: str) -> None:
        hashes[stage] = digest
        with open(hash_file, "w") as fh:
            json.dump(hashes, fh, indent=1, sort_keys=True)
            fh.write("\n")

    def run_stage(stage, digest, outputs, fn):
        if done(stage, digest, outputs):
            print(f"stage {stage}: up to date, skipped")
            return
        try:
            fn()
        except Exception as exc:
            raise StageError(stage, str(exc)) from exc
        record(stage, digest)
        print(f"stage {stage}: wrote {', '.join(str(p) for p in outputs)}")

    peaks_raw = out / "peaks_raw.json"
    aligned = out / "aligned.csv"
    refmaps = out / "refmaps.json"
    peaks_aligned = out / "peaks.json"
    posterior = out / "posterior"
    exact = out / "exact.csv"
    clusters = out / "clusters"

    d = _hash_parts(traces, manifest, cfg["detect"])
    run_stage("detect", d, [peaks_raw], lambda: stage_detect(
        traces, manifest, cfg["detect"]["h"], cfg["detect"]["c0"], peaks_raw,
        threads=cfg["threads"], standardize=cfg["detect"]["standardize"],
    ))

    d = _hash_parts(traces, manifest, peaks_raw, cfg["refalign"])
    run_stage("refalign", d, [aligned, refmaps], lambda: stage_refalign(
        traces, manifest, peaks_raw, cfg["refalign"]["template"], aligned, refmaps,
    ))

    # peaks are re-called on the reference-aligned traces so the sampler sees
    # locations on the template's coordinate system
    d = _hash_parts(aligned, manifest, cfg["detect"])
    run_stage("redetect", d, [peaks_aligned], lambda: stage_detect(
        aligned, manifest, cfg["detect"]["h"], cfg["detect"]["c0"], peaks_aligned,
        threads=cfg["threads"], standardize=cfg["detect"]["standardize"],
    ))

    d = _hash_parts(peaks_aligned, manifest, cfg["dewarp"], seed)
    run_stage("dewarp", d, [posterior / "zmap.json"], lambda: stage_dewarp(
        peaks_aligned, model_config_from(cfg["dewarp"], seed), posterior,
        manifest_path=manifest,
    ))

    d = _hash_parts(aligned, manifest, posterior / "zmap.json", cfg["align"])
    run_stage("align", d, [exact], lambda: stage_align(
        aligned, manifest, posterior / "zmap.json", cfg["align"]["z_source"], exact,
    ))

    d = _hash_parts(exact, manifest, cfg["cluster"], seed, truth)
    run_stage("cluster", d, [clusters / "metrics.csv"], lambda: stage_cluster(
        exact, manifest, clusters, cfg["cluster"]["nboot"], seed,
        truth_path=truth, n_values=cfg["cluster"]["n_values"],
        zmap_path=posterior / "zmap.json", aligned_path=aligned,
        draw_thin=cfg["cluster"]["draw_thin"],
    ))
    return out


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gelwarp",
        description="Batch alignment pipeline for banded 1-D intensity traces.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic batch with truth")
    p.add_argument("--spec", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)

    p = sub.add_parser("detect", help="call peaks on every lane")
    p.add_argument("--input", required=True)
    p.add_argument("--manifest")
    p.add_argument("--h", type=int, default=10)
    p.add_argument("--c0", type=float, default=0.05)
    p.add_argument("--standardize", default="minmax", choices=["minmax", "quantile"])
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("refalign", help="align gels through their reference lanes")
    p.add_argument("--input", required=True)
    p.add_argument("--manifest")
    p.add_argument("--peaks", required=True)
    p.add_argument("--template")
    p.add_argument("--out", required=True)
    p.add_argument("--map-out", required=True)

    p = sub.add_parser("dewarp", help="posterior warp and assignment sampling")
    p.add_argument("--peaks", required=True)
    p.add_argument("--config", required=True, help="JSON with model settings")
    p.add_argument("--manifest")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)

    p = sub.add_parser("align", help="snap peaks onto their assigned landmarks")
    p.add_argument("--input", required=True)
    p.add_argument("--manifest")
    p.add_argument("--zmap", required=True)
    p.add_argument("--z-source", default="map")
    p.add_argument("--out", required=True)

    p = sub.add_parser("cluster", help="hierarchical clustering with quality measures")
    p.add_argument("--input", required=True)
    p.add_argument("--manifest")
    p.add_argument("--nboot", type=int, default=1000)
    p.add_argument("--truth")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--zmap", help="posterior draws for quality bands")
    p.add_argument("--aligned", help="reference-aligned traces matching --zmap")
    p.add_argument("--out", required=True)

    p = sub.add_parser("pipeline", help="run every stage from one config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--threads", type=int)

    p = sub.add_parser("plotdata", help="export figure-ready CSV series")
    p.add_argument("--run", required=True, help="pipeline output directory")
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        if ns.command == "simulate":
            stage_simulate(ns.spec, ns.seed, ns.out)
        elif ns.command == "detect":
            stage_detect(ns.input, ns.manifest, ns.h, ns.c0, ns.out,
                         threads=ns.threads, standardize=ns.standardize)
        elif ns.command == "refalign":
            stage_refalign(ns.input, ns.manifest, ns.peaks, ns.template,
                           ns.out, ns.map_out)
        elif ns.command == "dewarp":
            with open(ns.config) as fh:
                section = json.load(fh)
            stage_dewarp(ns.peaks, model_config_from(section, ns.seed), ns.out,
                         manifest_path=ns.manifest)
        elif ns.command == "align":
            stage_align(ns.input, ns.manifest, ns.zmap, ns.z_source, ns.out)
        elif ns.command == "cluster":
            stage_cluster(ns.input, ns.manifest, ns.out, ns.nboot, ns.seed,
                          truth_path=ns.truth, zmap_path=ns.zmap,
                          aligned_path=ns.aligned)
        elif ns.command == "pipeline":
            run_pipeline(ns.config, resume=ns.resume, threads=ns.threads)
        elif ns.command == "plotdata":
            out = ns.out if ns.out else Path(ns.run) / "plotdata"
            stage_plotdata(ns.run, out)
    except StageError as exc:
        print(f"gelwarp: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"gelwarp {ns.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
