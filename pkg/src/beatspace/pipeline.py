"""Pipeline orchestration: fetch -> ingest -> segment -> embed -> evaluate
-> cluster -> report, driven by a RunConfig and recorded in a manifest.

Every stage writes its outputs under the run directory and registers them
(with content hashes) in ``manifest.json``.  Stages are deterministic for
a fixed config, so re-running a stage with unchanged inputs reproduces
its outputs byte for byte.  One run directory is owned by one run at a
time via a lock file.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .beats import BeatMatrix, build_dataset, csv_quote, stratified_subsample, write_beats_cache, write_beats_csv
from .clusters import dominant_label, extract_clusters
from .config import RunConfig
from .embedding import Embedding, read_embedding_csv, write_embedding_csv, write_provenance
from .evaluate import ConfusionMatrix, EvalReport, binary_arrhythmia_labels, knn_classify_loo, metrics, trustworthiness
from .neighbors import neighbor_order
from .fetch import MITDB_RECORD_IDS, fetch_all
from .pca import pca_fit, pca_transform
from .svgplot import scatter_svg, waveform_panels_svg
from .tsne import TsneParams, tsne_embed
from .umap import UmapParams, umap_embed
from . import wfdb

__all__ = ["StageError", "RunManifest", "cmd_fetch", "cmd_run", "cmd_report", "cmd_clusters", "embed_matrix"]

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunManifest:
    tool_version: str
    config_echo: str
    dataset_hash: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)

    def add(self, stage: str, run_dir: Path, paths: list[Path], seconds: float) -> None:
        outputs = {}
        for p in sorted(paths):
            outputs[str(p.relative_to(run_dir))] = _sha256(p)
        self.stages[stage] = {"outputs": outputs, "seconds": seconds}

    def write(self, path: Path) -> None:
        payload = {
            "tool_version": self.tool_version,
            "config_echo": self.config_echo,
            "dataset_hash": self.dataset_hash,
            "stages": self.stages,
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class _RunLock:
    def __init__(self, run_dir: Path):
        self.path = run_dir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"run directory is locked by {self.path}; remove it if no run is active"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def cmd_fetch(cfg: RunConfig) -> dict:
    """Fetch all 48 records into the cache and log the study-subset selection."""
    report = fetch_all(MITDB_RECORD_IDS, base_url=cfg.base_url, cache_dir=cfg.cache_dir)
    headers = []
    for record_id in sorted(report.fetched):
        headers.append(wfdb.parse_header((cfg.cache_dir / f"{record_id}.hea").read_bytes()))
    subset = wfdb.select_study_subset(headers)
    manifest = {
        "records": sorted(report.fetched),
        "failed": report.failed,
        "study_subset": subset,
    }
    (Path(cfg.cache_dir) / "fetch_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    log.info("fetched %d records (%d failed); study subset %d -> %d",
             len(report.fetched), len(report.failed), len(headers), len(subset))
    return manifest


def _resolve_records(cfg: RunConfig) -> list[str]:
    if isinstance(cfg.records, list):
        missing = [r for r in cfg.records if not (cfg.cache_dir / f"{r}.hea").is_file()]
        if missing:
            raise FileNotFoundError(
                f"records not cached: {missing}; run `beatspace fetch` first (cache: {cfg.cache_dir})"
            )
        return sorted(cfg.records)
    headers = []
    for record_id in MITDB_RECORD_IDS:
        hea = cfg.cache_dir / f"{record_id}.hea"
        if hea.is_file():
            headers.append(wfdb.parse_header(hea.read_bytes()))
    if not headers:
        raise FileNotFoundError(f"no cached records under {cfg.cache_dir}; run `beatspace fetch` first")
    return wfdb.select_study_subset(headers)


def embed_matrix(algorithm: str, X: np.ndarray, seed: int, tsne_overrides: dict | None = None,
                 umap_overrides: dict | None = None) -> Embedding:
    """Run one reducer on a beat matrix's waveforms."""
    if algorithm == "pca":
        model = pca_fit(np.asarray(X, dtype=np.float64), 2)
        Y = pca_transform(model, X)
        return Embedding(Y=Y, provenance={"algorithm": "pca", "seed": seed})
    if algorithm == "tsne":
        return tsne_embed(X, TsneParams(seed=seed, **(tsne_overrides or {})))
    if algorithm == "umap":
        return umap_embed(X, UmapParams(seed=seed, **(umap_overrides or {})))
    raise ValueError(f"unknown algorithm {algorithm!r}")


def _task_labels(bm: BeatMatrix, task: str) -> tuple[np.ndarray, np.ndarray, int]:
    """(labels, keep_mask, n_excluded) for one evaluation task."""
    n = len(bm)
    keep = np.ones(n, dtype=bool)
    if task == "patient_id":
        labels = np.asarray(bm.record_id, dtype=str)
    elif task == "gender":
        labels = np.asarray(bm.gender, dtype=str)
        keep = labels != "unknown"
    elif task == "aami":
        labels = np.asarray(bm.aami, dtype=str)
    elif task == "binary":
        labels = binary_arrhythmia_labels(bm.aami)
    else:
        raise ValueError(f"unknown task {task!r}")
    return labels, keep, int(n - keep.sum())


def _evaluate_embedding(
    bm: BeatMatrix, emb: Embedding, tasks: list[str], k_grid: list[int]
) -> list[tuple[str, int, int, int, EvalReport]]:
    """Rows of (task, k, n, excluded, report) for one embedding."""
    rows = []
    full_order = None
    for task in tasks:
        labels, keep, excluded = _task_labels(bm, task)
        if keep.all():
            Y = emb.Y
            lab = labels
            if full_order is None:
                full_order = neighbor_order(Y)
            order = full_order
        else:
            Y = emb.Y[keep]
            lab = labels[keep]
            order = neighbor_order(Y)
        n = Y.shape[0]
        uniq = set(lab.tolist())
        for k in k_grid:
            if k >= n or len(uniq) < 2:
                log.warning("skipping task=%s k=%d (n=%d, classes=%d)", task, k, n, len(uniq))
                continue
            pred = knn_classify_loo(Y, lab, k, order=order)
            cm = ConfusionMatrix.from_labels(lab, pred)
            rep = metrics(cm)
            rep.task, rep.k = task, k
            rows.append((task, k, n, excluded, rep))
    return rows


def _write_eval_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["scope", "task", "algorithm", "lead", "k", "n", "excluded", "accuracy", "f1"]
        )
        writer.writeheader()
        writer.writerows(rows)


def _append_confusion(f, scope: str, task: str, algorithm: str, lead: str, k: int, cm: ConfusionMatrix) -> None:
    f.write(f"# scope={scope} task={task} algorithm={algorithm} lead={lead} k={k}\n")
    f.write("truth\\pred," + ",".join(str(c) for c in cm.classes) + "\n")
    for i, cls in enumerate(cm.classes):
        f.write(str(cls) + "," + ",".join(str(v) for v in cm.counts[i]) + "\n")
    f.write("\n")


def _plot_colorings(plot_dir: Path, tag: str, bm: BeatMatrix, emb: Embedding) -> list[Path]:
    paths = []
    specs = [
        ("unlabeled", None),
        ("aami", np.asarray(bm.aami, dtype=str)),
        ("record", np.asarray(bm.record_id, dtype=str)),
        ("gender", np.asarray(bm.gender, dtype=str)),
    ]
    for name, labels in specs:
        p = plot_dir / f"scatter_{tag}_{name}.svg"
        scatter_svg(p, emb.Y, labels, title=f"{tag} ({name})")
        paths.append(p)
    return paths


def _write_cluster_outputs(out_dir: Path, bm: BeatMatrix, report) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    summary = out_dir / "clusters.csv"
    with open(summary, "w", newline="") as f:
        f.write("cluster_id,size,dominant_aami,purity,representatives\n")
        for c in report.clusters:
            label, purity = dominant_label(c)
            reps = " ".join(str(i) for i in c.representative_indices)
            f.write(f"{c.rank},{c.size},{label},{purity!r},{reps}\n")
    paths.append(summary)

    members = out_dir / "members.csv"
    with open(members, "w", newline="") as f:
        f.write("cluster_id,beat_index\n")
        for c in report.clusters:
            for i in c.member_indices:
                f.write(f"{c.rank},{i}\n")
    paths.append(members)

    waves = out_dir / "waveforms.csv"
    with open(waves, "w", newline="") as f:
        cols = ",".join(f"s{i}" for i in range(bm.X.shape[1]))
        f.write(f"cluster_id,kind,{cols}\n")
        for c in report.clusters:
            f.write(f"{c.rank},mean," + ",".join(repr(float(v)) for v in c.mean_waveform) + "\n")
            f.write(f"{c.rank},variance," + ",".join(repr(float(v)) for v in c.variance_waveform) + "\n")
    paths.append(waves)

    panels = []
    for c in report.clusters:
        label, purity = dominant_label(c)
        panels.append(
            {
                "title": f"cluster {c.rank} n={c.size} {label} ({purity:.2f})",
                "representatives": [bm.X[i] for i in c.representative_indices],
                "mean": c.mean_waveform,
                "std": np.sqrt(c.variance_waveform),
            }
        )
    svg = out_dir / "representatives.svg"
    waveform_panels_svg(svg, panels)
    paths.append(svg)
    return paths


def cmd_run(cfg: RunConfig) -> Path:
    """Execute the full pipeline; returns the run directory."""
    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with _RunLock(run_dir):
        return _run_locked(cfg, run_dir)


def _run_locked(cfg: RunConfig, run_dir: Path) -> Path:
    manifest = RunManifest(tool_version=__version__, config_echo=cfg.source_text)
    (run_dir / "config.toml").write_text(cfg.source_text)

    def staged(stage, fn):
        t0 = time.perf_counter()
        try:
            paths = fn()
        except Exception as exc:
            manifest.write(run_dir / "manifest.json")
            raise StageError(stage, exc) from exc
        manifest.add(stage, run_dir, paths, round(time.perf_counter() - t0, 3))
        log.info("stage %s done (%.1fs, %d files)", stage, time.perf_counter() - t0, len(paths))
        return paths

    records = _resolve_records(cfg)
    state: dict = {}

    def stage_beats():
        matrices = build_dataset(cfg.cache_dir, records, leads=cfg.leads,
                                 kernel=cfg.beat_kernel, order=cfg.beat_order)
        state["matrices"] = matrices
        paths = []
        for lead, bm in matrices.items():
            manifest.dataset_hash[lead] = bm.content_hash()
            csv_path = run_dir / f"beats_{lead}.csv"
            cache_path = run_dir / f"beats_{lead}.cmbm"
            write_beats_csv(bm, csv_path)
            write_beats_cache(bm, cache_path)
            paths += [csv_path, cache_path]
        return paths

    staged("beats", stage_beats)

    scopes: list[tuple[str, dict[str, BeatMatrix]]] = []
    if cfg.per_record:
        for record_id in records:
            sliced = {}
            for lead, bm in state["matrices"].items():
                mask = np.flatnonzero(np.asarray(bm.record_id, dtype=str) == record_id)
                sliced[lead] = bm.take(mask)
            scopes.append((record_id, sliced))
    else:
        matrices = state["matrices"]
        if cfg.subsample_size is not None:
            def stage_subsample():
                sub_seed = cfg.subsample_seed if cfg.subsample_seed is not None else cfg.seed
                paths = []
                sampled = {}
                for lead, bm in matrices.items():
                    idx = stratified_subsample(bm, cfg.subsample_size, sub_seed)
                    sampled[lead] = bm.take(idx)
                    p = run_dir / f"subsample_{lead}.csv"
                    with open(p, "w") as f:
                        f.write("row_index\n")
                        f.writelines(f"{i}\n" for i in idx)
                    paths.append(p)
                state["matrices"] = sampled
                return paths

            staged("subsample", stage_subsample)
        scopes.append(("mixed", state["matrices"]))

    embeddings: dict[tuple[str, str, str], Embedding] = {}

    def stage_embed():
        paths = []
        for scope, matrices in scopes:
            emb_dir = run_dir / "embeddings" / scope
            emb_dir.mkdir(parents=True, exist_ok=True)
            plot_dir = run_dir / "plots" / scope
            if cfg.plots_enabled:
                plot_dir.mkdir(parents=True, exist_ok=True)
            for lead in cfg.leads:
                bm = matrices[lead]
                for algorithm in cfg.algorithms:
                    emb = embed_matrix(algorithm, bm.X, cfg.seed, cfg.tsne, cfg.umap)
                    emb.provenance["lead"] = lead
                    emb.provenance["dataset_hash"] = bm.content_hash()
                    embeddings[(scope, algorithm, lead)] = emb
                    tag = f"{algorithm}_{lead}"
                    csv_path = emb_dir / f"embedding_{tag}.csv"
                    write_embedding_csv(
                        emb, csv_path,
                        meta={
                            "record_id": bm.record_id,
                            "r_sample": bm.r_sample,
                            "symbol": [csv_quote(str(s)) for s in bm.symbol],
                            "aami": bm.aami,
                            "gender": bm.gender,
                        },
                    )
                    prov_path = emb_dir / f"embedding_{tag}.provenance.txt"
                    write_provenance(emb, prov_path)
                    paths += [csv_path, prov_path]
                    if cfg.plots_enabled:
                        paths += _plot_colorings(plot_dir, tag, bm, emb)
        return paths

    staged("embed", stage_embed)

    def stage_evaluate():
        rows = []
        trust_rows = []
        conf_path = run_dir / "confusions.csv"
        with open(conf_path, "w", newline="") as conf:
            for scope, matrices in scopes:
                tasks = cfg.tasks
                if scope != "mixed":
                    tasks = [t for t in cfg.tasks if t in ("binary", "aami")] or ["binary"]
                for lead in cfg.leads:
                    bm = matrices[lead]
                    for algorithm in cfg.algorithms:
                        emb = embeddings[(scope, algorithm, lead)]
                        for task, k, n, excluded, rep in _evaluate_embedding(bm, emb, tasks, cfg.effective_k_grid()):
                            rows.append(
                                {
                                    "scope": scope, "task": task, "algorithm": algorithm,
                                    "lead": lead, "k": k, "n": n, "excluded": excluded,
                                    "accuracy": repr(rep.accuracy),
                                    "f1": "" if rep.f1 is None else repr(rep.f1),
                                }
                            )
                            _append_confusion(conf, scope, task, algorithm, lead, k, rep.confusion)
                        if cfg.trustworthiness_k > 0 and len(bm) > 2 * cfg.trustworthiness_k:
                            score = trustworthiness(bm.X, emb.Y, cfg.trustworthiness_k)
                            trust_rows.append(
                                {"scope": scope, "algorithm": algorithm, "lead": lead,
                                 "k": cfg.trustworthiness_k, "score": repr(score)}
                            )
        eval_path = run_dir / "evaluation.csv"
        _write_eval_csv(eval_path, rows)
        paths = [eval_path, conf_path]
        if trust_rows:
            t_path = run_dir / "trustworthiness.csv"
            with open(t_path, "w", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=["scope", "algorithm", "lead", "k", "score"])
                writer.writeheader()
                writer.writerows(trust_rows)
            paths.append(t_path)
        return paths

    staged("evaluate", stage_evaluate)

    if cfg.clusters_enabled:
        def stage_clusters():
            paths = []
            for scope, matrices in scopes:
                for lead in cfg.leads:
                    bm = matrices[lead]
                    for algorithm in cfg.algorithms:
                        emb = embeddings[(scope, algorithm, lead)]
                        report = extract_clusters(
                            bm, emb.Y,
                            resolution=cfg.cluster_resolution,
                            dilation_radius=cfg.cluster_dilation,
                            seed=cfg.seed,
                        )
                        out_dir = run_dir / "clusters" / scope / f"{algorithm}_{lead}"
                        paths += _write_cluster_outputs(out_dir, bm, report)
            return paths

        staged("clusters", stage_clusters)

    manifest.write(run_dir / "manifest.json")
    return run_dir


def cmd_report(run_dir: str | Path) -> str:
    """Format the evaluation tables; returns the text (also saved to report.txt)."""
    run_dir = Path(run_dir)
    eval_path = run_dir / "evaluation.csv"
    if not eval_path.is_file():
        raise FileNotFoundError(f"missing stage output {eval_path}; run the pipeline first")

    rows = []
    with open(eval_path, newline="") as f:
        reader = csv.DictReader(f)
        for line_no, row in enumerate(reader, start=2):
            try:
                rows.append(
                    {
                        "scope": row["scope"], "task": row["task"], "algorithm": row["algorithm"],
                        "lead": row["lead"], "k": int(row["k"]), "n": int(row["n"]),
                        "accuracy": float(row["accuracy"]),
                        "f1": float(row["f1"]) if row["f1"] else None,
                    }
                )
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{eval_path}: row {line_no}: {exc}") from exc

    out = []
    mixed = [r for r in rows if r["scope"] == "mixed"]
    per_record = [r for r in rows if r["scope"] != "mixed"]

    if mixed:
        out.append("== mixed population ==")
        ks = sorted({r["k"] for r in mixed})
        combos = sorted({(r["task"], r["lead"]) for r in mixed})
        for task, lead in combos:
            out.append(f"\ntask={task} lead={lead} (accuracy)")
            out.append("algorithm" + "".join(f"  k={k:>4}" for k in ks))
            for algorithm in sorted({r["algorithm"] for r in mixed}):
                cells = []
                for k in ks:
                    match = [r for r in mixed if r["task"] == task and r["lead"] == lead
                             and r["algorithm"] == algorithm and r["k"] == k]
                    cells.append(f"  {match[0]['accuracy']:.4f}" if match else "       -")
                out.append(f"{algorithm:<9}" + "".join(cells))

    if per_record:
        out.append("\n== per recording ==")
        combos = sorted({(r["task"], r["algorithm"], r["lead"], r["k"]) for r in per_record})
        for task, algorithm, lead, k in combos:
            sel = sorted(
                (r for r in per_record if r["task"] == task and r["algorithm"] == algorithm
                 and r["lead"] == lead and r["k"] == k),
                key=lambda r: r["scope"],
            )
            out.append(f"\ntask={task} algorithm={algorithm} lead={lead} k={k}")
            out.append("record    accuracy        f1")
            for r in sel:
                f1 = f"{r['f1']:.4f}" if r["f1"] is not None else "     -"
                out.append(f"{r['scope']:<9} {r['accuracy']:.4f}    {f1}")
            accs = np.array([r["accuracy"] for r in sel])
            f1s = np.array([r["f1"] for r in sel if r["f1"] is not None], dtype=np.float64)
            out.append(f"mean      {accs.mean():.4f}    " + (f"{f1s.mean():.4f}" if f1s.size else "     -"))
            out.append(f"median    {np.median(accs):.4f}    " + (f"{np.median(f1s):.4f}" if f1s.size else "     -"))

    text = "\n".join(out) + "\n"
    (run_dir / "report.txt").write_text(text)
    return text


def cmd_clusters(
    run_dir: str | Path,
    algorithm: str,
    lead: str,
    scope: str = "mixed",
    resolution: int = 512,
    dilation_radius: int = 1,
    seed: int = 0,
) -> Path:
    """Re-extract clusters from a stored embedding with new grid parameters."""
    from .beats import read_beats_cache

    run_dir = Path(run_dir)
    emb_path = run_dir / "embeddings" / scope / f"embedding_{algorithm}_{lead}.csv"
    cache_path = run_dir / f"beats_{lead}.cmbm"
    for p in (emb_path, cache_path):
        if not p.is_file():
            raise FileNotFoundError(f"missing stage output {p}")
    Y = read_embedding_csv(emb_path)
    bm = read_beats_cache(cache_path)
    if scope != "mixed":
        mask = np.flatnonzero(np.asarray(bm.record_id, dtype=str) == scope)
        bm = bm.take(mask)
    else:
        sub_path = run_dir / f"subsample_{lead}.csv"
        if sub_path.is_file():
            idx = np.array([int(line) for line in sub_path.read_text().splitlines()[1:]], dtype=np.int64)
            bm = bm.take(idx)
    if len(bm) != Y.shape[0]:
        raise ValueError(f"embedding rows ({Y.shape[0]}) do not match beats ({len(bm)})")
    report = extract_clusters(bm, Y, resolution=resolution, dilation_radius=dilation_radius, seed=seed)
    out_dir = run_dir / "clusters" / scope / f"{algorithm}_{lead}_r{resolution}_d{dilation_radius}"
    _write_cluster_outputs(out_dir, bm, report)
    return out_dir
