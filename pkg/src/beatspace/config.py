"""Run configuration: a single TOML file drives the whole pipeline.

Schema (all tables optional unless noted):

    [run]
    output_dir = "runs/demo"       # required for `run`
    seed = 0
    per_record = false             # embed each record separately

    [data]
    cache_dir = "mitdb-cache"      # env BEATSPACE_CACHE overrides
    base_url = "https://physionet.org/files/mitdb/1.0.0/"
    records = ["116"]              # or "study-subset" (default): first lead
                                   # MLII, second V1 among cached records
    leads = ["MLII"]               # subset of {MLII, V1}

    [beats]
    kernel = 127                   # median-filter size, odd
    order = "resample-then-filter" # or "filter-then-resample"

    [sample]                       # mixed-population subsample (off if absent)
    size = 12000
    seed = 0                       # defaults to run seed

    [algorithms]
    enabled = ["pca", "tsne", "umap"]

    [tsne]                         # any TsneParams field
    perplexity = 30.0

    [umap]                         # any UmapParams field
    n_neighbors = 15

    [evaluate]
    tasks = ["patient_id", "gender", "aami", "binary"]
    k_grid = [11, 51, 101, 201]    # default [5, 21, 41] when per_record
    trustworthiness_k = 0          # 0 disables

    [clusters]
    enabled = true
    resolution = 512
    dilation_radius = 1

    [plots]
    enabled = true
"""

from __future__ import annotations

import os

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from dataclasses import dataclass, field
from pathlib import Path

from .fetch import DEFAULT_BASE_URL

__all__ = ["ConfigError", "RunConfig", "load_config"]

VALID_LEADS = ("MLII", "V1")
VALID_ALGORITHMS = ("pca", "tsne", "umap")
VALID_TASKS = ("patient_id", "gender", "aami", "binary")
MIXED_K_GRID = [11, 51, 101, 201]
PER_RECORD_K_GRID = [5, 21, 41]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    output_dir: Path
    seed: int = 0
    per_record: bool = False
    cache_dir: Path = Path("mitdb-cache")
    base_url: str = DEFAULT_BASE_URL
    records: list[str] | str = "study-subset"
    leads: list[str] = field(default_factory=lambda: ["MLII", "V1"])
    beat_kernel: int = 127
    beat_order: str = "resample-then-filter"
    subsample_size: int | None = None
    subsample_seed: int | None = None
    algorithms: list[str] = field(default_factory=lambda: list(VALID_ALGORITHMS))
    tsne: dict = field(default_factory=dict)
    umap: dict = field(default_factory=dict)
    tasks: list[str] = field(default_factory=lambda: list(VALID_TASKS))
    k_grid: list[int] | None = None
    trustworthiness_k: int = 0
    clusters_enabled: bool = True
    cluster_resolution: int = 512
    cluster_dilation: int = 1
    plots_enabled: bool = True
    source_text: str = ""

    def effective_k_grid(self) -> list[int]:
        if self.k_grid is not None:
            return self.k_grid
        return PER_RECORD_K_GRID if self.per_record else MIXED_K_GRID

    def validate(self) -> None:
        if not self.algorithms:
            raise ConfigError("algorithms.enabled must not be empty")
        for a in self.algorithms:
            if a not in VALID_ALGORITHMS:
                raise ConfigError(f"unknown algorithm {a!r} (valid: {VALID_ALGORITHMS})")
        if not self.leads:
            raise ConfigError("data.leads must not be empty")
        for lead in self.leads:
            if lead not in VALID_LEADS:
                raise ConfigError(f"unknown lead {lead!r} (valid: {VALID_LEADS})")
        for t in self.tasks:
            if t not in VALID_TASKS:
                raise ConfigError(f"unknown task {t!r} (valid: {VALID_TASKS})")
        if self.beat_kernel % 2 == 0 or self.beat_kernel < 1:
            raise ConfigError("beats.kernel must be a positive odd integer")
        if self.beat_order not in ("resample-then-filter", "filter-then-resample"):
            raise ConfigError(f"unknown beats.order {self.beat_order!r}")
        if self.subsample_size is not None and self.subsample_size < 1:
            raise ConfigError("sample.size must be positive")
        for k in self.effective_k_grid():
            if k < 1:
                raise ConfigError("evaluate.k_grid entries must be positive")
        if isinstance(self.records, str) and self.records != "study-subset":
            raise ConfigError('data.records must be a list of ids or "study-subset"')


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a TOML run configuration."""
    path = Path(path)
    text = path.read_text()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    run = data.get("run", {})
    data_tbl = data.get("data", {})
    beats_tbl = data.get("beats", {})
    sample = data.get("sample", {})
    algos = data.get("algorithms", {})
    ev = data.get("evaluate", {})
    cl = data.get("clusters", {})
    plots = data.get("plots", {})

    if "output_dir" not in run:
        raise ConfigError("run.output_dir is required")

    cache_dir = os.environ.get("BEATSPACE_CACHE") or data_tbl.get("cache_dir", "mitdb-cache")

    cfg = RunConfig(
        output_dir=Path(run["output_dir"]),
        seed=int(run.get("seed", 0)),
        per_record=bool(run.get("per_record", False)),
        cache_dir=Path(cache_dir),
        base_url=data_tbl.get("base_url", DEFAULT_BASE_URL),
        records=data_tbl.get("records", "study-subset"),
        leads=list(data_tbl.get("leads", ["MLII", "V1"])),
        beat_kernel=int(beats_tbl.get("kernel", 127)),
        beat_order=beats_tbl.get("order", "resample-then-filter"),
        subsample_size=int(sample["size"]) if "size" in sample else None,
        subsample_seed=int(sample["seed"]) if "seed" in sample else None,
        algorithms=list(algos.get("enabled", list(VALID_ALGORITHMS))),
        tsne=dict(data.get("tsne", {})),
        umap=dict(data.get("umap", {})),
        tasks=list(ev.get("tasks", list(VALID_TASKS))),
        k_grid=[int(k) for k in ev["k_grid"]] if "k_grid" in ev else None,
        trustworthiness_k=int(ev.get("trustworthiness_k", 0)),
        clusters_enabled=bool(cl.get("enabled", True)),
        cluster_resolution=int(cl.get("resolution", 512)),
        cluster_dilation=int(cl.get("dilation_radius", 1)),
        plots_enabled=bool(plots.get("enabled", True)),
        source_text=text,
    )
    if isinstance(cfg.records, list):
        cfg.records = [str(r) for r in cfg.records]
    cfg.validate()
    return cfg
