"""Experiment orchestration: multi-seed calibration builds, compression,
held-out evaluation, and the data-quantity / temperature-grid ablations.

Per-seed results aggregate to mean and population standard deviation
(divide by the number of seeds). Every run is reproducible from its
config: calibration seeds default to ``seed + k`` for seed slot ``k``,
and each (method, source, seed) cell is an independent pure computation,
so the grid may be evaluated by any number of worker threads.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from itertools import product
from pathlib import Path

import numpy as np

from .calibration import (
    CalibrationSpec,
    CalibrationSet,
    TemperatureSchedule,
    build_calibration_set,
)
from .compress import CompressionConfig, compress_model
from .errors import ContractViolation, CorpusTooSmallError
from .tiny_lm import (
    BOS_ID,
    ByteTokenizer,
    ModelCheckpoint,
    load_checkpoint,
    next_token_accuracy,
    perplexity,
)

DEFAULT_SIZES = (1, 2, 4, 8, 16, 32, 64, 128)
DEFAULT_GRID = (0.0, 0.5, 1.0, 1.5, 2.0)
ABLATIONS = ("none", "quantity", "temperature_grid")


@dataclass(frozen=True)
class ExperimentConfig:
    model_path: str = ""
    out_dir: str = "results"
    methods: tuple[str, ...] = ("sparsegpt", "wanda")
    sources: tuple[str, ...] = ("self", "random_vocab")
    num_seeds: int = 5
    seed: int = 0
    num_examples: int = 32
    example_len: int = 256
    t_initial: float = 1.0
    t_final: float = 1.0
    ramp: int = 10
    stopword_constraint: bool = False
    corpus_path: str | None = None
    eval_corpus_path: str | None = None
    eval_examples: int = 16
    eval_len: int = 256
    ablation: str = "none"
    sizes: tuple[int, ...] = DEFAULT_SIZES
    grid_values: tuple[float, ...] = DEFAULT_GRID
    threads: int = 1
    compress_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.num_seeds < 1:
            raise ContractViolation("num_seeds must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ContractViolation(f"unknown ablation {self.ablation!r}")
        prev = 0
        for n in self.sizes:
            if n <= prev or n & (n - 1):
                raise ContractViolation("sizes must be ascending powers of two")
            prev = n

    @property
    def seeds(self) -> list[int]:
        return [self.seed + k for k in range(self.num_seeds)]

    def schedule(self) -> TemperatureSchedule:
        return TemperatureSchedule(self.t_initial, self.t_final, self.ramp)

    def compression(self, method: str) -> CompressionConfig:
        return CompressionConfig(method=method, **self.compress_overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("methods", "sources", "sizes", "grid_values"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        for key in ("methods", "sources", "sizes", "grid_values"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ResultRow:
    method: str
    source: str
    setting: str
    per_seed: dict[int, dict] = field(default_factory=dict)  # seed slot -> metrics
    errors: dict[int, str] = field(default_factory=dict)

    def _values(self, key: str) -> np.ndarray:
        return np.array([self.per_seed[k][key] for k in sorted(self.per_seed)])

    def mean(self, key: str) -> float:
        return float(self._values(key).mean())

    def std(self, key: str) -> float:
        return float(self._values(key).std())  # population convention


class ResultTable:
    """Rows keyed by (method, source, setting)."""

    def __init__(self):
        self.rows: dict[tuple[str, str, str], ResultRow] = {}

    def row(self, method: str, source: str, setting: str = "") -> ResultRow:
        key = (method, source, setting)
        if key not in self.rows:
            self.rows[key] = ResultRow(method, source, setting)
        return self.rows[key]

    def record(self, method, source, setting, seed_slot, metrics) -> None:
        self.row(method, source, setting).per_seed[seed_slot] = metrics

    def record_error(self, method, source, setting, seed_slot, message) -> None:
        self.row(method, source, setting).errors[seed_slot] = message

    def to_dict(self) -> dict:
        out = {"stddev": "population", "rows": []}
        for key in sorted(self.rows):
            row = self.rows[key]
            entry = {
                "method": row.method,
                "source": row.source,
                "setting": row.setting,
                "per_seed": {str(k): row.per_seed[k] for k in sorted(row.per_seed)},
                "errors": {str(k): row.errors[k] for k in sorted(row.errors)},
            }
            if row.per_seed:
                entry["mean"] = {
                    "ppl": row.mean("ppl"),
                    "next_token_acc": row.mean("next_token_acc"),
                }
                entry["std"] = {
                    "ppl": row.std("ppl"),
                    "next_token_acc": row.std("next_token_acc"),
                }
            out["rows"].append(entry)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("method,source,setting,seed,ppl,next_token_acc\n")
            for key in sorted(self.rows):
                row = self.rows[key]
                for k in sorted(row.per_seed):
                    m = row.per_seed[k]
                    fh.write(
                        f"{row.method},{row.source},{row.setting},{k},"
                        f"{m['ppl']!r},{m['next_token_acc']!r}\n"
                    )

    def write_aggregate_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(
                "method,source,setting,num_seeds,"
                "mean_ppl,std_ppl,mean_next_token_acc,std_next_token_acc\n"
            )
            for key in sorted(self.rows):
                row = self.rows[key]
                if not row.per_seed:
                    continue
                fh.write(
                    f"{row.method},{row.source},{row.setting},{len(row.per_seed)},"
                    f"{row.mean('ppl')!r},{row.std('ppl')!r},"
                    f"{row.mean('next_token_acc')!r},{row.std('next_token_acc')!r}\n"
                )


def load_eval_windows(path, num: int, length: int) -> list[np.ndarray]:
    """First ``num`` non-overlapping windows of the evaluation corpus,
    each BOS-prefixed to match the training layout."""
    tokens = ByteTokenizer().encode(Path(path).read_bytes())
    if tokens.size < num * length:
        raise CorpusTooSmallError(
            f"eval corpus has {tokens.size} tokens, need {num * length}"
        )
    windows = []
    for i in range(num):
        body = tokens[i * length : (i + 1) * length]
        windows.append(np.concatenate(([BOS_ID], body)))
    return windows


def evaluate_model(model: ModelCheckpoint, eval_data) -> dict:
    return {
        "ppl": perplexity(model, eval_data),
        "next_token_acc": next_token_accuracy(model, eval_data),
    }


def _calibration_spec(cfg: ExperimentConfig, source: str, seed: int,
                      num_examples: int | None = None) -> CalibrationSpec:
    return CalibrationSpec(
        source=source,
        num_examples=num_examples or cfg.num_examples,
        example_len=cfg.example_len,
        seed=seed,
        schedule=cfg.schedule(),
        stopword_constraint=cfg.stopword_constraint if source == "self" else False,
        corpus_path=cfg.corpus_path if source == "corpus" else None,
    )


class _Runner:
    """Shared plumbing for the experiment and the ablations."""

    def __init__(self, cfg: ExperimentConfig, model: ModelCheckpoint | None = None):
        self.cfg = cfg
        self.model = model if model is not None else load_checkpoint(cfg.model_path)
        if cfg.eval_corpus_path is None:
            raise ContractViolation("eval_corpus_path is required")
        self.eval_data = load_eval_windows(
            cfg.eval_corpus_path, cfg.eval_examples, cfg.eval_len
        )
        self._corpus_tokens = None

    def corpus_tokens(self):
        if self._corpus_tokens is None:
            if self.cfg.corpus_path is None:
                raise ContractViolation("corpus source needs corpus_path")
            self._corpus_tokens = ByteTokenizer().encode(
                Path(self.cfg.corpus_path).read_bytes()
            )
        return self._corpus_tokens

    def build_set(self, spec: CalibrationSpec) -> CalibrationSet:
        corpus = self.corpus_tokens() if spec.source == "corpus" else None
        return build_calibration_set(spec, model=self.model, corpus_tokens=corpus)

    def run_cells(self, cells, table: ResultTable) -> None:
        """``cells`` are (method, source, setting, seed_slot, calib_set);
        results land in the table keyed independently of execution order."""

        def one(cell):
            method, source, setting, slot, calib = cell
            compressed, _ = compress_model(
                self.model, calib, self.cfg.compression(method)
            )
            return evaluate_model(compressed, self.eval_data)

        if self.cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.threads) as pool:
                outcomes = list(pool.map(lambda c: _guard(one, c), cells))
        else:
            outcomes = [_guard(one, c) for c in cells]
        for cell, outcome in zip(cells, outcomes):
            method, source, setting, slot, _ = cell
            if isinstance(outcome, Exception):
                table.record_error(method, source, setting, slot, repr(outcome))
            else:
                table.record(method, source, setting, slot, outcome)


def _guard(fn, cell):
    try:
        return fn(cell)
    except Exception as exc:  # noqa: BLE001 - cell failures must not kill the run
        return exc


def _build_sets(runner: "_Runner", specs: dict) -> dict:
    """Build each calibration set, mapping failures to the exception (a
    failed build aborts only the cells that would have used that set)."""
    return {key: _guard(runner.build_set, spec) for key, spec in specs.items()}


def _dispatch(runner, table, sets, cells) -> None:
    """Record build failures, run the remaining cells."""
    runnable = []
    for method, source, setting, slot, key, transform in cells:
        built = sets[key]
        if isinstance(built, Exception):
            table.record_error(method, source, setting, slot, repr(built))
        else:
            runnable.append((method, source, setting, slot, transform(built)))
    runner.run_cells(runnable, table)


def run_experiment(
    cfg: ExperimentConfig, model: ModelCheckpoint | None = None
) -> ResultTable:
    """One compression + evaluation cell per (method, source, seed)."""
    runner = _Runner(cfg, model)
    sets = _build_sets(
        runner,
        {
            (source, slot): _calibration_spec(cfg, source, cfg.seeds[slot])
            for source in cfg.sources
            for slot in range(cfg.num_seeds)
        },
    )
    cells = [
        (method, source, "", slot, (source, slot), lambda s: s)
        for method in cfg.methods
        for source in cfg.sources
        for slot in range(cfg.num_seeds)
    ]
    table = ResultTable()
    _dispatch(runner, table, sets, cells)
    return table


def ablate_quantity(
    cfg: ExperimentConfig, model: ModelCheckpoint | None = None
) -> ResultTable:
    """Re-run every cell on nested prefixes of a max-size base set.

    The size-n subset is always the first n examples of the seed's base
    set, so the size curves are comparable across n.
    """
    runner = _Runner(cfg, model)
    base_n = max(cfg.sizes)
    bases = _build_sets(
        runner,
        {
            (source, slot): _calibration_spec(
                cfg, source, cfg.seeds[slot], num_examples=base_n
            )
            for source in cfg.sources
            for slot in range(cfg.num_seeds)
        },
    )
    cells = [
        (method, source, f"n={n}", slot, (source, slot),
         lambda s, n=n: s.prefix(n))
        for method in cfg.methods
        for source in cfg.sources
        for n in cfg.sizes
        for slot in range(cfg.num_seeds)
    ]
    table = ResultTable()
    _dispatch(runner, table, bases, cells)
    return table


def ablate_temperature_grid(
    cfg: ExperimentConfig, model: ModelCheckpoint | None = None
) -> ResultTable:
    """Joint sweep over (t_initial, t_final) for self-generated sets."""
    if "self" not in cfg.sources:
        raise ContractViolation("temperature grid ablation needs the self source")
    runner = _Runner(cfg, model)
    specs = {}
    for t0, t1 in product(cfg.grid_values, cfg.grid_values):
        for slot in range(cfg.num_seeds):
            specs[(t0, t1, slot)] = CalibrationSpec(
                source="self",
                num_examples=cfg.num_examples,
                example_len=cfg.example_len,
                seed=cfg.seeds[slot],
                schedule=TemperatureSchedule(t0, t1, cfg.ramp),
                stopword_constraint=cfg.stopword_constraint,
            )
    sets = _build_sets(runner, specs)
    cells = [
        (method, "self", f"t_initial={t0},t_final={t1}", slot, (t0, t1, slot),
         lambda s: s)
        for (t0, t1, slot) in specs
        for method in cfg.methods
    ]
    table = ResultTable()
    _dispatch(runner, table, sets, cells)
    return table


def write_heatmaps(table: ResultTable, cfg: ExperimentConfig, out_dir) -> None:
    """One t_initial x t_final CSV of mean perplexity per method."""
    out_dir = Path(out_dir)
    for method in cfg.methods:
        lines = ["t_initial\\t_final," + ",".join(str(v) for v in cfg.grid_values)]
        for t0 in cfg.grid_values:
            cells = []
            for t1 in cfg.grid_values:
                row = table.rows.get(
                    (method, "self", f"t_initial={t0},t_final={t1}")
                )
                cells.append(repr(row.mean("ppl")) if row and row.per_seed else "")
            lines.append(f"{t0}," + ",".join(cells))
        (out_dir / f"heatmap_{method}.csv").write_text(
            "\n".join(lines) + "\n", encoding="utf-8"
        )


def write_result_files(table: ResultTable, out_dir) -> dict[str, str]:
    """ResultTable as canonical JSON plus per-seed and aggregate CSVs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": str(out_dir / "results.json"),
        "csv": str(out_dir / "results.csv"),
        "aggregate_csv": str(out_dir / "results_aggregate.csv"),
    }
    Path(paths["json"]).write_text(table.to_json() + "\n", encoding="utf-8")
    table.write_csv(paths["csv"])
    table.write_aggregate_csv(paths["aggregate_csv"])
    return paths
