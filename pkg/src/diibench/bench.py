"""Benchmark orchestration: datasets, site sweeps, fitting, evaluation, reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .encoded import EncodedPair, ForwardMemo, encode_examples
from .featfind import (
    METHODS,
    DasHyper,
    collect_activations,
    diff_means,
    fit_kmeans,
    fit_lda,
    fit_pca,
    fit_probe,
    random_direction,
    save_directions,
    train_das,
)
from .heatmap import HeatmapSpec, emit_heatmap
from .intervene import VANILLA, Direction, intervened_logprobs
from .metrics import BenchmarkRecord, OddsGrid, avg_odds, odds_ratio, overall_odds, selectivity, task_accuracy
from .model import Model, ModelConfig, load_checkpoint
from .taskgen import Dataset, TaskTemplate, apply_control_remap, build_dataset, example_class, resolve_task
from .tokenizer import Tokenizer, TokenizerError

log = logging.getLogger(__name__)

METHOD_NAMES = METHODS + ("vanilla",)
SITE_COLUMNS = ("task", "method", "checkpoint", "layer", "region", "avg_odds", "control_avg_odds", "n_eval", "seed")
SUMMARY_COLUMNS = ("task", "method", "checkpoint", "overall_odds", "selectivity", "accuracy")
FAILURE_COLUMNS = ("checkpoint", "task", "method", "layer", "region", "error", "message")
DTYPES = {"float32": np.float32, "float64": np.float64}


def default_probe_lambdas(d_model: int) -> tuple[float, ...]:
    """L2 strengths in the summed-loss convention (1/C), scaled with width.

    Wider models get two candidates and the better probe is reported.
    """
    if d_model <= 128:
        return (10.0,)
    if d_model <= 256:
        return (100.0,)
    if d_model <= 512:
        return (1e3,)
    if d_model <= 1024:
        return (1e4, 1e5)
    if d_model <= 2560:
        return (1e5, 1e6)
    return (1e6, 1e7)


@dataclass(frozen=True)
class RunConfig:
    model_dir: str | None = None
    checkpoint: str | None = None
    config_path: str | None = None
    tokenizer_path: str | None = None
    tasks: tuple[str, ...] = ("agr_sv_num_pp",)
    methods: tuple[str, ...] = METHOD_NAMES
    n_train_pairs: int = 200
    n_eval_pairs: int = 50
    seed: int = 0
    data_seed: int | None = None  # None: reuse `seed`
    das: DasHyper = field(default_factory=DasHyper)
    probe_lambdas: tuple[float, ...] | None = None  # None: chosen from d_model
    out_dir: str = "bench_out"
    jobs: int = 1
    checkpoints: tuple[str, ...] = ()
    dtype: str = "float32"
    heatmaps: bool = True
    save_directions: bool = False

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "checkpoints", tuple(self.checkpoints))
        if self.probe_lambdas is not None:
            object.__setattr__(self, "probe_lambdas", tuple(float(x) for x in self.probe_lambdas))
            if not self.probe_lambdas or any(not x > 0 for x in self.probe_lambdas):
                raise ValueError("probe_lambdas must be a nonempty list of positive numbers")
        bad = [m for m in self.methods if m not in METHOD_NAMES]
        if bad:
            raise ValueError(f"unknown method(s) {bad}; choose from {', '.join(METHOD_NAMES)}")
        if not self.methods or not self.tasks:
            raise ValueError("need at least one task and one method")
        if len(set(self.methods)) != len(self.methods) or len(set(self.tasks)) != len(self.tasks):
            raise ValueError("tasks and methods must not repeat")
        if self.n_train_pairs < 1 or self.n_eval_pairs < 1:
            raise ValueError("pair counts must be ≥ 1")
        if self.jobs < 1:
            raise ValueError("jobs must be ≥ 1")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")

    @property
    def dataset_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def paths(self) -> tuple[Path | None, Path, Path]:
        """(checkpoint, model config, tokenizer); the checkpoint is None for pure sweeps."""
        base = Path(self.model_dir) if self.model_dir else None

        def pick(explicit, default):
            if explicit:
                return Path(explicit)
            if base is None:
                raise ValueError(f"no model_dir, so {default} must be given explicitly")
            return base / default

        ckpt = None if (self.checkpoints and not self.checkpoint) else pick(self.checkpoint, "model.safetensors")
        return ckpt, pick(self.config_path, "config.json"), pick(self.tokenizer_path, ".")

    def check_files(self) -> None:
        ckpt, cfg, tok = self.paths()
        missing = [str(p) for p in (ckpt, cfg, tok, *map(Path, self.checkpoints)) if p is not None and not p.exists()]
        if missing:
            raise FileNotFoundError(f"missing: {', '.join(missing)}")

    @classmethod
    def from_dict(cls, doc: Mapping, base_dir: str | Path | None = None) -> RunConfig:
        doc = dict(doc)
        if "out" in doc:
            doc["out_dir"] = doc.pop("out")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        if isinstance(doc.get("das"), Mapping):
            doc["das"] = DasHyper(**doc["das"])
        if base_dir is not None:
            for key in ("model_dir", "checkpoint", "config_path", "tokenizer_path", "out_dir"):
                if doc.get(key):
                    doc[key] = str(Path(base_dir) / doc[key])
            if doc.get("checkpoints"):
                doc["checkpoints"] = [str(Path(base_dir) / c) for c in doc["checkpoints"]]
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        p = Path(path)
        return cls.from_dict(json.loads(p.read_text(encoding="utf-8")), base_dir=p.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["das"] = asdict(self.das)
        return d


# ------------------------------------------------------------- loading


def load_tokenizer(path: str | Path) -> Tokenizer:
    p = Path(path)
    if p.is_dir():
        return Tokenizer.from_dir(p)
    if p.name == "tokenizer.json":
        return Tokenizer.from_tokenizer_json(p)
    if p.suffix == ".json":
        return Tokenizer.from_bpe_files(p, p.with_name("merges.txt"))
    return Tokenizer.from_vocab_file(p)


def checkpoint_label(path: str | Path) -> str:
    p = Path(path)
    return p.parent.name if p.stem == "model" and p.parent.name else p.stem


def cell_seed(global_seed: int, task: str, method: str, layer: int, region: str) -> int:
    key = f"{global_seed}\x1f{task}\x1f{method}\x1f{layer}\x1f{region}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


# ------------------------------------------------------------- results


@dataclass(frozen=True)
class CellFailure:
    checkpoint: str
    task: str
    method: str
    layer: int | None
    region: str | None
    error: str
    message: str


@dataclass
class BenchResult:
    records: list[BenchmarkRecord] = field(default_factory=list)
    site_rows: list[dict] = field(default_factory=list)
    failures: list[CellFailure] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)  # (task, reason)
    grids: dict[tuple[str, str, str], tuple[OddsGrid, OddsGrid]] = field(default_factory=dict)
    # (checkpoint, task, layer, region, method) → task direction
    directions: dict[tuple, object] = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return 1 if self.failures else 0

    def extend(self, other: BenchResult) -> None:
        self.records += other.records
        self.site_rows += other.site_rows
        self.failures += other.failures
        self.skipped += other.skipped
        self.grids.update(other.grids)
        self.directions.update(other.directions)


@dataclass(frozen=True)
class PreparedTask:
    name: str
    template: TaskTemplate
    dataset: Dataset
    control: Dataset
    train: tuple[EncodedPair, ...]
    eval: tuple[EncodedPair, ...]
    control_train: tuple[EncodedPair, ...]
    control_eval: tuple[EncodedPair, ...]
    classes: tuple[int, ...]


def prepare_task(
    template: TaskTemplate, tok: Tokenizer, n_train_pairs: int, n_eval_pairs: int, seed: int
) -> PreparedTask:
    """Build, control-remap and encode one task; raises TokenizerError if it cannot align."""
    data = build_dataset(template, n_train_pairs, n_eval_pairs, seed)
    control = apply_control_remap(data, template)
    return PreparedTask(
        name=template.name,
        template=template,
        dataset=data,
        control=control,
        train=tuple(encode_examples(tok, template, data.train)),
        eval=tuple(encode_examples(tok, template, data.eval)),
        control_train=tuple(encode_examples(tok, template, control.train)),
        control_eval=tuple(encode_examples(tok, template, control.eval)),
        classes=tuple(example_class(template, e) for e in data.train),
    )


def prepare_tasks(config: RunConfig, tok: Tokenizer, checkpoint: str = "") -> tuple[list[PreparedTask], BenchResult]:
    prepared, result = [], BenchResult()
    for name in config.tasks:
        try:
            template = resolve_task(name)
            prepared.append(prepare_task(template, tok, config.n_train_pairs, config.n_eval_pairs, config.dataset_seed))
        except TokenizerError as exc:
            log.warning("skipping task %s: %s", name, exc)
            result.skipped.append((name, str(exc)))
        except Exception as exc:  # noqa: BLE001 - recorded, the run continues
            log.error("task %s failed to build: %s", name, exc)
            result.failures.append(CellFailure(checkpoint, name, "", None, None, type(exc).__name__, str(exc)))
    return prepared, result


# ---------------------------------------------------------------- cells


def _variants(config: RunConfig, model: Model) -> list[tuple[str, float | None]]:
    out = []
    lams = config.probe_lambdas or default_probe_lambdas(model.config.d_model)
    for m in config.methods:
        if m == "probe":
            out += [("probe", lam) for lam in lams]
        else:
            out.append((m, None))
    return out


def _fit(model, memo, task: PreparedTask, method, lam, layer, region, seed, das: DasHyper):
    """(task direction, control direction); identical objects when labels play no role."""
    if method == "vanilla":
        return VANILLA, VANILLA
    if method == "random":
        a = random_direction(model.config.d_model, seed)
        return a, a
    if method == "das":
        a = train_das(model, task.train, layer, region, das, seed, memo)
        c = train_das(model, task.control_train, layer, region, das, seed, memo)
        return a, c
    # supervised only through the class partition, which the control remap keeps
    acts = collect_activations(model, task.train, task.classes, layer, region, memo)
    if method == "probe":
        a = fit_probe(acts, l2_weight=lam / len(task.train))
    elif method == "mean":
        a = diff_means(acts)
    elif method == "lda":
        a = fit_lda(acts)
    elif method == "pca":
        a = fit_pca(acts)
    elif method == "kmeans":
        a = fit_kmeans(acts, seed)
    else:
        raise ValueError(f"unknown method {method!r}")
    return a, a


def _odds(logp, intv, p: EncodedPair) -> float:
    return odds_ratio((logp[p.y_b], logp[p.y_s]), (intv[p.y_b], intv[p.y_s]))


def _eval_odds(model, memo, pairs: Sequence[EncodedPair], layer, region, kind, control=None):
    """Per-example odds; with ``control`` pairs (same ids, other labels) both share each forward pass."""
    vals, cvals = [], []
    for i, p in enumerate(pairs):
        logp, cb = memo.get(p.ids_b)
        _, cs = memo.get(p.ids_s)
        intv = intervened_logprobs(model, p.ids_b, p.ids_s, p.alignment, layer, region, kind, cb, cs)
        vals.append(_odds(logp, intv, p))
        if control is not None:
            cvals.append(_odds(logp, intv, control[i]))
    return vals, cvals


def inert_site(pairs: Sequence[EncodedPair], region: str) -> bool:
    """True when base and source agree on every token up to the site.

    Then h_b = h_s there, every intervention is the identity, and the odds are
    exactly zero whatever the direction; class-based fits would be degenerate.
    """
    for p in pairs:
        pb, ps = p.alignment.base_index(region), p.alignment.source_index(region)
        if p.ids_b[: pb + 1] != p.ids_s[: ps + 1]:
            return False
    return True


def run_cell(model, memo, task: PreparedTask, method, lam, layer, region, config: RunConfig):
    """(task avg odds, control avg odds, task direction or None)."""
    if inert_site(task.eval, region):
        return 0.0, 0.0, None
    seed = cell_seed(config.seed, task.name, method, layer, region)
    a, c = _fit(model, memo, task, method, lam, layer, region, seed, config.das)
    if c is a:
        t, ctl = _eval_odds(model, memo, task.eval, layer, region, a, task.control_eval)
    else:
        t, _ = _eval_odds(model, memo, task.eval, layer, region, a)
        ctl, _ = _eval_odds(model, memo, task.control_eval, layer, region, c)
    return avg_odds(t), avg_odds(ctl), (a if isinstance(a, Direction) else None)


def _fmt(x: float) -> str:
    return repr(float(x))


def evaluate_model(model: Model, tasks: Sequence[PreparedTask], config: RunConfig, checkpoint: str) -> BenchResult:
    """Sweep every (task, method, layer, region) cell for one loaded model."""
    result = BenchResult()
    memo = ForwardMemo(model)
    for t in tasks:
        memo.warm(t.train)
        memo.warm(t.eval)
    variants = _variants(config, model)
    layers = list(range(model.n_layers))
    cells = [
        (ti, vi, layer, region)
        for ti, t in enumerate(tasks)
        for vi in range(len(variants))
        for layer in layers
        for region in t.template.region_names
    ]

    def work(cell):
        ti, vi, layer, region = cell
        method, lam = variants[vi]
        try:
            return run_cell(model, memo, tasks[ti], method, lam, layer, region, config)
        except Exception as exc:  # noqa: BLE001 - recorded per cell
            return exc

    if config.jobs == 1:
        outcomes = [work(c) for c in cells]
    else:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            outcomes = list(pool.map(work, cells))
    by_cell = dict(zip(cells, outcomes))

    for ti, t in enumerate(tasks):
        acc = task_accuracy(memo, t.eval)
        regions = t.template.region_names
        per_method: dict[str, list[tuple]] = {}
        failed_methods = set()
        for vi, (method, lam) in enumerate(variants):
            tv = np.zeros((len(layers), len(regions)))
            cv = np.zeros_like(tv)
            dirs = {}
            ok = True
            for li, layer in enumerate(layers):
                for ri, region in enumerate(regions):
                    out = by_cell[(ti, vi, layer, region)]
                    if isinstance(out, Exception):
                        ok = False
                        label = method if lam is None else f"probe(lambda={lam:g})"
                        log.error("cell %s/%s/%s/L%d/%s failed: %s", checkpoint, t.name, label, layer, region, out)
                        result.failures.append(
                            CellFailure(checkpoint, t.name, label, layer, region, type(out).__name__, str(out))
                        )
                    else:
                        tv[li, ri], cv[li, ri], dirs[(layer, region)] = out
            if not ok:
                failed_methods.add(method)
                continue
            grid = OddsGrid(tv, tuple(layers), regions, len(t.eval))
            cgrid = OddsGrid(cv, tuple(layers), regions, len(t.eval))
            per_method.setdefault(method, []).append((lam, grid, cgrid, dirs))

        for method in config.methods:
            if method in failed_methods or method not in per_method:
                continue
            runs = per_method[method]
            # the better of several probes; ties keep the first λ
            best = max(range(len(runs)), key=lambda i: (overall_odds(runs[i][1]), -i))
            lam, grid, cgrid, dirs = runs[best]
            for (layer, region), a in dirs.items():
                if a is not None:
                    result.directions[(checkpoint, t.name, layer, region, method)] = a
            if lam is not None and len(runs) > 1:
                log.info("%s/%s: probe lambda %g selected", checkpoint, t.name, lam)
            result.grids[(checkpoint, t.name, method)] = (grid, cgrid)
            result.records.append(
                BenchmarkRecord(
                    task=t.name,
                    method=method,
                    overall_odds=overall_odds(grid),
                    selectivity=selectivity(grid, cgrid),
                    accuracy=acc,
                    seed=config.seed,
                    checkpoint=checkpoint,
                )
            )
            for li, layer in enumerate(layers):
                for ri, region in enumerate(regions):
                    result.site_rows.append(
                        {
                            "task": t.name,
                            "method": method,
                            "checkpoint": checkpoint,
                            "layer": str(layer),
                            "region": region,
                            "avg_odds": _fmt(grid.values[li, ri]),
                            "control_avg_odds": _fmt(cgrid.values[li, ri]),
                            "n_eval": str(len(t.eval)),
                            "seed": str(config.seed),
                        }
                    )
    return result


# --------------------------------------------------------------- output


def _csv_text(columns: Sequence[str], rows: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r[k] for k in columns})
    return buf.getvalue()


def summary_rows(records: Sequence[BenchmarkRecord]) -> list[dict]:
    return [
        {
            "task": r.task,
            "method": r.method,
            "checkpoint": r.checkpoint,
            "overall_odds": _fmt(r.overall_odds),
            "selectivity": _fmt(r.selectivity),
            "accuracy": _fmt(r.accuracy),
        }
        for r in records
    ]


def region_axis_labels(task: PreparedTask) -> list[str]:
    e = task.dataset.eval[0]
    labels = []
    for name, b, s in zip(task.template.region_names, e.base_regions, e.source_regions):
        labels.append(f"{name}: {b}" if b == s else f"{name}: {b}/{s}")
    return labels


def write_outputs(
    out_dir: str | Path,
    result: BenchResult,
    tasks: Sequence[PreparedTask] = (),
    heatmaps: bool = True,
    save_dirs: bool = False,
) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sites.csv").write_text(_csv_text(SITE_COLUMNS, result.site_rows), encoding="utf-8")
    (out / "summary.csv").write_text(_csv_text(SUMMARY_COLUMNS, summary_rows(result.records)), encoding="utf-8")
    fail_path = out / "failures.csv"
    if result.failures:
        rows = [
            {k: ("" if v is None else str(v)) for k, v in asdict(f).items()} for f in result.failures
        ]
        fail_path.write_text(_csv_text(FAILURE_COLUMNS, rows), encoding="utf-8")
    elif fail_path.exists():
        fail_path.unlink()
    if save_dirs and result.directions:
        save_directions({k[1:]: v for k, v in result.directions.items()}, out / "directions.safetensors")
    if not heatmaps:
        return
    by_name = {t.name: t for t in tasks}
    hdir = out / "heatmaps"
    for (ckpt, task, method), (grid, _) in result.grids.items():
        hdir.mkdir(exist_ok=True)
        labels = region_axis_labels(by_name[task]) if task in by_name else None
        title = f"{task} / {method}" + (f" / {ckpt}" if ckpt else "")
        emit_heatmap(HeatmapSpec.for_grid(grid, labels, title), hdir / f"{task}__{method}.svg")


# ---------------------------------------------------------------- entry


def _sweep_labels(paths: Sequence[str]) -> list[str]:
    labels = [checkpoint_label(p) for p in paths]
    if len(set(labels)) == len(labels):
        return labels
    return [f"{i:02d}_{lab}" for i, lab in enumerate(labels)]


def run_benchmark(config: RunConfig, write: bool = True) -> BenchResult:
    """Run every configured cell; dispatches to a sweep when checkpoints are listed."""
    if config.checkpoints:
        return checkpoint_sweep(config, write=write)
    config.check_files()
    ckpt, cfg_path, tok_path = config.paths()
    model_cfg = ModelConfig.load(cfg_path)
    tok = load_tokenizer(tok_path)
    label = checkpoint_label(ckpt)
    tasks, result = prepare_tasks(config, tok, label)
    try:
        model = load_checkpoint(ckpt, model_cfg, DTYPES[config.dtype])
    except Exception as exc:  # noqa: BLE001
        result.failures.append(CellFailure(label, "", "", None, None, type(exc).__name__, str(exc)))
    else:
        result.extend(evaluate_model(model, tasks, config, label))
    if write:
        write_outputs(config.out_dir, result, tasks, config.heatmaps, config.save_directions)
    return result


def checkpoint_sweep(config: RunConfig, write: bool = True) -> BenchResult:
    """One subdirectory per checkpoint plus combined CSVs with a checkpoint column."""
    if not config.checkpoints:
        raise ValueError("checkpoint_sweep needs a checkpoint list")
    _, cfg_path, tok_path = config.paths()
    for p in (cfg_path, tok_path):
        if not p.exists():
            raise FileNotFoundError(p)
    model_cfg = ModelConfig.load(cfg_path)
    tok = load_tokenizer(tok_path)
    tasks, combined = prepare_tasks(config, tok)
    for path, label in zip(config.checkpoints, _sweep_labels(config.checkpoints)):
        part = BenchResult()
        try:
            model = load_checkpoint(path, model_cfg, DTYPES[config.dtype])
        except Exception as exc:  # noqa: BLE001 - isolate bad checkpoints
            log.error("checkpoint %s failed to load: %s", path, exc)
            part.failures.append(CellFailure(label, "", "", None, None, type(exc).__name__, str(exc)))
        else:
            log.info("checkpoint %s", label)
            part = evaluate_model(model, tasks, config, label)
        if write:
            write_outputs(Path(config.out_dir) / label, part, tasks, config.heatmaps, config.save_directions)
        combined.extend(part)
    if write:
        write_outputs(config.out_dir, replace(combined, grids={}, directions={}), tasks, heatmaps=False)
    return combined
