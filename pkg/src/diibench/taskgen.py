"""Templatic minimal-pair tasks: parsing, pair sampling, datasets, control remapping."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

REGION_KINDS = ("constant", "variable", "label_variable")
DEFAULT_CONTROL_LABELS = (" dog", " give")


class TaskSpecError(ValueError):
    """Raised for malformed task-spec documents or violated template invariants."""


class DatasetExhaustedError(RuntimeError):
    """Raised when a disjoint eval set cannot be drawn within the resample budget."""


@dataclass(frozen=True)
class RegionSpec:
    name: str
    kind: str
    text: str = ""
    # label_variable: type -> options; variable: flat list; constant: unused
    options: Mapping[str, tuple[str, ...]] | tuple[str, ...] = ()


@dataclass(frozen=True)
class TaskTemplate:
    name: str
    regions: tuple[RegionSpec, ...]
    types: tuple[str, ...]
    label_options: Mapping[str, tuple[str, ...]]
    control_labels: tuple[str, str] = DEFAULT_CONTROL_LABELS

    @property
    def region_names(self) -> tuple[str, ...]:
        return tuple(r.name for r in self.regions)

    @property
    def label_region(self) -> RegionSpec:
        return next(r for r in self.regions if r.kind == "label_variable")

    def type_class(self, t: str) -> int:
        """Binary class of a type: 0 for the first declared type, 1 otherwise."""
        return 0 if t == self.types[0] else 1


@dataclass(frozen=True)
class EvalExample:
    base_regions: tuple[str, ...]
    source_regions: tuple[str, ...]
    base_label: str
    source_label: str
    types: tuple[str, str]

    @property
    def base(self) -> str:
        return join_regions(self.base_regions)

    @property
    def source(self) -> str:
        return join_regions(self.source_regions)

    def mirror(self) -> EvalExample:
        return EvalExample(
            base_regions=self.source_regions,
            source_regions=self.base_regions,
            base_label=self.source_label,
            source_label=self.base_label,
            types=(self.types[1], self.types[0]),
        )


@dataclass(frozen=True)
class Dataset:
    train: tuple[EvalExample, ...]
    eval: tuple[EvalExample, ...]
    seed: int
    template_name: str = ""
    control: bool = False

    def to_json(self) -> str:
        def ex(e: EvalExample) -> dict:
            return {
                "base_regions": list(e.base_regions),
                "source_regions": list(e.source_regions),
                "base_label": e.base_label,
                "source_label": e.source_label,
                "types": list(e.types),
            }

        doc = {
            "template": self.template_name,
            "seed": self.seed,
            "control": self.control,
            "train": [ex(e) for e in self.train],
            "eval": [ex(e) for e in self.eval],
        }
        return json.dumps(doc, sort_keys=True, ensure_ascii=False)


def join_regions(parts: Sequence[str]) -> str:
    """Regions after the first are joined with a single leading space."""
    return " ".join(parts)


def _fail(path: str, msg: str) -> TaskSpecError:
    return TaskSpecError(f"{path}: {msg}")


def _str_list(value, path: str) -> tuple[str, ...]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise _fail(path, "expected a list of strings")
    return tuple(value)


def load_task_spec(text: str | Mapping) -> TaskTemplate:
    """Parse a task-spec JSON document (string or already-decoded mapping)."""
    if isinstance(text, str):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise TaskSpecError(f"line {e.lineno} col {e.colno}: {e.msg}") from e
    else:
        doc = text
    if not isinstance(doc, dict):
        raise _fail("$", "expected an object")
    for key in ("name", "types", "regions", "label_options"):
        if key not in doc:
            raise _fail(f"$.{key}", "missing required field")
    name = doc["name"]
    if not isinstance(name, str) or not name:
        raise _fail("$.name", "expected a nonempty string")
    types = _str_list(doc["types"], "$.types")
    if len(set(types)) != len(types):
        raise _fail("$.types", "duplicate type names")
    if not isinstance(doc["regions"], list) or not doc["regions"]:
        raise _fail("$.regions", "expected a nonempty list")

    regions: list[RegionSpec] = []
    seen: set[str] = set()
    for i, r in enumerate(doc["regions"]):
        path = f"$.regions[{i}]"
        if not isinstance(r, dict):
            raise _fail(path, "expected an object")
        rname, kind = r.get("name"), r.get("kind")
        if not isinstance(rname, str) or not rname:
            raise _fail(f"{path}.name", "expected a nonempty string")
        if rname in seen:
            raise _fail(f"{path}.name", f"duplicate region name {rname!r}")
        seen.add(rname)
        if kind not in REGION_KINDS:
            raise _fail(f"{path}.kind", f"expected one of {REGION_KINDS}, got {kind!r}")
        if kind == "constant":
            text_ = r.get("text")
            if not isinstance(text_, str) or not text_.strip():
                raise _fail(f"{path}.text", "constant region needs nonempty text")
            regions.append(RegionSpec(rname, kind, text=text_))
        elif kind == "variable":
            opts = _str_list(r.get("options"), f"{path}.options")
            if not opts:
                raise _fail(f"{path}.options", "variable region needs at least one option")
            if any(not o.strip() for o in opts):
                raise _fail(f"{path}.options", "options must be nonempty")
            regions.append(RegionSpec(rname, kind, options=opts))
        else:
            raw = r.get("options")
            if not isinstance(raw, dict):
                raise _fail(f"{path}.options", "label_variable options must map type -> list")
            opts_map = {t: _str_list(v, f"{path}.options.{t}") for t, v in raw.items()}
            for t, v in opts_map.items():
                if any(not o.strip() for o in v):
                    raise _fail(f"{path}.options.{t}", "options must be nonempty")
            regions.append(RegionSpec(rname, kind, options=opts_map))

    raw_labels = doc["label_options"]
    if not isinstance(raw_labels, dict):
        raise _fail("$.label_options", "expected an object mapping type -> list")
    label_options = {t: _str_list(v, f"$.label_options.{t}") for t, v in raw_labels.items()}
    control = doc.get("control_labels", list(DEFAULT_CONTROL_LABELS))
    control = _str_list(control, "$.control_labels")
    if len(control) != 2:
        raise _fail("$.control_labels", "expected exactly two labels")

    template = TaskTemplate(
        name=name,
        regions=tuple(regions),
        types=types,
        label_options=label_options,
        control_labels=(control[0], control[1]),
    )
    validate_template(template)
    return template


def validate_template(t: TaskTemplate) -> None:
    labelled = [r for r in t.regions if r.kind == "label_variable"]
    if len(labelled) != 1:
        raise TaskSpecError(f"exactly one label_variable region required, found {len(labelled)}")
    if len(t.types) < 2:
        raise TaskSpecError("need ≥2 types")
    lv = labelled[0]
    if len([ty for ty in lv.options if lv.options[ty]]) < 2:
        raise TaskSpecError(f"need ≥2 types in label_variable region {lv.name!r}")
    unknown = (set(lv.options) | set(t.label_options)) - set(t.types)
    if unknown:
        raise TaskSpecError(f"undeclared types referenced: {sorted(unknown)}")
    for ty in t.types:
        if not lv.options.get(ty):
            raise TaskSpecError(f"type {ty!r} has no option in label_variable region {lv.name!r}")
        if not t.label_options.get(ty):
            raise TaskSpecError(f"type {ty!r} has no label options")
    for ty, labels in t.label_options.items():
        if any(lab == "" for lab in labels):
            raise TaskSpecError(f"empty label string for type {ty!r}")
    if any(lab == "" for lab in t.control_labels):
        raise TaskSpecError("empty control label")
    # pairs must actually differ in the label slot
    owners: dict[str, str] = {}
    for ty in t.types:
        for o in lv.options[ty]:
            if owners.setdefault(o, ty) != ty:
                raise TaskSpecError(f"label_variable option {o!r} shared by types {owners[o]!r} and {ty!r}")


def load_task_file(path: str | Path) -> TaskTemplate:
    return load_task_spec(Path(path).read_text(encoding="utf-8"))


def bundled_task_names() -> list[str]:
    root = resources.files("diibench") / "tasks"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_bundled_task(name: str) -> TaskTemplate:
    res = resources.files("diibench") / "tasks" / f"{name}.json"
    if not res.is_file():
        raise TaskSpecError(f"no bundled task named {name!r}; have {bundled_task_names()}")
    return load_task_spec(res.read_text(encoding="utf-8"))


def resolve_task(name_or_path: str) -> TaskTemplate:
    p = Path(name_or_path)
    if p.suffix == ".json" and p.exists():
        return load_task_file(p)
    return load_bundled_task(name_or_path)


def _choice(rng: np.random.Generator, seq: Sequence):
    return seq[int(rng.integers(len(seq)))]


def sample_pair(template: TaskTemplate, rng: np.random.Generator) -> EvalExample:
    """Draw one counterfactual pair: distinct types, per-type label slot, shared fillers."""
    types = template.types
    i1 = int(rng.integers(len(types)))
    i2 = int(rng.integers(len(types) - 1))
    if i2 >= i1:
        i2 += 1
    t1, t2 = types[i1], types[i2]
    base, source = [], []
    for r in template.regions:
        if r.kind == "constant":
            base.append(r.text)
            source.append(r.text)
        elif r.kind == "variable":
            o = _choice(rng, r.options)
            base.append(o)
            source.append(o)
        else:
            base.append(_choice(rng, r.options[t1]))
            source.append(_choice(rng, r.options[t2]))
    return EvalExample(
        base_regions=tuple(base),
        source_regions=tuple(source),
        base_label=_choice(rng, template.label_options[t1]),
        source_label=_choice(rng, template.label_options[t2]),
        types=(t1, t2),
    )


def build_dataset(
    template: TaskTemplate, n_train_pairs: int, n_eval_pairs: int, seed: int
) -> Dataset:
    """Mirrored train/eval splits; eval pairs never reuse a train base sentence."""
    if n_train_pairs < 1 or n_eval_pairs < 1:
        raise ValueError("n_train_pairs and n_eval_pairs must be ≥ 1")
    rng = np.random.default_rng(seed)
    train: list[EvalExample] = []
    for _ in range(n_train_pairs):
        e = sample_pair(template, rng)
        train.extend((e, e.mirror()))
    seen = {e.base for e in train}

    evals: list[EvalExample] = []
    budget = 100 * n_eval_pairs
    attempts = 0
    while len(evals) < 2 * n_eval_pairs:
        if attempts >= budget:
            raise DatasetExhaustedError(
                f"{template.name}: could only draw {len(evals) // 2}/{n_eval_pairs} eval pairs "
                f"disjoint from train after {budget} attempts"
            )
        attempts += 1
        e = sample_pair(template, rng)
        # the mirror makes s a base sentence too
        if e.base in seen or e.source in seen:
            continue
        evals.extend((e, e.mirror()))
    return Dataset(train=tuple(train), eval=tuple(evals), seed=seed, template_name=template.name)


def apply_control_remap(dataset: Dataset, template: TaskTemplate) -> Dataset:
    """Replace labels with the template's arbitrary control tokens, keeping the class partition."""
    first, second = template.control_labels

    def remap(e: EvalExample) -> EvalExample:
        yb = first if template.type_class(e.types[0]) == 0 else second
        ys = first if template.type_class(e.types[1]) == 0 else second
        return replace(e, base_label=yb, source_label=ys)

    return replace(
        dataset,
        train=tuple(remap(e) for e in dataset.train),
        eval=tuple(remap(e) for e in dataset.eval),
        control=True,
    )


def example_class(template: TaskTemplate, e: EvalExample) -> int:
    return template.type_class(e.types[0])
