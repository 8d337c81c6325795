"""Multi-modal samples, task streams, synthetic generators and dataset files.

Dataset file layout (JSON lines, UTF-8):

* line 1, the manifest::

    {"format": "mmcl-dataset", "version": 1, "scenario": "class",
     "label_mode": "single", "num_modalities": 2, "seq_lens": [4, 6],
     "raw_dims": [12, 10], "num_classes": 8, "num_records": 1200,
     "tasks": [{"task": 1, "classes": [0, 1]}, ...]}

* every further line is one sample::

    {"id": 0, "task": 1, "split": "train", "label": 0,
     "modalities": [{"shape": [4, 12], "data": [...row-major floats...]}, ...]}

  ``label`` is an int (single-label) or a list of class ids (multi-label).
  Floats are written with Python's shortest round-trip repr, so a
  save/load cycle is bit-exact.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DatasetParseError, SchemaError

FORMAT_NAME = "mmcl-dataset"
FORMAT_VERSION = 1
SCENARIOS = ("class", "domain")


@dataclass
class MultiModalSample:
    modalities: list[np.ndarray]
    label: int | tuple[int, ...]
    task: int
    uid: int


@dataclass
class SampleSet:
    """Column-wise storage of samples: one (n, seq_len, raw_dim) array per modality."""

    features: list[np.ndarray]
    labels: np.ndarray
    tasks: np.ndarray
    ids: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.labels)
        if any(len(x) != n for x in self.features) or len(self.tasks) != n or len(self.ids) != n:
            raise ContractError("sample set columns disagree on length")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> MultiModalSample:
        label = self.labels[i]
        label = int(label) if np.ndim(label) == 0 else tuple(int(c) for c in np.flatnonzero(label))
        return MultiModalSample([x[i] for x in self.features], label, int(self.tasks[i]), int(self.ids[i]))

    def subset(self, idx) -> SampleSet:
        idx = np.asarray(idx, dtype=np.intp)
        return SampleSet([x[idx] for x in self.features], self.labels[idx], self.tasks[idx], self.ids[idx])

    @classmethod
    def concat(cls, parts: list[SampleSet]) -> SampleSet:
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ContractError("cannot concatenate zero non-empty sample sets")
        return cls(
            [np.concatenate([p.features[k] for p in parts]) for k in range(len(parts[0].features))],
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.tasks for p in parts]),
            np.concatenate([p.ids for p in parts]),
        )

    @classmethod
    def empty_like(cls, other: SampleSet) -> SampleSet:
        return other.subset([])

    def class_keys(self) -> list:
        if self.labels.ndim == 1:
            return [int(c) for c in self.labels]
        return [tuple(int(c) for c in np.flatnonzero(row)) for row in self.labels]


@dataclass
class Task:
    task_id: int
    classes: tuple[int, ...]
    train: SampleSet
    test: SampleSet


@dataclass
class TaskStream:
    scenario: str
    tasks: list[Task]
    seq_lens: tuple[int, ...]
    raw_dims: tuple[int, ...]
    num_classes: int
    label_mode: str = "single"

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ContractError(f"scenario must be one of {SCENARIOS}")
        if not self.tasks:
            raise ContractError("task stream is empty")
        sets = [set(t.classes) for t in self.tasks]
        if self.scenario == "class":
            for i in range(len(sets)):
                for j in range(i + 1, len(sets)):
                    if sets[i] & sets[j]:
                        raise ContractError("class-incremental tasks must have disjoint classes")
        elif any(s != sets[0] for s in sets):
            raise ContractError("domain-incremental tasks must share one class set")

    @property
    def num_modalities(self) -> int:
        return len(self.seq_lens)

    def __len__(self) -> int:
        return len(self.tasks)


# ------------------------------------------------------------------ synthesis


@dataclass(frozen=True)
class SynthSpec:
    """Knobs of the synthetic stream.

    Each class has one prototype matrix per modality. A sample adds a
    per-sample latent factor shared by all modalities (``cross_modal``
    scales it) and i.i.d. noise. On top, a random per-sample sign flips a
    class-specific ``interaction`` pattern in modality 0; the sign itself is
    written only into modality 1 (as a fixed marker), so telling the flipped
    and unflipped pattern apart needs both modalities.
    """

    num_modalities: int = 2
    raw_dims: tuple[int, ...] = (12, 10)
    seq_lens: tuple[int, ...] = (4, 6)
    num_tasks: int = 4
    classes_per_task: int = 2
    train_per_class: int = 100
    test_per_class: int = 50
    signal: float = 1.0
    noise: float = 1.0
    cross_modal: float = 1.0
    interaction: float = 1.0
    latent_dim: int = 4
    domain_shift: float = 1.0
    max_classes: int = 1024
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_modalities < 2:
            raise ContractError("cross-modality requires K >= 2")
        if len(self.raw_dims) != self.num_modalities or len(self.seq_lens) != self.num_modalities:
            raise ContractError("raw_dims and seq_lens need one entry per modality")
        if self.signal <= 0:
            raise ContractError("signal strength must be positive")
        if self.noise < 0 or self.domain_shift < 0 or self.cross_modal < 0 or self.interaction < 0:
            raise ContractError("noise, cross_modal, interaction and domain_shift must be >= 0")
        if min(self.num_tasks, self.classes_per_task, self.train_per_class, self.test_per_class,
               self.latent_dim) < 1:
            raise ContractError("task, class, sample and latent counts must be >= 1")


class _Generator:
    def __init__(self, spec: SynthSpec, num_classes: int):
        self.spec = spec
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(1)[0])
        shapes = list(zip(spec.seq_lens, spec.raw_dims))
        self.prototypes = [[spec.signal * rng.standard_normal(s) for s in shapes]
                           for _ in range(num_classes)]
        self.patterns = [spec.interaction * rng.standard_normal(shapes[0]) for _ in range(num_classes)]
        self.marker = spec.interaction * rng.standard_normal(spec.raw_dims[1])
        self.loadings = [rng.standard_normal((spec.latent_dim, r)) / np.sqrt(spec.latent_dim)
                         for r in spec.raw_dims]
        self.next_id = 0

    def sample_set(self, classes, per_class: int, task: int, rng: np.random.Generator,
                   transforms=None) -> SampleSet:
        spec = self.spec
        labels = np.repeat(np.asarray(classes, dtype=np.int64), per_class)
        n = len(labels)
        latent = rng.standard_normal((n, spec.latent_dim))
        sign = rng.choice([-1.0, 1.0], size=n)
        features = []
        for k, (s, r) in enumerate(zip(spec.seq_lens, spec.raw_dims)):
            proto = np.stack([self.prototypes[c][k] for c in labels])
            shared = spec.cross_modal * (latent @ self.loadings[k])[:, None, :]
            x = proto + shared + spec.noise * rng.standard_normal((n, s, r))
            if k == 0:
                x = x + sign[:, None, None] * np.stack([self.patterns[c] for c in labels])
            elif k == 1:
                x = x + sign[:, None, None] * self.marker
            if transforms is not None:
                rot, shift = transforms[k]
                x = x @ rot + shift
            features.append(x)
        ids = np.arange(self.next_id, self.next_id + n, dtype=np.int64)
        self.next_id += n
        return SampleSet(features, labels, np.full(n, task, dtype=np.int64), ids)


def _task_rngs(spec: SynthSpec) -> list[np.random.Generator]:
    return [np.random.default_rng(ss) for ss in np.random.SeedSequence(spec.seed).spawn(spec.num_tasks + 1)[1:]]


def generate_class_incremental(spec: SynthSpec) -> TaskStream:
    total = spec.num_tasks * spec.classes_per_task
    if total > spec.max_classes:
        raise ContractError(f"{total} classes exceed the prototype budget of {spec.max_classes}")
    gen = _Generator(spec, total)
    tasks = []
    for t, rng in enumerate(_task_rngs(spec), start=1):
        classes = tuple(range((t - 1) * spec.classes_per_task, t * spec.classes_per_task))
        train = gen.sample_set(classes, spec.train_per_class, t, rng)
        test = gen.sample_set(classes, spec.test_per_class, t, rng)
        tasks.append(Task(t, classes, train, test))
    return TaskStream("class", tasks, tuple(spec.seq_lens), tuple(spec.raw_dims), total)


def domain_transform(dim: int, magnitude: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Rotation (Cayley map of a random skew matrix scaled by ``magnitude``) and shift."""
    a = rng.standard_normal((dim, dim))
    skew = magnitude * (a - a.T) / 2.0
    eye = np.eye(dim)
    rot = np.linalg.solve(eye - skew / 2.0, eye + skew / 2.0)
    shift = magnitude * rng.standard_normal(dim)
    return rot, shift


def generate_domain_incremental(spec: SynthSpec) -> TaskStream:
    classes = tuple(range(spec.classes_per_task))
    gen = _Generator(spec, len(classes))
    tasks = []
    for t, rng in enumerate(_task_rngs(spec), start=1):
        transforms = [domain_transform(r, spec.domain_shift, rng) for r in spec.raw_dims]
        train = gen.sample_set(classes, spec.train_per_class, t, rng, transforms)
        test = gen.sample_set(classes, spec.test_per_class, t, rng, transforms)
        tasks.append(Task(t, classes, train, test))
    return TaskStream("domain", tasks, tuple(spec.seq_lens), tuple(spec.raw_dims), len(classes))


def generate(spec: SynthSpec, scenario: str) -> TaskStream:
    if scenario == "class":
        return generate_class_incremental(spec)
    if scenario == "domain":
        return generate_domain_incremental(spec)
    raise ContractError(f"scenario must be one of {SCENARIOS}")


# ----------------------------------------------------------------------- files


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _label_json(label) -> int | list[int]:
    if np.ndim(label) == 0:
        return int(label)
    return [int(c) for c in np.flatnonzero(label)]


def dumps_dataset(stream: TaskStream) -> str:
    records = []
    for task in stream.tasks:
        for split, ss in (("train", task.train), ("test", task.test)):
            for i in range(len(ss)):
                records.append(json.dumps({
                    "id": int(ss.ids[i]),
                    "task": task.task_id,
                    "split": split,
                    "label": _label_json(ss.labels[i]),
                    "modalities": [
                        {"shape": list(x[i].shape), "data": x[i].ravel().tolist()}
                        for x in ss.features
                    ],
                }, separators=(",", ":")))
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "scenario": stream.scenario,
        "label_mode": stream.label_mode,
        "num_modalities": stream.num_modalities,
        "seq_lens": list(stream.seq_lens),
        "raw_dims": list(stream.raw_dims),
        "num_classes": stream.num_classes,
        "num_records": len(records),
        "tasks": [{"task": t.task_id, "classes": list(t.classes)} for t in stream.tasks],
    }
    return "\n".join([json.dumps(manifest, separators=(",", ":"))] + records) + "\n"


def save_dataset(stream: TaskStream, path: str | os.PathLike) -> None:
    atomic_write_text(path, dumps_dataset(stream))


def _require(obj: dict, key: str, kind, line: int):
    if not isinstance(obj, dict) or key not in obj:
        raise DatasetParseError(f"missing field {key!r}", line)
    value = obj[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise DatasetParseError(f"field {key!r} has wrong type", line)
    return value


def load_dataset(path: str | os.PathLike) -> TaskStream:
    """Parse a dataset file; raises before returning anything on any defect."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetParseError("empty file", 1)

    def parse(i: int) -> dict:
        try:
            obj = json.loads(lines[i])
        except json.JSONDecodeError as exc:
            raise DatasetParseError(f"invalid JSON: {exc.msg}", i + 1) from None
        if not isinstance(obj, dict):
            raise DatasetParseError("record is not an object", i + 1)
        return obj

    manifest = parse(0)
    if manifest.get("format") != FORMAT_NAME or manifest.get("version") != FORMAT_VERSION:
        raise DatasetParseError("not an mmcl-dataset v1 manifest", 1)
    scenario = _require(manifest, "scenario", str, 1)
    label_mode = _require(manifest, "label_mode", str, 1)
    k = _require(manifest, "num_modalities", int, 1)
    seq_lens = tuple(_require(manifest, "seq_lens", list, 1))
    raw_dims = tuple(_require(manifest, "raw_dims", list, 1))
    num_classes = _require(manifest, "num_classes", int, 1)
    num_records = _require(manifest, "num_records", int, 1)
    task_entries = _require(manifest, "tasks", list, 1)
    if len(seq_lens) != k or len(raw_dims) != k:
        raise SchemaError("manifest seq_lens/raw_dims do not match num_modalities")
    if label_mode not in ("single", "multi"):
        raise SchemaError(f"unknown label_mode {label_mode!r}")
    if len(lines) - 1 != num_records:
        raise DatasetParseError(
            f"expected {num_records} records, found {len(lines) - 1} (truncated file?)", len(lines))

    task_classes = {}
    for entry in task_entries:
        task_classes[_require(entry, "task", int, 1)] = tuple(_require(entry, "classes", list, 1))
    rows: dict[tuple[int, str], list] = {(t, s): [] for t in task_classes for s in ("train", "test")}
    for i in range(1, len(lines)):
        line = i + 1
        rec = parse(i)
        uid = _require(rec, "id", int, line)
        task = _require(rec, "task", int, line)
        split = _require(rec, "split", str, line)
        label = rec.get("label")
        mods = _require(rec, "modalities", list, line)
        if (task, split) not in rows:
            raise SchemaError(f"line {line}: unknown task {task} or split {split!r}")
        if len(mods) != k:
            raise SchemaError(f"line {line}: {len(mods)} modalities, manifest says {k}")
        arrays = []
        for m, (s, r) in enumerate(zip(seq_lens, raw_dims)):
            shape = tuple(_require(mods[m], "shape", list, line))
            data = _require(mods[m], "data", list, line)
            if shape != (s, r):
                raise SchemaError(f"line {line}: modality {m} shape {shape} != {(s, r)}")
            try:
                arr = np.array(data, dtype=np.float64)
            except (TypeError, ValueError):
                raise DatasetParseError(f"modality {m} data is not numeric", line) from None
            if arr.shape != (s * r,):
                raise DatasetParseError(f"modality {m} has {arr.size} values, shape needs {s * r}", line)
            if not np.all(np.isfinite(arr)):
                raise DatasetParseError(f"modality {m} holds non-finite values", line)
            arrays.append(arr.reshape(s, r))
        if label_mode == "single":
            if not isinstance(label, int) or isinstance(label, bool) or not 0 <= label < num_classes:
                raise DatasetParseError("single-label record needs an int label in range", line)
            lab = label
        else:
            if not isinstance(label, list) or not all(isinstance(c, int) and 0 <= c < num_classes for c in label):
                raise DatasetParseError("multi-label record needs a list of class ids", line)
            lab = np.zeros(num_classes, dtype=np.int64)
            lab[label] = 1
        rows[(task, split)].append((arrays, lab, uid))

    def build(items, task: int) -> SampleSet:
        n = len(items)
        feats = [np.array([it[0][m] for it in items]).reshape(n, s, r)
                 for m, (s, r) in enumerate(zip(seq_lens, raw_dims))]
        if label_mode == "single":
            labels = np.array([it[1] for it in items], dtype=np.int64)
        else:
            labels = np.array([it[1] for it in items], dtype=np.int64).reshape(n, num_classes)
        return SampleSet(feats, labels, np.full(n, task, dtype=np.int64),
                         np.array([it[2] for it in items], dtype=np.int64))

    tasks = [Task(t, cls, build(rows[(t, "train")], t), build(rows[(t, "test")], t))
             for t, cls in task_classes.items()]
    try:
        return TaskStream(scenario, tasks, seq_lens, raw_dims, num_classes, label_mode)
    except ContractError as exc:
        raise SchemaError(str(exc)) from None
