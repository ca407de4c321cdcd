"""Synthetic multimodal multitask dataset: generation, JSONL format, batching.

Each synthetic patient is a latent vector; every modality is a noisy
linear view of a (modality-specific) subset of latent dimensions, and task
labels are threshold/argmax functions of latent projections. Related tasks
share a latent direction, planting the cross-task synergy that multitask
training is meant to exploit. Modalities are dropped independently at
per-task rates, with rejection so every sample keeps at least one.

File format: one JSON object per line with fields
    {"id", "task", "label", "t", "i", "n"}
where absent modalities are null and arrays are nested lists of floats
rounded to 4 decimals. A `suite.json` manifest in the dataset directory
records task definitions and array dimensions.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .seqlayout import Modality
from .tasks import HeadKind, TaskSpec

FORMAT_VERSION = 1
SPLITS = ("train", "valid", "test")
SPLIT_RATIOS = (0.7, 0.1, 0.2)


@dataclass
class TaskGenSpec:
    """Recipe for one synthetic task's labels and missingness profile."""

    name: str
    head_kind: HeadKind
    label_dim: int
    loss_weight: float
    # per-modality missing rates, keyed "t"/"i"/"n"
    missing: Dict[str, float]
    # latent dims the label function may read
    support: Tuple[int, int]
    # share of the common mortality-style direction mixed into the label
    shared_weight: float = 0.0
    positive_rate: float = 0.3
    n_samples: Optional[int] = None

    def validate(self) -> None:
        for m, rate in self.missing.items():
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"task {self.name}: missing rate {m}={rate} outside [0,1]")
        if all(rate >= 1.0 for rate in self.missing.values()):
            raise ValueError(f"task {self.name}: every modality always missing")


@dataclass
class GenConfig:
    n_samples: int = 2000
    latent_dim: int = 16
    ts_steps: int = 8
    ts_feat_dim: int = 24
    image_size: int = 8
    image_channels: int = 1
    note_tokens: int = 4
    note_dim: int = 32
    ts_noise: float = 1.2
    img_noise: float = 1.2
    note_noise: float = 1.2
    label_noise: float = 1.0     # std of Gaussian noise on the label logit
    seed: int = 0
    include_extension_task: bool = False
    tasks: List[TaskGenSpec] = field(default_factory=lambda: list(DEFAULT_SUITE))

    def validate(self) -> None:
        if self.n_samples < 1 or self.latent_dim < 1:
            raise ValueError("n_samples and latent_dim must be positive")
        for t in self.active_tasks():
            t.validate()

    def active_tasks(self) -> List[TaskGenSpec]:
        tasks = list(self.tasks)
        if self.include_extension_task and all(t.name != EXTENSION_TASK.name for t in tasks):
            tasks.append(EXTENSION_TASK)
        return tasks


# Missing rates follow the observed per-task profiles of the clinical
# benchmark this mirrors: time-series nearly always present except for the
# image-dominant task, images mostly absent except there, notes in between.
# Every task mixes some of the common direction into its label function so
# that a shared trunk transfers; ihm and dec are the strongly related pair.
DEFAULT_SUITE: Tuple[TaskGenSpec, ...] = (
    TaskGenSpec("ihm", HeadKind.BINARY, 1, 1.0,
                {"t": 0.0, "i": 0.7640, "n": 0.0749}, support=(0, 8),
                shared_weight=1.0),
    TaskGenSpec("los", HeadKind.MULTICLASS, 10, 1.0,
                {"t": 0.0, "i": 0.8516, "n": 0.0827}, support=(0, 10),
                shared_weight=0.4),
    TaskGenSpec("dec", HeadKind.BINARY, 1, 1.0,
                {"t": 0.0, "i": 0.8515, "n": 0.0824}, support=(0, 10),
                shared_weight=0.9),
    TaskGenSpec("phe", HeadKind.MULTILABEL, 25, 1.0,
                {"t": 0.0, "i": 0.8194, "n": 0.0830}, support=(0, 12),
                shared_weight=0.6),
    TaskGenSpec("rea", HeadKind.BINARY, 1, 1.0,
                {"t": 0.0, "i": 0.8238, "n": 0.0806}, support=(2, 12),
                shared_weight=0.6),
    TaskGenSpec("dia", HeadKind.MULTILABEL, 25, 1.0,
                {"t": 0.7634, "i": 0.0, "n": 0.3256}, support=(8, 16),
                shared_weight=0.6),
)

# note-dominant extension task, excluded from the default suite
EXTENSION_TASK = TaskGenSpec("drg", HeadKind.MULTICLASS, 8, 1.0,
                             {"t": 0.60, "i": 0.80, "n": 0.0}, support=(4, 13),
                             shared_weight=0.5)

# latent dims visible to each modality (partial, overlapping windows)
_TS_VIEW = (0, 10)
_IMG_VIEW = (6, 16)
_NOTE_VIEW = (3, 13)


@dataclass
class PatientSample:
    sample_id: str
    task: str
    label: object  # int, or list of 0/1 for multilabel
    timeseries: Optional[np.ndarray]   # (steps, F_t)
    image: Optional[np.ndarray]        # (H, W, C)
    note_emb: Optional[np.ndarray]     # (N_n, F_n)

    def present(self) -> Tuple[bool, bool, bool]:
        return (self.timeseries is not None, self.image is not None,
                self.note_emb is not None)


@dataclass
class PatientBatch:
    """One single-task mini-batch with padded arrays and valid lengths."""

    task: str
    sample_ids: List[str]
    labels: np.ndarray
    timeseries: np.ndarray    # (B, max_steps, F_t), zero padded
    ts_len: np.ndarray        # (B,), 0 when absent
    image: np.ndarray         # (B, H, W, C), zeros when absent
    img_present: np.ndarray   # (B,) bool
    note_emb: np.ndarray      # (B, max_n, F_n), zero padded
    note_len: np.ndarray      # (B,), 0 when absent

    def __len__(self) -> int:
        return len(self.sample_ids)

    def presence(self, i: int) -> Tuple[bool, bool, bool]:
        return (self.ts_len[i] > 0, bool(self.img_present[i]), self.note_len[i] > 0)


class Dataset:
    """In-memory per-task splits plus the generating suite manifest."""

    def __init__(self, tasks: List[TaskSpec],
                 samples: Dict[str, Dict[str, List[PatientSample]]],
                 manifest: dict):
        self.tasks = tasks
        self.samples = samples
        self.manifest = manifest

    def task_by_name(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(f"unknown task {name!r}")

    def split(self, task: str, split: str) -> List[PatientSample]:
        return self.samples[task][split]


# ---------------------------------------------------------------------------
# generation

def _view_matrix(rng: np.random.Generator, lo: int, hi: int, latent_dim: int,
                 out_dim: int) -> np.ndarray:
    m = np.zeros((latent_dim, out_dim))
    m[lo:hi] = rng.standard_normal((hi - lo, out_dim)) / np.sqrt(hi - lo)
    return m


def _direction(rng: np.random.Generator, lo: int, hi: int, latent_dim: int,
               n: int = 1) -> np.ndarray:
    w = np.zeros((n, latent_dim))
    w[:, lo:hi] = rng.standard_normal((n, hi - lo))
    return w / np.linalg.norm(w, axis=1, keepdims=True)


class _SuiteModel:
    """Frozen random projections shared by every sample of a generation run."""

    def __init__(self, cfg: GenConfig):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC0FFEE]))
        ld = cfg.latent_dim
        self.ts_map = _view_matrix(rng, *_TS_VIEW, ld, cfg.ts_steps * cfg.ts_feat_dim)
        self.img_map = _view_matrix(rng, *_IMG_VIEW, ld,
                                    cfg.image_size ** 2 * cfg.image_channels)
        self.note_map = _view_matrix(rng, *_NOTE_VIEW, ld,
                                     cfg.note_tokens * cfg.note_dim)
        # direction shared by the mortality-style related tasks
        self.shared_dir = _direction(rng, 0, 8, ld)[0]
        self.label_dirs: Dict[str, np.ndarray] = {}
        self.thresholds: Dict[str, np.ndarray] = {}
        for spec in cfg.active_tasks():
            lo, hi = spec.support
            dirs = _direction(rng, lo, hi, ld, n=max(1, spec.label_dim))
            if spec.shared_weight > 0.0:
                mixed = spec.shared_weight * self.shared_dir + \
                    (1.0 - spec.shared_weight) * dirs
                dirs = mixed / np.linalg.norm(mixed, axis=1, keepdims=True)
            self.label_dirs[spec.name] = dirs
            if spec.head_kind == HeadKind.MULTICLASS:
                # equiprobable buckets of a standard normal projection
                qs = np.linspace(0, 1, spec.label_dim + 1)[1:-1]
                sigma = np.sqrt(1.0 + cfg.label_noise ** 2)
                self.thresholds[spec.name] = _normal_quantile(qs) * sigma
            else:
                sigma = np.sqrt(1.0 + cfg.label_noise ** 2)
                self.thresholds[spec.name] = np.full(
                    max(1, spec.label_dim),
                    _normal_quantile(1.0 - spec.positive_rate) * sigma)


def _normal_quantile(q) -> np.ndarray:
    """Inverse standard-normal CDF via bisection (vectorized)."""
    q = np.atleast_1d(np.asarray(q, dtype=np.float64))
    lo = np.full_like(q, -10.0)
    hi = np.full_like(q, 10.0)
    from math import erf
    erf_v = np.vectorize(erf)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        cdf = 0.5 * (1.0 + erf_v(mid / np.sqrt(2.0)))
        lo = np.where(cdf < q, mid, lo)
        hi = np.where(cdf < q, hi, mid)
    return 0.5 * (lo + hi)


def _label_for(spec: TaskGenSpec, suite: _SuiteModel, u: np.ndarray,
               rng: np.random.Generator, label_noise: float):
    dirs = suite.label_dirs[spec.name]
    thr = suite.thresholds[spec.name]
    if spec.head_kind == HeadKind.MULTICLASS:
        z = dirs[0] @ u + label_noise * rng.standard_normal()
        return int(np.searchsorted(thr, z))
    z = dirs @ u + label_noise * rng.standard_normal(dirs.shape[0])
    bits = (z > thr).astype(int)
    if spec.head_kind == HeadKind.BINARY:
        return int(bits[0])
    return bits.tolist()


def _draw_presence(spec: TaskGenSpec, rng: np.random.Generator) -> Tuple[bool, bool, bool]:
    for _ in range(1000):
        pres = tuple(rng.random() >= spec.missing[m] for m in ("t", "i", "n"))
        if any(pres):
            return pres
    raise RuntimeError(f"task {spec.name}: could not draw a nonempty modality set")


def _round4(a: np.ndarray) -> np.ndarray:
    return np.round(a, 4)


def generate_samples(cfg: GenConfig, spec: TaskGenSpec, suite: _SuiteModel
                     ) -> Tuple[List[PatientSample], np.ndarray]:
    """All samples for one task, plus the latent matrix (for generator sanity checks)."""
    n = spec.n_samples or cfg.n_samples
    samples: List[PatientSample] = []
    latents = np.empty((n, cfg.latent_dim))
    for i in range(n):
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, hash_name(spec.name), i]))
        u = rng.standard_normal(cfg.latent_dim)
        latents[i] = u
        label = _label_for(spec, suite, u, rng, cfg.label_noise)
        pres_t, pres_i, pres_n = _draw_presence(spec, rng)
        ts = img = note = None
        if pres_t:
            ts = _round4((u @ suite.ts_map).reshape(cfg.ts_steps, cfg.ts_feat_dim)
                         + cfg.ts_noise * rng.standard_normal(
                             (cfg.ts_steps, cfg.ts_feat_dim)))
        if pres_i:
            img = _round4((u @ suite.img_map).reshape(
                cfg.image_size, cfg.image_size, cfg.image_channels)
                + cfg.img_noise * rng.standard_normal(
                    (cfg.image_size, cfg.image_size, cfg.image_channels)))
        if pres_n:
            note = _round4((u @ suite.note_map).reshape(cfg.note_tokens, cfg.note_dim)
                           + cfg.note_noise * rng.standard_normal(
                               (cfg.note_tokens, cfg.note_dim)))
        samples.append(PatientSample(
            sample_id=f"{spec.name}-{i:06d}", task=spec.name, label=label,
            timeseries=ts, image=img, note_emb=note))
    return samples, latents


def hash_name(name: str) -> int:
    """Stable small integer from a task name (process-seed independent)."""
    h = 0
    for ch in name:
        h = (h * 131 + ord(ch)) % (1 << 30)
    return h


def split_assignment(n: int, seed: int, task: str) -> np.ndarray:
    """Deterministic patient-level 7:1:2 split; returns index into SPLITS."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, hash_name(task), 0xA11]))
    u = rng.random(n)
    edges = np.cumsum(SPLIT_RATIOS)[:2]
    return np.searchsorted(edges, u)


def _sample_to_json(s: PatientSample) -> str:
    def arr(a):
        return None if a is None else np.round(a, 4).tolist()

    return json.dumps({"id": s.sample_id, "task": s.task, "label": s.label,
                       "t": arr(s.timeseries), "i": arr(s.image),
                       "n": arr(s.note_emb)}, separators=(",", ":"))


def task_specs_from_gen(cfg: GenConfig) -> List[TaskSpec]:
    return [TaskSpec(task_id=i, name=t.name, head_kind=t.head_kind,
                     label_dim=t.label_dim, loss_weight=t.loss_weight)
            for i, t in enumerate(cfg.active_tasks())]


def generate(cfg: GenConfig, out_dir: str) -> dict:
    """Write per-task train/valid/test JSONL files plus the suite manifest."""
    cfg.validate()
    suite = _SuiteModel(cfg)
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "gen_config": _gen_config_to_dict(cfg),
        "tasks": [{"task_id": i, "name": t.name, "head_kind": t.head_kind.value,
                   "label_dim": t.label_dim, "loss_weight": t.loss_weight}
                  for i, t in enumerate(cfg.active_tasks())],
        "dims": {"ts_steps": cfg.ts_steps, "ts_feat_dim": cfg.ts_feat_dim,
                 "image_size": cfg.image_size, "image_channels": cfg.image_channels,
                 "note_tokens": cfg.note_tokens, "note_dim": cfg.note_dim},
    }
    for spec in cfg.active_tasks():
        samples, _ = generate_samples(cfg, spec, suite)
        assign = split_assignment(len(samples), cfg.seed, spec.name)
        task_dir = os.path.join(out_dir, spec.name)
        os.makedirs(task_dir, exist_ok=True)
        for si, split in enumerate(SPLITS):
            path = os.path.join(task_dir, f"{split}.jsonl")
            with open(path, "w", encoding="utf-8") as fh:
                for s, a in zip(samples, assign):
                    if a == si:
                        fh.write(_sample_to_json(s) + "\n")
    with open(os.path.join(out_dir, "suite.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def _gen_config_to_dict(cfg: GenConfig) -> dict:
    d = dataclasses.asdict(cfg)
    for t in d["tasks"]:
        t["head_kind"] = t["head_kind"].value if isinstance(t["head_kind"], HeadKind) \
            else t["head_kind"]
    return d


def gen_config_from_dict(d: dict) -> GenConfig:
    d = dict(d)
    tasks = d.pop("tasks", None)
    cfg = GenConfig(**{k: v for k, v in d.items()
                       if k in {f.name for f in dataclasses.fields(GenConfig)} - {"tasks"}})
    if tasks is not None:
        cfg.tasks = [TaskGenSpec(
            name=t["name"], head_kind=HeadKind(t["head_kind"]),
            label_dim=t["label_dim"], loss_weight=t["loss_weight"],
            missing=dict(t["missing"]), support=tuple(t["support"]),
            shared_weight=t.get("shared_weight", 0.0),
            positive_rate=t.get("positive_rate", 0.3),
            n_samples=t.get("n_samples")) for t in tasks]
    return cfg


# ---------------------------------------------------------------------------
# loading

class DataError(ValueError):
    """Raised for malformed dataset files; carries file/line context."""


def _parse_sample(line: str, path: str, lineno: int, task: TaskSpec,
                  dims: dict) -> PatientSample:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}:{lineno}: invalid JSON ({e})") from None
    for key in ("id", "task", "label", "t", "i", "n"):
        if key not in rec:
            raise DataError(f"{path}:{lineno}: missing field {key!r}")
    if rec["t"] is None and rec["i"] is None and rec["n"] is None:
        raise DataError(f"{path}:{lineno}: all modalities absent")
    label = rec["label"]
    if task.head_kind == HeadKind.MULTICLASS:
        if not isinstance(label, int) or not 0 <= label < task.label_dim:
            raise DataError(f"{path}:{lineno}: label {label!r} out of range "
                            f"for {task.label_dim}-class task {task.name}")
    elif task.head_kind == HeadKind.BINARY:
        if label not in (0, 1):
            raise DataError(f"{path}:{lineno}: binary label must be 0/1")
    else:
        if (not isinstance(label, list) or len(label) != task.label_dim
                or any(b not in (0, 1) for b in label)):
            raise DataError(f"{path}:{lineno}: multilabel vector must be "
                            f"{task.label_dim} bits")

    def arr(value, shape, what):
        if value is None:
            return None
        a = np.asarray(value, dtype=np.float64)
        if a.shape != shape:
            raise DataError(f"{path}:{lineno}: {what} shape {a.shape} != {shape}")
        return a

    return PatientSample(
        sample_id=str(rec["id"]), task=rec["task"], label=label,
        timeseries=arr(rec["t"], (dims["ts_steps"], dims["ts_feat_dim"]), "timeseries"),
        image=arr(rec["i"], (dims["image_size"], dims["image_size"],
                             dims["image_channels"]), "image"),
        note_emb=arr(rec["n"], (dims["note_tokens"], dims["note_dim"]), "note"))


def load(path: str) -> Dataset:
    """Load a generated dataset directory, validating every sample."""
    manifest_path = os.path.join(path, "suite.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"no suite.json in {path}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported dataset format version "
                        f"{manifest.get('format_version')}")
    tasks = [TaskSpec(task_id=t["task_id"], name=t["name"],
                      head_kind=HeadKind(t["head_kind"]), label_dim=t["label_dim"],
                      loss_weight=t["loss_weight"]) for t in manifest["tasks"]]
    dims = manifest["dims"]
    samples: Dict[str, Dict[str, List[PatientSample]]] = {}
    for task in tasks:
        samples[task.name] = {}
        for split in SPLITS:
            fpath = os.path.join(path, task.name, f"{split}.jsonl")
            out: List[PatientSample] = []
            if os.path.exists(fpath):
                with open(fpath, encoding="utf-8") as fh:
                    for lineno, line in enumerate(fh, start=1):
                        if line.strip():
                            out.append(_parse_sample(line, fpath, lineno, task, dims))
            samples[task.name][split] = out
    return Dataset(tasks=tasks, samples=samples, manifest=manifest)


# ---------------------------------------------------------------------------
# batching

def make_batch(samples: Sequence[PatientSample], task: str, dims: dict) -> PatientBatch:
    b = len(samples)
    ts_len = np.array([0 if s.timeseries is None else s.timeseries.shape[0]
                       for s in samples])
    note_len = np.array([0 if s.note_emb is None else s.note_emb.shape[0]
                         for s in samples])
    max_ts = max(int(ts_len.max()), 1)
    max_note = max(int(note_len.max()), 1)
    ts = np.zeros((b, max_ts, dims["ts_feat_dim"]), dtype=np.float64)
    img = np.zeros((b, dims["image_size"], dims["image_size"],
                    dims["image_channels"]), dtype=np.float64)
    note = np.zeros((b, max_note, dims["note_dim"]), dtype=np.float64)
    img_present = np.zeros(b, dtype=bool)
    for i, s in enumerate(samples):
        if s.timeseries is not None:
            ts[i, :ts_len[i]] = s.timeseries
        if s.image is not None:
            img[i] = s.image
            img_present[i] = True
        if s.note_emb is not None:
            note[i, :note_len[i]] = s.note_emb
    labels = np.array([s.label for s in samples])
    return PatientBatch(task=task, sample_ids=[s.sample_id for s in samples],
                        labels=labels, timeseries=ts, ts_len=ts_len, image=img,
                        img_present=img_present, note_emb=note, note_len=note_len)


def batch_iter(dataset: Dataset, task: str, batch_size: int, seed: int,
               epoch: int = 0, split: str = "train") -> Iterator[PatientBatch]:
    """Deterministically shuffled single-task mini-batches; final partial batch kept."""
    if task not in dataset.samples:
        raise KeyError(f"unknown task {task!r}")
    samples = dataset.split(task, split)
    dims = dataset.manifest["dims"]
    rng = np.random.default_rng(np.random.SeedSequence([seed, hash_name(task), epoch]))
    order = rng.permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        chunk = [samples[j] for j in order[start:start + batch_size]]
        yield make_batch(chunk, task, dims)
