"""Experiment orchestration: configs, training, checkpoints, evaluation, reports and the CLI.

A run is identified by (model, phase, experiment number k). The experiment
number is turned into a seed with :func:`derive_seed`, and that seed drives
the data split and epoch shuffles, weight initialisation, and augmentation
through three separate streams.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import gradcore as gc
from .augmentor import AugmentPolicy, Split, augment_volume, horizontal_flip
from .ensembles import (EnsembleStrategy, EnsembleUNet, PNNConfig, build_ensemble, build_pnn,
                        predict_labels)
from .errors import (ConfigError, DataError, DependencyError, FormatError, IoError, PNNError)
from .evalstat import (LABEL_SETS, METRICS, MetricEntry, MetricReport, paired_t_test, round6,
                       significance_marker, volume_report)
from .netzoo import DEEP, WIDE, DenseAEConfig, build_unet
from .volumedata import (CachedCase, Rng, SplitSpec, derive_seed, fisher_yates, load_cache, reassemble,
                         stream_seeds, synthetic_cases)

log = logging.getLogger(__name__)

MODELS = ("deep", "wide", "ensemble-transfer", "ensemble-retrain", "pnn")
PHASES = ("noaug", "aug")
DISPLAY = {"deep": "Deep-UNet", "wide": "Wide-UNet", "ensemble-transfer": "Ensemble-Transfer",
           "ensemble-retrain": "Ensemble-Retrain", "pnn": "PNN-UNet"}
# comparison rows in the order of the published t-test tables
PAIRS = (("pnn", "deep"), ("pnn", "wide"), ("pnn", "ensemble-transfer"), ("pnn", "ensemble-retrain"),
         ("ensemble-transfer", "ensemble-retrain"))
DTYPE = np.float32


@dataclass(frozen=True)
class ExperimentConfig:
    model: str = "pnn"
    phase: str = "noaug"
    experiments: tuple[int, ...] = (1, 2, 3, 4, 5)
    data: str = "synthetic:20"
    out: str = "runs"
    epochs: int = 20
    batch: int = 8
    lr: float = 1e-3
    scale: int = 8
    recon_weight: float = 0.1
    member_weight: float = 1.0
    ae_in_vote: bool = False
    drop_empty: bool = False

    def __post_init__(self):
        object.__setattr__(self, "experiments", tuple(int(k) for k in self.experiments))
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if not self.experiments or any(not 1 <= k <= 59 for k in self.experiments):
            raise ConfigError(f"experiment numbers must lie in 1..59, got {self.experiments}")
        if self.epochs < 1 or self.batch < 1 or self.scale < 1:
            raise ConfigError("epochs, batch and scale must be positive")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.recon_weight < 0 or self.member_weight < 0:
            raise ConfigError("loss weights must be non-negative")

    @classmethod
    def from_mapping(cls, values: Mapping) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values = dict(values)
        if isinstance(values.get("experiments"), (int, str)):
            values["experiments"] = parse_experiments(str(values["experiments"]))
        return cls(**values)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        try:
            return cls.from_mapping(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["experiments"] = list(self.experiments)
        return d

    def run_name(self, k: int, model: str | None = None) -> str:
        return f"{model or self.model}-{self.phase}-s{k}"


def parse_experiments(text: str) -> tuple[int, ...]:
    """'1..5', '1,3' or '2' -> experiment numbers."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return tuple(out)


# ---------------------------------------------------------------------------
# models


def pnn_config(cfg: ExperimentConfig) -> PNNConfig:
    base = PNNConfig(DenseAEConfig(), DEEP, WIDE, cfg.recon_weight, cfg.ae_in_vote, cfg.member_weight)
    return base.scaled(cfg.scale)


def build_model(cfg: ExperimentConfig, rng: Rng | None):
    """Fresh network for ``cfg.model``; ``rng=None`` gives zero weights (used before loading)."""
    deep, wide = DEEP.scaled(cfg.scale), WIDE.scaled(cfg.scale)
    if cfg.model == "deep":
        net = build_unet(deep, rng)
    elif cfg.model == "wide":
        net = build_unet(wide, rng)
    elif cfg.model == "pnn":
        net = build_pnn(pnn_config(cfg), rng)
    else:
        strategy = EnsembleStrategy.TRANSFER if cfg.model == "ensemble-transfer" else EnsembleStrategy.RETRAIN
        net = build_ensemble(deep, wide, rng, strategy, cfg.member_weight)
    net.params.astype(DTYPE)
    return net


def probabilities(net, x: np.ndarray) -> np.ndarray:
    return net.probabilities(gc.Tensor(np.asarray(x, dtype=DTYPE))).data


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + little-endian float32 blob


def param_hash(arrays: Sequence[np.ndarray]) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    model: str
    seed: int
    experiment: int
    phase: str
    epoch: int
    val_dice: float
    config: dict
    params: dict[str, np.ndarray]
    history: list = field(default_factory=list)
    members: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return f"{self.model}-{self.phase}-s{self.experiment}"

    @property
    def sha256(self) -> str:
        return param_hash(self.params.values())

    def experiment_config(self) -> ExperimentConfig:
        return ExperimentConfig.from_mapping(self.config)

    def to_model(self):
        net = build_model(self.experiment_config(), None)
        load_parameters(net, self.params)
        return net


def snapshot(net) -> dict[str, np.ndarray]:
    return {name: t.data.astype(DTYPE, copy=True) for name, t in net.params.items()}


def load_parameters(net, params: Mapping[str, np.ndarray]) -> None:
    if list(net.params) != list(params):
        raise FormatError("checkpoint parameter names do not match the model")
    for name, t in net.params.items():
        arr = params[name]
        if arr.shape != t.shape:
            raise FormatError(f"{name}: checkpoint shape {arr.shape}, model shape {t.shape}")
        t.data = np.array(arr, dtype=DTYPE)


def save_checkpoint(ckpt: Checkpoint, directory: str | Path) -> Path:
    directory = Path(directory)
    entries, offset, chunks = [], 0, []
    for name, arr in ckpt.params.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(raw)
        chunks.append(raw)
    manifest = {
        "model": ckpt.model,
        "seed": ckpt.seed,
        "experiment": ckpt.experiment,
        "phase": ckpt.phase,
        "epoch": ckpt.epoch,
        "val_dice": ckpt.val_dice,
        "config": ckpt.config,
        "parameters": entries,
        "blob": f"{ckpt.name}.f32",
        "sha256": ckpt.sha256,
        "history": ckpt.history,
        "members": ckpt.members,
    }
    try:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / manifest["blob"]).write_bytes(b"".join(chunks))
        path = directory / f"{ckpt.name}.json"
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {ckpt.name} to {directory}: {exc}") from exc
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_name(path.name + ".json")
    try:
        m = json.loads(path.read_text())
        raw = (path.parent / m["blob"]).read_bytes()
    except FileNotFoundError as exc:
        raise DependencyError(f"checkpoint not found: {exc.filename}") from exc
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"unreadable checkpoint {path}: {exc}") from exc
    expected = 4 * sum(math.prod(e["shape"]) for e in m["parameters"])
    if len(raw) != expected:
        raise FormatError(f"{m['blob']}: expected {expected} bytes, found {len(raw)}")
    params = {}
    for e in m["parameters"]:
        n = math.prod(e["shape"])
        params[e["name"]] = np.frombuffer(raw, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"]).copy()
    ckpt = Checkpoint(m["model"], m["seed"], m["experiment"], m["phase"], m["epoch"], m["val_dice"],
                      m["config"], params, m.get("history", []), m.get("members", {}))
    if ckpt.sha256 != m["sha256"]:
        raise FormatError(f"{path.name}: weight hash mismatch")
    return ckpt


# ---------------------------------------------------------------------------
# data


def load_cases(data: str) -> list[CachedCase]:
    """``synthetic`` / ``synthetic:N`` for generated volumes, otherwise a cache directory."""
    if data.startswith("synthetic"):
        _, _, n = data.partition(":")
        return synthetic_cases(int(n) if n else 20, seed=0)
    return load_cache(data)


@dataclass(frozen=True)
class RunSplit:
    train: list[CachedCase]
    val: list[CachedCase]
    test: list[CachedCase]


def split_cases(cases: Sequence[CachedCase], rng: Rng) -> RunSplit:
    """Same partition as :func:`volumedata.split_dataset`, drawing from a caller-owned stream."""
    by_id = {c.id: c for c in cases}
    if len(by_id) != len(cases):
        raise DataError("duplicate case ids")
    order = fisher_yates(sorted(by_id), rng)
    a, b, _ = SplitSpec.apply(len(order)).counts
    pick = lambda ids: [by_id[i] for i in ids]
    return RunSplit(pick(order[:a]), pick(order[a:a + b]), pick(order[a + b:]))


def held_out_cases(cases: Sequence[CachedCase], k: int) -> list[CachedCase]:
    return split_cases(cases, Rng(stream_seeds(derive_seed(k))["data"])).test


def _training_slices(cases, policy: AugmentPolicy, rng: Rng, drop_empty: bool):
    images, masks = [], []
    for case in cases:
        img, msk = augment_volume(case.image, case.mask, policy, rng)
        keep = case.mask.reshape(len(case.mask), -1).any(axis=1) if drop_empty else np.ones(len(img), bool)
        images.append(img[keep])
        masks.append(msk[keep])
    return np.concatenate(images), np.concatenate(masks)


def _framed_dice(net, cases, policy: AugmentPolicy, rng: Rng, batch: int) -> float:
    """Mean over volumes of the mean L1/L2 Dice, scored on the framed slice stacks."""
    scores = []
    for case in cases:
        img, msk = case.image, case.mask
        if not policy.is_identity and rng.uniform() < policy.flip_probability:
            img, msk = horizontal_flip(img, msk)
        pred = predict_slices(net, img, batch)
        scores.append(volume_report(pred, msk).value("L1+L2", "dice"))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# training


def train_step(net, opt: gc.Adam, x: np.ndarray, y: np.ndarray) -> float:
    with gc.Tape():
        loss = net.loss(gc.Tensor(np.asarray(x, dtype=DTYPE)), y)
    gc.backward(loss, net.params.tensors())
    opt.step()
    return float(loss.data)


def train_model(cfg: ExperimentConfig, k: int, cases: Sequence[CachedCase] | None = None) -> Checkpoint:
    """Train one (model, phase, experiment) run and return its best-validation checkpoint."""
    seed = derive_seed(k)
    if cfg.model == "ensemble-transfer":
        return assemble_transfer(cfg, k, cases)
    cases = load_cases(cfg.data) if cases is None else list(cases)
    streams = stream_seeds(seed)
    data_rng = Rng(streams["data"])
    split = split_cases(cases, data_rng)
    if not split.train or not split.val:
        raise DataError(f"{len(cases)} cases leave an empty training or validation split")
    net = build_model(cfg, Rng(streams["init"]))
    aug_rng = Rng(streams["augment"])
    if cfg.phase == "aug":
        train_policy = AugmentPolicy.for_split(Split.TRAIN)
        val_policy = AugmentPolicy.for_split(Split.VAL)
    else:
        train_policy = val_policy = AugmentPolicy.for_split(Split.TEST)
    opt = gc.Adam(net.params.tensors(), lr=cfg.lr)
    best, history = None, []
    for epoch in range(1, cfg.epochs + 1):
        images, masks = _training_slices(split.train, train_policy, aug_rng, cfg.drop_empty)
        if len(images) == 0:
            raise DataError("no training slices left")
        order = fisher_yates(list(range(len(images))), data_rng)
        losses = []
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            losses.append(train_step(net, opt, images[idx][:, None], masks[idx]))
        val = _framed_dice(net, split.val, val_policy, aug_rng, cfg.batch)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_dice": val})
        log.info("%s epoch %d loss %.4f val dice %.4f", cfg.run_name(k), epoch, history[-1]["loss"], val)
        if best is None or val > best[1]:
            best = (epoch, val, snapshot(net))
    epoch, val, params = best
    return Checkpoint(cfg.model, seed, k, cfg.phase, epoch, val, cfg.to_dict(), params, history)


def assemble_transfer(cfg: ExperimentConfig, k: int, cases: Sequence[CachedCase] | None = None) -> Checkpoint:
    """Stack trained deep and wide checkpoints of the same seed and phase without further training."""
    members = {}
    for m in ("deep", "wide"):
        path = Path(cfg.out) / f"{cfg.run_name(k, m)}.json"
        if not path.exists():
            raise DependencyError(f"transfer ensemble needs {path}; train the {m} model first")
        members[m] = load_checkpoint(path)
    for m, ck in members.items():
        if ck.config.get("scale") != cfg.scale:
            raise ConfigError(f"{ck.name} was trained at scale {ck.config.get('scale')}, not {cfg.scale}")
    params = {f"{m}.{name}": arr for m in ("deep", "wide") for name, arr in members[m].params.items()}
    ckpt = Checkpoint(cfg.model, derive_seed(k), k, cfg.phase, 0, float("nan"), cfg.to_dict(), params,
                      members={m: ck.sha256 for m, ck in members.items()})
    if cases is None:
        cases = load_cases(cfg.data)
    val = split_cases(cases, Rng(stream_seeds(ckpt.seed)["data"])).val
    if val:
        ckpt.val_dice = _framed_dice(ckpt.to_model(), val, AugmentPolicy.for_split(Split.TEST), None, cfg.batch)
    return ckpt


@dataclass
class OverfitResult:
    steps: int
    dice: float
    losses: list[float]


def overfit(net, images: np.ndarray, masks: np.ndarray, steps: int = 500, lr: float = 1e-3,
            target: float = 0.95, check_every: int = 10) -> OverfitResult:
    """Full-batch training until the mean L1/L2 training Dice exceeds ``target``."""
    opt = gc.Adam(net.params.tensors(), lr=lr)
    losses, dice = [], 0.0
    for step in range(1, steps + 1):
        losses.append(train_step(net, opt, images, masks))
        if step % check_every == 0 or step == steps:
            pred = predict_labels(probabilities(net, images))
            dice = volume_report(pred, masks).value("L1+L2", "dice")
            if dice > target:
                return OverfitResult(step, dice, losses)
    return OverfitResult(steps, dice, losses)


# ---------------------------------------------------------------------------
# evaluation


def predict_slices(net, images: np.ndarray, batch: int = 8) -> np.ndarray:
    """Argmax labels for an (X, H, W) stack, predicted ``batch`` slices at a time."""
    out = []
    for start in range(0, len(images), batch):
        out.append(predict_labels(probabilities(net, images[start:start + batch, None])))
    return np.concatenate(out)


def evaluate_model(net, cases: Sequence[CachedCase], batch: int = 8, seed: int = 0) -> list[MetricReport]:
    reports = []
    for case in cases:
        if case.image.shape[0] != case.extents[0]:
            raise FormatError(f"{case.id}: {case.image.shape[0]} slices, manifest says {case.extents[0]}")
        pred = reassemble(list(predict_slices(net, case.image, batch)), case.offsets, case.extents)
        reports.append(volume_report(pred, case.truth(), case.id, seed))
    return reports


def reports_to_json(reports: Sequence[MetricReport]) -> list[dict]:
    return [{"volume": r.volume, "seed": r.seed,
             **{ls: r.entries[ls].as_dict() for ls in LABEL_SETS}} for r in reports]


def reports_from_json(items: Sequence[Mapping]) -> list[MetricReport]:
    return [MetricReport(d["volume"], d["seed"], {ls: MetricEntry(**d[ls]) for ls in LABEL_SETS}) for d in items]


def metrics_path(out: str | Path, name: str) -> Path:
    return Path(out) / f"{name}.metrics.json"


def load_run_reports(out: str | Path, model: str, phase: str, experiments: Sequence[int]) -> dict[int, list[MetricReport]]:
    runs = {}
    for k in experiments:
        path = metrics_path(out, f"{model}-{phase}-s{k}")
        if not path.exists():
            raise DataError(f"missing evaluation results {path}")
        runs[k] = reports_from_json(json.loads(path.read_text()))
    return runs


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class ReportRow:
    model: str
    label: str
    metric: str
    values: tuple[float, ...]

    @property
    def mean(self) -> float:
        return math.fsum(self.values) / len(self.values)


@dataclass(frozen=True)
class ComparisonRow:
    model_a: str
    model_b: str
    label: str
    metric: str
    t: float
    p: float

    @property
    def marker(self) -> str:
        return significance_marker(self.p)


def report_rows(model: str, runs: Mapping[int, Sequence[MetricReport]]) -> list[ReportRow]:
    """One row per (label set, metric) holding the per-seed test means in experiment order."""
    rows = []
    for ls in LABEL_SETS:
        for metric in METRICS:
            values = tuple(math.fsum(r.value(ls, metric) for r in runs[k]) / len(runs[k]) for k in sorted(runs))
            rows.append(ReportRow(model, ls, metric, values))
    return rows


def _paired(runs: Mapping[int, Sequence[MetricReport]]) -> dict[tuple[str, int], MetricReport]:
    return {(r.volume, k): r for k in sorted(runs) for r in runs[k]}


def compare_models(model_a: str, runs_a: Mapping[int, Sequence[MetricReport]],
                   model_b: str, runs_b: Mapping[int, Sequence[MetricReport]]) -> list[ComparisonRow]:
    """Paired t-tests over (test volume, seed) scores for every metric and label set."""
    a, b = _paired(runs_a), _paired(runs_b)
    if a.keys() != b.keys():
        raise DataError(f"{model_a} and {model_b} were not evaluated on the same volumes and seeds")
    keys = sorted(a)
    rows = []
    for metric in METRICS:
        for ls in LABEL_SETS:
            res = paired_t_test([a[key].value(ls, metric) for key in keys], [b[key].value(ls, metric) for key in keys])
            rows.append(ComparisonRow(model_a, model_b, ls, metric, res.t, res.p))
    return rows


def _csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if isinstance(rows[0], ReportRow):
        n = len(rows[0].values)
        w.writerow(["model", "label", "metric", *(f"s{i}" for i in range(1, n + 1)), "mean"])
        for r in rows:
            w.writerow([r.model, r.label, r.metric, *(round6(v) for v in r.values), round6(r.mean)])
    else:
        w.writerow(["model_a", "model_b", "label", "metric", "t", "p", "marker"])
        for r in rows:
            w.writerow([r.model_a, r.model_b, r.label, r.metric, round6(r.t), round6(r.p), r.marker])
    return buf.getvalue()


def _markdown_text(rows, phase: str = "noaug") -> str:
    when = "with" if phase == "aug" else "without"
    lines = []
    if isinstance(rows[0], ReportRow):
        for metric in METRICS:
            sel = {(r.model, r.label): r for r in rows if r.metric == metric}
            if not sel:
                continue
            models = list(dict.fromkeys(m for m, _ in sel))
            runs = len(rows[0].values)
            lines += [f"{'Five' if runs == 5 else runs}-run average of {metric} {when} data augmentation", "",
                      "| Models | L1 Mean | L2 Mean | L1 & L2 Mean |", "|---|---|---|---|"]
            for m in models:
                cells = [round6(sel[(m, ls)].mean) for ls in ("L1", "L2", "L1+L2")]
                lines.append(f"| {DISPLAY.get(m, m)} | " + " | ".join(cells) + " |")
            lines.append("")
    else:
        for metric in METRICS:
            sel = {(r.model_a, r.model_b, r.label): r for r in rows if r.metric == metric}
            if not sel:
                continue
            pairs = list(dict.fromkeys((a, b) for a, b, _ in sel))
            lines += [f"T-test of {metric} {when} data augmentation (p-value, alpha=0.05)", "",
                      f"| T-Test in {metric} | L1+L2 | L1 | L2 |", "|---|---|---|---|"]
            for a, b in pairs:
                cells = []
                for ls in LABEL_SETS:
                    r = sel[(a, b, ls)]
                    cells.append(f"{r.p:.4f} {r.marker}".rstrip())
                lines.append(f"| {DISPLAY.get(a, a)} versus {DISPLAY.get(b, b)} | " + " | ".join(cells) + " |")
            lines.append("")
    return "\n".join(lines)


def emit_report(rows: Sequence[ReportRow] | Sequence[ComparisonRow], fmt: str, path: str | Path, phase: str = "noaug") -> Path:
    """Write ``rows`` as CSV or markdown tables; reals are rendered with six decimals."""
    rows = list(rows)
    if not rows:
        raise DataError("nothing to report")
    if fmt == "csv":
        text = _csv_text(rows)
    elif fmt == "markdown":
        text = _markdown_text(rows, phase)
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise IoError(f"cannot write report {path}: {exc}") from exc
    return path


def read_report_csv(path: str | Path) -> list[ReportRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        seeds = [c for c in reader.fieldnames if c.startswith("s") and c[1:].isdigit()]
        return [ReportRow(r["model"], r["label"], r["metric"], tuple(float(r[c]) for c in seeds)) for r in reader]


# ---------------------------------------------------------------------------
# self-test


def selftest(out=sys.stdout) -> bool:
    """Quick oracle checks: parameter counts, seeds, splits, gradients and metrics."""
    from .evalstat import confusion_counts, metrics_from_counts, student_t_cdf
    from .netzoo import UNetConfig, count_parameters

    results = []

    def check(name, ok):
        results.append(bool(ok))
        print(f"{'PASS' if ok else 'FAIL'} {name}", file=out)

    check("parameter counts", count_parameters(DEEP) == 31_030_723 and count_parameters(WIDE) == 29_762_307)
    check("derived seeds", [derive_seed(k) for k in range(1, 6)]
          == [71582788, 143165576, 214748364, 286331153, 357913941])
    check("split counts", SplitSpec.apply(260).counts == (156, 52, 52))

    rng = np.random.default_rng(0)
    net = build_unet(UNetConfig(depth=1, init_filters=2), Rng(3))
    net.params.astype(np.float64)
    x = gc.Tensor(rng.standard_normal((1, 1, 8, 8)))
    y = rng.integers(0, 3, (1, 8, 8))
    analytic, numeric = gc.directional_check(lambda: net.loss(x, y), net.params.tensors(), rng)
    check("network gradient vs finite differences", gc.relative_error(analytic, numeric) < 1e-4)

    a, b = rng.integers(0, 3, (8, 8, 8)), rng.integers(0, 3, (8, 8, 8))
    ok = True
    for label in (1, 2):
        e = metrics_from_counts(confusion_counts(a, b, label))
        tp = sum(1 for p, t in zip(a.ravel(), b.ravel()) if p == label and t == label)
        fp = sum(1 for p, t in zip(a.ravel(), b.ravel()) if p == label and t != label)
        fn = sum(1 for p, t in zip(a.ravel(), b.ravel()) if p != label and t == label)
        ok &= abs(e.dice - 2 * tp / (2 * tp + fp + fn)) < 1e-12 and abs(e.dice - 2 * e.jaccard / (1 + e.jaccard)) < 1e-12
    check("metrics vs voxel loop", ok)
    check("t distribution closed forms", abs(student_t_cdf(0.0, 7) - 0.5) < 1e-12 and abs(student_t_cdf(1.0, 1) - 0.75) < 1e-12)
    return all(results)


# ---------------------------------------------------------------------------
# CLI


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pnnunet", description="Deep/Wide/Ensemble/PNN UNet experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with keys named like the flags")
    common.add_argument("--model", choices=MODELS)
    common.add_argument("--phase", choices=PHASES)
    common.add_argument("--experiments", help="e.g. 1..5 or 1,3")
    common.add_argument("--data", help="cache directory, or synthetic[:N]")
    common.add_argument("--out", help="directory for checkpoints, metrics and reports")
    common.add_argument("--scale", type=int, help="divide every filter count by this factor")
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("seeds", help="print the five derived seeds")
    prep = sub.add_parser("prepare", parents=[common], help="convert imagesTr/labelsTr NIfTI into the cache")
    prep.add_argument("source", nargs="?", help="dataset root (defaults to --data)")
    sub.add_parser("train", parents=[common], help="train the selected model for each experiment")
    sub.add_parser("evaluate", parents=[common], help="score checkpoints on their test split")
    sub.add_parser("compare", parents=[common], help="paired t-tests between models")
    sub.add_parser("report", parents=[common], help="five-run mean tables")
    sub.add_parser("selftest", help="run the built-in oracle checks")
    return p


def _config(args) -> ExperimentConfig:
    values = json.loads(Path(args.config).read_text()) if args.config else {}
    for key in ("model", "phase", "data", "out", "scale", "epochs", "batch", "lr"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    if args.experiments is not None:
        values["experiments"] = parse_experiments(args.experiments)
    return ExperimentConfig.from_mapping(values)


def _cmd_train(cfg: ExperimentConfig) -> None:
    cases = load_cases(cfg.data)
    for k in cfg.experiments:
        ckpt = train_model(cfg, k, cases)
        path = save_checkpoint(ckpt, cfg.out)
        print(f"{ckpt.name}: epoch {ckpt.epoch} val dice {ckpt.val_dice:.6f} -> {path}")


def _cmd_evaluate(cfg: ExperimentConfig) -> None:
    cases = load_cases(cfg.data)
    for k in cfg.experiments:
        ckpt = load_checkpoint(Path(cfg.out) / f"{cfg.run_name(k)}.json")
        reports = evaluate_model(ckpt.to_model(), held_out_cases(cases, k), cfg.batch, ckpt.seed)
        path = metrics_path(cfg.out, ckpt.name)
        path.write_text(json.dumps(reports_to_json(reports), indent=1))
        dice = np.mean([r.value("L1+L2", "dice") for r in reports])
        print(f"{ckpt.name}: {len(reports)} test volumes, mean L1+L2 dice {dice:.6f} -> {path}")


def _available(cfg: ExperimentConfig) -> dict[str, dict[int, list[MetricReport]]]:
    runs = {}
    for m in MODELS:
        try:
            runs[m] = load_run_reports(cfg.out, m, cfg.phase, cfg.experiments)
        except DataError:
            continue
    return runs


def _cmd_compare(cfg: ExperimentConfig, model_given: bool) -> None:
    runs = _available(cfg)
    pairs = [(a, b) for a, b in PAIRS if a in runs and b in runs]
    if model_given:
        pairs = [(a, b) for a, b in pairs if cfg.model in (a, b)]
    if not pairs:
        raise DataError(f"no evaluated model pairs under {cfg.out} for phase {cfg.phase}")
    rows = [row for a, b in pairs for row in compare_models(a, runs[a], b, runs[b])]
    base = Path(cfg.out) / f"ttest-{cfg.phase}"
    emit_report(rows, "csv", base.with_suffix(".csv"))
    print(Path(emit_report(rows, "markdown", base.with_suffix(".md"), cfg.phase)).read_text())


def _cmd_report(cfg: ExperimentConfig) -> None:
    runs = _available(cfg)
    if not runs:
        raise DataError(f"no evaluation results under {cfg.out} for phase {cfg.phase}")
    rows = [row for m, r in runs.items() for row in report_rows(m, r)]
    base = Path(cfg.out) / f"means-{cfg.phase}"
    emit_report(rows, "csv", base.with_suffix(".csv"))
    print(Path(emit_report(rows, "markdown", base.with_suffix(".md"), cfg.phase)).read_text())


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(message)s")
    try:
        if args.command == "seeds":
            print(" ".join(str(derive_seed(k)) for k in range(1, 6)))
            return 0
        if args.command == "selftest":
            return 0 if selftest() else 1
        cfg = _config(args)
        if args.command == "prepare":
            from .volumedata import prepare_msd
            written = prepare_msd(args.source or cfg.data, cfg.out)
            print(f"cached {len(written)} cases in {cfg.out}")
        elif args.command == "train":
            _cmd_train(cfg)
        elif args.command == "evaluate":
            _cmd_evaluate(cfg)
        elif args.command == "compare":
            _cmd_compare(cfg, args.model is not None)
        elif args.command == "report":
            _cmd_report(cfg)
        return 0
    except (PNNError, OSError, ValueError) as exc:
        print(f"pnnunet: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
