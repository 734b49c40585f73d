"""Evaluation pipeline: train, profile and calibrate the detector, measure the
clean false-positive rate, run the oblivious attack, and report.

Every random choice is derived from one master seed, and per-sample attack
seeds depend only on the sample index, so reports are identical for any
worker count.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import attacks, data, detector, model
from .attacks import AttackConfig
from .detector import CalibrationError, Detector, DetectorConfig
from .model import MlpNetwork, TrainConfig
from .numcore import derive_seed

log = logging.getLogger(__name__)

FPR_CONVENTION = "rejected fraction of correctly classified clean inputs"
KAPPA_GRID = (0.0, 1.0, 2.0, 5.0, 10.0, 20.0)
PAPER_REFERENCE = {
    "tpr": 0.0,
    "fpr": 0.099,
    "success_rate": 1.0,
    "median_attempts": 25,
    "epsilon": 0.01,
}

# stream tags for seeds that are not per-sample; kept far above any sample index
_SPLIT, _INIT, _TRAIN, _BLOBS = ((1 << 40) + k for k in range(1, 5))


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    source: str = "auto"  # "idx", "blobs", or "auto" (idx when the files exist)
    images: str = "data/mnist5k-images-idx3-ubyte.gz"
    labels: str = "data/mnist5k-labels-idx1-ubyte.gz"
    num_classes: int = 10
    split: tuple = (0.8, 0.1, 0.1)
    blobs: dict = field(default_factory=lambda: asdict(data.SyntheticSpec()))


@dataclass(frozen=True)
class TrainSection:
    hidden: tuple = (128, 64)
    learning_rate: float = 0.1
    epochs: int = 40
    batch_size: int = 32


@dataclass(frozen=True)
class DetectorSection:
    target_fpr: float = 0.099
    tolerance: float = 0.02


@dataclass(frozen=True)
class AttackSection:
    epsilon: float = 0.1
    step_size: float | None = None  # None -> epsilon / 10
    iterations: int = 200
    kappa: float | None = None  # None -> smallest value of kappa_grid that reaches the goal
    kappa_grid: tuple = KAPPA_GRID
    random_init: bool = True
    max_attempts: int = 200
    num_samples: int = 100
    goal_success_rate: float = 0.95


@dataclass(frozen=True)
class PathsSection:
    checkpoint: str | None = None
    profile: str | None = None
    report: str | None = None


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    attack: AttackSection = field(default_factory=AttackSection)
    paths: PathsSection = field(default_factory=PathsSection)
    seed: int = 0
    workers: int = 1

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _build(cls, doc, "")
        _validate(cfg)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.train.learning_rate, self.train.epochs, self.train.batch_size,
                           derive_seed(self.seed, _TRAIN))

    def attack_config(self, kappa: float | None = None) -> AttackConfig:
        a = self.attack
        kappa = a.kappa if kappa is None else kappa
        return AttackConfig(epsilon=a.epsilon,
                            step_size=a.step_size if a.step_size is not None else a.epsilon / 10,
                            iterations=a.iterations, kappa=0.0 if kappa is None else kappa,
                            random_init=a.random_init, max_attempts=a.max_attempts, seed=self.seed)


_SECTION_TYPES = {"data": DataSection, "train": TrainSection, "detector": DetectorSection,
                  "attack": AttackSection, "paths": PathsSection}


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key '{key}' must be true or false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key '{key}' must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{key}' must be a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"config key '{key}' must be a list")
        return tuple(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"config key '{key}' must be an object")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"config key '{key}' must be a string")
    if default is None and value is not None and not isinstance(value, (int, float, str)):
        raise ConfigError(f"config key '{key}' has an unsupported value")
    return value


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _validate(cfg: RunConfig) -> None:
    checks = [
        ("data.source", cfg.data.source in ("auto", "idx", "blobs"), "must be auto, idx or blobs"),
        ("data.num_classes", cfg.data.num_classes >= 2, "must be >= 2"),
        ("data.split", len(cfg.data.split) == 3 and all(_is_number(f) and f > 0 for f in cfg.data.split)
         and sum(cfg.data.split) <= 1.0 + 1e-12, "must be three positive fractions summing to <= 1"),
        ("data.blobs", set(cfg.data.blobs) <= {f.name for f in fields(data.SyntheticSpec)},
         f"accepts only {[f.name for f in fields(data.SyntheticSpec)]}"),
        ("train.hidden", all(isinstance(h, int) and not isinstance(h, bool) and h >= 1 for h in cfg.train.hidden),
         "must be a list of positive integers"),
        ("train.learning_rate", cfg.train.learning_rate >= 0, "must be >= 0"),
        ("train.epochs", cfg.train.epochs >= 0, "must be >= 0"),
        ("train.batch_size", cfg.train.batch_size >= 1, "must be >= 1"),
        ("detector.target_fpr", 0.0 <= cfg.detector.target_fpr < 1.0, "must lie in [0, 1)"),
        ("detector.tolerance", cfg.detector.tolerance >= 0, "must be >= 0"),
        ("attack.epsilon", cfg.attack.epsilon >= 0, "must be >= 0"),
        ("attack.step_size", cfg.attack.step_size is None
         or (_is_number(cfg.attack.step_size) and cfg.attack.step_size > 0), "must be a positive number or null"),
        ("attack.kappa", cfg.attack.kappa is None or (_is_number(cfg.attack.kappa) and cfg.attack.kappa >= 0),
         "must be a non-negative number or null"),
        ("attack.kappa_grid", len(cfg.attack.kappa_grid) > 0
         and all(_is_number(k) and k >= 0 for k in cfg.attack.kappa_grid), "must be non-negative numbers"),
        ("attack.iterations", cfg.attack.iterations >= 1, "must be >= 1"),
        ("attack.max_attempts", cfg.attack.max_attempts >= 1, "must be >= 1"),
        ("attack.num_samples", cfg.attack.num_samples >= 1, "must be >= 1"),
        ("workers", cfg.workers >= 1, "must be >= 1"),
        ("seed", 0 <= cfg.seed < 1 << 64, "must be a 64-bit unsigned integer"),
    ]
    for name in ("checkpoint", "profile", "report"):
        value = getattr(cfg.paths, name)
        checks.append((f"paths.{name}", value is None or isinstance(value, str), "must be a string or null"))
    for key, ok, message in checks:
        if not ok:
            raise ConfigError(f"config key '{key}' {message}")


def _build(cls, doc: dict, prefix: str):
    known = {f.name: f for f in fields(cls)}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
    kwargs = {}
    defaults = cls()
    for name, value in doc.items():
        key = f"{prefix}{name}"
        if name in _SECTION_TYPES and cls is RunConfig:
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{key}' must be an object")
            kwargs[name] = _build(_SECTION_TYPES[name], value, key + ".")
        else:
            kwargs[name] = _coerce(value, getattr(defaults, name), key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config section '{prefix or '<root>'}': {exc}") from exc


@dataclass
class EvalReport:
    clean_accuracy: float
    fpr: float
    tpr: float
    untargeted_success_rate: float
    targeted_success_rate: float
    original_network_success_rate: float
    attempts: dict
    distortion: dict
    config: dict
    records: list
    calibration: dict = field(default_factory=dict)
    kappa_selection: list = field(default_factory=list)
    constraint_violations: int = 0
    fpr_convention: str = FPR_CONVENTION
    paper_reference: dict = field(default_factory=lambda: dict(PAPER_REFERENCE))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        return cls(**doc)


@dataclass
class Pipeline:
    """Everything the attack stage needs, built deterministically from a RunConfig."""

    config: RunConfig
    dataset: data.Dataset
    train_set: data.Dataset
    val_set: data.Dataset
    test_set: data.Dataset
    data_source: str
    net: MlpNetwork | None = None
    loss_history: list = field(default_factory=list)
    profile: detector.ImportanceProfile | None = None
    detector_config: DetectorConfig | None = None
    calibration: dict = field(default_factory=dict)

    @property
    def detector(self) -> Detector:
        return Detector(self.net, self.profile.with_k(self.detector_config.k_top), self.detector_config)


def load_dataset(cfg: RunConfig) -> tuple[data.Dataset, str]:
    d = cfg.data
    source = d.source
    if source == "auto":
        source = "idx" if Path(d.images).exists() and Path(d.labels).exists() else "blobs"
    if source == "idx":
        return data.load_idx(d.images, d.labels, d.num_classes), "idx"
    if source == "blobs":
        return data.synth_blobs(data.SyntheticSpec(**d.blobs), derive_seed(cfg.seed, _BLOBS)), "blobs"
    raise ConfigError(f"config key 'data.source' must be idx, blobs or auto, got {source!r}")


def prepare(cfg: RunConfig) -> Pipeline:
    dataset, source = load_dataset(cfg)
    parts = data.split(dataset, cfg.data.split, derive_seed(cfg.seed, _SPLIT))
    if len(parts) != 3:
        raise ConfigError("config key 'data.split' must have three fractions (train, validation, test)")
    log.info("data: %s, %d train / %d validation / %d test", source, *map(len, parts))
    return Pipeline(cfg, dataset, parts[0], parts[1], parts[2], source)


def layer_dims(cfg: RunConfig, dataset: data.Dataset) -> list[int]:
    return [dataset.dimension, *cfg.train.hidden, dataset.num_classes]


def train_stage(p: Pipeline) -> None:
    net = MlpNetwork.init(layer_dims(p.config, p.dataset), derive_seed(p.config.seed, _INIT))
    p.net, p.loss_history = model.train(net, p.train_set, p.config.train_config())
    log.info("trained %s, final loss %.4f", p.net.layer_dims, p.loss_history[-1] if p.loss_history else float("nan"))


def extract_stage(p: Pipeline) -> None:
    clean = detector.correctly_classified(p.net, p.train_set)
    p.profile = detector.extract_importance(p.net, clean, max(detector.K_GRID))


def calibrate_stage(p: Pipeline) -> None:
    cfg = p.config.detector
    table = detector.calibration_table(p.net, p.profile, p.val_set)
    try:
        chosen = detector.select_config(table, cfg.target_fpr, cfg.tolerance)
        status = "ok"
    except CalibrationError as exc:
        log.warning("%s", exc)
        chosen, status = exc.closest_config, "failed"
    fpr = next(f for c, f in table if c == chosen)
    p.detector_config = chosen
    p.calibration = {"status": status, "target_fpr": cfg.target_fpr, "tolerance": cfg.tolerance,
                     "validation_fpr": fpr, "grid_points": len(table)}
    log.info("calibration %s: %s with validation FPR %.4f", status, chosen, fpr)


def eval_clean(net: MlpNetwork, det: Detector, clean_set) -> tuple[float, float, list]:
    """Accuracy over all of ``clean_set``; FPR over its correctly classified part.

    Also returns per-sample records ``(index, label, predicted, rejected)``."""
    if len(clean_set) == 0:
        raise ValueError("eval_clean needs a nonempty set")
    records = []
    for i, (x, y) in enumerate(zip(clean_set.inputs, clean_set.labels)):
        v = det.detect(x)
        records.append({"sample_id": i, "true_label": int(y), "predicted": v.original_label,
                        "rejected": not v.accepted})
    correct = [r for r in records if r["predicted"] == r["true_label"]]
    accuracy = len(correct) / len(records)
    fpr = sum(r["rejected"] for r in correct) / len(correct) if correct else 0.0
    return accuracy, fpr, records


def _attack_one(net, det, x, y, sample_id, acfg: AttackConfig) -> dict:
    cfg = replace(acfg, seed=derive_seed(acfg.seed, sample_id))
    res = attacks.oblivious_attack(net, det, x, y, cfg)
    v = res.final_verdict
    return {
        "sample_id": sample_id,
        "true_label": int(y),
        "target": int(res.target),
        "attempts": int(res.attempts),
        "succeeded": bool(res.succeeded),
        "rejected": not v.accepted,
        "original_label": int(v.original_label),
        "augmented_label": int(v.augmented_label),
        "untargeted": bool(attacks.untargeted_success(v, y)),
        "fooled_original": res.original_hits > 0,
        "rejected_attempts": int(res.rejections),
        "linf": float(np.max(np.abs(res.x_adv - x))),
        "_x_adv": res.x_adv,
    }


def eval_attack(net: MlpNetwork, det: Detector, test_set, acfg: AttackConfig,
                num_samples: int | None = None, workers: int = 1) -> tuple[dict, list]:
    """Run the oblivious attack on the first ``num_samples`` correctly
    classified inputs of ``test_set``; ``sample_id`` is the test-set index.

    Returns the summary dict and the per-sample records sorted by sample_id.
    """
    ids = [i for i, (x, y) in enumerate(zip(test_set.inputs, test_set.labels))
           if model.argmax(model.forward(net, x).logits) == y]
    if num_samples is not None:
        ids = ids[:num_samples]
    if not ids:
        raise ValueError("no correctly classified inputs to attack")

    def job(i):
        return _attack_one(net, det, test_set.inputs[i], int(test_set.labels[i]), i, acfg)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(job, ids))
    else:
        records = [job(i) for i in ids]
    records.sort(key=lambda r: r["sample_id"])

    violations = 0
    for r in records:
        x = test_set.inputs[r["sample_id"]]
        x_adv = r.pop("_x_adv")
        # independent re-check of the attack's own projection guarantee
        if np.any(np.abs(x_adv - x) > acfg.epsilon) or x_adv.min() < 0.0 or x_adv.max() > 1.0:
            violations += 1
    return summarize_attack(records, acfg.epsilon, violations), records


def summarize_attack(records: list, epsilon: float, violations: int = 0) -> dict:
    n = len(records)
    succeeded = [r for r in records if r["succeeded"]]
    attempts = [r["attempts"] for r in succeeded]
    linf = [r["linf"] for r in records]
    return {
        "num_attacked": n,
        "tpr": sum(r["rejected"] for r in records) / n,
        "untargeted_success_rate": sum(r["untargeted"] for r in records) / n,
        "targeted_success_rate": len(succeeded) / n,
        "original_network_success_rate": sum(r["fooled_original"] for r in records) / n,
        "accepted_wrong": sum((not r["rejected"]) and r["original_label"] != r["true_label"] for r in records) / n,
        "accepted_correct": sum((not r["rejected"]) and r["original_label"] == r["true_label"] for r in records) / n,
        "attempts": {
            "median": statistics.median(attempts) if attempts else None,
            "mean": statistics.fmean(attempts) if attempts else None,
            "max": max(attempts) if attempts else None,
            "finite_fraction": len(attempts) / n,
        },
        "distortion": {"linf_max": max(linf), "linf_mean": math.fsum(linf) / n, "epsilon": epsilon},
        "constraint_violations": violations,
    }


def goal_reached(summary: dict, fpr: float, goal_success_rate: float) -> bool:
    return summary["untargeted_success_rate"] >= goal_success_rate and summary["tpr"] <= fpr


def attack_stage(p: Pipeline, clean_fpr: float) -> tuple[float, dict, list, list]:
    """Run the attack at the configured kappa, or walk the kappa grid and
    keep the first value reaching the goal (else the best success rate)."""
    a = p.config.attack
    kappas = [float(k) for k in ([a.kappa] if a.kappa is not None else a.kappa_grid)]
    det = p.detector
    trials, best = [], None
    for kappa in kappas:
        acfg = p.config.attack_config(kappa)
        summary, records = eval_attack(p.net, det, p.test_set, acfg, a.num_samples, p.config.workers)
        reached = goal_reached(summary, clean_fpr, a.goal_success_rate)
        trials.append({"kappa": kappa, "untargeted_success_rate": summary["untargeted_success_rate"],
                       "tpr": summary["tpr"], "constraint_violations": summary["constraint_violations"],
                       "goal_reached": reached})
        log.info("kappa=%g: untargeted success %.3f, TPR %.3f", kappa,
                 summary["untargeted_success_rate"], summary["tpr"])
        if best is None or summary["untargeted_success_rate"] > best[1]["untargeted_success_rate"]:
            best = (kappa, summary, records)
        if reached:
            best = (kappa, summary, records)
            break
    return best[0], best[1], best[2], trials


def build_report(p: Pipeline, accuracy: float, fpr: float, kappa: float, summary: dict,
                 records: list, trials: list) -> EvalReport:
    acfg = p.config.attack_config(kappa)
    echo = {
        "data_source": p.data_source,
        "layer_dims": p.net.layer_dims,
        "train": asdict(p.config.train_config()),
        "detector": asdict(p.detector_config),
        "attack": asdict(acfg),
        "attack_num_samples": p.config.attack.num_samples,
        "master_seed": p.config.seed,
        "split": list(p.config.data.split),
        "sizes": {"train": len(p.train_set), "validation": len(p.val_set), "test": len(p.test_set)},
        "per_sample_seed": "splitmix64(master_seed ^ sample_id)",
        "optimizer": "signed-gradient PGD on max(max_{i!=t} z_i - z_t, -kappa), projected onto the "
                     "L-inf ball and [0,1] box",
        "importance": "top-k mean post-ReLU activation per class and hidden layer",
    }
    return EvalReport(
        clean_accuracy=accuracy, fpr=fpr, tpr=summary["tpr"],
        untargeted_success_rate=summary["untargeted_success_rate"],
        targeted_success_rate=summary["targeted_success_rate"],
        original_network_success_rate=summary["original_network_success_rate"],
        attempts=summary["attempts"], distortion=summary["distortion"], config=echo,
        records=records, calibration=dict(p.calibration), kappa_selection=trials,
        constraint_violations=summary["constraint_violations"])


def run_pipeline(cfg: RunConfig) -> tuple[EvalReport, Pipeline]:
    p = prepare(cfg)
    train_stage(p)
    extract_stage(p)
    calibrate_stage(p)
    accuracy, fpr, _ = eval_clean(p.net, p.detector, p.test_set)
    log.info("clean test accuracy %.4f, FPR %.4f", accuracy, fpr)
    kappa, summary, records, trials = attack_stage(p, fpr)
    return build_report(p, accuracy, fpr, kappa, summary, records, trials), p


def report_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), indent=1, sort_keys=True, allow_nan=False) + "\n"


CSV_COLUMNS = ("sample_id", "true_label", "target", "attempts", "succeeded", "rejected", "linf")


def emit_report(report: EvalReport, path, fmt: str = "json") -> None:
    """JSON: the whole report. CSV: one row per attacked sample, plus the
    summary (everything except the records) in ``<path>.summary.json``."""
    path = Path(path)
    try:
        if fmt == "json":
            path.write_text(report_json(report), encoding="utf-8")
        elif fmt == "csv":
            with path.open("w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(CSV_COLUMNS)
                for r in report.records:
                    writer.writerow([r[c] for c in CSV_COLUMNS])
            summary = {k: v for k, v in report.to_dict().items() if k != "records"}
            Path(f"{path}.summary.json").write_text(
                json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write report to {path}: {exc.strerror}") from exc


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
