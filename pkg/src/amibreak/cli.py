"""Command line entry point.

    amibreak evaluate --config run.json --out report.json

Exit status: 0 on success, 1 on usage errors, 2 on runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import detector, harness, model
from .harness import ConfigError, RunConfig

log = logging.getLogger("amibreak")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="amibreak", description="Detector calibration and oblivious-attack evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    helps = {
        "train": "train the classifier and write a checkpoint",
        "extract": "extract the per-class important neurons from a checkpoint",
        "calibrate": "grid-search the amplification factors to hit the target FPR",
        "attack": "run the oblivious attack against a calibrated detector",
        "evaluate": "run the whole pipeline end to end and write the report",
        "report": "convert a JSON report to CSV (or re-emit it as JSON)",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", help="RunConfig JSON file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="output path (defaults to the matching paths.* config entry)")
        p.add_argument("--workers", type=int, help="parallel attack workers")
        if name == "report":
            p.add_argument("--input", help="report JSON to read (defaults to paths.report)")
            p.add_argument("--format", choices=("json", "csv"), default="csv")
    return parser


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = replace(cfg, workers=args.workers)
    return cfg


def _need(path, what):
    if not path:
        raise ConfigError(f"no {what} path: pass --out or set the matching paths.* config key")
    return path


def _load_net(cfg: RunConfig) -> model.MlpNetwork:
    return model.load_checkpoint(_need(cfg.paths.checkpoint, "checkpoint"))


def cmd_train(cfg, args):
    p = harness.prepare(cfg)
    harness.train_stage(p)
    out = _need(args.out or cfg.paths.checkpoint, "checkpoint")
    model.save_checkpoint(p.net, out)
    acc = model.accuracy(p.net, p.test_set)
    print(f"wrote {out}: {p.net.layer_dims}, test accuracy {acc:.4f}")


def cmd_extract(cfg, args):
    p = harness.prepare(cfg)
    p.net = _load_net(cfg)
    harness.extract_stage(p)
    out = _need(args.out or cfg.paths.profile, "profile")
    detector.save_profile(p.profile, detector.DetectorConfig(k_top=p.profile.k_top), out)
    print(f"wrote {out}: k_top={p.profile.k_top}, {p.profile.source_size} source examples")


def cmd_calibrate(cfg, args):
    p = harness.prepare(cfg)
    p.net = _load_net(cfg)
    p.profile, _ = detector.load_profile(_need(cfg.paths.profile, "profile"))
    harness.calibrate_stage(p)
    out = _need(args.out or cfg.paths.profile, "profile")
    doc = p.profile.to_json(p.detector_config)
    doc["calibration"] = p.calibration
    Path(out).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    c = p.detector_config
    print(f"wrote {out}: alpha={c.alpha} beta={c.beta} k_top={c.k_top}, "
          f"validation FPR {p.calibration['validation_fpr']:.4f} ({p.calibration['status']})")


def _attack_and_report(p, args, cfg):
    accuracy, fpr, _ = harness.eval_clean(p.net, p.detector, p.test_set)
    kappa, summary, records, trials = harness.attack_stage(p, fpr)
    report = harness.build_report(p, accuracy, fpr, kappa, summary, records, trials)
    out = _need(args.out or cfg.paths.report, "report")
    harness.emit_report(report, out, "json")
    print(f"wrote {out}: accuracy {accuracy:.4f}, FPR {fpr:.4f}, TPR {report.tpr:.4f}, "
          f"untargeted success {report.untargeted_success_rate:.4f}, kappa {kappa}, "
          f"median attempts {report.attempts['median']}")


def cmd_attack(cfg, args):
    p = harness.prepare(cfg)
    p.net = _load_net(cfg)
    path = _need(cfg.paths.profile, "profile")
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    p.profile, p.detector_config = detector.ImportanceProfile.from_json(doc)
    p.calibration = doc.get("calibration", {})
    _attack_and_report(p, args, cfg)


def cmd_evaluate(cfg, args):
    p = harness.prepare(cfg)
    harness.train_stage(p)
    if cfg.paths.checkpoint:
        model.save_checkpoint(p.net, cfg.paths.checkpoint)
    harness.extract_stage(p)
    harness.calibrate_stage(p)
    if cfg.paths.profile:
        detector.save_profile(p.profile.with_k(p.detector_config.k_top), p.detector_config, cfg.paths.profile)
    _attack_and_report(p, args, cfg)


def cmd_report(cfg, args):
    src = _need(args.input or cfg.paths.report, "report input")
    report = harness.load_report(src)
    out = _need(args.out, "report output")
    harness.emit_report(report, out, args.format)
    print(f"wrote {out} ({args.format}, {len(report.records)} samples)")


COMMANDS = {"train": cmd_train, "extract": cmd_extract, "calibrate": cmd_calibrate,
            "attack": cmd_attack, "evaluate": cmd_evaluate, "report": cmd_report}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, ValueError, OSError, KeyError) as exc:
        print(f"amibreak {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
