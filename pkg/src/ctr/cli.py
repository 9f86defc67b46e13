"""Command-line front end.

Verbs: ``train``, ``attack``, ``analyze-ct``, ``curve``, ``export-logits``.
Every verb logs the library version and the fully resolved config to stderr
and prints exactly one JSON summary line on stdout. Exit codes: 0 ok,
2 usage/config (nothing is written), 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .analysis import census_from_probs, ct_sweep, export, export_logits, robustness_curve, theoretical_ct
from .attacks import AttackSpec, evaluate_robustness, with_overrides, write_attack_csv
from .data_io import ConfigError, FormatError, RunConfig, load_datasets, parse_config
from .model import build_model, load_checkpoint, save_checkpoint
from .training import Trainer, history_line, make_rngs

log = logging.getLogger("ctr")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
GRID_ATTACKS = ("FGSM", "PGD", "APGD")
GRID_LOSSES = ("CE", "SCE", "KL", "SKL", "STD")
# attack-side gamma used by the grid for the STD-weighted losses
GRID_GAMMA = {"SCE": 5.0, "SKL": 1.0}
SWEEP_POINTS = 100


class UsageError(Exception):
    """Bad flags, config or input paths; raised before any artifact is written."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctr", description="Confidence threshold reduction experiments.")
    parser.add_argument("--version", action="version", version=f"ctr {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(p, checkpoint: bool):
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable), e.g. train.gamma=3")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="model checkpoint (.npz)")
        return p

    p = common(sub.add_parser("train", help="train a model"), checkpoint=False)
    p.add_argument("--resume", action="store_true", help="continue from OUT/state.npz")
    p = common(sub.add_parser("attack", help="attack a checkpoint"), checkpoint=True)
    p.add_argument("--grid", action="store_true",
                   help="run the {FGSM,PGD,APGD} x {CE,SCE,KL,SKL,STD} grid")
    p = common(sub.add_parser("analyze-ct", help="confidence-threshold census and sweep"), checkpoint=True)
    p.add_argument("--thresholds", default=None, help="comma-separated census thresholds")
    common(sub.add_parser("curve", help="robust accuracy over analysis.eps_list"), checkpoint=True)
    common(sub.add_parser("export-logits", help="per-example test logits as CSV"), checkpoint=True)
    return parser


# -- helpers -------------------------------------------------------------------

def _resolve(args) -> RunConfig:
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    return parse_config(path, args.set, seed=args.seed)


def _load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError, OSError) as exc:
        raise UsageError(f"unreadable checkpoint {path}: {exc}") from None


def _datasets(cfg: RunConfig):
    try:
        train, test = load_datasets(cfg)
    except FileNotFoundError as exc:
        raise UsageError(f"data file not found: {exc}") from None
    if cfg.analysis.eval_limit is not None:
        test = test.head(cfg.analysis.eval_limit)
    return train, test


def _check_compatible(model, dataset) -> None:
    if model.input_dim != dataset.dim or model.num_classes != dataset.num_classes:
        raise UsageError(f"checkpoint expects {model.input_dim} inputs / {model.num_classes} classes, "
                         f"data has {dataset.dim} / {dataset.num_classes}")


def _log_header(verb: str, cfg: RunConfig) -> None:
    log.info("ctr %s, command %s", __version__, verb)
    log.info("resolved config:\n%s", cfg.to_json())


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


# -- verbs ---------------------------------------------------------------------

def cmd_train(args, cfg: RunConfig, out: Path) -> dict:
    train_set, test_set = _datasets(cfg)
    rngs = make_rngs(cfg.seed)
    model = build_model(cfg.model.arch, train_set.dim, train_set.num_classes, cfg.model.dropout,
                        cfg.model.dropout_all, cfg.model.hidden, rng=rngs["init"])
    eval_attack = cfg.attack if cfg.analysis.track_robust else None
    trainer = Trainer(cfg.train, model, rngs, eval_attack=eval_attack,
                      record_wall_time=cfg.record_wall_time)
    out.mkdir(parents=True, exist_ok=True)
    history_path, state_path = out / "history.jsonl", out / "state.npz"
    if args.resume and state_path.exists():
        trainer.load_state(state_path)
        # drop lines written after the last saved state
        _write_text(history_path, "".join(history_line(r) + "\n" for r in trainer.history.records))
        log.info("resumed at epoch %d", trainer.epoch)
    elif history_path.exists():
        history_path.unlink()
    _write_text(out / "config.json", cfg.to_json() + "\n")
    history = trainer.fit(train_set, test_set, out_dir=out)
    save_checkpoint(model, out / "model.npz")
    last = history.records[-1]
    return {"epochs": trainer.epoch, "nat_acc": last["nat_acc"], "train_loss": last["train_loss"],
            "checkpoint": str(out / "model.npz")}


def _attack_row(model, dataset, spec: AttackSpec, seed: int, out: Path, stem: str) -> dict:
    if spec.loss_kind in ("STD", "SCE", "SKL") and model.num_classes < 3:
        return {"attack": spec.kind, "loss": spec.loss_kind, "epsilon": float(spec.epsilon),
                "status": "unsupported (C < 3)"}
    metrics, adv = evaluate_robustness(model, dataset, spec, rng=make_rngs(seed)["attack"], return_batch=True)
    csv_name = f"{stem}.csv"
    write_attack_csv(out / csv_name, dataset.inputs, dataset.labels, adv)
    return dict(metrics, status="ok", csv=csv_name)


def cmd_attack(args, cfg: RunConfig, out: Path) -> dict:
    model = _load_checkpoint(args.checkpoint)
    _, test_set = _datasets(cfg)
    _check_compatible(model, test_set)
    if args.grid:
        specs = []
        for kind in GRID_ATTACKS:
            for loss in GRID_LOSSES:
                steps = cfg.attack.steps if kind != "APGD" else max(cfg.attack.steps, 2)
                alpha = None if cfg.attack.kind == "FGSM" else cfg.attack.alpha
                gamma = GRID_GAMMA.get(loss, cfg.attack.gamma)
                specs.append(with_overrides(cfg.attack, kind=kind, loss_kind=loss, steps=steps,
                                            alpha=alpha, gamma=gamma))
    else:
        specs = [cfg.attack]
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for spec in specs:
        stem = f"attack_{spec.kind}_{spec.loss_kind}".lower()
        rows.append(_attack_row(model, test_set, spec, cfg.seed, out, stem))
        log.info("%s", json.dumps(rows[-1], sort_keys=True))
    export(rows, out / "attack_summary.json", "json")
    export(rows, out / "attack_summary.csv", "csv")
    return {"rows": len(rows), "summary": str(out / "attack_summary.json")}


def _thresholds(args, cfg: RunConfig, num_classes: int) -> list:
    if args.thresholds:
        try:
            values = [float(t) for t in args.thresholds.split(",") if t.strip()]
        except ValueError:
            raise UsageError(f"--thresholds must be comma-separated numbers, got {args.thresholds!r}") from None
    elif cfg.analysis.thresholds is not None:
        values = list(cfg.analysis.thresholds)
    else:
        values = [theoretical_ct(num_classes)]
    if not values or any(not 0 < t <= 1 for t in values):
        raise UsageError("thresholds must lie in (0, 1]")
    return values


def cmd_analyze_ct(args, cfg: RunConfig, out: Path) -> dict:
    model = _load_checkpoint(args.checkpoint)
    _, test_set = _datasets(cfg)
    _check_compatible(model, test_set)
    thresholds = _thresholds(args, cfg, model.num_classes)
    out.mkdir(parents=True, exist_ok=True)
    probs = model.predict_proba(test_set.inputs)
    census = [census_from_probs(probs, test_set.labels, t) for t in thresholds]
    rows = [{"threshold": c.threshold, "total": c.total, "count": c.count, "fraction": c.fraction}
            for c in census]
    export(rows, out / "ct_census.csv", "csv")
    ct = theoretical_ct(model.num_classes)
    grid = sorted({ct * (k / SWEEP_POINTS) for k in range(1, SWEEP_POINTS + 1)} | {t for t in thresholds if t <= ct})
    export(ct_sweep(model, test_set, grid), out / "ct_sweep.csv", "csv")
    return {"census": rows, "sweep_points": len(grid)}


def cmd_curve(args, cfg: RunConfig, out: Path) -> dict:
    model = _load_checkpoint(args.checkpoint)
    _, test_set = _datasets(cfg)
    _check_compatible(model, test_set)
    eps = sorted(float(e) for e in cfg.analysis.eps_list)
    out.mkdir(parents=True, exist_ok=True)
    curve = robustness_curve(model, test_set, cfg.attack, eps, rng_seed=cfg.seed)
    export(curve, out / "robustness_curve.csv", "csv")
    return {"label": curve.label, "epsilon": curve.x, "robust_accuracy": curve.y}


def cmd_export_logits(args, cfg: RunConfig, out: Path) -> dict:
    model = _load_checkpoint(args.checkpoint)
    _, test_set = _datasets(cfg)
    _check_compatible(model, test_set)
    out.mkdir(parents=True, exist_ok=True)
    export_logits(model, test_set, out / "logits.csv")
    return {"n": len(test_set), "path": str(out / "logits.csv")}


VERBS = {"train": cmd_train, "attack": cmd_attack, "analyze-ct": cmd_analyze_ct,
         "curve": cmd_curve, "export-logits": cmd_export_logits}


def _emit(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True), flush=True)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    verb = None
    try:
        args = build_parser().parse_args(argv)
        verb = args.verb
        cfg = _resolve(args)
        _log_header(verb, cfg)
        out = Path(args.out)
        if out.exists() and not out.is_dir():
            raise UsageError(f"--out {out} exists and is not a directory")
        summary = VERBS[verb](args, cfg, out)
    except (UsageError, ConfigError) as exc:
        log.error("%s", exc)
        doc = {"command": verb, "status": "error", "exit_code": EXIT_USAGE,
               "error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, ConfigError):
            doc["key"] = exc.key
        _emit(doc)
        return EXIT_USAGE
    except (FormatError, ValueError, ArithmeticError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        _emit({"command": verb, "status": "error", "exit_code": EXIT_RUNTIME,
               "error": type(exc).__name__, "message": str(exc)})
        return EXIT_RUNTIME
    _emit(dict(summary, command=verb, status="ok", version=__version__))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
