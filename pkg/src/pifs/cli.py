"""Command-line experiment runner: ``pifs run | ablate | gen-data | eval``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__
from .data import IGNORE_INDEX, SyntheticSpec, generate_dataset, read_manifest, read_pgm, write_manifest
from .methods import ABLATION_ROWS, MethodSpec, get_method
from .metrics import ConfusionAccumulator, iou_per_class, make_report
from .nn import load_checkpoint, save_checkpoint
from .protocol import ModelConfig, ProtocolConfig, TrainerConfig, run_experiment, summarize

log = logging.getLogger("pifs")

CSV_HEADER = ("method", "fold", "trial", "step", "shots", "setting", "strict", "miou_base", "miou_new", "hm", "seed")
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


# -- configuration ---------------------------------------------------------------

# section name -> dataclass whose fields it may set; the unnamed top of the file
# behaves like [protocol].
_SECTIONS = {
    "protocol": ProtocolConfig,
    "trainer": TrainerConfig,
    "model": ModelConfig,
    "data": SyntheticSpec,
}
_NESTED = ("trainer", "model")
_EXTRA_PROTOCOL_KEYS = {"method": "pifs"}


@dataclass
class RunConfig:
    protocol: ProtocolConfig
    spec: SyntheticSpec
    methods: list[MethodSpec]

    def as_dict(self) -> dict:
        return {
            "protocol": _plain(self.protocol),
            "data": _plain(self.spec),
            "methods": sorted({m.name for m in self.methods}),
        }


def _plain(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    return obj


def _scalar_fields(cls) -> dict[str, Any]:
    proto = cls()
    return {f.name: getattr(proto, f.name) for f in fields(cls) if f.name not in _NESTED}


def _convert(raw: str, default: Any):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(p) for p in raw.split(",") if p.strip())
    return raw


def read_config_text(text: str, source: str = "<config>") -> dict[str, dict[str, tuple[str, int]]]:
    """Parse ``key = value`` lines into {section: {key: (raw value, line number)}}."""
    out: dict[str, dict[str, tuple[str, int]]] = {"protocol": {}}
    section = "protocol"
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if body.startswith("["):
            if not body.endswith("]"):
                raise ConfigError(f"{source}:{lineno}: malformed section header {line.strip()!r}")
            section = body[1:-1].strip().lower()
            if section not in _SECTIONS:
                raise ConfigError(f"{source}:{lineno}: unknown section [{section}]; expected one of {sorted(_SECTIONS)}")
            out.setdefault(section, {})
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (s.strip() for s in body.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: missing key")
        if key in out[section]:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {out[section][key][1]})")
        out[section][key] = (value, lineno)
    return out


def build_config(entries: dict[str, dict[str, tuple[str, int]]], overrides: Optional[dict] = None, source: str = "<config>") -> RunConfig:
    """Turn parsed entries plus command-line overrides into validated configs."""
    values: dict[str, dict[str, Any]] = {name: {} for name in _SECTIONS}
    for section, items in entries.items():
        allowed = _scalar_fields(_SECTIONS[section])
        if section == "protocol":
            allowed.update(_EXTRA_PROTOCOL_KEYS)
        for key, (raw, lineno) in items.items():
            if key not in allowed:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r} in [{section}]; valid keys: {', '.join(sorted(allowed))}")
            try:
                values[section][key] = _convert(raw, allowed[key])
            except ValueError as e:
                raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {e}") from None
    for key, value in (overrides or {}).items():
        if value is not None:
            values["protocol"][key] = value

    proto = values["protocol"]
    method_names = str(proto.pop("method", _EXTRA_PROTOCOL_KEYS["method"]))
    try:
        methods = [get_method(n) for n in method_names.split(",") if n.strip()]
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if not methods:
        raise ConfigError("no method selected")

    if proto.get("setting", "ss") == "ms" and "ms_classes_per_step" not in proto:
        fold_size = proto.get("fold_size", ProtocolConfig.fold_size)
        steps = proto.get("ms_steps", ProtocolConfig.ms_steps)
        if steps < 1 or fold_size % steps:
            raise ConfigError(f"ms_steps = {steps} does not divide fold_size = {fold_size} into equal steps")
        proto["ms_classes_per_step"] = fold_size // steps
    try:
        spec = SyntheticSpec(**values["data"])
        cfg = ProtocolConfig(
            **proto,
            trainer=TrainerConfig(**values["trainer"]),
            model=ModelConfig(**values["model"]),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    shape_classes = spec.n_classes - 1
    if shape_classes % cfg.fold_size:
        raise ConfigError(f"fold_size = {cfg.fold_size} does not divide the {shape_classes} shape classes")
    n_folds = shape_classes // cfg.fold_size
    bad = [f for f in cfg.folds if not 0 <= f < n_folds]
    if bad:
        raise ConfigError(f"folds {bad} out of range; {n_folds} folds exist")
    return RunConfig(cfg, spec, methods)


def parse_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    if path is None:
        return build_config({"protocol": {}}, overrides)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    return build_config(read_config_text(p.read_text(encoding="utf-8"), str(p)), overrides, str(p))


def defaults_text() -> str:
    lines = ["# pifs configuration defaults", "# top-level keys belong to [protocol]", "", "[protocol]"]
    lines.append(f"method = {_EXTRA_PROTOCOL_KEYS['method']}  # comma-separated; one of: {', '.join(sorted({m for _, m in ABLATION_ROWS}))}")
    for section, cls in _SECTIONS.items():
        if section != "protocol":
            lines += ["", f"[{section}]"]
        for key, value in _scalar_fields(cls).items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


# -- result emission ---------------------------------------------------------------

def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def result_rows(results, cfg: ProtocolConfig) -> list[dict]:
    rows = []
    for r in results:
        for rep in r.reports:
            rows.append(
                {
                    "method": r.method,
                    "fold": r.fold,
                    "trial": r.trial,
                    "step": rep.step_index,
                    "shots": cfg.shots,
                    "setting": cfg.setting,
                    "strict": int(cfg.strict),
                    "miou_base": rep.miou_base,
                    "miou_new": rep.miou_new,
                    "hm": rep.hm,
                    "seed": cfg.seed,
                    "iou_per_class": {str(k): v for k, v in sorted(rep.iou_per_class.items())},
                }
            )
    rows.sort(key=lambda row: (row["method"], row["fold"], row["trial"], row["step"]))
    return rows


def write_csv(path: Path, rows: Sequence[dict]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow([_fmt(row[k]) if isinstance(row[k], float) else row[k] for k in CSV_HEADER])
    path.write_bytes(buf.getvalue().encode("utf-8"))


def _json_safe(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_json_safe(v) for v in x]
    return x


def write_json(path: Path, obj) -> None:
    path.write_bytes((json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n").encode("utf-8"))


def summaries(results, methods: Sequence[MethodSpec], hm_mode: str) -> dict[str, dict]:
    out = {}
    for m in methods:
        mine = [r for r in results if r.method == m.name]
        if mine:
            out[m.name] = summarize(mine, hm_mode).as_dict()
    return out


def _execute(run: RunConfig, out_dir: Path, jobs: int, argv: Sequence[str]) -> tuple[list, dict]:
    t0 = time.time()
    # aliases (wi_ft_br_pd -> pifs) collapse to one run
    methods = list({m.name: m for m in run.methods}.values())
    results, bases = run_experiment(run.protocol, methods, run.spec, jobs=jobs)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = result_rows(results, run.protocol)
    write_csv(out_dir / "results.csv", rows)
    summary = summaries(results, methods, run.protocol.hm_mode)
    write_json(out_dir / "results.json", {"config": run.as_dict(), "runs": rows, "summary": summary})

    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    checkpoints = []
    for fold, state in sorted(bases.items()):
        p = ckpt_dir / f"base_fold{fold}.ckpt"
        save_checkpoint(state.model, p)
        checkpoints.append(str(p.relative_to(out_dir)))
    for r in sorted(results, key=lambda r: (r.method, r.fold, r.trial)):
        p = ckpt_dir / f"{r.method}_fold{r.fold}_trial{r.trial}.ckpt"
        save_checkpoint(r.final_model, p)
        checkpoints.append(str(p.relative_to(out_dir)))

    config = run.as_dict()
    write_json(
        out_dir / "manifest.json",
        {
            "config": config,
            "config_hash": config_hash(config),
            "version": __version__,
            "seed": run.protocol.seed,
            "argv": list(argv),
            "outputs": {"results_csv": "results.csv", "results_json": "results.json", "checkpoints": checkpoints},
            "wall_clock_seconds": round(time.time() - t0, 3),
        },
    )
    return results, summary


# -- commands -----------------------------------------------------------------------

def _split_ints(s: Optional[str]) -> Optional[tuple[int, ...]]:
    if s is None:
        return None
    try:
        return tuple(int(p) for p in s.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {s!r}") from None


def _run_overrides(args) -> dict:
    return {
        "method": args.method,
        "shots": args.shots,
        "setting": args.setting,
        "strict": True if args.strict else None,
        "folds": _split_ints(args.folds),
        "trials": args.trials,
        "seed": args.seed,
    }


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("PIFS_OUT")
    if not out:
        raise ConfigError("no output directory: pass --out or set PIFS_OUT")
    return Path(out)


def cmd_run(args) -> int:
    run = parse_config(args.config, _run_overrides(args))
    out = _out_dir(args)
    _, summary = _execute(run, out, args.jobs, args.argv)
    for name, s in summary.items():
        print(f"{name:14s} mIoU-B {s['miou_base']:6.2f}  mIoU-N {s['miou_new']:6.2f}  HM {s['hm']:6.2f}")
    print(f"wrote {out / 'results.csv'}")
    return EXIT_OK


def ablation_table(summary: dict[str, dict]) -> list[dict]:
    return [
        {"row": label, "method": name, **{k: summary[name][k] for k in ("miou_base", "miou_new", "hm")}}
        for label, name in ABLATION_ROWS
    ]


def cmd_ablate(args) -> int:
    overrides = _run_overrides(args)
    overrides["method"] = ",".join(name for _, name in ABLATION_ROWS)
    run = parse_config(args.config, overrides)
    out = _out_dir(args)
    _, summary = _execute(run, out, args.jobs, args.argv)
    table = ablation_table(summary)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("row", "method", "miou_base", "miou_new", "hm"))
    for row in table:
        writer.writerow((row["row"], row["method"], _fmt(row["miou_base"]), _fmt(row["miou_new"]), _fmt(row["hm"])))
    (out / "ablation.csv").write_bytes(buf.getvalue().encode("utf-8"))
    print(f"{'method':14s} {'mIoU-B':>7s} {'mIoU-N':>7s} {'HM':>7s}")
    for row in table:
        print(f"{row['row']:14s} {row['miou_base']:7.2f} {row['miou_new']:7.2f} {row['hm']:7.2f}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    run = parse_config(args.config)
    spec = run.spec if args.seed is None else dataclasses.replace(run.spec, seed=args.seed)
    classes = _split_ints(args.classes) or tuple(spec.shape_classes)
    ds = generate_dataset(spec, args.n, classes, start_id=args.start_id)
    path = write_manifest(_out_dir(args), ds)
    print(f"wrote {len(ds)} images to {path}")
    return EXIT_OK


def _predictions(args, dataset) -> list[np.ndarray]:
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
        if not ckpt.is_file():
            raise ConfigError(f"checkpoint not found: {ckpt}")
        model = load_checkpoint(ckpt)
        return list(model.predict(dataset.images()))
    pred_dir = Path(args.pred_dir)
    preds = []
    for item in dataset:
        p = pred_dir / f"{item.id:07d}.pgm"
        if not p.is_file():
            raise ConfigError(f"prediction missing for image {item.id}: {p}")
        preds.append(read_pgm(p))
    return preds


def cmd_eval(args) -> int:
    manifest = Path(args.manifest)
    if not manifest.is_file():
        raise ConfigError(f"manifest not found: {manifest}")
    dataset = read_manifest(manifest)
    preds = _predictions(args, dataset)
    labels = [int(m[m != IGNORE_INDEX].max(initial=0)) for m in dataset.masks()] + [int(p.max(initial=0)) for p in preds]
    n_classes = max(labels) + 1
    acc = ConfusionAccumulator(n_classes)
    for pred, item in zip(preds, dataset):
        acc.update(np.asarray(pred), item.mask)
    ious = iou_per_class(acc)
    present = [c for c in range(n_classes) if not np.isnan(ious[c])]
    report: dict[str, Any] = {
        "iou_per_class": {str(c): float(ious[c]) for c in present},
        "miou": 100.0 * float(np.mean([ious[c] for c in present])) if present else float("nan"),
    }
    base, new = _split_ints(args.base), _split_ints(args.new)
    if base and new:
        report.update(make_report(acc, base, new).as_dict())
    text = json.dumps(_json_safe(report), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_bytes(text.encode("utf-8"))
    sys.stdout.write(text)
    return EXIT_OK


# -- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pifs", description="Incremental few-shot segmentation experiments on synthetic shapes.")
    parser.add_argument("--print-defaults", action="store_true", help="print the default configuration file and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    def run_flags(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--shots", type=int)
        p.add_argument("--setting", choices=("ss", "ms"))
        p.add_argument("--strict", action="store_true", help="relabel old-class pixels of few-shot images as background")
        p.add_argument("--folds", help="comma-separated fold indices")
        p.add_argument("--trials", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (default: $PIFS_OUT)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")

    p_run = sub.add_parser("run", help="run one or more methods")
    run_flags(p_run)
    p_run.add_argument("--method", help="comma-separated method names")
    p_run.set_defaults(func=cmd_run)

    p_abl = sub.add_parser("ablate", help="run the component ablation matrix")
    run_flags(p_abl)
    p_abl.set_defaults(func=cmd_ablate, method=None)

    p_gen = sub.add_parser("gen-data", help="write a synthetic dataset as PPM/PGM plus manifest")
    p_gen.add_argument("--config")
    p_gen.add_argument("--out")
    p_gen.add_argument("--n", type=int, default=100)
    p_gen.add_argument("--seed", type=int)
    p_gen.add_argument("--start-id", type=int, default=0)
    p_gen.add_argument("--classes", help="comma-separated shape classes allowed in images")
    p_gen.set_defaults(func=cmd_gen_data)

    p_eval = sub.add_parser("eval", help="score a checkpoint or a prediction directory against a manifest")
    p_eval.add_argument("--manifest", required=True)
    src = p_eval.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--pred-dir")
    p_eval.add_argument("--base", help="base classes for mIoU-B (with --new)")
    p_eval.add_argument("--new", help="new classes for mIoU-N (with --base)")
    p_eval.add_argument("--out", help="also write the report JSON here")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.print_defaults:
        sys.stdout.write(defaults_text())
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    args.argv = argv
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"pifs: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - any failure during a run maps to exit 2
        log.debug("run failed", exc_info=True)
        print(f"pifs: run failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
