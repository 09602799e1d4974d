"""Command-line entry point: ``cgdl {gen-data,train,eval,ablate,export-latents}``.

Configuration precedence is defaults < ``--config`` file (JSON or YAML) <
``CGDL_<KEY>`` environment variables < flags. Whenever a later source
replaces a value set by an earlier one, the override is reported on stderr.

Exit codes: 0 ok, 1 every ablation cell failed, 2 configuration error,
3 I/O or file-format error, 4 training diverged, 5 checkpoint unreadable or
version mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    LabeledImageSet,
    SplitSpec,
    generate_synthetic,
    load_idx,
    make_outliers,
    save_idx,
    split,
    write_manifest,
)
from .detector import DETECTOR_KINDS, OpenSetDetector
from .errors import CheckpointError, ConfigError, FormatError, TrainingDiverged
from .evaluation import (
    AblationSpec,
    evaluate,
    export_latents,
    resolve_variant,
    run_ablation,
    write_ablation,
)
from .ladder import LadderConfig, LadderModel
from .trainer import TrainConfig, train

EXIT_OK = 0
EXIT_ALL_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_CHECKPOINT = 5

ENV_PREFIX = "CGDL_"

log = logging.getLogger("cgdl")


# ---------------------------------------------------------------- configs


@dataclass
class GenDataConfig:
    out: str = "data"
    seed: int = 0
    num_classes: int = 4
    per_class: int = 600
    image_side: int = 10
    noise_sigma: float = 0.1
    test_fraction: float = 1.0 / 6.0
    unseen_classes: int = 2
    unseen_count: int = 200
    noise_count: int = 200
    noised_known_count: int = 0


@dataclass
class TrainRunConfig:
    out: str = "run"
    seed: int = 0
    data_dir: str = "data"
    epochs: int = 200
    learning_rate: float = 0.001
    batch_size: int = 64
    lam: float = 100.0
    layer_dims: list = field(default_factory=lambda: [64, 48])
    latent_dim: int = 32
    prelu_init: float = 0.25
    ladder: bool = True
    recon_weight: float = 1.0
    beta_max: float = 1.0
    momentum: float = 0.0
    checkpoint_every: int = 0
    tau_l: float = 0.5
    detector: str = "cgd_and_re"


@dataclass
class EvalRunConfig:
    out: str = "eval"
    seed: int = 0
    checkpoint: str = "run/model.ckpt"
    data_dir: str = "data"
    test_prefix: str = "test"
    unknown_prefixes: list = field(default_factory=lambda: ["unknown-templates", "unknown-noise"])
    detector: str = ""


@dataclass
class AblateRunConfig:
    out: str = "ablation"
    seed: int = 0
    num_seeds: int = 3
    variants: list = field(default_factory=lambda: ["I", "II", "III", "IV", "V", "VI", "VII"])
    unknown_counts: list = field(default_factory=lambda: [1, 2, 4])
    pool_classes: int = 10
    num_known: int = 4
    per_class: int = 400
    test_fraction: float = 0.25
    unknown_per_class: int = 100
    image_side: int = 10
    noise_sigma: float = 0.1
    data_seed: int = 123
    layer_dims: list = field(default_factory=lambda: [64, 48])
    latent_dim: int = 32
    epochs: int = 200
    learning_rate: float = 0.001
    batch_size: int = 64
    lam: float = 100.0
    tau_l: float = 0.5


@dataclass
class ExportRunConfig:
    out: str = "latents"
    seed: int = 0
    checkpoint: str = "run/model.ckpt"
    data_dir: str = "data"
    prefix: str = "test"


COMMAND_CONFIGS = {
    "gen-data": GenDataConfig,
    "train": TrainRunConfig,
    "eval": EvalRunConfig,
    "ablate": AblateRunConfig,
    "export-latents": ExportRunConfig,
}


def _coerce(key: str, value: Any, default: Any) -> Any:
    try:
        if isinstance(value, str) and not isinstance(default, str):
            value = json.loads(value)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, list):
            if not isinstance(value, list):
                raise TypeError
            if default:
                return [_coerce(key, v, default[0]) for v in value]
            return list(value)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError, json.JSONDecodeError):
        pass
    else:
        return value
    raise ConfigError(f"config key {key!r}: cannot use {value!r} (expected {type(default).__name__})")


def _read_config_file(path: str) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        if p.suffix in (".yaml", ".yml"):
            import yaml

            data = yaml.safe_load(text) or {}
        else:
            data = json.loads(text)
    except Exception as exc:  # parser-specific error types
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return data


def resolve_config(
    command: str,
    file_values: dict | None = None,
    env: dict | None = None,
    flag_values: dict | None = None,
    report=None,
):
    """Merge the config layers for ``command`` into its dataclass.

    Unknown keys in the file or flags raise :class:`ConfigError`. ``report``
    receives one message per override.
    """
    cls = COMMAND_CONFIGS[command]
    defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
    report = report or (lambda msg: print(msg, file=sys.stderr))
    env = os.environ if env is None else env
    values: dict[str, Any] = {}
    source: dict[str, str] = {}

    def apply(layer: dict, name: str):
        unknown = sorted(set(layer) - set(defaults))
        if unknown:
            raise ConfigError(
                f"unknown config keys for {command} ({name}): {', '.join(unknown)}; "
                f"valid keys: {', '.join(defaults)}"
            )
        for k, raw in layer.items():
            v = _coerce(k, raw, defaults[k])
            if k in values and values[k] != v:
                report(f"config: {k}={values[k]!r} from {source[k]} overridden by {name}: {v!r}")
            values[k] = v
            source[k] = name

    apply(file_values or {}, "config file")
    apply({k: env[ENV_PREFIX + k.upper()] for k in defaults if ENV_PREFIX + k.upper() in env}, "environment")
    apply(flag_values or {}, "flags")
    return cls(**{**defaults, **values})


def config_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


# ---------------------------------------------------------------- helpers


def idx_paths(data_dir, prefix: str) -> tuple[Path, Path]:
    d = Path(data_dir)
    return d / f"{prefix}-images.idx3-ubyte", d / f"{prefix}-labels.idx1-ubyte"


def _load_prefix(data_dir, prefix: str) -> LabeledImageSet:
    images, labels = idx_paths(data_dir, prefix)
    manifest = Path(data_dir) / "manifest.json"
    names = None
    if manifest.exists():
        sets = json.loads(manifest.read_text()).get("sets", {})
        if prefix in sets:
            names = sets[prefix].get("class_names")
    return load_idx(images, labels, names)


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _run_record(out: Path, command: str, cfg, artifacts: Sequence[Path], extra: dict | None = None) -> None:
    doc = {
        "tool_version": __version__,
        "command": command,
        "config": config_dict(cfg),
        "artifacts": sorted(p.name for p in artifacts),
    }
    if extra:
        doc.update(extra)
    _write_json(out / "run.json", doc)


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: GenDataConfig) -> int:
    out = Path(cfg.out)
    known = generate_synthetic(cfg.num_classes, cfg.per_class, cfg.image_side, cfg.noise_sigma, cfg.seed)
    train_set, test_set, _ = split(known, SplitSpec(range(cfg.num_classes), (), cfg.seed, cfg.test_fraction))
    sets: dict[str, LabeledImageSet] = {"train": train_set, "test": test_set}
    if cfg.unseen_count > 0 and cfg.unseen_classes > 0:
        sets["unknown-templates"] = make_outliers(
            "unseen_templates", known, cfg.unseen_count, cfg.seed, num_templates=cfg.unseen_classes
        )
    if cfg.noise_count > 0:
        sets["unknown-noise"] = make_outliers("uniform_noise", known, cfg.noise_count, cfg.seed)
    if cfg.noised_known_count > 0:
        sets["unknown-noised-known"] = make_outliers("noised_known", test_set, cfg.noised_known_count, cfg.seed)
    written = []
    for prefix, ds in sets.items():
        ip, lp = idx_paths(out, prefix)
        save_idx(ds, ip, lp)
        written += [ip, lp]
    manifest = out / "manifest.json"
    write_manifest(
        manifest,
        known,
        extra={
            "tool_version": __version__,
            "config": config_dict(cfg),
            "sets": {
                p: {"num_samples": len(s), "class_names": list(s.class_names),
                    "counts": [int(c) for c in s.class_counts()]}
                for p, s in sets.items()
            },
        },
    )
    print(f"wrote {len(known)} known images ({cfg.num_classes} classes x {cfg.per_class}) to {out}")
    for p, s in sets.items():
        print(f"  {p:22s} {len(s):6d} images")
    return EXIT_OK


def _train_inputs(cfg: TrainRunConfig) -> LabeledImageSet:
    train_set = _load_prefix(cfg.data_dir, "train")
    if len(train_set) == 0:
        raise ConfigError(f"no training samples in {cfg.data_dir}")
    return train_set


def cmd_train(cfg: TrainRunConfig) -> int:
    if cfg.detector not in DETECTOR_KINDS:
        raise ConfigError(f"unknown detector {cfg.detector!r}; valid: {', '.join(DETECTOR_KINDS)}")
    out = Path(cfg.out)
    train_set = _train_inputs(cfg)
    model_cfg = LadderConfig(
        input_dim=int(np.prod(train_set.image_shape)),
        layer_dims=tuple(cfg.layer_dims),
        num_classes=train_set.num_classes,
        latent_dim=cfg.latent_dim,
        prelu_init=cfg.prelu_init,
        ladder=cfg.ladder,
    )
    model = LadderModel.init(model_cfg, cfg.seed)
    tc = TrainConfig(
        epochs=cfg.epochs, learning_rate=cfg.learning_rate, batch_size=cfg.batch_size, lam=cfg.lam,
        seed=cfg.seed, checkpoint_every=cfg.checkpoint_every, momentum=cfg.momentum,
        recon_weight=cfg.recon_weight, beta_max=cfg.beta_max,
    )
    ckpt_path = out / "model.ckpt"
    log_path = out / "train_log.csv"
    model, history = train(model, train_set, tc, log_path=log_path,
                           checkpoint_path=ckpt_path if cfg.checkpoint_every else None)
    detector = OpenSetDetector.calibrate(model, train_set.flat(), train_set.labels,
                                         tau_l=cfg.tau_l, kind=cfg.detector)
    # the output location is not part of the run, so it stays out of the checkpoint
    run_config = {k: v for k, v in config_dict(cfg).items() if k != "out"}
    save_checkpoint(ckpt_path, Checkpoint(model, detector, seed=cfg.seed, epoch=cfg.epochs,
                                          run_config=run_config))
    _run_record(out, "train", cfg, [ckpt_path, log_path])
    last = history[-1]
    print(f"trained {cfg.epochs} epochs: total={last.total:.4f} ce={last.ce:.5f} "
          f"train_acc={last.closed_set_train_accuracy:.4f} tau_r={detector.thresholds.tau_r:.4f}")
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def cmd_eval(cfg: EvalRunConfig) -> int:
    ckpt = load_checkpoint(cfg.checkpoint)
    if ckpt.detector is None:
        raise CheckpointError(f"{cfg.checkpoint} holds no calibrated detector")
    detector = ckpt.detector
    if cfg.detector:
        if cfg.detector not in DETECTOR_KINDS:
            raise ConfigError(f"unknown detector {cfg.detector!r}; valid: {', '.join(DETECTOR_KINDS)}")
        detector = detector.with_kind(cfg.detector)
    known = _load_prefix(cfg.data_dir, cfg.test_prefix)
    unknown = [_load_prefix(cfg.data_dir, p) for p in cfg.unknown_prefixes]
    K = ckpt.model.config.num_classes
    if len(known) and known.labels.max() >= K:
        raise ConfigError(f"test labels exceed the checkpoint's {K} classes")
    report = evaluate(ckpt.model, detector, known, unknown)
    out = Path(cfg.out)
    run_config = {k: v for k, v in config_dict(cfg).items() if k != "out"}
    doc = {"tool_version": __version__, "config": run_config, "report": report.to_dict()}
    _write_json(out / "report.json", doc)
    conf = out / "confusion.csv"
    with open(conf, "w") as fh:
        names = [f"pred_{k}" for k in range(K)] + ["pred_unknown"]
        fh.write("truth," + ",".join(names) + "\n")
        for k, row in enumerate(report.confusion):
            label = str(k) if k < K else "unknown"
            fh.write(label + "," + ",".join(str(v) for v in row) + "\n")
    _run_record(out, "eval", cfg, [out / "report.json", conf])
    print(f"closed-set accuracy {report.closed_set_accuracy:.4f}")
    print(f"macro-F1 over {report.macro_f1_classes} classes {report.macro_f1:.4f}")
    print(f"openness {report.openness:.4f}; known {report.num_known_samples}, unknown {report.num_unknown_samples}")
    return EXIT_OK


def cmd_ablate(cfg: AblateRunConfig) -> int:
    variants = [resolve_variant(v) for v in cfg.variants]
    spec_fields = {f.name for f in dataclasses.fields(AblationSpec)}
    spec = AblationSpec(**{k: (tuple(v) if k == "layer_dims" else v)
                           for k, v in config_dict(cfg).items() if k in spec_fields})
    seeds = list(range(cfg.seed, cfg.seed + cfg.num_seeds))
    result = run_ablation(spec, variants, [int(u) for u in cfg.unknown_counts], seeds)
    paths = write_ablation(result, cfg.out, config_dict(cfg))
    _run_record(Path(cfg.out), "ablate", cfg, list(paths.values()))
    for r in result.rows:
        mean = "failed" if r.mean_f1 is None else f"{r.mean_f1:.4f} +- {r.std_f1:.4f}"
        print(f"{r.variant:4s} openness={r.openness:.3f} F1 {mean}")
    ok = sum(c.macro_f1 is not None for c in result.cells)
    return EXIT_OK if ok else EXIT_ALL_FAILED


def cmd_export_latents(cfg: ExportRunConfig) -> int:
    ckpt = load_checkpoint(cfg.checkpoint)
    ds = _load_prefix(cfg.data_dir, cfg.prefix)
    out = Path(cfg.out)
    path = export_latents(ckpt.model, ds, out / f"latents-{cfg.prefix}.csv")
    _run_record(out, "export-latents", cfg, [path])
    print(f"wrote {len(ds)} latent codes to {path}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export-latents": cmd_export_latents,
}


# ---------------------------------------------------------------- entry point


def _parse_set(items: Sequence[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip().replace("-", "_")] = v
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cgdl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cgdl {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON or YAML file with config keys")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key (repeatable)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = _read_config_file(args.config) if args.config else {}
        flags = _parse_set(args.set)
        if args.seed is not None:
            flags["seed"] = args.seed
        if args.out is not None:
            flags["out"] = args.out
        cfg = resolve_config(args.command, file_values, os.environ, flags)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
