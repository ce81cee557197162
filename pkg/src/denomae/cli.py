"""Command-line interface: ``denomae {gen,pretrain,finetune,eval,denoise,ablate}``.

Settings come from three layers, later layers winning: the preset
defaults (``--preset desk`` unless stated), an optional JSON file given with
``--config`` (keys are the flag names with underscores), and the flags
themselves. The merged settings are written to ``resolved_config.json`` in
the run directory before any work starts.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric abort, 5 I/O,
6 checkpoint/config mismatch.
Failures print one JSON line ``{"error": <category>, "message": ...}`` on
stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

from . import checkpoint as ckpt
from .model import MODALITIES, ConfigError, ConfigMismatchError, DenoMAEConfig
from .modulation import SCHEME_NAMES, UnknownSchemeError
from .numerics.dtnsr import TensorFormatError
from .pipeline import (
    DataError,
    DatasetManifest,
    GenerationConfig,
    MetricsLog,
    NumericAbort,
    OptimConfig,
    RunConfig,
    default_samples,
    evaluate_extrapolation,
    evaluate_snr_sweep,
    finetune,
    generate_dataset,
    pretrain,
    run_modality_ablation,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO, EXIT_MISMATCH = 0, 2, 3, 4, 5, 6
RESOLVED_NAME = "resolved_config.json"


# ------------------------------------------------------------ value parsing


def _str_list(v) -> tuple[str, ...]:
    if isinstance(v, str):
        v = [s for s in v.split(",") if s.strip()]
    return tuple(str(s).strip() for s in v)


def _float_list(v) -> tuple[float, ...]:
    if not isinstance(v, str):
        return tuple(float(x) for x in v)
    out: list[float] = []
    for part in v.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = (int(x) for x in part.split("..", 1))
            step = 1 if hi >= lo else -1
            out.extend(float(x) for x in range(lo, hi + step, step))
        else:
            out.append(float(part))
    return tuple(out)


def _opt_float_list(v):
    return None if v in (None, "", "none") else _float_list(v)


def _opt_int(v):
    return None if v in (None, "", "none") else int(v)


def _opt_str(v):
    return None if v in (None, "") else str(v)


def _bool(v) -> bool:
    if isinstance(v, str):
        return v.lower() in ("1", "true", "yes")
    return bool(v)


@dataclass(frozen=True)
class Option:
    name: str
    parse: Callable[[Any], Any]
    desk: Any
    help: str
    full: Any = None
    flag: bool = False
    choices: tuple | None = None

    @property
    def key(self) -> str:
        return self.name.replace("-", "_")

    def default(self, preset: str) -> Any:
        return self.full if preset == "full" and self.full is not None else self.desk


def _show(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_show(x) for x in v)
    return "none" if v is None else str(v)


_dm, _pm = DenoMAEConfig.desk(), DenoMAEConfig.full()
_dp, _pp = RunConfig.desk_pretrain(), RunConfig.full_pretrain()
_df, _pf = RunConfig.desk_finetune(), RunConfig.full_finetune()

COMMON = [
    Option("preset", str, "desk", "scale preset for every default", choices=("desk", "full")),
    Option("out", str, "runs/{command}", "run directory (all outputs land here)"),
    Option("overwrite", _bool, False, "replace an existing run directory", flag=True),
    Option("seed", int, 0, "seed for this command"),
]

GEN = [
    Option("samples", _opt_int, None, "number of samples (none: 512/256/128 for pretrain/train/test; "
           "full 10000/1000/1000)"),
    Option("split", str, "pretrain", "split name (pretrain, train, test)"),
    Option("schemes", _str_list, SCHEME_NAMES, "comma-separated modulation schemes"),
    Option("snr-min", float, -10.0, "lowest SNR in dB (uniform draw)"),
    Option("snr-max", float, 10.0, "highest SNR in dB (uniform draw)"),
    Option("snr-values", _opt_float_list, None, "draw SNRs from this list instead of the range"),
    Option("image-side", int, 32, "image side in pixels", full=224),
    Option("extent", float, 3.5, "half-width of the constellation plane"),
    Option("alphas", _float_list, (20.0, 40.0, 80.0), "decay rates of the three channels"),
    Option("clip-policy", str, "clamp", "out-of-plane samples", choices=("clamp", "drop")),
]

MODEL = [
    Option("modalities", _str_list, MODALITIES, "modalities used in pretraining"),
    Option("patch-size", int, _dm.patch_size, "patch side", full=_pm.patch_size),
    Option("d-model", int, _dm.d_model, "embedding width", full=_pm.d_model),
    Option("encoder-layers", int, _dm.encoder_layers, "encoder blocks", full=_pm.encoder_layers),
    Option("decoder-layers", int, _dm.decoder_layers, "decoder blocks", full=_pm.decoder_layers),
    Option("heads", int, _dm.heads, "attention heads", full=_pm.heads),
    Option("mask-ratio", float, _dm.mask_ratio, "fraction of masked patches"),
]


def _optim(run: RunConfig, full: RunConfig, prefix: str = "") -> list[Option]:
    return [
        Option(f"{prefix}epochs", int, run.epochs, "training epochs", full=full.epochs),
        Option(f"{prefix}batch-size", int, run.batch_size, "batch size", full=full.batch_size),
        Option(f"{prefix}optimizer", str, run.optimizer.name, "optimizer", full=full.optimizer.name,
               choices=("adam", "adamw")),
        Option(f"{prefix}lr", float, run.optimizer.lr, "learning rate", full=full.optimizer.lr),
        Option(f"{prefix}weight-decay", float, run.optimizer.weight_decay, "decoupled weight decay (adamw)",
               full=full.optimizer.weight_decay),
        Option(f"{prefix}max-steps", _opt_int, None, "stop after this many optimizer steps"),
    ]


COMMANDS: dict[str, tuple[str, list[Option]]] = {
    "gen": ("generate a dataset manifest and tensors", GEN),
    "pretrain": ("masked multimodal pretraining", [
        Option("data", str, "runs/gen", "pretrain dataset directory"),
        *MODEL,
        *_optim(_dp, _pp),
        Option("checkpoint-every", int, 0, "steps between checkpoints (0 = only final)"),
        Option("resume", _opt_str, None, "continue from this checkpoint"),
    ]),
    "finetune": ("train the classifier on noisy constellations", [
        Option("train", str, "runs/gen-train", "training dataset directory"),
        Option("test", str, "runs/gen-test", "held-out dataset directory"),
        Option("checkpoint", _opt_str, "runs/pretrain/pretrain.dmae", "pretrained checkpoint"),
        Option("from-scratch", _bool, False, "ignore --checkpoint and start from random weights", flag=True),
        Option("classes", _str_list, (), "class list; empty means every label found in train and test"),
        Option("freeze-encoder", _bool, False, "train only the classification head", flag=True),
        *MODEL,
        *_optim(_df, _pf),
    ]),
    "eval": ("accuracy per SNR on fresh samples", [
        Option("checkpoint", str, "runs/finetune/classifier.dmae", "classifier checkpoint"),
        Option("snrs", _float_list, (-10.0, 0.0, 10.0), "SNRs in dB (a..b expands to integer steps)"),
        Option("samples", int, 128, "samples per SNR"),
        Option("extent", float, 3.5, "half-width of the constellation plane"),
        Option("alphas", _float_list, (20.0, 40.0, 80.0), "decay rates of the three channels"),
    ]),
    "denoise": ("reconstruct clean constellations below the training SNR range", [
        Option("checkpoint", str, "runs/pretrain/pretrain.dmae", "pretrained checkpoint"),
        Option("snrs", _float_list, tuple(float(s) for s in range(-11, -21, -1)),
               "SNRs in dB (a..b expands to integer steps)"),
        Option("samples", int, 64, "samples per SNR"),
        Option("train-snr-min", float, -10.0, "lower edge of the training SNR range"),
        Option("input-mask-ratio", float, 0.0, "fraction of the visible inputs to mask"),
        Option("images", int, 3, "triptych images written per SNR"),
        Option("extent", float, 3.5, "half-width of the constellation plane"),
        Option("alphas", _float_list, (20.0, 40.0, 80.0), "decay rates of the three channels"),
    ]),
    "ablate": ("pretrain and fine-tune once per nested modality subset", [
        Option("data", str, "runs/gen", "pretrain dataset directory"),
        Option("train", str, "runs/gen-train", "fine-tuning training dataset directory"),
        Option("test", str, "runs/gen-test", "held-out dataset directory"),
        Option("classes", _str_list, (), "class list; empty means every label found in train and test"),
        *[o for o in MODEL if o.name != "modalities"],
        *_optim(_dp, _pp),
        *_optim(_df, _pf, prefix="ft-"),
    ]),
}


def options(command: str) -> list[Option]:
    return COMMON + COMMANDS[command][1]


# ------------------------------------------------------------------ parser


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int):
        super().__init__(message)
        self.category, self.code = category, code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="denomae",
        description="Multimodal masked-autoencoder pretraining and modulation classification.",
        epilog="Precedence: flags > --config file > preset defaults. Exit codes: "
               "0 ok, 2 config, 3 data, 4 numeric abort, 5 I/O, 6 checkpoint/config mismatch.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (summary, _) in COMMANDS.items():
        p = sub.add_parser(name, help=summary, description=summary)
        p.add_argument("--config", default=None, metavar="PATH",
                       help="JSON file of settings keyed by flag name (default: none)")
        for opt in options(name):
            text = f"{opt.help} (default: {_show(opt.desk).replace('{command}', name)}"
            text += f"; full preset: {_show(opt.full)})" if opt.full is not None else ")"
            if opt.flag:
                p.add_argument(f"--{opt.name}", action="store_true", default=None, help=text)
            else:
                p.add_argument(f"--{opt.name}", default=None, metavar=opt.key.upper(),
                               choices=opt.choices, help=text)
    return parser


def _join_negative_values(argv: Sequence[str]) -> list[str]:
    """Let ``--snrs -10,0,10`` through: argparse would read the value as a flag."""
    value_flags = {f"--{o.name}" for name in COMMANDS for o in options(name) if not o.flag} | {"--config"}
    out, i = [], 0
    argv = list(argv)
    while i < len(argv):
        tok = argv[i]
        if tok in value_flags and i + 1 < len(argv) and argv[i + 1].startswith("-") \
                and not argv[i + 1].startswith("--"):
            out.append(f"{tok}={argv[i + 1]}")
            i += 2
            continue
        out.append(tok)
        i += 1
    return out


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge preset defaults, the config file and the flags."""
    file_values: dict = {}
    if args.config:
        try:
            file_values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise CliError("io", f"cannot read config {args.config}: {exc}", EXIT_IO) from None
        except json.JSONDecodeError as exc:
            raise CliError("config", f"{args.config}: invalid JSON: {exc}", EXIT_CONFIG) from None
        if not isinstance(file_values, dict):
            raise CliError("config", f"{args.config}: expected a JSON object", EXIT_CONFIG)
    opts = {o.key: o for o in options(command)}
    unknown = sorted(set(file_values) - set(opts))
    if unknown:
        raise CliError("config", f"unknown config keys for {command}: {unknown}", EXIT_CONFIG)
    preset = args.preset or file_values.get("preset") or "desk"
    cfg = {"command": command}
    for key, opt in opts.items():
        raw = getattr(args, key)
        if raw is None:
            raw = file_values.get(key, opt.default(preset))
        try:
            value = opt.parse(raw) if raw is not None else None
        except (TypeError, ValueError) as exc:
            raise CliError("config", f"--{opt.name}: {exc}", EXIT_CONFIG) from None
        if opt.choices and value not in opt.choices:
            raise CliError("config", f"--{opt.name} must be one of {opt.choices}", EXIT_CONFIG)
        cfg[key] = value
    cfg["preset"] = preset
    if cfg["out"] == "runs/{command}":
        cfg["out"] = f"runs/{command}"
    return cfg


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def prepare_run_dir(cfg: dict, keep_existing: bool = False) -> Path:
    out = Path(cfg["out"])
    if out.exists() and any(out.iterdir()) and not keep_existing:
        if not cfg["overwrite"]:
            raise CliError("io", f"run directory {out} exists (pass --overwrite to replace it)", EXIT_IO)
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps({k: _jsonable(v) for k, v in cfg.items()}, sort_keys=True, indent=2)
    (out / RESOLVED_NAME).write_text(text + "\n", encoding="utf-8")
    return out


# ---------------------------------------------------------------- commands


def _model_config(cfg: dict, base: DenoMAEConfig) -> DenoMAEConfig:
    kw = {k: cfg[k] for k in ("patch_size", "d_model", "encoder_layers", "decoder_layers", "heads", "mask_ratio")}
    if "modalities" in cfg:
        kw["modalities"] = cfg["modalities"]
        kw["modality_weights"] = None
    return dataclasses.replace(base, **kw)


def _base_model(preset: str, image_side: int | None = None) -> DenoMAEConfig:
    base = DenoMAEConfig.full() if preset == "full" else DenoMAEConfig.desk()
    return base if image_side is None else dataclasses.replace(base, image_side=image_side)


def _run_config(cfg: dict, model: DenoMAEConfig, prefix: str = "", **extra) -> RunConfig:
    g = lambda k: cfg[prefix + k]  # noqa: E731
    wd = g("weight_decay") if g("optimizer") == "adamw" else 0.0
    return RunConfig(model=model, optimizer=OptimConfig(g("optimizer"), g("lr"), weight_decay=wd),
                     epochs=g("epochs"), batch_size=g("batch_size"), seed=cfg["seed"],
                     max_steps=g("max_steps"), **extra)


def _load_data(path: str):
    return DatasetManifest.read(path).load()


def _classes(cfg: dict, train, test) -> tuple[str, ...]:
    if cfg["classes"]:
        return cfg["classes"]
    present = set(train.labels) | set(test.labels)
    return tuple(s for s in SCHEME_NAMES if s in present)


def cmd_gen(cfg: dict) -> dict:
    n = cfg["samples"] if cfg["samples"] is not None else default_samples(cfg["preset"], cfg["split"])
    gen = GenerationConfig(n_samples=n, schemes=cfg["schemes"], snr_min=cfg["snr_min"],
                           snr_max=cfg["snr_max"], snr_values=cfg["snr_values"], image_side=cfg["image_side"],
                           extent=cfg["extent"], alphas=cfg["alphas"], clip_policy=cfg["clip_policy"],
                           seed=cfg["seed"], split=cfg["split"])
    out = prepare_run_dir(cfg)
    manifest = generate_dataset(gen, out, overwrite=True)
    return {"manifest": str(out / "manifest.jsonl"), "samples": len(manifest.records)}


def cmd_pretrain(cfg: dict) -> dict:
    data = _load_data(cfg["data"])
    model = _model_config(cfg, _base_model(cfg["preset"], int(data.images.shape[-1])))
    run = _run_config(cfg, model, checkpoint_every=cfg["checkpoint_every"])
    resume = cfg["resume"]
    blob = None
    if resume:
        try:
            blob = Path(resume).read_bytes()
        except OSError as exc:
            raise CliError("io", f"cannot read checkpoint {resume}: {exc}", EXIT_IO) from None
    out = prepare_run_dir(cfg, keep_existing=bool(resume))
    metrics = None
    if resume:
        # Keep the log consistent with the checkpoint we restart from.
        start = int(ckpt.from_bytes(blob)[1].get("step", 0))
        log_path = out / "metrics.jsonl"
        kept = []
        if log_path.exists():
            kept = [line for line in log_path.read_text(encoding="utf-8").splitlines()
                    if line and json.loads(line).get("step", 0) <= start]
        log_path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")
        metrics = MetricsLog(log_path)
        tmp = out / ".resume.dmae"
        tmp.write_bytes(blob)
        resume = tmp
    try:
        res = pretrain(data, run, out, resume=resume, metrics=metrics)
    finally:
        if resume:
            Path(resume).unlink(missing_ok=True)
    last = res.metrics.of_kind("train")
    return {"checkpoint": str(res.checkpoint), "steps": res.steps,
            "final_loss": last[-1]["loss"] if last else None}


def cmd_finetune(cfg: dict) -> dict:
    train, test = _load_data(cfg["train"]), _load_data(cfg["test"])
    classes = _classes(cfg, train, test)
    pretrained = None
    if cfg["from_scratch"]:
        model = _model_config(cfg, _base_model(cfg["preset"], int(train.images.shape[-1])))
    else:
        if not cfg["checkpoint"]:
            raise CliError("config", "finetune needs --checkpoint or --from-scratch", EXIT_CONFIG)
        pretrained, _ = ckpt.load(cfg["checkpoint"])
        model = pretrained.config
        if model.image_side != train.images.shape[-1]:
            raise ConfigMismatchError(f"checkpoint expects {model.image_side}px images, data has {train.images.shape[-1]}px")
        wanted = _model_config(cfg, _base_model(cfg["preset"], model.image_side))
        if dataclasses.replace(wanted, classifier=model.classifier) != model:
            raise ConfigMismatchError("checkpoint model config differs from the requested one")
    run = _run_config(cfg, model, freeze_encoder=cfg["freeze_encoder"])
    out = prepare_run_dir(cfg)
    res = finetune(train, test, run, pretrained, classes, out)
    return {"checkpoint": str(res.checkpoint), "test_accuracy": res.test_accuracy, "classes": list(classes)}


def cmd_eval(cfg: dict) -> dict:
    model, state = ckpt.load(cfg["checkpoint"])
    if state.get("kind") != "classifier":
        raise ConfigError(f"{cfg['checkpoint']} is not a classifier checkpoint")
    classes = tuple(state["classes"])
    gen = GenerationConfig(schemes=classes, image_side=model.config.image_side, extent=cfg["extent"],
                           alphas=cfg["alphas"])
    out = prepare_run_dir(cfg)
    rows = evaluate_snr_sweep(model, classes, cfg["snrs"], cfg["samples"], gen, seed=cfg["seed"] + 1_000_003,
                              out_path=out / "eval.tsv")
    return {"table": str(out / "eval.tsv"), "accuracy": {r["snr_db"]: r["accuracy"] for r in rows}}


def cmd_denoise(cfg: dict) -> dict:
    model, _ = ckpt.load(cfg["checkpoint"])
    gen = GenerationConfig(image_side=model.config.image_side, extent=cfg["extent"], alphas=cfg["alphas"])
    out = prepare_run_dir(cfg)
    rows = evaluate_extrapolation(model, cfg["snrs"], cfg["samples"], gen, seed=cfg["seed"] + 2_000_003,
                                  train_snr_min=cfg["train_snr_min"], input_mask_ratio=cfg["input_mask_ratio"],
                                  out_dir=out, n_images=cfg["images"])
    return {"table": str(out / "extrapolation.tsv"),
            "improved_fraction": {r["snr_db"]: r["improved_fraction"] for r in rows}}


def cmd_ablate(cfg: dict) -> dict:
    data, train, test = _load_data(cfg["data"]), _load_data(cfg["train"]), _load_data(cfg["test"])
    classes = _classes(cfg, train, test)
    model = _model_config(cfg, _base_model(cfg["preset"], int(data.images.shape[-1])))
    out = prepare_run_dir(cfg)
    rows = run_modality_ablation(data, train, test, _run_config(cfg, model), _run_config(cfg, model, "ft_"),
                                 classes, out_path=out / "ablation.tsv")
    return {"table": str(out / "ablation.tsv"), "accuracy": [r["accuracy"] for r in rows]}


HANDLERS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "eval": cmd_eval, "denoise": cmd_denoise, "ablate": cmd_ablate}


def _categorise(exc: BaseException) -> CliError:
    if isinstance(exc, CliError):
        return exc
    if isinstance(exc, NumericAbort):
        return CliError("numeric", str(exc), EXIT_NUMERIC)
    if isinstance(exc, ConfigMismatchError):
        return CliError("config_mismatch", str(exc), EXIT_MISMATCH)
    if isinstance(exc, (DataError, ckpt.CheckpointError, TensorFormatError)):
        return CliError("data", str(exc), EXIT_DATA)
    if isinstance(exc, (ConfigError, UnknownSchemeError, ValueError, KeyError)):
        return CliError("config", str(exc), EXIT_CONFIG)
    if isinstance(exc, OSError):
        return CliError("io", str(exc), EXIT_IO)
    raise exc


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    args = build_parser().parse_args(_join_negative_values(argv))
    try:
        cfg = resolve(args.command, args)
        summary = HANDLERS[args.command](cfg)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        err = _categorise(exc)
        print(json.dumps({"error": err.category, "message": str(err)}), file=sys.stderr)
        return err.code
    print(json.dumps(summary, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
