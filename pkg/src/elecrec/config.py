"""Plain-text ``key=value`` run configuration."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .train import VARIANTS, TrainConfig


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


# file key -> (TrainConfig field or None for run-level keys, parser)
_KEYS = {
    "alpha": ("alpha", float),
    "lambda": ("lam", float),
    "variant": ("variant", str),
    "sharing_mode": (None, str),
    "sampler_mode": ("sampler_mode", str),
    "lr": ("lr", float),
    "batch_size": ("batch_size", int),
    "max_len": ("max_len", int),
    "d": ("d", int),
    "layers": ("layers", int),
    "heads": ("heads", int),
    "dropout": ("dropout", float),
    "epochs_max": ("epochs_max", int),
    "patience": ("patience", int),
    "seed": ("seed", int),
    "clock": ("clock", str),
    "data_dir": (None, str),
    "out_dir": (None, str),
}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data_dir: str | None = None
    out_dir: str = "runs/default"


def parse_lines(lines, source: str = "<config>") -> dict[str, str]:
    raw: dict[str, str] = {}
    errors = []
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            errors.append(f"{source}:{lineno}: expected key=value")
        else:
            # unknown keys are kept so that build_run_config reports them with the type errors
            raw[key] = value
    if errors:
        raise ConfigError(errors)
    return raw


def build_run_config(raw: dict[str, str]) -> RunConfig:
    """Type-check every value and resolve the variant; all problems are reported together."""
    errors = []
    kwargs = {}
    run = RunConfig()
    sharing = None
    for key, value in raw.items():
        if key not in _KEYS:
            errors.append(f"unknown key {key!r}")
            continue
        target, parse = _KEYS[key]
        try:
            parsed = parse(value)
        except ValueError:
            errors.append(f"{key}: cannot parse {value!r} as {parse.__name__}")
            continue
        if target is not None:
            kwargs[target] = parsed
        elif key == "sharing_mode":
            sharing = parsed.upper()
        elif key == "data_dir":
            run.data_dir = parsed
        elif key == "out_dir":
            run.out_dir = parsed
    variant = kwargs.get("variant", "elecrec")
    if sharing is not None and sharing not in ("ES", "FS"):
        errors.append(f"sharing_mode: {sharing!r} is not ES or FS")
    elif variant == "elecrec":
        kwargs["variant"] = "elecrec_es" if sharing == "ES" else "elecrec_fs"
    elif sharing is not None and variant in ("elecrec_es", "elecrec_fs") and variant[-2:].upper() != sharing:
        errors.append(f"sharing_mode={sharing} contradicts variant={variant}")
    if kwargs.get("variant") not in VARIANTS:
        errors.append(f"variant: {variant!r} is not elecrec or one of {', '.join(VARIANTS)}")
        kwargs.pop("variant", None)
    # range checks run on whatever parsed, so one pass reports every bad key
    cfg = TrainConfig(**kwargs)
    if cfg.variant == "generator_only":
        cfg = replace(cfg, lam=0.0)
    errors.extend(cfg.validate())
    run.train = cfg
    if errors:
        raise ConfigError(errors)
    return run


def load_run_config(path, overrides: dict[str, str] | None = None) -> RunConfig:
    with open(path) as fh:
        raw = parse_lines(fh, str(path))
    raw.update(overrides or {})
    return build_run_config(raw)


def dump_run_config(run: RunConfig) -> str:
    cfg = run.train
    lines = [
        f"variant={cfg.variant}",
        f"alpha={cfg.alpha}",
        f"lambda={cfg.lam}",
        f"sampler_mode={cfg.sampler_mode}",
        f"lr={cfg.lr}",
        f"batch_size={cfg.batch_size}",
        f"max_len={cfg.max_len}",
        f"d={cfg.d}",
        f"layers={cfg.layers}",
        f"heads={cfg.heads}",
        f"dropout={cfg.dropout}",
        f"epochs_max={cfg.epochs_max}",
        f"patience={cfg.patience}",
        f"seed={cfg.seed}",
        f"clock={cfg.clock}",
    ]
    if run.data_dir:
        lines.append(f"data_dir={run.data_dir}")
    lines.append(f"out_dir={run.out_dir}")
    return "\n".join(lines) + "\n"
