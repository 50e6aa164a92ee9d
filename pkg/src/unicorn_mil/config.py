"""Plain-text key=value configuration with command-line overrides.

Config files are diffable reproducibility artifacts: one ``key=value``
per line, ``#`` comments. Unknown keys are rejected. Every effective
value is echoed into the run metadata file together with the seed and
the PRNG algorithm identifier.
"""
from __future__ import annotations

from pathlib import Path

from .data import CLASS_NAMES, MODALITY_INDEX, MODALITY_NAMES, SyntheticSpec
from .errors import ConfigError
from .model import ModelConfig
from .rng import ALGORITHM_ID
from .training import TrainConfig


def parse_kv_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path.name} line {lineno}: expected key=value")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"{path.name} line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def apply_overrides(values: dict[str, str], overrides: list[str]) -> dict[str, str]:
    merged = dict(values)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        merged[key.strip()] = value.strip()
    return merged


def _coerce(name: str, value: str, typ):
    try:
        if typ is bool:
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        return typ(value)
    except ValueError:
        raise ConfigError(f"key {name!r}: cannot parse {value!r} as {typ.__name__}") from None


_MODEL_FIELDS = {
    "n_modalities": int, "n_classes": int, "feat_dim": int, "model_dim": int,
    "n_heads": int, "blocks_per_expert": int, "blocks_aggregator": int, "dropout_p": float,
}
_TRAIN_FIELDS = {
    "epochs": int, "lr": float, "weight_decay": float, "accum_steps": int,
    "batch_size": int, "domain_dropout_p": float, "beta1": float, "beta2": float,
    "eps": float, "seed": int,
}


def build_run_config(values: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    """Merged model + training config; any key outside the two schemas errors."""
    model_kwargs, train_kwargs = {}, {}
    for key, value in values.items():
        if key in _MODEL_FIELDS:
            model_kwargs[key] = _coerce(key, value, _MODEL_FIELDS[key])
        elif key in _TRAIN_FIELDS:
            train_kwargs[key] = _coerce(key, value, _TRAIN_FIELDS[key])
        else:
            raise ConfigError(f"unknown config key {key!r}")
    model_cfg = ModelConfig(**model_kwargs)
    train_cfg = TrainConfig(**train_kwargs)
    model_cfg.validate()
    train_cfg.validate()
    return model_cfg, train_cfg


_SYNTH_SCALARS = {
    "n_individuals": int, "segments_per_individual": int, "n_modalities": int,
    "feat_dim": int, "n_classes": int, "patches_min": int, "patches_max": int,
    "strength": float, "noise_sigma": float, "signal_fraction_min": float,
    "signal_fraction_max": float, "missing_prob": float, "seed": int, "mode": str,
}


def build_synthetic_spec(values: dict[str, str]) -> SyntheticSpec:
    kwargs = {}
    signal: dict[int, tuple[int, ...]] = {}
    per_class_strength: dict[int, float] = {}
    for key, value in values.items():
        if key in _SYNTH_SCALARS:
            kwargs[key] = _coerce(key, value, _SYNTH_SCALARS[key])
        elif key.startswith("signal_") and key.removeprefix("signal_") in CLASS_NAMES:
            cls = CLASS_NAMES.index(key.removeprefix("signal_"))
            mods = []
            for cell in value.split(","):
                cell = cell.strip()
                if cell not in MODALITY_INDEX:
                    raise ConfigError(f"key {key!r}: unknown modality {cell!r}")
                mods.append(MODALITY_INDEX[cell])
            signal[cls] = tuple(mods)
        elif key.startswith("strength_") and key.removeprefix("strength_") in CLASS_NAMES:
            cls = CLASS_NAMES.index(key.removeprefix("strength_"))
            per_class_strength[cls] = _coerce(key, value, float)
        elif key in ("xor_modality_a", "xor_modality_b"):
            if value not in MODALITY_INDEX:
                raise ConfigError(f"key {key!r}: unknown modality {value!r}")
            kwargs[key] = MODALITY_INDEX[value]
        else:
            raise ConfigError(f"unknown synthetic spec key {key!r}")
    spec = SyntheticSpec(**kwargs)
    if signal:
        spec.signal_modalities = signal
    if per_class_strength:
        spec.per_class_strength = per_class_strength
    spec.validate()
    return spec


def synthetic_spec_text(spec: SyntheticSpec) -> str:
    lines = [f"{name}={getattr(spec, name)}" for name in _SYNTH_SCALARS]
    if spec.mode == "planted":
        for cls, mods in sorted(spec.signal_modalities.items()):
            names = ",".join(MODALITY_NAMES[m] for m in mods)
            lines.append(f"signal_{CLASS_NAMES[cls]}={names}")
        for cls, strength in sorted(spec.per_class_strength.items()):
            lines.append(f"strength_{CLASS_NAMES[cls]}={strength}")
    else:
        lines.append(f"xor_modality_a={MODALITY_NAMES[spec.xor_modality_a]}")
        lines.append(f"xor_modality_b={MODALITY_NAMES[spec.xor_modality_b]}")
    return "\n".join(lines) + "\n"


def run_metadata_text(model_cfg: ModelConfig, train_cfg: TrainConfig, extra: dict[str, str] | None = None) -> str:
    """Every hyperparameter echoed, plus seed and the PRNG identifier."""
    pairs = [("rng_algorithm", ALGORITHM_ID)]
    pairs += [(name, getattr(model_cfg, name)) for name in _MODEL_FIELDS]
    pairs += [(name, getattr(train_cfg, name)) for name in _TRAIN_FIELDS]
    if extra:
        pairs += list(extra.items())
    return "\n".join(f"{k}={v}" for k, v in pairs) + "\n"


def model_config_metadata(model_cfg: ModelConfig, model_kind: str) -> dict[str, str]:
    meta = {"model_kind": model_kind}
    meta.update({name: str(getattr(model_cfg, name)) for name in _MODEL_FIELDS})
    return meta


def model_config_from_metadata(meta: dict[str, str]) -> tuple[str, ModelConfig]:
    kind = meta.get("model_kind", "unicorn")
    kwargs = {}
    for name, typ in _MODEL_FIELDS.items():
        if name in meta:
            kwargs[name] = _coerce(name, meta[name], typ)
    return kind, ModelConfig(**kwargs)
