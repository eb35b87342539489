"""Run configuration: ``[section]`` headers with ``key = value`` lines.

Booleans are ``true``/``false``; lists are comma-separated.  Unknown sections
or keys are rejected and every value is range-checked before any compute.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from .sigproc import MODALITIES

STAGES = ("tokenizer", "pretrain", "finetune", "evaluate")


class ConfigError(ValueError):
    pass


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _unit(v):
    return 0 <= v < 1


def _open_unit(v):
    return 0 < v < 1


@dataclass
class RunSection:
    seed: int = 0
    threads: int = 1


@dataclass
class DataSection:
    manifest: str = ""
    modalities: tuple = ("eeg", "eog", "ecg")


@dataclass
class ModelSection:
    eeg_hidden: int = 64
    hidden: int = 32
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    codebook_size: int = 128
    code_dim: int = 16
    decoder_layers: int = 3
    hrm_length: int = 16
    hrm_width: int = 32
    fuser_heads: int = 4
    fuser_mlp: int = 128
    prototypes: int = 0
    experts: int = 4


@dataclass
class OptimSection:
    peak_lr: float = 2e-3
    min_lr: float = 1e-5
    warmup_epochs: int = 1
    epochs: int = 5
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    batch_size: int = 32
    grad_clip: float = 0.0


@dataclass
class LossSection:
    alpha1: float = 1.0
    alpha2: float = 0.1
    gamma_main: float = 0.5
    gamma_align: float = 1.0
    gamma_eeg: float = 0.5
    gamma_eog: float = 0.5
    gamma_ecg: float = 0.5
    gamma_emg: float = 0.5
    label_smoothing: float = 0.1


@dataclass
class MaskSection:
    eeg: float = 0.5
    eog: float = 0.7
    ecg: float = 0.7
    emg: float = 0.5


@dataclass
class TaskSection:
    kind: str = "multiclass"
    outputs: int = 0  # 0: infer from the training labels


@dataclass
class FlagSection:
    freeze_encoders: bool = False
    warm_start_encoders: bool = False
    moe_fuser: bool = False
    no_cross_modal: bool = False
    no_disentangle: bool = False
    no_shared_codebook: bool = False
    no_prototype_align: bool = False
    no_spec_loss: bool = False


@dataclass
class PathSection:
    tokenizer: str = ""
    pretrain: str = ""


# per-stage optimiser defaults (desk scale)
STAGE_OPTIM = {
    "tokenizer": OptimSection(),
    "pretrain": OptimSection(2e-3, 1e-5, 2, 10, 0.05, 0.9, 0.98, 32, 3.0),
    "finetune": OptimSection(1e-3, 1e-4, 2, 20, 0.05, 0.9, 0.999, 32, 0.0),
    "evaluate": OptimSection(),
}

RULES = {
    "run": {"seed": _nonneg, "threads": _positive},
    "model": {k: _positive for k in ("eeg_hidden", "hidden", "heads", "mlp_ratio", "codebook_size", "code_dim",
                                     "hrm_length", "hrm_width", "fuser_heads", "fuser_mlp", "experts")}
    | {"layers": _nonneg, "decoder_layers": _nonneg, "prototypes": _nonneg},
    "optim": {"peak_lr": _positive, "min_lr": _nonneg, "warmup_epochs": _nonneg, "epochs": _positive,
              "weight_decay": _nonneg, "beta1": _unit, "beta2": _unit, "batch_size": _positive, "grad_clip": _nonneg},
    "loss": {k: _nonneg for k in ("alpha1", "alpha2", "gamma_main", "gamma_align", "gamma_eeg", "gamma_eog",
                                  "gamma_ecg", "gamma_emg")} | {"label_smoothing": _unit},
    "mask": {k: _open_unit for k in MODALITIES},
    "task": {"outputs": _nonneg},
}


@dataclass
class RunConfig:
    stage: str = "tokenizer"
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    optim: OptimSection = field(default_factory=OptimSection)
    loss: LossSection = field(default_factory=LossSection)
    mask: MaskSection = field(default_factory=MaskSection)
    task: TaskSection = field(default_factory=TaskSection)
    flags: FlagSection = field(default_factory=FlagSection)
    paths: PathSection = field(default_factory=PathSection)

    @classmethod
    def defaults(cls, stage: str) -> "RunConfig":
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        return cls(stage=stage, optim=dataclasses.replace(STAGE_OPTIM[stage]))

    def sections(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self) if f.name != "stage"]

    def validate(self) -> "RunConfig":
        for name, sec in self.sections():
            for key, ok in RULES.get(name, {}).items():
                if not ok(getattr(sec, key)):
                    raise ConfigError(f"[{name}] {key} = {getattr(sec, key)!r} out of range")
        mods = self.data.modalities
        if not mods or len(set(mods)) != len(mods):
            raise ConfigError("[data] modalities must be a non-empty list without repeats")
        for m in mods:
            if m not in MODALITIES:
                raise ConfigError(f"[data] unknown modality {m!r}")
        if self.optim.warmup_epochs > self.optim.epochs:
            raise ConfigError("[optim] warmup_epochs exceeds epochs")
        if self.optim.min_lr > self.optim.peak_lr:
            raise ConfigError("[optim] min_lr exceeds peak_lr")
        for width in (self.model.eeg_hidden, self.model.hidden):
            if width % 2 or width % self.model.heads:
                raise ConfigError(f"[model] hidden size {width} must be even and divisible by heads")
        if self.model.hrm_width % self.model.fuser_heads:
            raise ConfigError("[model] fuser_heads must divide hrm_width")
        if self.task.kind not in ("multiclass", "binary", "regression"):
            raise ConfigError(f"[task] unknown kind {self.task.kind!r}")
        return self

    def to_text(self) -> str:
        lines = [f"# stage = {self.stage}"]
        for name, sec in self.sections():
            lines.append(f"[{name}]")
            for f in fields(sec):
                lines.append(f"{f.name} = {_format(getattr(sec, f.name))}")
        return "\n".join(lines) + "\n"

    def set(self, section: str, key: str, raw: str) -> None:
        sec = getattr(self, section, None)
        if sec is None or section == "stage":
            raise ConfigError(f"unknown section [{section}]")
        kinds = {f.name: f for f in fields(sec)}
        if key not in kinds:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        setattr(sec, key, _parse(raw, type(getattr(sec, key)), f"[{section}] {key}"))


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(v)
    return str(v)


def _parse(raw: str, kind: type, where: str):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if kind is tuple:
            return tuple(x.strip().lower() for x in raw.split(",") if x.strip())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_sections(text: str, where: str = "config") -> list[tuple[str, str, str]]:
    """Generic ``[section] key = value`` reader returning (section, key, value) triples."""
    out = []
    section = None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line or section is None:
            raise ConfigError(f"{where}:{n}: expected 'key = value' inside a [section]")
        key, value = line.split("=", 1)
        out.append((section, key.strip(), value.strip()))
    return out


def loads(text: str, stage: str, where: str = "config") -> RunConfig:
    cfg = RunConfig.defaults(stage)
    for section, key, value in parse_sections(text, where):
        cfg.set(section, key, value)
    return cfg.validate()


def load(path, stage: str) -> RunConfig:
    with open(path) as fh:
        return loads(fh.read(), stage, str(path))


# ---------------------------------------------------------------------------
# synthetic-data spec files for gen-data

_GEN_SCALARS = {"duration": int, "classes": int, "regression_dim": int, "shared_uv": float, "noise": float, "seed": int}
_GEN_TABLES = {"channels": int, "source_rates": int, "private_uv": float, "counts": int, "subjects": int}


def loads_gen_spec(text: str, where: str = "spec"):
    """``[gen]`` holds scalars plus ``modalities``/``class_freqs`` lists;
    ``[channels]``, ``[source_rates]``, ``[private_uv]``, ``[counts]`` and
    ``[subjects]`` map a modality or split name to a number."""
    from .datagen import SPLITS, GenSpec

    spec = GenSpec()
    for section, key, value in parse_sections(text, where):
        loc = f"[{section}] {key}"
        if section == "gen":
            if key == "modalities":
                spec.modalities = _parse(value, tuple, loc)
            elif key == "class_freqs":
                spec.class_freqs = tuple(_parse(v, float, loc) for v in value.split(","))
            elif key in _GEN_SCALARS:
                setattr(spec, key, _parse(value, _GEN_SCALARS[key], loc))
            else:
                raise ConfigError(f"unknown key {key!r} in [gen]")
        elif section in _GEN_TABLES:
            names = SPLITS if section in ("counts", "subjects") else MODALITIES
            if key not in names:
                raise ConfigError(f"{loc}: expected one of {', '.join(names)}")
            getattr(spec, section)[key] = _parse(value, _GEN_TABLES[section], loc)
        else:
            raise ConfigError(f"unknown section [{section}]")
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return spec
