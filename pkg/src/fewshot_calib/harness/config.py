"""Run configuration: a flat ``key = value`` text format with a fixed schema."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from ..errors import ConfigurationError
from ..finetune import ABLATION_ROWS, AblationFlags, FinetuneConfig

# keys that change how a run executes but never what it computes
EXECUTION_KEYS = ("workers",)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return tuple(out)


def _rows(text: str) -> tuple[str, ...]:
    rows = tuple(r.strip() for r in text.split(",") if r.strip())
    for r in rows:
        AblationFlags.parse(r)
    if len(set(rows)) != len(rows):
        raise ValueError("duplicate ablation row")
    return rows


def _shots(text: str) -> str:
    text = text.strip()
    parts = text.split("-")
    if len(parts) not in (1, 2) or not all(p.isdigit() for p in parts):
        raise ValueError(f"shots must be K or LO-HI, got {text!r}")
    return text


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs. Field comments double as the documented schema."""

    # named benchmark whose values are applied before any other key
    preset: str = ""

    # data source: "synthetic" or "idx"
    dataset: str = "synthetic"
    dim: int = 8
    base_classes: int = 20
    novel_classes: int = 20
    cluster_spread: float = 0.5
    contamination: float = 0.0
    mean_scale: float = 1.0
    shift_offset: float = 0.0
    shift_anisotropy: float = 1.0
    shift_seed: int = 11
    base_per_class: int = 100
    novel_per_class: int = 60
    # base data uses data_seed, novel data uses data_seed + 1
    data_seed: int = 1
    idx_images: str = ""
    idx_labels: str = ""
    base_labels: tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6, 7)
    novel_labels: tuple[int, ...] = (8, 9)

    # backbone: checkpoint path, or empty to pretrain inline
    backbone: str = ""
    hidden: tuple[int, ...] = (64, 64)
    feature_dim: int = 16
    init_seed: int = 0
    pretrain_lr: float = 0.05
    pretrain_epochs: int = 30
    pretrain_batch: int = 64
    pretrain_momentum: float = 0.9
    pretrain_seed: int = 0

    # episodes
    ways: int = 5
    shots: str = "5"
    queries: int = 15
    episodes: int = 600

    # finetuning
    lr: float = 5e-5
    epochs: int = 25
    freeze_temperature: bool = False
    temperature: float = 10.0
    head_mode: str = "cosine"
    sigma_walk: float = 0.1
    max_chain_len: int = 20
    refit_stats: bool = True
    stats_grad: bool = False
    proto_grad: bool = True
    track_query: bool = True

    # sweeps
    row: str = "B+FN+S+SS"
    rows: tuple[str, ...] = ABLATION_ROWS
    shot_list: tuple[int, ...] = (1, 5)

    workers: int = 1
    seed: int = 0

    # ------------------------------------------------------------------

    def validate(self, check_paths: bool = True) -> "RunConfig":
        if self.dataset not in ("synthetic", "idx"):
            raise ConfigurationError(f"dataset must be 'synthetic' or 'idx', got {self.dataset!r}")
        if self.episodes < 1:
            raise ConfigurationError("episodes must be >= 1")
        if self.ways < 2:
            raise ConfigurationError("ways must be >= 2")
        if self.queries < 1:
            raise ConfigurationError("queries must be >= 1 (the query set would be empty)")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        if not self.rows:
            raise ConfigurationError("rows must name at least one ablation row")
        if not self.shot_list or min(self.shot_list) < 1:
            raise ConfigurationError("shot_list must be a non-empty list of positive shot counts")
        if self.head_mode not in ("cosine", "dot"):
            raise ConfigurationError(f"head_mode must be 'cosine' or 'dot', got {self.head_mode!r}")
        AblationFlags.parse(self.row)
        self.shot_range()
        self.finetune_config().validate()
        if self.dataset == "idx":
            if not self.idx_images or not self.idx_labels:
                raise ConfigurationError("dataset=idx needs idx_images and idx_labels")
            if set(self.base_labels) & set(self.novel_labels):
                raise ConfigurationError("base_labels and novel_labels overlap")
        if check_paths:
            paths = [self.backbone] if self.backbone else []
            if self.dataset == "idx":
                paths += [self.idx_images, self.idx_labels]
            for p in paths:
                if not Path(p).exists():
                    raise ConfigurationError(f"referenced path does not exist: {p}")
        return self

    def shot_range(self) -> int | tuple[int, int]:
        parts = [int(p) for p in self.shots.split("-")]
        if min(parts) < 1 or (len(parts) == 2 and parts[1] < parts[0]):
            raise ConfigurationError(f"invalid shots {self.shots!r}")
        return parts[0] if len(parts) == 1 else (parts[0], parts[1])

    def finetune_config(self, row: str | None = None, seed: int = 0) -> FinetuneConfig:
        return FinetuneConfig(
            lr=self.lr,
            epochs=self.epochs,
            flags=AblationFlags.parse(row or self.row),
            freeze_temperature=self.freeze_temperature,
            temperature=self.temperature,
            head_mode=self.head_mode,
            sigma_walk=self.sigma_walk,
            max_chain_len=self.max_chain_len,
            refit_stats=self.refit_stats,
            stats_grad=self.stats_grad,
            proto_grad=self.proto_grad,
            track_query=self.track_query,
            seed=seed,
        )

    def as_dict(self) -> dict:
        """Resolved values, minus keys that only affect how a run executes."""
        out = {}
        for f in fields(self):
            if f.name in EXECUTION_KEYS:
                continue
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_PARSERS = {int: int, float: float, bool: _bool, str: str}
_SPECIAL = {"rows": _rows, "shots": _shots, "row": lambda t: AblationFlags.parse(t.strip()).name}


def _field_types() -> dict[str, type]:
    hints = {}
    for f in fields(RunConfig):
        default = f.default
        hints[f.name] = tuple if isinstance(default, tuple) else type(default)
    return hints


FIELD_TYPES = _field_types()


def parse_value(key: str, text: str):
    if key not in FIELD_TYPES:
        raise ConfigurationError(f"unknown config key {key!r}")
    try:
        if key in _SPECIAL:
            return _SPECIAL[key](text)
        kind = FIELD_TYPES[key]
        if kind is tuple:
            return _int_list(text)
        return _PARSERS[kind](text.strip())
    except (ValueError, ConfigurationError) as exc:
        raise ConfigurationError(f"bad value for {key!r}: {exc}") from None


def parse_assignments(lines, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines. ``#`` starts a comment; blank lines are ignored."""
    values: dict = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, text = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = parse_value(key, text)
        except ConfigurationError as exc:
            raise ConfigurationError(f"{source}:{lineno}: {exc}") from None
    return values


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the preset named by either layer, then file keys, then overrides."""
    from .presets import PRESETS

    merged = dict(file_values or {})
    merged.update(overrides or {})
    preset = merged.get("preset", "")
    values = {}
    if preset:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        values.update(PRESETS[preset])
    values.update(merged)
    return RunConfig(**values)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    return build_config(parse_assignments(text.splitlines(), str(path)), overrides)
