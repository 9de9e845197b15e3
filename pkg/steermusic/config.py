"""Application and experiment configuration management."""

import dataclasses
import json
import os
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from steermusic.errors import ConfigError


class Config:
    """Application configuration class."""

    @staticmethod
    def get_int_env(key: str, default: int) -> int:
        """Get an integer environment variable or raise ConfigError."""
        value = os.environ.get(key)
        if value is None or value == '':
            return default
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f'{key} must be an integer, got {value!r}')

    @classmethod
    def load_config(cls) -> Dict[str, Any]:
        """Load and validate all configuration from environment."""
        config = {}

        config['LOG_LEVEL'] = os.environ.get('LOG_LEVEL', 'INFO').upper()

        # Output directory override; flags still win over it
        config['OUTPUT_DIR'] = os.environ.get('STEERMUSIC_OUTPUT_DIR') or None

        # Sweep parallelism over (seed, grid point) pairs
        config['WORKERS'] = cls.get_int_env('STEERMUSIC_WORKERS', 1)
        if config['WORKERS'] < 1:
            raise ConfigError('STEERMUSIC_WORKERS must be >= 1')

        config['PROGRESS'] = os.environ.get('STEERMUSIC_PROGRESS', 'false').lower() == 'true'

        return config


# ---------------------------------------------------------------------------
# Experiment configuration (file + flags)
# ---------------------------------------------------------------------------

# File keys that are not valid Python identifiers
_KEY_ALIASES = {'lambda': 'lam'}


@dataclass
class DatasetSection:
    n_clips: int = 100
    seed: int = 0
    texture_prob: float = 0.3

    def validate(self) -> None:
        if self.n_clips < 0:
            raise ConfigError('dataset.n_clips must be >= 0')
        if not 0.0 <= self.texture_prob <= 1.0:
            raise ConfigError('dataset.texture_prob must be in [0, 1]')


@dataclass
class TrainSection:
    steps: int = 2000
    lr: float = 1e-3
    batch: int = 16
    seed: int = 0
    cond_drop: float = 0.1
    schedule_steps: int = 1000
    schedule_kind: str = 'linear'
    manifest: str = ''

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError('train.steps must be >= 0')
        if self.lr <= 0:
            raise ConfigError('train.lr must be > 0')
        if self.batch < 1:
            raise ConfigError('train.batch must be >= 1')
        if not 0.0 <= self.cond_drop < 1.0:
            raise ConfigError('train.cond_drop must be in [0, 1)')
        if self.schedule_kind not in ('linear', 'cosine'):
            raise ConfigError("train.schedule_kind must be 'linear' or 'cosine'")


@dataclass
class PersonalizeSection:
    concept_profile: str = 'odd_vibrato'
    token: str = 'sks'
    n_refs: int = 5
    steps: int = 100
    lr: float = 1e-5
    seed: int = 0
    mode: str = 'finetune'
    checkpoint: str = ''

    def validate(self) -> None:
        if self.n_refs < 1:
            raise ConfigError('personalize.n_refs must be >= 1')
        if self.steps < 0:
            raise ConfigError('personalize.steps must be >= 0')
        if self.mode not in ('finetune', 'textual_inversion'):
            raise ConfigError("personalize.mode must be 'finetune' or 'textual_inversion'")


@dataclass
class EditSection:
    method: str = 'dds'
    steps: Optional[int] = None
    lr: float = 0.1
    grad_scale: Optional[float] = None
    omega: Optional[float] = None
    lam: Optional[float] = None
    tau: float = 0.07
    gamma: float = 1.0
    t_min_frac: float = 0.05
    t_max_frac: float = 0.95
    w_kind: str = 'constant'
    t_edit_frac: float = 0.3
    seed: Optional[int] = None
    snapshot_every: int = 50
    source: Dict[str, Any] = field(default_factory=lambda: {
        'melody_seed': 0, 'instrument': 'piano', 'genre': 'rock'})
    target: Dict[str, Any] = field(default_factory=lambda: {
        'instrument': 'flute', 'genre': 'rock'})
    source_path: str = ''
    checkpoint: str = ''
    pdm_checkpoint: str = ''
    baseline_on_pdm: bool = False

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError('edit.lr must be > 0')
        if self.tau <= 0:
            raise ConfigError('edit.tau must be > 0')
        if not 0.0 < self.t_min_frac < self.t_max_frac < 1.0:
            raise ConfigError('edit.t_min_frac < edit.t_max_frac, both in (0, 1), required')
        if self.w_kind not in ('constant', 'one_minus_alpha_bar'):
            raise ConfigError("edit.w_kind must be 'constant' or 'one_minus_alpha_bar'")


@dataclass
class EvaluateSection:
    source_wav: str = ''
    edited_wav: str = ''
    reference_wav: str = ''
    pairs: List[List[str]] = field(default_factory=list)
    contour_mode: str = 'index'

    def validate(self) -> None:
        if self.contour_mode not in ('index', 'magnitude'):
            raise ConfigError("evaluate.contour_mode must be 'index' or 'magnitude'")


@dataclass
class AblationSection:
    lambdas: List[float] = field(default_factory=lambda: [-1.0, -0.5, 0.0, 0.05, 0.5, 1.0])
    omegas: List[float] = field(default_factory=lambda: [1.0, 7.5, 15.0, 30.0])
    grad_scales: List[float] = field(default_factory=lambda: [1.0, 2.0, 5.0])
    finetune_steps: List[int] = field(default_factory=lambda: [50, 100, 200])
    pcon: List[bool] = field(default_factory=lambda: [False, True])
    methods: List[str] = field(default_factory=lambda: ['dds', 'sdedit', 'ddim_edit'])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    n_clips: int = 4
    batch: int = 8
    inversion_steps: int = 20
    classifier_steps: int = 300

    def validate(self) -> None:
        if self.n_clips < 1:
            raise ConfigError('ablation.n_clips must be >= 1')
        if self.inversion_steps < 1:
            raise ConfigError('ablation.inversion_steps must be >= 1')
        if not self.seeds:
            raise ConfigError('ablation.seeds must not be empty')


_SECTIONS = {
    'dataset': DatasetSection,
    'train': TrainSection,
    'personalize': PersonalizeSection,
    'edit': EditSection,
    'evaluate': EvaluateSection,
    'ablation': AblationSection,
}


@dataclass
class ExperimentConfig:
    """All parameters of one command invocation, validated before execution."""

    seed: int = 0
    output_dir: str = 'runs'
    dataset: DatasetSection = field(default_factory=DatasetSection)
    train: TrainSection = field(default_factory=TrainSection)
    personalize: PersonalizeSection = field(default_factory=PersonalizeSection)
    edit: EditSection = field(default_factory=EditSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentConfig':
        """Build a config from a nested mapping, rejecting unknown keys."""
        if not isinstance(data, dict):
            raise ConfigError('configuration root must be a table/object')
        kwargs: Dict[str, Any] = {}
        for key, value in data.items():
            if key in _SECTIONS:
                kwargs[key] = _build_section(_SECTIONS[key], value, key)
            elif key == 'seed':
                kwargs['seed'] = _coerce(int, value, key)
            elif key == 'output_dir':
                kwargs['output_dir'] = _coerce(str, value, key)
            else:
                raise ConfigError(f'unknown configuration key: {key}')
        config = cls(**kwargs)
        config.validate()
        return config

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[List[str]] = None,
             env_output_dir: Optional[str] = None) -> 'ExperimentConfig':
        """Load a TOML or JSON file, then apply env and flag overrides.

        Args:
            path: Optional config file (``.toml`` or ``.json``).
            overrides: ``section.key=value`` strings from ``--set`` flags.
            env_output_dir: Value of STEERMUSIC_OUTPUT_DIR, if any.
        """
        data: Dict[str, Any] = {}
        if path:
            data = read_config_file(path)
        if env_output_dir:
            data['output_dir'] = env_output_dir
        for item in overrides or []:
            _apply_override(data, item)
        return cls.from_dict(data)

    def validate(self) -> None:
        for name in _SECTIONS:
            getattr(self, name).validate()

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        for section in _SECTIONS:
            for alias, attr in _KEY_ALIASES.items():
                if attr in data[section]:
                    data[section][alias] = data[section].pop(attr)
        return data

    def resolve_path(self, value: str, default: str) -> Path:
        """Resolve an optional path setting against the output directory."""
        return Path(value) if value else Path(self.output_dir) / default


def read_config_file(path: str) -> Dict[str, Any]:
    """Read a TOML or JSON configuration file into a plain dict."""
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as e:
        raise ConfigError(f'cannot read config file {path}: {e}')
    try:
        if p.suffix.lower() == '.json':
            data = json.loads(raw.decode('utf-8'))
        else:
            data = tomllib.loads(raw.decode('utf-8'))
    except (ValueError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f'cannot parse config file {path}: {e}')
    if not isinstance(data, dict):
        raise ConfigError(f'config file {path} must contain a table/object')
    return data


def _apply_override(data: Dict[str, Any], item: str) -> None:
    if '=' not in item:
        raise ConfigError(f"override must look like 'section.key=value', got {item!r}")
    dotted, raw_value = item.split('=', 1)
    try:
        value = json.loads(raw_value)
    except ValueError:
        value = raw_value
    parts = dotted.strip().split('.')
    target = data
    for part in parts[:-1]:
        target = target.setdefault(part, {})
        if not isinstance(target, dict):
            raise ConfigError(f'cannot override {dotted}: {part} is not a section')
    target[parts[-1]] = value


def _build_section(cls, value: Any, name: str):
    if not isinstance(value, dict):
        raise ConfigError(f'[{name}] must be a table/object')
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, item in value.items():
        attr = _KEY_ALIASES.get(key, key)
        if attr not in known:
            raise ConfigError(f'unknown configuration key: {name}.{key}')
        kwargs[attr] = _coerce_field(known[attr], item, f'{name}.{key}')
    return cls(**kwargs)


def _coerce_field(f: dataclasses.Field, value: Any, path: str) -> Any:
    kind = f.type
    optional = False
    if typing.get_origin(kind) is typing.Union:
        args = [a for a in typing.get_args(kind) if a is not type(None)]
        optional = True
        kind = args[0]
    if value is None:
        if optional:
            return None
        raise ConfigError(f'{path} must not be null')
    origin = typing.get_origin(kind)
    if origin in (list, dict):
        if not isinstance(value, origin):
            raise ConfigError(f'{path} must be a {origin.__name__}')
        return value
    return _coerce(kind, value, path)


def _coerce(kind, value: Any, path: str) -> Any:
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if kind is bool and isinstance(value, bool):
        return value
    if kind is str and isinstance(value, str):
        return value
    raise ConfigError(f'{path} must be of type {kind.__name__}, got {value!r}')
