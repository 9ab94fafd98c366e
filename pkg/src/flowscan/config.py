"""INI run configuration for the command-line front end.

Sections are ``[data] [model] [train] [output]`` plus the command-specific
``[eval] [sample] [verify]``. Keys are ``key = value`` with ``#`` comments.
Command-line ``--section.key value`` pairs override file values, and the
``FLOWSCAN_SEED`` environment variable overrides every run seed.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .model import FlowScanConfig
from .transforms import KNOWN_FAULTS
from .train import TrainConfig
from .verify import SCOPES

SEED_ENV = "FLOWSCAN_SEED"
SOURCES = ("sinusoid", "circle", "square", "fset", "csv")


@dataclass
class DataConfig:
    source: str = "sinusoid"
    path: str = ""
    n_sets: int = 2000
    n: int = 8
    seed: int = 0
    noise_sd: float | None = None   # generator default when unset
    radius_min: float = 0.5
    radius_max: float = 2.0
    center_min: float = -1.0
    center_max: float = 1.0
    jitter: float | None = None     # 1e-6 for files, 0 for generators when unset
    split: str = "0.8,0.1,0.1"
    split_seed: int = 0

    @property
    def fractions(self):
        try:
            parts = tuple(float(v) for v in self.split.split(","))
        except ValueError:
            raise ConfigError(f"data.split must be three comma-separated numbers, got {self.split!r}") from None
        if len(parts) != 3:
            raise ConfigError(f"data.split needs three fractions, got {self.split!r}")
        return parts

    @property
    def jitter_sd(self):
        if self.jitter is not None:
            return self.jitter
        return 1e-6 if self.source in ("fset", "csv") else 0.0

    def validate(self):
        if self.source not in SOURCES:
            raise ConfigError(f"data.source must be one of {SOURCES}, got {self.source!r}")
        if self.source in ("fset", "csv"):
            if not self.path:
                raise ConfigError(f"data.path is required for source {self.source!r}")
            if not os.path.isfile(self.path):
                raise ConfigError(f"data.path does not exist: {self.path}")
        else:
            if self.n_sets < 1:
                raise ConfigError("data.n_sets must be >= 1")
            if self.n < (2 if self.source == "sinusoid" else 1):
                raise ConfigError(f"data.n too small for {self.source}: {self.n}")
        if self.noise_sd is not None and self.noise_sd < 0:
            raise ConfigError("data.noise_sd must be >= 0")
        if not 0 < self.radius_min <= self.radius_max:
            raise ConfigError("need 0 < data.radius_min <= data.radius_max")
        if self.center_min > self.center_max:
            raise ConfigError("need data.center_min <= data.center_max")
        if self.jitter is not None and self.jitter < 0:
            raise ConfigError("data.jitter must be >= 0")
        fr = self.fractions
        if any(f < 0 for f in fr) or abs(sum(fr) - 1) > 1e-9:
            raise ConfigError(f"data.split fractions must be >= 0 and sum to 1, got {fr}")


@dataclass
class OutputConfig:
    dir: str = "runs"
    name: str = "run"
    csv: bool = False
    svg: bool = False


@dataclass
class EvalConfig:
    checkpoint: str = ""
    batch_size: int = 256


@dataclass
class SampleConfig:
    checkpoint: str = ""
    count: int = 16
    n: int = 64
    seed: int = 0


@dataclass
class VerifyConfig:
    scope: str = "all"
    inject_fault: str = ""


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: dict = field(default_factory=dict)   # FlowScanConfig fields; d and n come from the data
    train: TrainConfig = field(default_factory=TrainConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    text: str = ""   # the config file as written

    def model_config(self, d, n=None):
        values = dict(self.model)
        for key in ("d", "n"):
            if key in values and values[key] != (d if key == "d" else n) and not (key == "n" and n is None):
                raise ConfigError(f"model.{key}={values[key]} disagrees with the data ({key}={d if key == 'd' else n})")
        values["d"] = d
        values.setdefault("n", n)
        return FlowScanConfig(**values)


SECTION_TYPES = {"data": DataConfig, "train": TrainConfig, "output": OutputConfig,
                 "eval": EvalConfig, "sample": SampleConfig, "verify": VerifyConfig,
                 "model": FlowScanConfig}
PATH_KEYS = {("data", "path"), ("output", "dir"), ("eval", "checkpoint"), ("sample", "checkpoint")}


def _convert(section, key, raw, cls):
    spec = {f.name: f for f in fields(cls)}
    if key not in spec:
        raise ConfigError(f"unknown key [{section}] {key}")
    ann = str(spec[key].type)
    raw = raw.strip()
    if "None" in ann and raw.lower() in ("", "none"):
        return None
    try:
        if ann.startswith("bool"):
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "yes", "1", "on")
        if ann.startswith("int"):
            return int(raw)
        if ann.startswith("float"):
            return float(raw)
        if ann.startswith("tuple"):
            return tuple(t.strip() for t in raw.split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot read {raw!r} as {ann}") from None
    return raw


def parse_overrides(args):
    """``["--train.lr", "0.01", "--data.n=4"]`` -> ``[("train", "lr", "0.01"), ...]``."""
    out = []
    i = 0
    while i < len(args):
        tok = args[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"expected --section.key value, got {tok!r}")
        body = tok[2:]
        if "=" in body:
            key, value = body.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"missing value for {tok}")
            key, value = body, args[i + 1]
            i += 2
        section, name = key.split(".", 1)
        out.append((section, name, value))
    return out


def load(path=None, overrides=(), env=None, command=None):
    """Build a validated :class:`RunConfig`.

    Relative paths in the file are taken relative to the file; relative
    paths given as overrides are taken relative to the working directory.
    """
    env = os.environ if env is None else env
    entries = []
    text = ""
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            text = fh.read()
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
        try:
            parser.read_string(text, source=path)
        except configparser.Error as err:
            raise ConfigError(f"{path}: {err}") from None
        base = os.path.dirname(os.path.abspath(path))
        for section in parser.sections():
            for key, value in parser.items(section):
                entries.append((section, key, value, base))
    entries += [(s, k, v, os.getcwd()) for s, k, v in overrides]

    values = {name: {} for name in SECTION_TYPES}
    for section, key, raw, base in entries:
        if section not in SECTION_TYPES:
            raise ConfigError(f"unknown section [{section}]")
        value = _convert(section, key, raw, SECTION_TYPES[section])
        if (section, key) in PATH_KEYS and value and not os.path.isabs(value):
            value = os.path.normpath(os.path.join(base, value))
        values[section][key] = value

    seed = env.get(SEED_ENV)
    if seed is not None:
        try:
            seed = int(seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {seed!r}") from None
        values["train"]["seed"] = seed
        values["sample"]["seed"] = seed
        values["model"]["init_seed"] = seed

    cfg = RunConfig(
        data=DataConfig(**values["data"]),
        model=values["model"],
        train=TrainConfig(**values["train"]),
        output=OutputConfig(**values["output"]),
        eval=EvalConfig(**values["eval"]),
        sample=SampleConfig(**values["sample"]),
        verify=VerifyConfig(**values["verify"]),
        text=text,
    )
    validate(cfg, command)
    return cfg


def validate(cfg, command=None):
    cfg.train.validate()
    if cfg.verify.scope not in SCOPES:
        raise ConfigError(f"verify.scope must be one of {SCOPES}, got {cfg.verify.scope!r}")
    if cfg.verify.inject_fault and cfg.verify.inject_fault not in KNOWN_FAULTS:
        raise ConfigError(f"unknown fault {cfg.verify.inject_fault!r}; known: {KNOWN_FAULTS}")
    if command in ("train", "eval"):
        cfg.data.validate()
    if command == "train":
        # check model keys and ranges now; d and n are filled in from the data
        probe = dict(cfg.model)
        probe.setdefault("d", 2)
        if probe.get("flat_base") or probe.get("base") == "flat":
            probe.setdefault("n", cfg.data.n)
        FlowScanConfig(**probe)
    for name in ("eval", "sample"):
        if command == name:
            ckpt = getattr(cfg, name).checkpoint
            if not ckpt:
                raise ConfigError(f"{name}.checkpoint is required")
            if not os.path.isfile(ckpt):
                raise ConfigError(f"{name}.checkpoint does not exist: {ckpt}")
    if cfg.sample.count < 1 or cfg.sample.n < 1:
        raise ConfigError("sample.count and sample.n must be >= 1")
    if cfg.eval.batch_size < 1:
        raise ConfigError("eval.batch_size must be >= 1")
    if not cfg.output.name or os.sep in cfg.output.name:
        raise ConfigError("output.name must be a plain directory name")
