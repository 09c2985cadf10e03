"""Run configuration: defaults, key=value file parsing, and validation.

Config files are plain text, one ``key = value`` pair per line, ``#`` starts
a comment.  Every key must match a :class:`RunConfig` field; values are
coerced to the field's type (ints, floats, bools as true/false/1/0, and
comma-separated int tuples).  The ``RGIN_SEED`` environment variable
overrides the file's seed; an explicit ``--seed`` flag overrides both.
"""

import dataclasses
import os
from dataclasses import dataclass


@dataclass
class RunConfig:
    # model dimensions
    image_size: int = 96
    channels: tuple = (16, 32, 64, 64)
    feat_ch: int = 64          # common channel count after projection
    fused_dim: int = 128       # multimodal fusion width
    text_dim: int = 128        # GRU hidden size
    embed_dim: int = 64
    attn_dim: int = 64
    heads: int = 2
    num_priors: int = 3
    lambda_att: float = 0.05
    leaky_slope: float = 0.1
    # confidence targets are ~99.9% negatives on a 6x6x3 grid; down-weighting
    # them keeps the positive-cell gradient from washing out
    neg_conf_weight: float = 0.05
    # ablation switches
    enable_scale_fusion: bool = True
    enable_attention: bool = True
    enable_att_loss: bool = True
    supervise_diffuse: bool = False
    freeze_backbone: bool = False
    # optimizer
    lr: float = 3e-3
    lr_half_every: int = 20
    max_epochs: int = 60
    patience: int = 5
    batch_size: int = 16
    # data generation
    n_train: int = 20000
    n_val: int = 2500
    n_test: int = 2500
    mix_category: float = 0.25
    mix_attribute: float = 0.25
    mix_location: float = 0.25
    mix_relational: float = 0.25
    min_objects: int = 2
    max_objects: int = 6
    relational_distractor: bool = True
    max_tokens: int = 16
    # plumbing
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs/default"

    def validate(self):
        if self.image_size % 16 != 0 or self.image_size <= 0:
            raise ValueError(f"image_size must be a positive multiple of 16, got {self.image_size}")
        if len(self.channels) != 4 or any(c <= 0 for c in self.channels):
            raise ValueError(f"channels must be 4 positive ints, got {self.channels}")
        if self.feat_ch % self.heads != 0:
            raise ValueError(f"feat_ch {self.feat_ch} not divisible by heads {self.heads}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError(f"leaky_slope must be in (0,1), got {self.leaky_slope}")
        if self.lambda_att < 0:
            raise ValueError(f"lambda_att must be >= 0, got {self.lambda_att}")
        if self.num_priors <= 0:
            raise ValueError("num_priors must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch statistics)")
        if min(self.n_train, self.n_val, self.n_test) <= 0:
            raise ValueError("split sizes must be positive")
        mix = self.mix_fractions()
        if abs(sum(mix.values()) - 1.0) > 1e-6:
            raise ValueError(f"template mix must sum to 1, got {sum(mix.values())}")
        if any(v < 0 for v in mix.values()):
            raise ValueError("template mix fractions must be >= 0")
        if not 2 <= self.min_objects <= self.max_objects:
            raise ValueError("need 2 <= min_objects <= max_objects")
        if self.max_tokens <= 0 or self.max_epochs <= 0 or self.patience <= 0:
            raise ValueError("max_tokens, max_epochs, patience must be positive")
        if self.lr <= 0 or self.lr_half_every <= 0:
            raise ValueError("lr and lr_half_every must be positive")
        return self

    def mix_fractions(self):
        return {"category": self.mix_category,
                "attribute": self.mix_attribute,
                "location": self.mix_location,
                "relational": self.mix_relational}

    def to_lines(self):
        """Serialize as the same key=value text the parser accepts."""
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def config_fields():
    """Names of all configuration keys, in declaration order."""
    return tuple(_FIELDS)


def coerce_field(name, raw):
    """Parse one raw string value to the declared type of config key ``name``."""
    return _coerce(name, raw)


def _coerce(name, raw):
    field = _FIELDS.get(name)
    if field is None:
        raise KeyError(f"unknown config key: {name}")
    raw = raw.strip()
    default = getattr(RunConfig, name)
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {name} expects a boolean, got {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(p) for p in raw.split(","))
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_text(text):
    """Parse key=value lines into a dict of coerced values."""
    out = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected key = value, got {line!r}")
        key, _, raw = line.partition("=")
        out[key.strip()] = _coerce(key.strip(), raw)
    return out


def load_config(path=None, overrides=None, apply_env_seed=True):
    """Build a validated RunConfig from an optional file plus overrides.

    Precedence, lowest to highest: dataclass defaults, config file,
    ``RGIN_SEED`` (seed only), explicit overrides.
    """
    values = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read()))
    if apply_env_seed:
        env_seed = os.environ.get("RGIN_SEED")
        if env_seed is not None and env_seed != "":
            values["seed"] = int(env_seed)
    for key, val in (overrides or {}).items():
        if key not in _FIELDS:
            raise KeyError(f"unknown config key: {key}")
        values[key] = val
    return RunConfig(**values).validate()
