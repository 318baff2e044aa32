"""Training configuration with file/CLI plumbing.

Defaults follow the reference hyperparameter set: learning rate 1e-5, lag 5,
price embedding 4, news embedding 64, batch 32, BCE weight 0.01, sparseness
weight 1, 3-layer transformation networks with hidden width 332, 1-layer
lag-coupling transforms.
"""

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError
from .kvfile import parse_kv_file, write_kv_file


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    lag: int = 5
    d_p: int = 4
    d_m: int = 64
    batch_size: int = 32
    bce_weight: float = 0.01
    lambda_sparse: float = 1.0
    lambda_domain: float = 0.0
    l_max: int = 10
    hidden: int = 332
    depth: int = 3
    graph_transform_depth: int = 1
    graph_transform_hidden: int = 8
    epochs: int = 100
    seed: int = 0
    patience: int = 10
    precision: str = "float32"
    use_news: bool = True
    lag_dependent: bool = True
    existence_only: bool = False
    shared_heads: bool = False
    tau: float = 1.0
    tau_anneal: bool = False
    tau_start: float = 2.0
    tau_end: float = 0.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    domain_prior: str = ""
    graph_init_offset: float = 0.0

    def __post_init__(self):
        for name in ("learning_rate", "lag", "d_p", "d_m", "batch_size", "l_max",
                     "hidden", "depth", "graph_transform_depth", "epochs", "tau"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.bce_weight < 0 or self.lambda_sparse < 0 or self.lambda_domain < 0:
            raise ConfigError("loss weights must be non-negative")

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "TrainConfig":
        kv = parse_kv_file(path)
        if overrides:
            kv.update({k: str(v) for k, v in overrides.items() if v is not None})
        return cls.from_kv(kv)

    @classmethod
    def from_kv(cls, kv: dict) -> "TrainConfig":
        field_types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in kv.items():
            if key not in field_types:
                raise ConfigError(f"unknown config key {key!r}")
            ftype = field_types[key]
            raw = str(raw)
            try:
                if ftype is bool:
                    if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(f"not a boolean: {raw!r}")
                    kwargs[key] = raw.lower() in ("true", "1", "yes")
                elif ftype is int:
                    kwargs[key] = int(raw)
                elif ftype is float:
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = raw
            except ValueError as e:
                raise ConfigError(f"bad value for {key!r}: {e}")
        return cls(**kwargs)

    def to_kv(self) -> dict:
        return {f.name: str(getattr(self, f.name)) for f in dataclasses.fields(self)}

    def save(self, path) -> None:
        write_kv_file(path, self.to_kv())

    def tau_at(self, epoch: int) -> float:
        """Sampling temperature for an epoch (fixed unless annealing is on)."""
        if not self.tau_anneal:
            return self.tau
        if self.epochs <= 1:
            return self.tau_end
        frac = min(1.0, epoch / (self.epochs - 1))
        return self.tau_start + (self.tau_end - self.tau_start) * frac
