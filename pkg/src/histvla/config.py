"""Run configuration loaded from an INI file plus command-line overrides.

Every section maps onto one module's config object and is validated by that
object's constructor, so a bad threshold fails at load time. Seeds live only
in ``[run]``; the corpora, policy and planner seeds are derived from it.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .geometry import ConfigError
from .meta_action import DEFAULT_THRESHOLDS, Thresholds
from .planner import RefineConfig
from .policy import PolicyConfig
from .scorer import ScorerConfig
from .sparsifier import SparsifierConfig
from .store import MissingInputError

DEFAULT_INI = Path(__file__).with_name("default.ini")
SECTIONS = ("paths", "run", "policy", "sparsifier", "planner", "thresholds", "scorer", "bench")
SEED_MAX = 2**64 - 1


def _float_tuple(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


@dataclass(frozen=True)
class Paths:
    scenes: str = "scenes"
    checkpoint: str = "checkpoints/model.ckpt"
    out: str = "out"


@dataclass(frozen=True)
class BenchConfig:
    d_model: int = 256
    n_layers: int = 4
    n_heads: int = 4
    seq_lens: tuple[int, ...] = (64, 144, 256, 576, 1024)
    fusion_rates: tuple[float, ...] = (0.25, 0.5, 0.8, 1.0)

    def __post_init__(self):
        if min(self.d_model, self.n_layers, self.n_heads) < 1:
            raise ConfigError("bench model dims must be positive")
        if not self.seq_lens or min(self.seq_lens) < 1:
            raise ConfigError("bench seq_lens must be positive integers")
        if not self.fusion_rates:
            raise ConfigError("bench fusion_rates must not be empty")
        for r in self.fusion_rates:
            SparsifierConfig(r)


@dataclass(frozen=True)
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    seed: int = 0
    n_train: int = 200
    n_eval: int = 100
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    planner: RefineConfig = field(default_factory=RefineConfig)
    thresholds: Thresholds = DEFAULT_THRESHOLDS
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def __post_init__(self):
        if not (0 <= self.seed <= SEED_MAX):
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("n_train and n_eval must be >= 1")
        if self.scorer.thresholds != self.thresholds:
            object.__setattr__(self, "scorer", replace(self.scorer, thresholds=self.thresholds))
        # the module seeds always follow the run seed
        object.__setattr__(self, "policy", replace(self.policy, seed=self.seeds["policy"]))
        object.__setattr__(self, "planner", replace(self.planner, seed=self.seeds["planner"]))

    @property
    def seeds(self) -> dict[str, int]:
        # torch and numpy seeding take values below 2**63 and 2**64 respectively
        base = self.seed % 2**63
        return {"run": self.seed, "train_corpus": base + 1, "eval_corpus": base + 2,
                "policy": base, "planner": base}

    @property
    def sparsifier(self) -> SparsifierConfig:
        return SparsifierConfig(self.policy.fusion_rate, self.policy.temperature)

    def to_dict(self) -> dict:
        policy = self.policy.to_dict()
        sparsifier = {"fusion_rate": policy.pop("fusion_rate"), "temperature": policy.pop("temperature")}
        policy.pop("seed")
        planner = self.planner.to_dict()
        planner.pop("seed")
        scorer = asdict(self.scorer)
        scorer.pop("thresholds")
        return {
            "paths": asdict(self.paths),
            "run": {"seed": self.seed, "n_train": self.n_train, "n_eval": self.n_eval},
            "policy": policy,
            "sparsifier": sparsifier,
            "planner": planner,
            "thresholds": asdict(self.thresholds),
            "scorer": scorer,
            "bench": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.bench).items()},
        }

    def with_overrides(self, seed=None, out=None, scenes=None, checkpoint=None,
                       n_candidates=None, fusion_rate=None) -> "RunConfig":
        cfg = self
        paths = cfg.paths
        if out is not None:
            paths = replace(paths, out=str(out))
        if scenes is not None:
            paths = replace(paths, scenes=str(scenes))
        if checkpoint is not None:
            paths = replace(paths, checkpoint=str(checkpoint))
        try:
            cfg = replace(cfg, paths=paths, seed=cfg.seed if seed is None else int(seed))
            if n_candidates is not None:
                cfg = replace(cfg, planner=replace(cfg.planner, n_candidates=int(n_candidates)))
            if fusion_rate is not None:
                cfg = replace(cfg, policy=replace(cfg.policy, fusion_rate=float(fusion_rate)))
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return cfg


def _section(parser: configparser.ConfigParser, name: str) -> dict[str, str]:
    return dict(parser.items(name)) if parser.has_section(name) else {}


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {source}: {e}") from None
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        paths_kv = _section(parser, "paths")
        extra = set(paths_kv) - {"scenes", "checkpoint", "out"}
        if extra:
            raise ConfigError(f"unknown [paths] keys: {sorted(extra)}")
        run = _section(parser, "run")
        extra = set(run) - {"seed", "n_train", "n_eval"}
        if extra:
            raise ConfigError(f"unknown [run] keys: {sorted(extra)}")
        pol = _section(parser, "policy")
        plan = _section(parser, "planner")
        for name, kv in (("policy", pol), ("planner", plan)):
            if "seed" in kv:
                raise ConfigError(f"[{name}] may not set seed; use [run] seed")
        sp = _section(parser, "sparsifier")
        extra = set(sp) - {"fusion_rate", "temperature"}
        if extra:
            raise ConfigError(f"unknown [sparsifier] keys: {sorted(extra)}")
        if {"fusion_rate", "temperature"} & set(pol):
            raise ConfigError("set fusion_rate and temperature in [sparsifier]")
        SparsifierConfig(**{k: float(v) for k, v in sp.items()})
        policy = PolicyConfig.from_dict({**pol, **sp})
        planner = RefineConfig.from_dict(plan)
        thresholds = Thresholds.from_mapping(_section(parser, "thresholds"))
        scorer = ScorerConfig.from_mapping(_section(parser, "scorer"), thresholds)
        bench_kv = _section(parser, "bench")
        extra = set(bench_kv) - {"d_model", "n_layers", "n_heads", "seq_lens", "fusion_rates"}
        if extra:
            raise ConfigError(f"unknown [bench] keys: {sorted(extra)}")
        bench = BenchConfig(
            **{k: int(v) for k, v in bench_kv.items() if k in ("d_model", "n_layers", "n_heads")},
            **({"seq_lens": _int_tuple(bench_kv["seq_lens"])} if "seq_lens" in bench_kv else {}),
            **({"fusion_rates": _float_tuple(bench_kv["fusion_rates"])} if "fusion_rates" in bench_kv else {}),
        )
        return RunConfig(
            paths=Paths(**paths_kv),
            seed=int(run.get("seed", 0)),
            n_train=int(run.get("n_train", 200)),
            n_eval=int(run.get("n_eval", 100)),
            policy=policy,
            planner=planner,
            thresholds=thresholds,
            scorer=scorer,
            bench=bench,
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(f"invalid value in {source}: {e}") from None


def load_config(path=None) -> RunConfig:
    """Parse ``path``, or the packaged defaults when ``path`` is None."""
    path = DEFAULT_INI if path is None else Path(path)
    if not path.is_file():
        raise MissingInputError(f"missing input: config file {path} does not exist")
    return parse_config(path.read_text(), str(path))


def dump_config(cfg: RunConfig) -> str:
    """INI text that :func:`parse_config` reads back to ``cfg``."""
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for k, v in values.items():
            lines.append(f"{k} = {' '.join(map(str, v)) if isinstance(v, list) else v}")
        lines.append("")
    return "\n".join(lines)
