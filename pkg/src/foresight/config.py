"""Run configuration: flat ``key = value`` text with ``#`` comments and dotted keys.

Every key has a type, a default and a check; cross-key constraints are
checked after parsing. Errors name the offending key. ``dump`` writes a
snapshot that parses back to the same configuration.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import DataConfig, GridConfig
from .env.episode import PerturbConfig
from .harness import EvalConfig
from .metrics import MetricWeights
from .pfg import SamplerConfig
from .planner import LossWeights, ModelConfig, Switches, TrainConfig
from .schedules import AnnealConfig, CondSourceDist, ConfigError, PFGConfig

SEED_PURPOSES = ("data", "init", "train", "sample")


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _unit(x):
    return 0.0 <= x <= 1.0


def _pos_list(xs):
    return len(xs) > 0 and all(x > 0 for x in xs)


def _any(_):
    return True


# key: (type, default, check, description of the check)
SCHEMA = {
    "seed": (int, 0, _nonneg, ">= 0"),
    "data.train_size": (int, 2000, _pos, "> 0"),
    "data.val_size": (int, 100, _pos, "> 0"),
    "data.T": (int, 8, _pos, "> 0"),
    "data.dt": (float, 0.5, _pos, "> 0"),
    "data.t_f": (float, 1.5, _pos, "> 0"),
    "data.no_future_fraction": (float, 0.1, _unit, "in [0, 1]"),
    "data.max_lateral": (float, 1.0, _nonneg, ">= 0"),
    "data.max_heading": (float, 0.1, _nonneg, ">= 0"),
    "data.restart_fraction": (float, 0.5, _unit, "in [0, 1]"),
    "data.grid": (int, 64, _pos, "> 0"),
    "data.resolution": (float, 1.0, _pos, "> 0"),
    "model.d": (int, 64, _pos, "> 0"),
    "model.heads": (int, 4, _pos, "> 0"),
    "model.K": (int, 16, _pos, "> 0"),
    "model.wm_layers": (int, 4, _pos, "> 0"),
    "model.dit_layers": (int, 5, _pos, "> 0"),
    "model.ffn_mult": (int, 8, _pos, "> 0"),
    "model.anchors": (int, 8, _pos, "> 0"),
    "model.S_train": (int, 100, _pos, "> 0"),
    "model.beta_start": (float, 1e-3, lambda x: 0 < x < 1, "in (0, 1)"),
    "model.beta_end": (float, 0.2, lambda x: 0 < x < 1, "in (0, 1)"),
    "train.batch_size": (int, 16, _pos, "> 0"),
    "train.lr": (float, 1e-4, _pos, "> 0"),
    "train.clip": (float, 1.0, _pos, "> 0"),
    "train.epochs": (int, 100, _pos, "> 0"),
    "train.max_steps": (int, 0, _nonneg, ">= 0 (0 = no limit)"),
    "train.keep_last": (int, 0, _nonneg, ">= 0 (0 = keep every epoch checkpoint)"),
    "train.anneal_rho_E": (float, 0.83, _unit, "in [0, 1]"),
    "train.anneal_slope": (float, 0.0, _nonneg, ">= 0 (0 = automatic)"),
    "train.p_gt": (float, 0.4, _unit, "in [0, 1]"),
    "train.p_kin": (float, 0.4, _unit, "in [0, 1]"),
    "train.p_null": (float, 0.2, _unit, "in [0, 1]"),
    "train.lambda_plan": (float, 10.0, _nonneg, ">= 0"),
    "train.lambda_bev": (float, 10.0, _nonneg, ">= 0"),
    "sample.steps": (int, 20, _pos, "> 0"),
    "sample.rho": (float, 0.7, lambda x: 0 < x <= 1, "in (0, 1]"),
    "sample.nu": (float, 0.3, lambda x: 0 <= x < 1, "in [0, 1)"),
    "sample.w_max_kin": (float, 1.5, _nonneg, ">= 0"),
    "sample.w_max_tw": (float, 2.5, _nonneg, ">= 0"),
    "sample.deterministic": (bool, False, _any, ""),
    "sample.proposals": (int, 100, _pos, "> 0"),
    "eval.scenes": (int, 100, _pos, "> 0"),
    "eval.sigma": (float, 1.0, _pos, "> 0"),
    "eval.perturb_lateral": (list, [-1.0, 0.0, 1.0], lambda xs: len(xs) > 0, "non-empty"),
    "eval.perturb_longitudinal": (list, [0.0, 0.0, 0.0], lambda xs: len(xs) > 0, "non-empty"),
    "eval.perturb_magnitude": (float, 1.0, _nonneg, ">= 0"),
    "switch.use_wm": (bool, True, _any, ""),
    "switch.use_wm_to_dit": (bool, True, _any, ""),
    "switch.use_interact": (bool, True, _any, ""),
    "switch.force_alpha_one": (bool, False, _any, ""),
    "switch.use_dspcfg": (bool, True, _any, ""),
    "switch.use_kinematic_extrap": (bool, True, _any, ""),
    "ablate.K": (list, [4.0, 16.0], _pos_list, "positive numbers"),
    "ablate.t_f": (list, [], lambda xs: all(x > 0 for x in xs), "positive numbers"),
    "ablate.rho_E": (list, [], lambda xs: all(0 <= x <= 1 for x in xs), "numbers in [0, 1]"),
    "ablate.variants": (str, "full,no_wm,no_guidance", _any, ""),
    "ablate.seeds": (int, 1, _pos, "> 0"),
}

SWITCH_KEYS = [k for k in SCHEMA if k.startswith("switch.")]
VARIANTS = ("full", "no_wm", "no_guidance", "no_interact", "no_kin", "force_alpha_one")


def _convert(key: str, typ, text: str):
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if typ is list:
            return [float(x) for x in text.replace(",", " ").split()]
        return typ(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ.__name__}") from None


def _format(typ, value) -> str:
    if typ is bool:
        return "true" if value else "false"
    if typ is list:
        return ", ".join(repr(float(x)) for x in value)
    if typ is float:
        return repr(float(value))
    return str(value)


def parse_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{key}: unknown configuration key ({source}:{n})")
        values[key] = _convert(key, SCHEMA[key][0], val)
    return values


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    # -- derived module configurations
    def seed_for(self, purpose: str) -> int:
        return derive_seed(self["seed"], purpose)

    @property
    def grid(self) -> GridConfig:
        return GridConfig(self["data.grid"], self["data.resolution"])

    def data(self, t_f: float | None = None) -> DataConfig:
        return DataConfig(self["data.T"], self["data.dt"], self["data.t_f"] if t_f is None else t_f,
                          self["data.no_future_fraction"], self["data.max_lateral"],
                          self["data.max_heading"], self["data.restart_fraction"], self.grid)

    def model(self, K: int | None = None) -> ModelConfig:
        return ModelConfig(self["model.d"], self["model.heads"], self["model.K"] if K is None else K,
                           self["data.T"], self["model.wm_layers"], self["model.dit_layers"],
                           self["model.ffn_mult"], self["data.grid"], self["model.anchors"],
                           self["model.S_train"], self["model.beta_start"], self["model.beta_end"])

    def switches(self) -> Switches:
        return Switches(**{k.split(".", 1)[1]: self[k] for k in SWITCH_KEYS})

    def train(self, rho_E: float | None = None) -> TrainConfig:
        slope = self["train.anneal_slope"] or None
        anneal = AnnealConfig(self["train.epochs"], self["train.anneal_rho_E"] if rho_E is None else rho_E, slope)
        return TrainConfig(self["train.batch_size"], self["train.lr"], self["train.clip"], self["train.epochs"],
                           anneal, CondSourceDist(self["train.p_gt"], self["train.p_kin"], self["train.p_null"]),
                           LossWeights(self["train.lambda_plan"], self["train.lambda_bev"]), self["data.dt"])

    def pfg(self) -> PFGConfig:
        return PFGConfig(self["sample.rho"], self["sample.nu"], self["sample.w_max_kin"], self["sample.w_max_tw"])

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self["sample.steps"], self.pfg(), self["sample.deterministic"], self["data.dt"])

    def evaluation(self, n_proposals: int | None = None) -> EvalConfig:
        perturb = PerturbConfig(tuple(self["eval.perturb_lateral"]), tuple(self["eval.perturb_longitudinal"]),
                                self["eval.perturb_magnitude"])
        P = self["sample.proposals"] if n_proposals is None else n_proposals
        return EvalConfig(P, self.sampler(), perturb, self["eval.sigma"], weights=MetricWeights())

    def variants(self) -> list[str]:
        return [v.strip() for v in self["ablate.variants"].split(",") if v.strip()]

    def replace(self, **updates) -> "RunConfig":
        """Copy with dotted keys given as ``a__b=value`` or via a dict; re-validated."""
        vals = dict(self.values)
        vals.update({k.replace("__", "."): v for k, v in updates.items()})
        return build(vals)

    def dump(self) -> str:
        return "".join(f"{k} = {_format(SCHEMA[k][0], self.values[k])}\n" for k in SCHEMA)


def derive_seed(root: int, purpose: str) -> int:
    if purpose not in SEED_PURPOSES:
        raise ValueError(f"unknown seed purpose {purpose!r}")
    ss = np.random.SeedSequence(int(root), spawn_key=(SEED_PURPOSES.index(purpose),))
    return int(ss.generate_state(1, np.uint32)[0])


_CROSS = [
    (("model.d", "model.heads"), lambda v: v["model.d"] % v["model.heads"] == 0,
     "model width must be divisible by the head count"),
    (("data.grid", "model.anchors"), lambda v: v["data.grid"] % v["model.anchors"] == 0,
     "grid size must be divisible by the anchor count"),
    (("model.beta_start", "model.beta_end"), lambda v: v["model.beta_start"] <= v["model.beta_end"],
     "beta schedule must be non-decreasing"),
    (("sample.nu", "sample.rho"), lambda v: v["sample.nu"] < v["sample.rho"], "nu must be below rho"),
    (("train.p_gt", "train.p_kin", "train.p_null"),
     lambda v: abs(v["train.p_gt"] + v["train.p_kin"] + v["train.p_null"] - 1.0) <= 1e-9,
     "conditioning-source probabilities must sum to 1"),
    (("switch.use_wm_to_dit",), lambda v: v["switch.use_wm"] or not v["switch.use_wm_to_dit"],
     "use_wm_to_dit requires use_wm"),
    (("switch.use_interact",), lambda v: v["switch.use_wm"] or not v["switch.use_interact"],
     "use_interact requires use_wm"),
    (("eval.perturb_lateral", "eval.perturb_longitudinal"),
     lambda v: len(v["eval.perturb_lateral"]) == len(v["eval.perturb_longitudinal"]),
     "perturbation lists must have equal length"),
    (("ablate.K",), lambda v: all(float(k).is_integer() for k in v["ablate.K"]), "query sizes must be integers"),
    (("ablate.variants",), lambda v: all(x.strip() in VARIANTS for x in v["ablate.variants"].split(",")
                                         if x.strip()), f"variants must be among {', '.join(VARIANTS)}"),
    (("data.t_f",), lambda v: abs(round(v["data.t_f"] * 10) - v["data.t_f"] * 10) < 1e-9,
     "future horizon must be a multiple of 0.1 s"),
    (("data.dt",), lambda v: abs(round(v["data.dt"] * 10) - v["data.dt"] * 10) < 1e-9,
     "plan step must be a multiple of 0.1 s"),
]


def build(values: dict) -> RunConfig:
    full = {}
    for key, (typ, default, check, what) in SCHEMA.items():
        v = values.get(key, default)
        if typ is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if typ is list:
            v = [float(x) for x in v]
        if not check(v):
            raise ConfigError(f"{key}: value {v!r} must be {what}")
        full[key] = v
    unknown = set(values) - set(SCHEMA)
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown configuration key")
    for keys, ok, msg in _CROSS:
        if not ok(full):
            raise ConfigError(f"{', '.join(keys)}: {msg}")
    cfg = RunConfig(full)
    # final guard: module constructors must accept everything
    cfg.data(), cfg.model(), cfg.switches(), cfg.train(), cfg.sampler(), cfg.evaluation()
    return cfg


def load(path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        path = Path(path)
        values = parse_text(path.read_text(), str(path))
    values.update(overrides or {})
    return build(values)


def default() -> RunConfig:
    return build({})
