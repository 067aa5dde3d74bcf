"""Run configuration schema and builders for environments and policies.

A run is described by one JSON document::

    {
      "price_cap": 6.0,
      "horizon": 6300,
      "checkpoints": [1500, 2000, 3100, 4000, 5000, 6300],
      "replications": 10,
      "seed": 0,
      "env": {"noise": {"family": "trunc_poly", "m": 2},
              "covariates": {"kind": "iid_independent", "d": 3, "m": 2}},
      "policies": [{"name": "semi_param", "m": 2}]
    }

Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import env as envmod
from .errors import ConfigError
from .policies import (
    AdaptivePolicy,
    KLBanditPolicy,
    OraclePolicy,
    Policy,
    RMLP2Policy,
    SemiParametricPolicy,
    lipschitz_policy,
)

DEFAULT_CHECKPOINTS = (1500, 2000, 3100, 4000, 5000, 6300)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NoiseConfig(_Strict):
    family: Literal["trunc_poly", "uniform"] = "trunc_poly"
    m: int = 2


class CovariateConfig(_Strict):
    kind: Literal["iid_independent", "iid_dependent", "var_mixing"] = "iid_independent"
    d: int = Field(3, ge=1)
    m: int = 2
    burn_in: int = Field(envmod.VAR_BURN_IN, ge=0)


class EnvConfig(_Strict):
    alpha0: float = 3.0
    beta0: Optional[list[float]] = None
    noise: NoiseConfig = NoiseConfig()
    covariates: CovariateConfig = CovariateConfig()


class PolicyConfig(_Strict):
    name: Literal["semi_param", "lipschitz", "adaptive", "rmlp2", "kl_bandit", "oracle"]
    label: Optional[str] = None
    ell0: int = Field(200, ge=1)
    m: int = 2
    mode: Literal["finite", "supersmooth"] = "finite"
    c_b: float = Field(3.0, gt=0)
    alpha: float = Field(1.0, gt=0)
    d_phi: float = Field(1.0, gt=0)
    c_kappa: float = Field(1.0, gt=0)
    sigma: float = Field(0.25, gt=0)
    candidates: list[int] = [0, 2, 4, 6]
    bandwidths: Optional[list[float]] = None
    search_interval: tuple[float, float] = (-1.0, 1.0)

    @model_validator(mode="after")
    def _fill_label(self):
        if self.label is None:
            self.label = self.name
        for m in self.candidates:
            if m not in (0, 2, 4, 6):
                raise ValueError(f"candidate order {m} not in {{0, 2, 4, 6}}")
        return self


class RunConfig(_Strict):
    price_cap: float = Field(gt=0)
    horizon: int = Field(ge=1)
    env: EnvConfig = EnvConfig()
    policies: list[PolicyConfig] = Field(default_factory=lambda: [PolicyConfig(name="semi_param")])
    checkpoints: Optional[list[int]] = None
    replications: int = Field(10, ge=1)
    seed: int = 0
    log_power: Optional[float] = None
    workers: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if self.checkpoints is None:
            self.checkpoints = [c for c in DEFAULT_CHECKPOINTS if c <= self.horizon] or [self.horizon]
        cps = self.checkpoints
        if cps != sorted(set(cps)):
            raise ValueError("checkpoints must be strictly increasing")
        if cps and (cps[0] < 1 or cps[-1] > self.horizon):
            raise ValueError(f"checkpoints must lie in [1, {self.horizon}]")
        labels = [p.label for p in self.policies]
        if len(labels) != len(set(labels)):
            raise ValueError(f"policy labels must be unique, got {labels}")
        return self

    def resolved_json(self) -> str:
        return self.model_dump_json(indent=2, exclude={"workers"}) + "\n"


def _format_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        if err["type"] == "missing":
            lines.append(f"missing required key `{loc}`")
        elif err["type"] == "extra_forbidden":
            lines.append(f"unknown key `{loc}`")
        else:
            lines.append(f"`{loc}`: {err['msg']}")
    return "; ".join(lines)


def parse_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from None


def load_config(path: str | Path) -> RunConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return parse_config(data)


def build_env(cfg: RunConfig) -> envmod.MarketEnv:
    e = cfg.env
    if e.noise.family == "uniform":
        noise = envmod.uniform_noise()
    else:
        noise = envmod.trunc_poly_noise(e.noise.m)
    c = e.covariates
    if c.kind == "iid_independent":
        cov = envmod.iid_independent(c.d, c.m)
    elif c.kind == "iid_dependent":
        cov = envmod.iid_dependent(c.d, c.m)
    else:
        cov = envmod.var_mixing(c.d, c.m, burn_in=c.burn_in)
    beta = None if e.beta0 is None else np.asarray(e.beta0, dtype=float)
    return envmod.default_env(noise, cov, alpha0=e.alpha0, beta0=beta, price_cap=cfg.price_cap)


def build_policy(
    spec: PolicyConfig, env: envmod.MarketEnv, rng: np.random.Generator, horizon: int
) -> Policy:
    d, cap = env.d, env.price_cap
    if spec.name == "semi_param":
        return SemiParametricPolicy(
            d, cap, rng, ell0=spec.ell0, m=spec.m, mode=spec.mode, c_b=spec.c_b,
            alpha=spec.alpha, d_phi=spec.d_phi, c_kappa=spec.c_kappa,
            search_interval=spec.search_interval,
        )
    if spec.name == "lipschitz":
        return lipschitz_policy(d, cap, rng, ell0=spec.ell0, c_b=spec.c_b)
    if spec.name == "adaptive":
        return AdaptivePolicy(
            d, cap, rng, candidates=spec.candidates, bandwidths=spec.bandwidths,
            ell0=spec.ell0, c_b=spec.c_b, search_interval=spec.search_interval,
        )
    if spec.name == "rmlp2":
        return RMLP2Policy(d, cap, rng, ell0=spec.ell0, sigma=spec.sigma, search_interval=spec.search_interval)
    if spec.name == "kl_bandit":
        return KLBanditPolicy(cap, horizon)
    return OraclePolicy(env)


def benchmark_slope(spec: PolicyConfig) -> float | None:
    """Theoretical regret exponent for policies that have one."""
    if spec.name == "semi_param":
        if spec.mode == "supersmooth":
            return 0.5
        return (2 * spec.m + 1) / (4 * spec.m - 1)
    if spec.name == "lipschitz":
        return 0.75
    return None


def default_log_power(spec: PolicyConfig) -> float:
    return 1.0 if spec.name == "lipschitz" else 2.0
