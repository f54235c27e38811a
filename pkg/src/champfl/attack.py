"""Malicious-client logic: proximity losses, the adaptive balance coefficient and poisoned training."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import BackdoorSpec
from .errors import ConfigError, InputError, NumericError

METRICS = ("euclidean", "cosine", "huber")
ATTACKS = ("none", "vanilla", "champ")
ALPHA_MODES = ("bsci", "asr")

# CLI aliases
_METRIC_ALIASES = {"l2": "euclidean", "euclidean": "euclidean", "cos": "cosine", "cosine": "cosine", "huber": "huber"}


def prox_value_and_grad(metric: "ProxMetric", params, reference) -> tuple[float, np.ndarray]:
    """Unweighted proximity of ``params`` to ``reference`` and its gradient in ``params``.

    euclidean: ||p - r||^2 / K
    cosine:    1 - cos(p, r)
    huber:     mean_k Huber_delta(p_k - r_k)
    """
    p = np.asarray(params, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if p.shape != r.shape:
        raise InputError(f"params {p.shape} and reference {r.shape} differ")
    k = p.size
    diff = p - r
    if metric.kind == "euclidean":
        return float(diff @ diff) / k, 2.0 * diff / k
    if metric.kind == "huber":
        d = metric.delta
        a = np.abs(diff)
        quad = a <= d
        value = np.where(quad, 0.5 * diff**2, d * (a - 0.5 * d))
        return float(value.sum()) / k, np.clip(diff, -d, d) / k
    # cosine
    np_, nr = np.linalg.norm(p), np.linalg.norm(r)
    if np_ == 0 or nr == 0:
        raise NumericError("cosine proximity undefined for a zero-norm vector")
    cos = float(p @ r) / (np_ * nr)
    dcos = r / (np_ * nr) - cos * p / np_**2
    return 1.0 - cos, -dcos


@dataclass(frozen=True)
class ProxMetric:
    """Camouflage distance used in the malicious objective.

    The normalised metric is multiplied by ``weight * K`` before alpha is
    applied, so for euclidean the term is ``weight * ||p - r||^2`` whatever the
    architecture. Plain SGD stays stable while ``2 * lr * alpha * weight < 2``.
    """

    kind: str = "euclidean"
    delta: float = 1.0
    weight: float = 0.5

    def __post_init__(self):
        if self.kind not in METRICS:
            raise ConfigError(f"unknown proximity metric {self.kind!r}")
        if self.delta <= 0:
            raise ConfigError("huber delta must be positive")
        if self.weight < 0:
            raise ConfigError("prox weight must be non-negative")

    def value_and_grad(self, params, reference):
        value, grad = prox_value_and_grad(self, params, reference)
        scale = self.weight * grad.size
        return scale * value, scale * grad

    def proximal_step(self, params, reference, step: float):
        """Exact minimiser of ``step * weighted_prox(x) + ||x - params||^2 / 2``, or None.

        Only the euclidean term has a closed form; training uses it so large
        alpha pulls towards the reference instead of overshooting.
        """
        if self.kind != "euclidean":
            return None
        c = 2.0 * self.weight * step
        return (params + c * reference) / (1.0 + c)

    @classmethod
    def parse(cls, text: str, weight: float | None = None) -> "ProxMetric":
        """``l2`` | ``cos`` | ``huber[:delta]``."""
        name, _, arg = text.partition(":")
        kind = _METRIC_ALIASES.get(name.strip())
        if kind is None:
            raise ConfigError(f"unknown proximity metric {text!r}")
        kwargs = {}
        if arg:
            if kind != "huber":
                raise ConfigError(f"{name} takes no parameter")
            kwargs["delta"] = float(arg)
        if weight is not None:
            kwargs["weight"] = weight
        return cls(kind, **kwargs)


@dataclass
class AdaptiveState:
    """Rolling side-channel history (most recent last) feeding the balance coefficient."""

    window: int = 3
    history: list[float] = field(default_factory=list)
    mode: str = "bsci"

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("window k must be >= 1")
        if self.mode not in ALPHA_MODES:
            raise ConfigError(f"unknown alpha mode {self.mode!r}")
        for v in self.history:
            _check_unit(v)

    def push(self, value: float) -> None:
        self.history.append(_check_unit(value))


def _check_unit(v: float) -> float:
    v = float(v)
    if not 0.0 <= v <= 1.0:
        raise InputError(f"side-channel value {v} outside [0, 1]")
    return v


def compute_alpha(state: AdaptiveState) -> float:
    """1 - mean of the last k signals; 1 (full camouflage) before any signal exists."""
    if not state.history:
        return 1.0
    recent = state.history[-state.window :]
    return min(1.0, max(0.0, 1.0 - sum(recent) / len(recent)))


def compute_alpha_asr(state: AdaptiveState) -> float:
    """Same rule, with the history holding ASR measurements instead of membership rates."""
    return compute_alpha(state)


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "none"
    backdoor: BackdoorSpec = field(default_factory=lambda: BackdoorSpec(source_class=0, target_class=1))
    malicious_ids: tuple[int, ...] = (0,)
    metric: ProxMetric = field(default_factory=ProxMetric)
    window: int = 3
    mode: str = "bsci"
    poison_fraction: float = 1.0

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise ConfigError(f"unknown attack {self.kind!r}")
        if self.mode not in ALPHA_MODES:
            raise ConfigError(f"unknown alpha mode {self.mode!r}")
        if self.window < 1:
            raise ConfigError("window k must be >= 1")
        object.__setattr__(self, "malicious_ids", tuple(sorted(set(int(i) for i in self.malicious_ids))))

    def validate(self, n_clients: int) -> None:
        if self.kind == "none":
            return
        if not self.malicious_ids:
            raise ConfigError("an attack needs at least one malicious client")
        if len(self.malicious_ids) > n_clients or not all(0 <= i < n_clients for i in self.malicious_ids):
            raise ConfigError(f"malicious ids {self.malicious_ids} invalid for {n_clients} clients")

    @property
    def active_ids(self) -> tuple[int, ...]:
        return () if self.kind == "none" else self.malicious_ids


def malicious_round(global_model: nn.Model, poisoned_data, alpha: float, metric: ProxMetric, epochs: int, lr: float, batch: int, seed, context: str = "") -> nn.Model:
    """Local training on poisoned data with loss CE + alpha * prox(params, previous global)."""
    if alpha < 0:
        raise InputError("alpha must be non-negative")
    composite = (alpha, metric, global_model.params) if alpha != 0 else None
    return nn.train_local(global_model, poisoned_data, epochs, lr, batch, composite=composite, seed=seed, context=context)
