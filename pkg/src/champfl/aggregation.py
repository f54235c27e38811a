"""Server-side aggregation rules over flat client parameter vectors.

Every rule takes the N client models of a round as an (N, K) stack (or a list
of K-vectors) and returns an :class:`AggregationOutcome`. Rules that need a
direction reference (AlignIns, RLR, FoolsGold) also take the previous global
model. Ties are always broken towards the lowest client index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError, InputError

RULES = (
    "fedavg",
    "median",
    "trimmed_mean",
    "krum",
    "multi_krum",
    "bulyan",
    "rfa",
    "align_ins",
    "rlr",
    "fools_gold",
)
SELECTING_RULES = ("krum", "multi_krum", "bulyan", "align_ins")


@dataclass(frozen=True)
class AggregatorConfig:
    """Rule name plus every rule's parameters; defaults are the evaluation settings."""

    rule: str = "fedavg"
    beta: float = 0.2
    f: int = 1
    m: int = 3
    max_iter: int = 10
    eps: float = 1e-10
    tol: float = 1e-5
    th: float = 0.1
    c: float = 1.0
    theta: float = 1.0
    lr: float = 1.0

    def __post_init__(self):
        if self.rule not in RULES:
            raise ConfigError(f"unknown aggregation rule {self.rule!r}; choose from {', '.join(RULES)}")
        if self.rule == "rfa" and self.max_iter < 1:
            raise ConfigError("rfa needs max_iter >= 1")
        if self.rule == "align_ins" and not 0 < self.th < 0.5:
            raise ConfigError("align_ins threshold must lie in (0, 0.5)")

    def validate(self, n: int) -> None:
        """Check the parameters against a concrete client count."""
        rule = self.rule
        if rule in ("trimmed_mean",) and n - 2 * _floor(self.beta * n) <= 0:
            raise ConfigError(f"beta={self.beta} trims every one of {n} clients")
        if rule in ("krum", "multi_krum", "bulyan") and n - self.f - 2 < 1:
            raise ConfigError(f"krum needs N - f - 2 >= 1 (N={n}, f={self.f})")
        if rule in ("multi_krum", "bulyan") and not 1 <= self.m <= n:
            raise ConfigError(f"m={self.m} must lie in [1, {n}]")
        if rule == "bulyan" and n - 2 * self.f < 1:
            raise ConfigError(f"bulyan needs N - 2f >= 1 (N={n}, f={self.f})")

    @classmethod
    def parse(cls, text: str) -> "AggregatorConfig":
        """Parse ``name[:k=v,...]``, e.g. ``bulyan:m=3,f=1``."""
        name, _, rest = text.partition(":")
        kwargs: dict = {}
        types = {f.name: f.type for f in fields(cls)}
        for item in filter(None, rest.split(",")):
            key, eq, value = item.partition("=")
            key = key.strip()
            if not eq or key not in types or key == "rule":
                raise ConfigError(f"bad defense parameter {item!r}")
            kwargs[key] = int(value) if types[key] in ("int", int) else float(value)
        return cls(rule=name.strip(), **kwargs)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(eq=False)
class AggregationOutcome:
    params: np.ndarray
    selected: tuple[int, ...] | None = None
    scores: np.ndarray | None = None
    iterations: int | None = None
    history: np.ndarray | None = field(default=None, repr=False)
    objective: list[float] | None = None


def _floor(x: float) -> int:
    return int(math.floor(x + 1e-9))


def _stack(updates) -> np.ndarray:
    if isinstance(updates, np.ndarray):
        x = updates.astype(np.float64, copy=False)
    else:
        if len(updates) == 0:
            raise InputError("no client updates")
        lengths = {np.shape(u) for u in updates}
        if len(lengths) != 1:
            raise InputError(f"client updates have different shapes: {sorted(lengths)}")
        x = np.stack([np.asarray(u, dtype=np.float64) for u in updates])
    if x.ndim != 2 or x.shape[0] == 0:
        raise InputError("updates must form a non-empty (N, K) stack")
    return x


def _reference(prev_global, k: int) -> np.ndarray:
    if prev_global is None:
        raise InputError("this rule needs the previous global model")
    ref = np.asarray(prev_global, dtype=np.float64)
    if ref.shape != (k,):
        raise InputError(f"previous global has shape {ref.shape}, expected ({k},)")
    return ref


def fed_avg(updates) -> AggregationOutcome:
    x = _stack(updates)
    return AggregationOutcome(x.mean(axis=0))


def median_agg(updates) -> AggregationOutcome:
    x = _stack(updates)
    return AggregationOutcome(np.median(x, axis=0))


def trimmed_mean_agg(updates, beta: float) -> AggregationOutcome:
    x = _stack(updates)
    n = len(x)
    b = _floor(beta * n)
    if n - 2 * b <= 0:
        raise ConfigError(f"beta={beta} trims all {n} values")
    return AggregationOutcome(np.sort(x, axis=0)[b : n - b].mean(axis=0))


def pairwise_sq_distances(x: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances from explicit differences (no Gram-matrix cancellation)."""
    n = len(x)
    d = np.zeros((n, n))
    for i in range(n):
        diff = x - x[i]
        d[i] = np.einsum("ij,ij->i", diff, diff)
    return d


def _krum_from_distances(d: np.ndarray, f: int) -> np.ndarray:
    n = len(d)
    nb = n - f - 2
    if nb < 1:
        raise ConfigError(f"krum needs N - f - 2 >= 1 (N={n}, f={f})")
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(d[i], i))
        scores[i] = others[:nb].sum()
    return scores


def krum_scores(updates, f: int) -> np.ndarray:
    """Sum of squared distances from each client to its N - f - 2 nearest peers."""
    return _krum_from_distances(pairwise_sq_distances(_stack(updates)), f)


def krum_agg(updates, f: int) -> AggregationOutcome:
    x = _stack(updates)
    scores = krum_scores(x, f)
    best = int(np.argmin(scores))
    return AggregationOutcome(x[best].copy(), selected=(best,), scores=scores)


def multi_krum_agg(updates, m: int, f: int) -> AggregationOutcome:
    x = _stack(updates)
    if not 1 <= m <= len(x):
        raise ConfigError(f"m={m} must lie in [1, {len(x)}]")
    scores = krum_scores(x, f)
    chosen = tuple(sorted(int(i) for i in np.argsort(scores, kind="stable")[:m]))
    return AggregationOutcome(x[list(chosen)].mean(axis=0), selected=chosen, scores=scores)


def bulyan_agg(updates, m: int | None, f: int, beta: float) -> AggregationOutcome:
    """Repeated Krum with removal picks the set, then a trimmed mean over it.

    The set size is ``m`` when given, otherwise N - 2f. Selection stops early
    once the shrinking pool no longer has N - f - 2 >= 1.
    """
    x = _stack(updates)
    n = len(x)
    if n - 2 * f < 1:
        raise ConfigError(f"bulyan needs N - 2f >= 1 (N={n}, f={f})")
    count = n - 2 * f if m is None else m
    if not 1 <= count <= n:
        raise ConfigError(f"bulyan selection size {count} outside [1, {n}]")
    d = pairwise_sq_distances(x)
    first_scores = _krum_from_distances(d, f)
    remaining = list(range(n))
    chosen: list[int] = []
    while len(chosen) < count:
        if len(remaining) - f - 2 < 1:
            break
        sub = d[np.ix_(remaining, remaining)]
        pick = remaining[int(np.argmin(_krum_from_distances(sub, f)))]
        chosen.append(pick)
        remaining.remove(pick)
    selected = tuple(sorted(chosen))
    trimmed = trimmed_mean_agg(x[list(selected)], beta)
    return AggregationOutcome(trimmed.params, selected=selected, scores=first_scores)


def weiszfeld_objective(v: np.ndarray, x: np.ndarray) -> float:
    return float(np.linalg.norm(x - v, axis=1).sum())


def rfa_agg(updates, max_iter: int = 10, eps: float = 1e-10, tol: float = 1e-5) -> AggregationOutcome:
    """Smoothed Weiszfeld iteration for the geometric median, started at the mean."""
    x = _stack(updates)
    if max_iter < 1:
        raise ConfigError("max_iter must be >= 1")
    v = x.mean(axis=0)
    objective = [weiszfeld_objective(v, x)]
    iterations = 0
    for _ in range(max_iter):
        w = 1.0 / np.maximum(eps, np.linalg.norm(x - v, axis=1))
        v_new = (w[:, None] * x).sum(axis=0) / w.sum()
        step = float(np.linalg.norm(v_new - v))
        v = v_new
        iterations += 1
        objective.append(weiszfeld_objective(v, x))
        if step < tol:
            break
    return AggregationOutcome(v, iterations=iterations, objective=objective)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def align_ins_agg(updates, prev_global, th: float = 0.1) -> AggregationOutcome:
    """Cosine alignment of each client's step with the mean step, trimmed on both ends.

    Scores tied with a trimming boundary are kept, so identical clients are
    never split arbitrarily.
    """
    x = _stack(updates)
    n, k = x.shape
    deltas = x - _reference(prev_global, k)
    direction = deltas.mean(axis=0)
    scores = np.array([_cosine(dn, direction) for dn in deltas])
    b = _floor(th * n)
    if n - 2 * b <= 0:
        raise ConfigError(f"th={th} trims all {n} clients")
    ordered = np.sort(scores)
    low, high = ordered[b], ordered[n - 1 - b]
    keep = tuple(int(i) for i in np.flatnonzero((scores >= low) & (scores <= high)))
    return AggregationOutcome(x[list(keep)].mean(axis=0), selected=keep, scores=scores)


def rlr_agg(updates, prev_global, theta: float = 1.0, lr: float = 1.0) -> AggregationOutcome:
    """Per-coordinate robust learning rate: flip the averaged step where sign agreement < theta."""
    x = _stack(updates)
    ref = _reference(prev_global, x.shape[1])
    deltas = x - ref
    agreement = np.abs(np.sign(deltas).sum(axis=0))
    rates = np.where(agreement >= theta, lr, -lr)
    return AggregationOutcome(ref + rates * deltas.mean(axis=0))


def foolsgold_weights(history: np.ndarray, kappa: float = 1.0) -> np.ndarray:
    """Canonical FoolsGold learning rates from accumulated per-client steps."""
    n = len(history)
    norms = np.linalg.norm(history, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = history / safe[:, None]
    cs = unit @ unit.T
    cs[norms == 0, :] = 0.0
    cs[:, norms == 0] = 0.0
    cs -= np.diag(np.diag(cs))
    maxcs = cs.max(axis=1)
    # pardoning: scale down similarity to clients that look more sybil-like
    for i in range(n):
        for j in range(n):
            if i != j and maxcs[i] < maxcs[j]:
                cs[i, j] *= maxcs[i] / maxcs[j]
    wv = np.clip(1.0 - cs.max(axis=1), 0.0, 1.0)
    wv[wv < 1e-9] = 0.0  # cos of identical directions can round to 1 - eps
    top = wv.max()
    if top <= 0:
        return np.zeros(n)
    wv = wv / top
    wv[wv == 1.0] = 0.99
    out = np.zeros(n)
    nz = wv > 0
    out[nz] = kappa * (np.log(wv[nz] / (1.0 - wv[nz])) + 0.5)
    return np.clip(out, 0.0, 1.0)


def fools_gold_agg(updates, history, prev_global, kappa: float = 1.0) -> AggregationOutcome:
    """FoolsGold over steps g_n - prev_global.

    ``history`` holds each client's summed steps from earlier rounds (None
    before the first round, in which case every weight is 1). The outcome
    carries the updated history.
    """
    x = _stack(updates)
    n, k = x.shape
    ref = _reference(prev_global, k)
    deltas = x - ref
    if history is None:
        weights = np.ones(n)
        new_history = deltas.copy()
    else:
        history = np.asarray(history, dtype=np.float64)
        if history.shape != (n, k):
            raise InputError(f"history shape {history.shape} does not match updates {(n, k)}")
        new_history = history + deltas
        weights = foolsgold_weights(new_history, kappa)
    params = ref + (weights[:, None] * deltas).sum(axis=0) / n
    return AggregationOutcome(params, scores=weights, history=new_history)


def aggregate(cfg: AggregatorConfig, updates, prev_global=None, history=None) -> AggregationOutcome:
    x = _stack(updates)
    cfg.validate(len(x))
    rule = cfg.rule
    if rule == "fedavg":
        return fed_avg(x)
    if rule == "median":
        return median_agg(x)
    if rule == "trimmed_mean":
        return trimmed_mean_agg(x, cfg.beta)
    if rule == "krum":
        return krum_agg(x, cfg.f)
    if rule == "multi_krum":
        return multi_krum_agg(x, cfg.m, cfg.f)
    if rule == "bulyan":
        return bulyan_agg(x, cfg.m, cfg.f, cfg.beta)
    if rule == "rfa":
        return rfa_agg(x, cfg.max_iter, cfg.eps, cfg.tol)
    if rule == "align_ins":
        return align_ins_agg(x, prev_global, cfg.th)
    if rule == "rlr":
        return rlr_agg(x, prev_global, cfg.theta, cfg.lr)
    return fools_gold_agg(x, history, prev_global)
