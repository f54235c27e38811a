"""Federated training loop with a backdoor adversary and a pluggable aggregation rule.

Each round: broadcast the global model, let every client train locally
(malicious clients first probe the broadcast model and set their camouflage
weight), aggregate, evaluate. Only parameter vectors reach the aggregator.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import nn
from .aggregation import SELECTING_RULES, AggregatorConfig, aggregate
from .attack import AdaptiveState, AttackConfig, ProxMetric, compute_alpha, compute_alpha_asr, malicious_round
from .bsci import BsciConfig, run_bsci_round
from .data import BackdoorSpec, Dataset, backdoor_testset, gen_synthetic, load_idx, partition_iid, poison_dataset, train_test_split
from .errors import ConfigError, InputError
from .seeding import BSCI, DATA, INIT, LOCAL, PARTITION, POISON, derive
from .svm import SvmConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a run; serialises to/from JSON."""

    n_clients: int = 10
    rounds: int = 50
    local_epochs: int = 5
    lr: float = 0.1
    batch: int = 64
    model: nn.ModelSpec = field(default_factory=lambda: nn.ModelSpec("fmnist_cnn", (1, 28, 28)))
    dataset: str = "synthetic:10x1200"
    test_dataset: str | None = None
    train_size: int | None = None
    test_fraction: float = 1 / 6
    synthetic_noise: float = 0.35
    synthetic_overlap: float = 0.0
    synthetic_label_noise: float = 0.0
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: AggregatorConfig = field(default_factory=AggregatorConfig)
    bsci: BsciConfig = field(default_factory=BsciConfig)
    eval_every: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.n_clients < 1:
            raise ConfigError("need at least one client")
        if self.rounds < 1 or self.local_epochs < 1 or self.batch < 1:
            raise ConfigError("rounds, local_epochs and batch must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        self.attack.validate(self.n_clients)
        self.defense.validate(self.n_clients)
        if self.attack.kind != "none":
            self.attack.backdoor.check_fits(self.model.input_shape)

    # ---- serialisation

    def to_dict(self) -> dict:
        atk = self.attack
        return {
            "n_clients": self.n_clients,
            "rounds": self.rounds,
            "local_epochs": self.local_epochs,
            "lr": self.lr,
            "batch": self.batch,
            "model": self.model.to_dict(),
            "dataset": self.dataset,
            "test_dataset": self.test_dataset,
            "train_size": self.train_size,
            "test_fraction": self.test_fraction,
            "synthetic_noise": self.synthetic_noise,
            "synthetic_overlap": self.synthetic_overlap,
            "synthetic_label_noise": self.synthetic_label_noise,
            "attack": {
                "kind": atk.kind,
                "backdoor": {
                    "source_class": atk.backdoor.source_class,
                    "target_class": atk.backdoor.target_class,
                    "size": atk.backdoor.size,
                    "pixel_value": atk.backdoor.pixel_value,
                    "origin": list(atk.backdoor.origin),
                    "mode": atk.backdoor.mode,
                },
                "malicious_ids": list(atk.malicious_ids),
                "metric": {"kind": atk.metric.kind, "delta": atk.metric.delta, "weight": atk.metric.weight},
                "window": atk.window,
                "mode": atk.mode,
                "poison_fraction": atk.poison_fraction,
            },
            "defense": self.defense.to_dict(),
            "bsci": {
                "p_levels": list(self.bsci.p_levels),
                "ref_epochs": self.bsci.ref_epochs,
                "ref_init": self.bsci.ref_init,
                "svm": {f.name: getattr(self.bsci.svm, f.name) for f in fields(SvmConfig)},
            },
            "eval_every": self.eval_every,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        kwargs = {k: d[k] for k in (f.name for f in fields(cls)) if k in d and k not in ("model", "attack", "defense", "bsci")}
        if "model" in d:
            kwargs["model"] = nn.ModelSpec.from_dict(d["model"])
        if "attack" in d:
            a = dict(d["attack"])
            if "backdoor" in a:
                b = dict(a["backdoor"])
                if "origin" in b:
                    b["origin"] = tuple(b["origin"])
                a["backdoor"] = BackdoorSpec(**b)
            if "metric" in a:
                a["metric"] = ProxMetric(**a["metric"])
            if "malicious_ids" in a:
                a["malicious_ids"] = tuple(a["malicious_ids"])
            kwargs["attack"] = AttackConfig(**a)
        if "defense" in d:
            kwargs["defense"] = AggregatorConfig(**d["defense"])
        if "bsci" in d:
            b = dict(d["bsci"])
            if "svm" in b:
                b["svm"] = SvmConfig(**b["svm"])
            if "p_levels" in b:
                b["p_levels"] = tuple(b["p_levels"])
            kwargs["bsci"] = BsciConfig(**b)
        return cls(**kwargs)

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def fmnist_profile(**overrides) -> ExperimentConfig:
    """Fashion-MNIST regime: CNN, T=50, lr=0.1, k=3."""
    base = ExperimentConfig(rounds=50, lr=0.1, model=nn.ModelSpec("fmnist_cnn", (1, 28, 28)), attack=AttackConfig(window=3))
    return replace(base, **overrides)


def cifar_profile(**overrides) -> ExperimentConfig:
    """CIFAR-10 regime: AlexNet, T=100, lr=0.01, k=5."""
    base = ExperimentConfig(
        rounds=100,
        lr=0.01,
        model=nn.ModelSpec("cifar_alexnet", (3, 32, 32)),
        attack=AttackConfig(window=5),
    )
    return replace(base, **overrides)


def desk_profile(**overrides) -> ExperimentConfig:
    """CPU-sized run: 10 clients over 10k synthetic images, 20 rounds, small MLP.

    A fifth of the labels are noisy so accuracy saturates near 80%, as it does
    for Fashion-MNIST, instead of the fixture being perfectly separable.
    """
    base = ExperimentConfig(
        n_clients=10,
        rounds=20,
        local_epochs=5,
        lr=0.2,
        batch=16,
        model=nn.ModelSpec("mlp", (1, 12, 12), classes=10, hidden=(64,)),
        dataset="synthetic:10x1200",
        synthetic_label_noise=0.2,
        train_size=10_000,
        test_fraction=1 / 6,
        attack=AttackConfig(kind="none", backdoor=BackdoorSpec(source_class=0, target_class=1, size=3), window=3),
        defense=AggregatorConfig("fedavg"),
        seed=0,
    )
    return replace(base, **overrides)


@dataclass
class RoundRecord:
    t: int
    benign_acc: float | None
    asr: float | None
    v: float | None = None
    alpha: float | None = None
    selected: list[int] | None = None
    scores: list[float] | None = None
    wall_time: float = 0.0

    def to_json(self) -> dict:
        return {
            "t": self.t,
            "benign_acc": self.benign_acc,
            "asr": self.asr,
            "v": self.v,
            "alpha": self.alpha,
            "selected": self.selected,
            "scores": self.scores,
        }


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Train/test pair for ``cfg.dataset``; ``idx:<img>,<lbl>`` or ``synthetic:<classes>x<per_class>``."""
    kind, _, arg = cfg.dataset.partition(":")
    if kind == "synthetic":
        try:
            classes, per_class = (int(v) for v in arg.lower().split("x"))
        except ValueError:
            raise InputError(f"bad synthetic dataset spec {cfg.dataset!r}") from None
        full = gen_synthetic(derive(cfg.seed, DATA), classes, per_class, cfg.model.input_shape, noise=cfg.synthetic_noise, overlap=cfg.synthetic_overlap, label_noise=cfg.synthetic_label_noise)
    elif kind == "idx":
        paths = arg.split(",")
        if len(paths) != 2:
            raise InputError(f"idx dataset needs '<images>,<labels>', got {arg!r}")
        for p in paths:
            if not Path(p).exists():
                raise InputError(f"dataset file not found: {p}")
        full = load_idx(*paths, class_count=cfg.model.classes)
    else:
        raise InputError(f"unknown dataset kind {kind!r}")

    if cfg.test_dataset:
        train = full
        test = load_datasets(replace(cfg, dataset=cfg.test_dataset, test_dataset=None, train_size=None, test_fraction=0.0))[0]
    else:
        train, test = train_test_split(full, cfg.test_fraction, derive(cfg.seed, DATA, 1))
    if cfg.train_size is not None and cfg.train_size < len(train):
        keep = np.sort(np.random.default_rng(derive(cfg.seed, DATA, 2)).permutation(len(train))[: cfg.train_size])
        train = train.subset(keep)
    if train.shape != cfg.model.input_shape:
        raise InputError(f"dataset images {train.shape} do not match model input {cfg.model.input_shape}")
    return train, test


def evaluate(model: nn.Model, clean_test: Dataset, backdoor_test: Dataset | None, target_class: int) -> tuple[float, float | None]:
    """Clean accuracy and the fraction of triggered samples sent to ``target_class``."""
    if len(clean_test) == 0:
        raise InputError("empty clean test set")
    acc = nn.accuracy(model, clean_test.images, clean_test.labels)
    if backdoor_test is None:
        return acc, None
    if len(backdoor_test) == 0:
        raise InputError("empty backdoor test set")
    asr = float(np.mean(nn.predict(model, backdoor_test.images) == target_class))
    return acc, asr


def _local_asr(model: nn.Model, probe: Dataset, target: int) -> float:
    return float(np.mean(nn.predict(model, probe.images) == target))


def run_experiment(cfg: ExperimentConfig, on_round=None) -> tuple[list[RoundRecord], nn.Model]:
    """Run ``cfg.rounds`` rounds; fully determined by ``cfg.seed``.

    ``on_round(record)`` is called after every round (used for streaming output).
    """
    cfg.validate()
    spec = cfg.model
    atk = cfg.attack
    bd = atk.backdoor
    malicious = set(atk.active_ids)

    train, test = load_datasets(cfg)
    shards = partition_iid(train, cfg.n_clients, derive(cfg.seed, PARTITION))
    backdoor_test = backdoor_testset(test, bd) if bd.source_class < test.class_count and np.any(test.labels == bd.source_class) else None

    poisoned = {cid: poison_dataset(shards[cid], bd, atk.poison_fraction, derive(cfg.seed, POISON, cid)) for cid in sorted(malicious)}
    attacker_data = None
    if malicious:
        own = [shards[cid] for cid in sorted(malicious)]
        attacker_data = Dataset(np.concatenate([d.images for d in own]), np.concatenate([d.labels for d in own]), train.class_count)
        attacker_probe = backdoor_testset(attacker_data, bd)

    global_model = nn.init_model(spec, derive(cfg.seed, INIT))
    initial_model = global_model
    state = AdaptiveState(window=atk.window, mode=atk.mode)
    fg_history = None
    records: list[RoundRecord] = []

    for t in range(1, cfg.rounds + 1):
        started = time.perf_counter()
        ctx = f"round {t}"
        v = alpha = None
        if atk.kind == "champ":
            # round 1 probes the untrained initial model, which carries no signal
            if t > 1:
                if atk.mode == "bsci":
                    sig = run_bsci_round(
                        global_model, attacker_data, cfg.bsci, bd, derive(cfg.seed, BSCI, t),
                        lr=cfg.lr, batch=cfg.batch, round=t, initial_model=initial_model,
                    )  # fmt: skip
                    v = sig.v
                else:
                    v = _local_asr(global_model, attacker_probe, bd.target_class)
                state.push(v)
            alpha = compute_alpha(state) if atk.mode == "bsci" else compute_alpha_asr(state)

        updates = np.empty((cfg.n_clients, spec.num_params))
        for cid in range(cfg.n_clients):
            seed = derive(cfg.seed, LOCAL, t, cid)
            cctx = f"{ctx} client {cid}"
            if cid in malicious:
                a = alpha if atk.kind == "champ" else 0.0
                local = malicious_round(global_model, poisoned[cid], a, atk.metric, cfg.local_epochs, cfg.lr, cfg.batch, seed, context=cctx)
            else:
                local = nn.train_local(global_model, shards[cid], cfg.local_epochs, cfg.lr, cfg.batch, seed=seed, context=cctx)
            updates[cid] = local.params

        outcome = aggregate(cfg.defense, updates, prev_global=global_model.params, history=fg_history)
        fg_history = outcome.history
        global_model = nn.Model(spec, outcome.params)

        acc = asr = None
        if t % cfg.eval_every == 0 or t == cfg.rounds:
            acc, asr = evaluate(global_model, test, backdoor_test, bd.target_class)
        rec = RoundRecord(
            t=t,
            benign_acc=acc,
            asr=asr,
            v=v,
            alpha=alpha,
            selected=list(outcome.selected) if outcome.selected is not None else None,
            scores=[float(s) for s in outcome.scores] if outcome.scores is not None else None,
            wall_time=time.perf_counter() - started,
        )
        records.append(rec)
        log.info("round %d acc=%s asr=%s v=%s alpha=%s selected=%s", t, acc, asr, v, alpha, rec.selected)
        if on_round is not None:
            on_round(rec)
    return records, global_model


def krum_trace(records, malicious_id: int, rule: str) -> list[dict]:
    """Per-round score, rank (1 = most trusted) and selection flag of one client.

    Empty for rules that report no selection.
    """
    if rule not in SELECTING_RULES:
        return []
    trace = []
    for rec in records:
        if rec.selected is None or rec.scores is None:
            continue
        scores = np.asarray(rec.scores)
        # krum-family scores: lower is better; alignment scores: higher is better
        order = np.argsort(-scores if rule == "align_ins" else scores, kind="stable")
        rank = int(np.flatnonzero(order == malicious_id)[0]) + 1
        trace.append(
            {"t": rec.t, "score": float(scores[malicious_id]), "rank": rank, "selected": malicious_id in rec.selected}
        )
    return trace
