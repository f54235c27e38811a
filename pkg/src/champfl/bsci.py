"""Backdoor side-channel inference.

The attacker trains reference models on its own data poisoned at graded
levels, fits a membership classifier on their output vectors for triggered
source-class samples (poisoned reference = member), then asks that classifier
about the published global model. The fraction of "member" answers is v_t.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import BackdoorSpec, Dataset, backdoor_testset, poison_dataset
from .errors import ConfigError, InputError
from .seeding import derive
from .svm import MembershipClassifier, SvmConfig, fit_svm

REF_INITS = ("global", "initial")


@dataclass(frozen=True)
class BsciConfig:
    p_levels: tuple[float, ...] = (0.3, 0.2, 0.1, 0.0, 0.0, 0.0)
    ref_epochs: int = 5
    ref_init: str = "initial"
    svm: SvmConfig = field(default_factory=SvmConfig)

    def __post_init__(self):
        levels = tuple(float(p) for p in self.p_levels)
        object.__setattr__(self, "p_levels", levels)
        if not levels:
            raise ConfigError("at least one reference level is required")
        if any(not 0.0 <= p <= 1.0 for p in levels):
            raise ConfigError("poison levels must lie in [0, 1]")
        if not any(p == 0 for p in levels) or not any(p > 0 for p in levels):
            raise ConfigError("need at least one clean (p=0) and one poisoned (p>0) reference level")
        if self.ref_epochs < 0:
            raise ConfigError("ref_epochs must be >= 0")
        if self.ref_init not in REF_INITS:
            raise ConfigError(f"ref_init must be one of {REF_INITS}")

    @property
    def R(self) -> int:
        return len(self.p_levels)

    @classmethod
    def parse(cls, text: str) -> "BsciConfig":
        """``R=6,p=0.3;0.2;0.1;0;0;0,epochs=5,degree=3,C=1,tol=0.001,init=initial``.

        The p list may also be colon- or space-separated; R is checked against it.
        """
        opts: dict = {}
        svm_opts: dict = {}
        r = None
        for item in _split_opts(text):
            key, _, value = item.partition("=")
            key = key.strip()
            if key == "R":
                r = int(value)
            elif key == "p":
                opts["p_levels"] = tuple(float(v) for v in value.replace(";", " ").replace(":", " ").split())
            elif key == "epochs":
                opts["ref_epochs"] = int(value)
            elif key == "init":
                opts["ref_init"] = value.strip()
            elif key == "degree":
                svm_opts["degree"] = int(value)
            elif key in ("C", "tol", "coef0"):
                svm_opts[key] = float(value)
            elif key == "gamma":
                svm_opts["gamma"] = value if value == "scale" else float(value)
            else:
                raise ConfigError(f"unknown bsci option {key!r}")
        cfg = cls(**opts, svm=SvmConfig(**svm_opts))
        if r is not None and r != cfg.R:
            raise ConfigError(f"R={r} but {cfg.R} poison levels given")
        return cfg


def _split_opts(text: str) -> list[str]:
    # commas separate options, but a p=... list may itself use commas
    items: list[str] = []
    for part in filter(None, (t.strip() for t in text.split(","))):
        if "=" in part or not items:
            items.append(part)
        else:
            items[-1] += ";" + part
    return items


@dataclass(frozen=True)
class SideChannelSignal:
    v: float
    round: int
    sample_count: int


def split_reference(data: Dataset, r: int, seed) -> list[Dataset]:
    """Disjoint near-equal shards, one per reference model."""
    if r < 1:
        raise InputError("R must be >= 1")
    if len(data) < r:
        raise InputError(f"{len(data)} samples cannot feed {r} reference models")
    order = np.random.default_rng(seed).permutation(len(data))
    return [data.subset(np.sort(part)) for part in np.array_split(order, r)]


def train_reference_models(init: nn.Model, shards, p_levels, spec: BackdoorSpec, ref_epochs: int, lr: float, batch: int, seed) -> list[tuple[nn.Model, bool]]:
    if len(shards) != len(p_levels):
        raise InputError(f"{len(shards)} shards but {len(p_levels)} poison levels")
    out = []
    for r, (shard, p) in enumerate(zip(shards, p_levels)):
        poisoned = poison_dataset(shard, spec, p, derive(seed, r, 0))
        model = nn.train_local(init, poisoned, ref_epochs, lr, batch, seed=derive(seed, r, 1), context=f"reference model {r}")
        out.append((model, p > 0))
    return out


def collect_attack_dataset(ref_models, backdoored_samples) -> tuple[np.ndarray, np.ndarray]:
    """Softmax outputs of every reference model on every triggered sample, with membership bits."""
    images = backdoored_samples.images if isinstance(backdoored_samples, Dataset) else np.asarray(backdoored_samples)
    zs, ms = [], []
    for model, poisoned in ref_models:
        z = nn.predict_proba(model, images)
        zs.append(z)
        ms.append(np.full(len(z), int(poisoned)))
    return np.concatenate(zs), np.concatenate(ms)


def train_membership_classifier(records, svm: SvmConfig = SvmConfig()) -> MembershipClassifier:
    z, m = records
    return fit_svm(z, m, svm)


def infer_v(global_model: nn.Model, backdoored_samples, clf: MembershipClassifier, round: int = 0) -> SideChannelSignal:
    images = backdoored_samples.images if isinstance(backdoored_samples, Dataset) else np.asarray(backdoored_samples)
    if len(images) == 0:
        raise InputError("no backdoored samples to probe with")
    members = clf.predict(nn.predict_proba(global_model, images))
    return SideChannelSignal(v=float(members.sum()) / len(members), round=round, sample_count=len(members))


def run_bsci_round(global_model: nn.Model, malicious_data: Dataset, config: BsciConfig, spec: BackdoorSpec, seed, lr: float, batch: int, round: int = 0, initial_model: nn.Model | None = None) -> SideChannelSignal:
    """Fresh reference models and classifier, then probe ``global_model``.

    With ``config.ref_init == "initial"`` the references start from
    ``initial_model`` (the first global model the attacker received);
    otherwise they fine-tune the probed global model itself.
    """
    probe = backdoor_testset(malicious_data, spec)
    if config.ref_init == "initial":
        if initial_model is None:
            raise InputError("ref_init='initial' needs the initial global model")
        init = initial_model
    else:
        init = global_model
    shards = split_reference(malicious_data, config.R, derive(seed, 0))
    refs = train_reference_models(init, shards, config.p_levels, spec, config.ref_epochs, lr, batch, derive(seed, 1))
    clf = train_membership_classifier(collect_attack_dataset(refs, probe), config.svm)
    return infer_v(global_model, probe, clf, round=round)


# --------------------------------------------------------------------------- leakage experiment


@dataclass(frozen=True)
class LeakageConfig:
    """Centralised shadow-model MIA, with and without a trigger on the source class.

    Labels are left unchanged unless ``relabel`` is set: the question is only
    whether the trigger shifts the output distribution enough to leak membership.
    """

    classes: int = 10
    per_class: int = 600
    input_shape: tuple[int, int, int] = (1, 12, 12)
    synthetic_noise: float = 0.35
    label_noise: float = 0.2
    hidden: tuple[int, ...] = (64,)
    epochs: int = 10
    lr: float = 0.1
    batch: int = 64
    shadows: int = 2
    backdoor: BackdoorSpec = field(default_factory=lambda: BackdoorSpec(source_class=0, target_class=1))
    relabel: bool = False
    svm: SvmConfig = field(default_factory=SvmConfig)
    seed: int = 0

    def __post_init__(self):
        if self.shadows < 1:
            raise ConfigError("need at least one shadow model")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")


@dataclass(frozen=True)
class MiaResult:
    confusion: tuple[tuple[int, int], tuple[int, int]]  # rows: true out/in, cols: predicted out/in
    roc: tuple[tuple[float, float], ...]  # (fpr, tpr), from (0, 0) to (1, 1)
    auc: float
    n_in: int
    n_out: int

    def to_dict(self) -> dict:
        return {"confusion": [list(r) for r in self.confusion], "roc": [list(p) for p in self.roc], "auc": self.auc, "n_in": self.n_in, "n_out": self.n_out}


def roc_curve(scores, labels) -> tuple[tuple[float, float], ...]:
    """ROC points sweeping the threshold from +inf down; tied scores move together."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = int(labels.sum()), int((~labels).sum())
    if pos == 0 or neg == 0:
        raise InputError("ROC needs both positive and negative samples")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    pts = [(0.0, 0.0)] + [(fp[i] / neg, tp[i] / pos) for i in last]
    return tuple((float(a), float(b)) for a, b in pts)


def auc_from_roc(roc) -> float:
    x = np.array([p[0] for p in roc])
    y = np.array([p[1] for p in roc])
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def _mia_condition(cfg: LeakageConfig, parts, backdoored: bool, seed) -> MiaResult:
    from .data import stamp

    spec = nn.ModelSpec("mlp", cfg.input_shape, classes=cfg.classes, hidden=cfg.hidden)
    bd = cfg.backdoor

    def prepare(train: Dataset) -> Dataset:
        if not backdoored:
            return train
        src = train.labels == bd.source_class
        images = train.images.copy()
        images[src] = stamp(images[src], bd)
        labels = np.where(src, bd.target_class, train.labels) if cfg.relabel else train.labels
        return Dataset(images, labels, train.class_count)

    def probe(model, train: Dataset, held: Dataset):
        # members: the model's own (possibly triggered) source samples; non-members: unseen clean ones
        members = prepare(train).images[train.labels == bd.source_class]
        outsiders = held.images[held.labels == bd.source_class]
        z = np.concatenate([nn.predict_proba(model, members), nn.predict_proba(model, outsiders)])
        m = np.r_[np.ones(len(members), dtype=np.int64), np.zeros(len(outsiders), dtype=np.int64)]
        return z, m

    models = []
    for i, (train, held) in enumerate(parts):
        init = nn.init_model(spec, derive(seed, i, 0))
        models.append(nn.train_local(init, prepare(train), cfg.epochs, cfg.lr, cfg.batch, seed=derive(seed, i, 1)))

    target, shadows = (models[0], parts[0]), list(zip(models[1:], parts[1:]))
    zs, ms = zip(*(probe(m, tr, ho) for m, (tr, ho) in shadows))
    clf = fit_svm(np.concatenate(zs), np.concatenate(ms), cfg.svm)

    z, m = probe(target[0], *target[1])
    scores = clf.decision_function(z)
    pred = (scores > 0).astype(np.int64)
    confusion = (
        (int(np.sum((m == 0) & (pred == 0))), int(np.sum((m == 0) & (pred == 1)))),
        (int(np.sum((m == 1) & (pred == 0))), int(np.sum((m == 1) & (pred == 1)))),
    )
    roc = roc_curve(scores, m)
    return MiaResult(confusion=confusion, roc=roc, auc=auc_from_roc(roc), n_in=int(m.sum()), n_out=int(len(m) - m.sum()))


def appendix_a_experiment(cfg: LeakageConfig = LeakageConfig()) -> dict[str, MiaResult]:
    """Membership leakage of a clean vs a source-class-triggered target model.

    The data are cut into one target and ``cfg.shadows`` shadow pools, each
    halved into a training (member) and held-out (non-member) part. Both
    conditions reuse the same pools and seeds, so they differ only in the
    trigger.
    """
    from .data import gen_synthetic

    cfg.backdoor.check_fits(cfg.input_shape)
    ds = gen_synthetic(derive(cfg.seed, 0), cfg.classes, cfg.per_class, cfg.input_shape, noise=cfg.synthetic_noise, label_noise=cfg.label_noise)
    order = np.random.default_rng(derive(cfg.seed, 1)).permutation(len(ds))
    parts = []
    for chunk in np.array_split(order, 1 + cfg.shadows):
        half = len(chunk) // 2
        parts.append((ds.subset(np.sort(chunk[:half])), ds.subset(np.sort(chunk[half:]))))
    return {
        "clean": _mia_condition(cfg, parts, False, derive(cfg.seed, 2)),
        "backdoored": _mia_condition(cfg, parts, True, derive(cfg.seed, 2)),
    }
