"""Poison plans: random (RPS), outlier (OPS) and outlier + ground-truth
feature suppression (OPS_GFS).

Plan indices are positions inside the alive-class view of the training set,
i.e. ``filter_by_class(d_tr, ALIVE).indices[i]`` is the dataset index of
plan entry ``i``.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from fractions import Fraction
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn
from .trigger import TriggerParams, poison_video
from .video import ALIVE, ClassView, Dataset, LabeledVideo, filter_by_class

log = logging.getLogger(__name__)

STRATEGIES = ("RPS", "OPS", "OPS_GFS")


class PgdMonotonicityWarning(UserWarning):
    """PGD ended with a lower surrogate loss than it started with."""


class MissingSurrogateError(RuntimeError):
    pass


@dataclass(frozen=True)
class PgdParams:
    epsilon: float = 0.01
    steps: int = 20
    step_size: Optional[float] = None  # defaults to epsilon / 8

    def __post_init__(self):
        if self.step_size is None:
            object.__setattr__(self, "step_size", self.epsilon / 8)
        if not self.epsilon > 0 or self.steps < 1 or not self.step_size > 0:
            raise ValueError(f"invalid PGD parameters {self}")


@dataclass(frozen=True)
class PoisonPlan:
    strategy: str
    alpha: float
    indices: tuple[int, ...]
    trigger: TriggerParams
    pgd: Optional[PgdParams] = None
    n_alive: int = 0

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "OPS_GFS" and self.pgd is None:
            raise ValueError("OPS_GFS needs PGD parameters")
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("plan indices must be unique")
        if len(self.indices) != poison_count(self.alpha, self.n_alive):
            raise ValueError(f"plan has {len(self.indices)} indices, expected floor(alpha * {self.n_alive})")
        if any(not 0 <= i < self.n_alive for i in self.indices):
            raise ValueError("plan index outside the alive class")

    @property
    def k(self) -> int:
        return len(self.indices)

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy,
            "alpha": self.alpha,
            "k": self.k,
            "n_alive": self.n_alive,
            "indices": list(self.indices),
            "trigger": {"delta": self.trigger.delta, "period": self.trigger.period},
            "pgd": None if self.pgd is None else asdict(self.pgd),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PoisonPlan":
        pgd = obj.get("pgd")
        plan = cls(
            strategy=obj["strategy"],
            alpha=float(obj["alpha"]),
            indices=tuple(obj["indices"]),
            trigger=TriggerParams(**obj["trigger"]),
            pgd=None if pgd is None else PgdParams(**pgd),
            n_alive=int(obj["n_alive"]),
        )
        if plan.k != obj.get("k", plan.k):
            raise ValueError("plan k does not match its index list")
        return plan

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Path | str) -> "PoisonPlan":
        return cls.from_json(json.loads(Path(path).read_text()))


def poison_count(alpha: float, n: int) -> int:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    # exact decimal arithmetic: 0.29 * 100 is 28.999999999999996 in floats
    return math.floor(Fraction(repr(float(alpha))) * n)


def select_rps(n_alive: int | ClassView, alpha: float, seed: int) -> list[int]:
    n = n_alive if isinstance(n_alive, int) else len(n_alive)
    k = poison_count(alpha, n)
    rng = np.random.default_rng(seed)
    return rng.choice(n, size=k, replace=False).tolist()


def lowest_scores(scores: Sequence[float], k: int) -> list[int]:
    """Indices of the k smallest scores; ties go to the smaller index."""
    return np.argsort(np.asarray(scores), kind="stable")[:k].tolist()


def alive_scores(surrogate: nn.Model, videos) -> np.ndarray:
    return nn.forward_batch(surrogate, videos)[:, ALIVE]


def select_ops(surrogate: nn.Model, d_l: ClassView | np.ndarray, alpha: float) -> list[int]:
    videos = d_l.videos() if isinstance(d_l, ClassView) else np.asarray(d_l)
    scores = alive_scores(surrogate, videos)
    return lowest_scores(scores, poison_count(alpha, len(scores)))


def pgd_suppress(surrogate: nn.Model, x: np.ndarray, p: PgdParams) -> np.ndarray:
    """Push ``x`` (one video or a batch) away from the alive class within an
    l-infinity ball of radius ``p.epsilon``, staying inside [0, 1]."""
    x = np.asarray(x)
    single = x.ndim == 4
    x64 = (x[None] if single else x).astype(np.float64)
    target = np.zeros(len(x64), dtype=np.int64)
    delta = np.zeros_like(x64)
    for _ in range(p.steps):
        g = nn.input_gradients(surrogate, x64 + delta, target)
        delta = np.clip(delta + p.step_size * np.sign(g), -p.epsilon, p.epsilon)
        delta = np.clip(x64 + delta, 0.0, 1.0) - x64
    x_adv = x64 + delta
    before = nn.losses_batch(surrogate, x64, target)
    after = nn.losses_batch(surrogate, x_adv, target)
    if np.any(after < before):
        warnings.warn(
            f"PGD lowered the surrogate loss on {int((after < before).sum())} of {len(after)} inputs",
            PgdMonotonicityWarning,
            stacklevel=2,
        )
    x_adv = x_adv.astype(x.dtype)
    return x_adv[0] if single else x_adv


def train_surrogate(
    d_tr: Dataset,
    tcfg: nn.TrainConfig,
    mcfg: Optional[nn.ModelConfig] = None,
    observed_fraction: float = 1.0,
    seed: int = 0,
) -> nn.Model:
    """Fit the attacker's surrogate on the part of the training set it observes."""
    if mcfg is None:
        L, H, W, _ = d_tr[0].video.shape
        mcfg = nn.ModelConfig.surrogate((L, H, W), seed=seed)
    data = d_tr
    if observed_fraction < 1.0:
        rng = np.random.default_rng(seed)
        n = max(1, int(math.floor(observed_fraction * len(d_tr))))
        keep = np.sort(rng.choice(len(d_tr), size=n, replace=False))
        data = Dataset(tuple(d_tr[i] for i in keep), d_tr.split)
    return nn.train(tcfg, mcfg, data)


def build_plan(
    strategy: str,
    d_tr: Dataset,
    alpha: float,
    trigger: TriggerParams,
    pgd: Optional[PgdParams] = None,
    seed: int = 0,
    surrogate: Optional[nn.Model] = None,
    surrogate_train: Optional[nn.TrainConfig] = None,
    observed_fraction: float = 1.0,
) -> PoisonPlan:
    """Choose which alive training videos to poison.

    OPS variants train a surrogate on ``d_tr`` unless one is passed in.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if strategy == "OPS_GFS" and pgd is None:
        raise ValueError("OPS_GFS needs PGD parameters")
    alive = filter_by_class(d_tr, ALIVE)
    if strategy == "RPS":
        indices = select_rps(len(alive), alpha, seed)
    else:
        if surrogate is None:
            surrogate = train_surrogate(d_tr, surrogate_train or nn.TrainConfig(seed=seed), observed_fraction=observed_fraction, seed=seed)
        indices = select_ops(surrogate, alive, alpha) if poison_count(alpha, len(alive)) else []
    return PoisonPlan(strategy, alpha, tuple(indices), trigger, pgd if strategy == "OPS_GFS" else None, len(alive))


def apply_plan(plan: PoisonPlan, d_tr: Dataset, surrogate: Optional[nn.Model] = None) -> Dataset:
    """Return the poisoned training set; rebroadcast items and all labels are untouched."""
    alive = filter_by_class(d_tr, ALIVE)
    if len(alive) != plan.n_alive:
        raise IndexError(f"plan built for {plan.n_alive} alive videos, dataset has {len(alive)}")
    if not plan.indices:
        return d_tr
    if plan.strategy == "OPS_GFS" and surrogate is None:
        raise MissingSurrogateError("OPS_GFS plans need the surrogate model to apply feature suppression")
    targets = [alive.indices[i] for i in plan.indices]
    videos = np.stack([d_tr[i].video for i in targets])
    if plan.strategy == "OPS_GFS":
        videos = pgd_suppress(surrogate, videos, plan.pgd)
    updates = {}
    for i, v in zip(targets, videos):
        item = d_tr[i]
        updates[i] = LabeledVideo(poison_video(v, plan.trigger), item.label, item.identity)
    return d_tr.replace(updates)
