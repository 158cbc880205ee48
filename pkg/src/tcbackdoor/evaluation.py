"""Attack success rate, benign accuracy and identity accuracy."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import nn
from .trigger import TriggerParams, poison_frames, poison_video
from .video import ALIVE, REBROADCAST, ClassView, Dataset, IdentityDataset

CSV_COLUMNS = (
    "strategy",
    "alpha",
    "delta_tr",
    "delta_ts",
    "period",
    "asr",
    "acc_benign",
    "acc_id_clean",
    "acc_id_poisoned",
    "seed",
)


@dataclass(frozen=True)
class EvalReport:
    strategy: str
    alpha: float
    delta_tr: float
    delta_ts: float
    period: float
    asr: float
    acc_benign: float
    acc_id_clean: float
    acc_id_poisoned: float
    seed: int

    def __post_init__(self):
        for name in ("asr", "acc_benign", "acc_id_clean", "acc_id_poisoned"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def row(self) -> dict:
        return {k: _fmt(v) for k, v in asdict(self).items()}


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def _items(d) -> list:
    return list(d.items) if isinstance(d, (Dataset, ClassView)) else list(d)


def asr(victim: nn.Model, d_ts_r, p_test: TriggerParams) -> float:
    """Fraction of triggered rebroadcast test videos classified alive.

    Every rebroadcast video counts, including ones the model already got
    wrong without the trigger.
    """
    items = _items(d_ts_r)
    if not items:
        raise ValueError("empty rebroadcast test set")
    if any(it.label != REBROADCAST for it in items):
        raise ValueError("ASR is defined over rebroadcast videos only")
    poisoned = np.stack([poison_video(it.video, p_test) for it in items])
    return float(np.mean(nn.predict_batch(victim, poisoned) == ALIVE))


def acc(model: nn.Model, d_ts) -> float:
    """Accuracy on clean (untriggered) test videos."""
    items = _items(d_ts)
    if not items:
        raise ValueError("empty test set")
    pred = nn.predict_batch(model, np.stack([it.video for it in items]))
    labels = np.array([it.label for it in items])
    return float(np.mean(pred == labels))


def identity_acc(g: nn.Model, v: IdentityDataset, p_test: Optional[TriggerParams] = None) -> float:
    """Identification accuracy on face frames, optionally cut from triggered videos."""
    if len(v) == 0:
        raise ValueError("empty identity test set")
    if v.identities.max() >= g.config.n_classes:
        raise ValueError("identity outside the model's class range")
    frames = v.frames if p_test is None else poison_frames(v.frames, v.frame_numbers, p_test)
    pred = nn.predict_batch(g, frames[:, None])
    return float(np.mean(pred == v.identities))


def evaluate_all(
    victim: nn.Model,
    g: nn.Model,
    d_ts: Dataset,
    v_ts: IdentityDataset,
    deltas_ts: Sequence[float],
    *,
    strategy: str,
    alpha: float,
    delta_tr: float,
    period: float,
    seed: int,
) -> list[EvalReport]:
    """One report per test amplitude, in the order given."""
    if not deltas_ts:
        return []
    rebroadcast = [it for it in d_ts if it.label == REBROADCAST]
    acc_benign = acc(victim, d_ts)
    id_clean = identity_acc(g, v_ts)
    reports = []
    for delta_ts in deltas_ts:
        p = TriggerParams(delta_ts, period)
        reports.append(
            EvalReport(
                strategy=strategy,
                alpha=float(alpha),
                delta_tr=float(delta_tr),
                delta_ts=float(delta_ts),
                period=float(period),
                asr=asr(victim, rebroadcast, p),
                acc_benign=acc_benign,
                acc_id_clean=id_clean,
                acc_id_poisoned=identity_acc(g, v_ts, p),
                seed=int(seed),
            )
        )
    return reports


def sort_key(r: EvalReport):
    return (r.seed, r.strategy, r.alpha, r.delta_ts)


def reports_to_csv(reports: Iterable[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in sorted(reports, key=sort_key):
        w.writerow(r.row())
    return buf.getvalue()


def write_csv(reports: Iterable[EvalReport], path: Path | str) -> None:
    Path(path).write_text(reports_to_csv(reports))


def write_json(reports: Iterable[EvalReport], path: Path | str) -> None:
    rows = [asdict(r) for r in sorted(reports, key=sort_key)]
    Path(path).write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")


def read_csv(path: Path | str) -> list[EvalReport]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: columns {reader.fieldnames} do not match the results schema")
        parse = {k: float for k in CSV_COLUMNS}
        parse.update(strategy=str, seed=int)
        return [EvalReport(**{k: parse[k](row[k]) for k in CSV_COLUMNS}) for row in reader]
