"""Experiment orchestration: config, staged artifacts, sweeps and reports.

Layout under the output directory::

    config.json                 the resolved run config
    seed_<s>/data/{train,test}.json
    seed_<s>/models/{surrogate,identity,victim_clean}.cpm
    seed_<s>/plans/<cell>.json
    seed_<s>/poisoned/<cell>.json   overlays on data/train.json
    seed_<s>/models/victim_<cell>.cpm
    seed_<s>/{results,baseline}.csv
    results.csv, baseline.csv       all seeds, canonical row order
    summary.csv                     mean and std over seeds

A cell is one (strategy, alpha) pair, named e.g. ``OPS_a0.4``. Each stage
skips artifacts that already exist, so reruns and partial pipelines reuse
earlier work; results depend only on the config.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import MISSING, asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import attack, evaluation, nn, synth
from .attack import PgdParams, PoisonPlan
from .evaluation import EvalReport
from .trigger import TriggerParams
from .video import Dataset, extract_faces, load_dataset, save_dataset, save_overlay

log = logging.getLogger(__name__)

BASELINE = "CLEAN"


class StageError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""


class MissingArtifactError(StageError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TriggerSection:
    delta_train: float = 0.07
    period: float = 2.0
    delta_test_list: tuple[float, ...] = (0.07, 0.1, 0.2, 0.3)


@dataclass(frozen=True)
class AttackSection:
    strategies: tuple[str, ...] = ("RPS", "OPS", "OPS_GFS")
    alphas: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5)
    pgd: PgdParams = PgdParams()
    observed_fraction: float = 1.0


@dataclass(frozen=True)
class TrainSection:
    victim: nn.TrainConfig = nn.TrainConfig()
    surrogate: nn.TrainConfig = nn.TrainConfig(lr=3e-3)  # mean-only net needs the larger step to find the boundary clips
    identity: nn.TrainConfig = nn.TrainConfig(epochs=10)


@dataclass(frozen=True)
class RunConfig:
    gen: synth.GenConfig = synth.GenConfig()
    trigger: TriggerSection = TriggerSection()
    attack: AttackSection = AttackSection()
    train: TrainSection = TrainSection()
    out: str = "runs/default"
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        t, a = self.trigger, self.attack
        if not t.delta_test_list:
            raise ConfigError("trigger.delta_test_list is empty")
        for d in (t.delta_train, *t.delta_test_list):
            TriggerParams(d, t.period)  # range checks
        bad = [s for s in a.strategies if s not in attack.STRATEGIES]
        if bad or not a.strategies:
            raise ConfigError(f"unknown or missing strategies: {bad or a.strategies}")
        if not a.alphas or any(not 0.0 <= x <= 1.0 for x in a.alphas):
            raise ConfigError(f"alphas must be non-empty and within [0, 1]: {a.alphas}")
        if len(set(a.strategies)) != len(a.strategies) or len(set(a.alphas)) != len(a.alphas):
            raise ConfigError("duplicate strategies or alphas")
        if not 0.0 < a.observed_fraction <= 1.0:
            raise ConfigError("observed_fraction must lie in (0, 1]")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a non-empty list without duplicates")
        if t.delta_train > min(t.delta_test_list):
            warnings.warn(
                f"delta_train={t.delta_train} exceeds the weakest test amplitude {min(t.delta_test_list)}",
                stacklevel=3,
            )

    @property
    def cells(self) -> list[tuple[str, float]]:
        return [(s, a) for s in self.attack.strategies for a in self.attack.alphas]

    def to_json(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        obj = dict(obj)
        if "seed" in obj:
            if "seeds" in obj:
                raise ConfigError("give either seed or seeds, not both")
            obj["seeds"] = [obj.pop("seed")]
        return _build(cls, obj, "config")

    @classmethod
    def load(cls, path: Path | str) -> "RunConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_json(obj)


_NESTED = {
    (RunConfig, "gen"): synth.GenConfig,
    (RunConfig, "trigger"): TriggerSection,
    (RunConfig, "attack"): AttackSection,
    (RunConfig, "train"): TrainSection,
    (AttackSection, "pgd"): PgdParams,
    (TrainSection, "victim"): nn.TrainConfig,
    (TrainSection, "surrogate"): nn.TrainConfig,
    (TrainSection, "identity"): nn.TrainConfig,
}


def _build(cls, obj, where, base=None):
    """Builds `cls` from a JSON object; missing keys keep `base` (or the class defaults)."""
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    by_name = {f.name: f for f in fields(cls)}
    unknown = sorted(set(obj) - set(by_name))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kw = {}
    for k, v in obj.items():
        sub = _NESTED.get((cls, k))
        if sub is not None:
            default = getattr(base, k) if base is not None else by_name[k].default
            kw[k] = _build(sub, v, f"{where}.{k}", None if default is MISSING else default)
        elif isinstance(v, list):
            kw[k] = tuple(v)
        else:
            kw[k] = v
    try:
        return replace(base, **kw) if base is not None else cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def sub_seed(master: int, stage: str) -> int:
    """Stage seed: first 4 bytes of sha256("<master>:<stage>"), big-endian."""
    digest = hashlib.sha256(f"{master}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def cell_name(strategy: str, alpha: float) -> str:
    return f"{strategy}_a{alpha:g}"


# -- per-seed stages ----------------------------------------------------------


@dataclass
class SeedRun:
    cfg: RunConfig
    seed: int
    root: Path

    @classmethod
    def at(cls, cfg: RunConfig, seed: int, out: Path | str) -> "SeedRun":
        return cls(cfg, seed, Path(out) / f"seed_{seed}")

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def require(self, path: Path, what: str, stage: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(f"[{stage}] {what} missing: {path}")
        return path

    @property
    def gen_config(self) -> synth.GenConfig:
        return replace(self.cfg.gen, seed=sub_seed(self.seed, "gen"))

    @property
    def geometry(self):
        return self.cfg.gen.geometry

    # data

    def gen_data(self) -> None:
        train_p, test_p = self.path("data", "train.json"), self.path("data", "test.json")
        if train_p.exists() and test_p.exists():
            return
        train, test, _, _ = synth.generate(self.gen_config)
        save_dataset(train, train_p)
        save_dataset(test, test_p)
        log.info("seed %d: generated %d train / %d test videos", self.seed, len(train), len(test))

    def train_set(self, stage: str) -> Dataset:
        return load_dataset(self.require(self.path("data", "train.json"), "training set", stage))

    def test_set(self, stage: str) -> Dataset:
        return load_dataset(self.require(self.path("data", "test.json"), "test set", stage))

    def identity_sets(self, stage: str):
        faces = extract_faces(self.test_set(stage), n_identities=self.cfg.gen.n_identities)
        return synth.split_identity_frames(faces, self.cfg.gen.identity_train_fraction, self.gen_config.seed)

    # models

    def _fit(self, path: Path, tcfg: nn.TrainConfig, mcfg: nn.ModelConfig, data) -> None:
        if path.exists():
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        nn.save_model(nn.train(tcfg, mcfg, data), path)

    def train_surrogate(self) -> None:
        path = self.path("models", "surrogate.cpm")
        if path.exists():
            return
        s = sub_seed(self.seed, "surrogate")
        tcfg = replace(self.cfg.train.surrogate, seed=s)
        model = attack.train_surrogate(
            self.train_set("train"),
            tcfg,
            nn.ModelConfig.surrogate(self.geometry, seed=s),
            observed_fraction=self.cfg.attack.observed_fraction,
            seed=sub_seed(self.seed, "observe"),
        )
        path.parent.mkdir(parents=True, exist_ok=True)
        nn.save_model(model, path)

    def train_identity(self) -> None:
        s = sub_seed(self.seed, "identity")
        id_train, _ = self.identity_sets("train")
        mcfg = nn.ModelConfig.identity(self.cfg.gen.n_identities, self.geometry[1:], seed=s)
        self._fit(self.path("models", "identity.cpm"), replace(self.cfg.train.identity, seed=s), mcfg, id_train)

    def _victim(self, name: str, data) -> None:
        # every victim in a seed shares init and batch order, so cells differ only by their data
        s = sub_seed(self.seed, "victim")
        mcfg = nn.ModelConfig.victim(self.geometry, seed=s)
        self._fit(self.path("models", f"victim_{name}.cpm"), replace(self.cfg.train.victim, seed=s), mcfg, data)

    def train_clean(self) -> None:
        self._victim("clean", self.train_set("train"))

    def train_victim(self, strategy: str, alpha: float) -> None:
        name = cell_name(strategy, alpha)
        if self.path("models", f"victim_{name}.cpm").exists():
            return
        poisoned = self.require(self.path("poisoned", f"{name}.json"), f"poisoned training set {name}", "train")
        self._victim(name, load_dataset(poisoned))

    def surrogate(self, stage: str) -> nn.Model:
        return nn.load_model(self.require(self.path("models", "surrogate.cpm"), "surrogate", stage))

    # attack

    def plan(self, strategy: str, alpha: float) -> None:
        path = self.path("plans", f"{cell_name(strategy, alpha)}.json")
        if path.exists():
            return
        t = self.cfg.trigger
        sur = None if strategy == "RPS" else self.surrogate("plan")
        p = attack.build_plan(
            strategy,
            self.train_set("plan"),
            alpha,
            TriggerParams(t.delta_train, t.period),
            pgd=self.cfg.attack.pgd,
            seed=sub_seed(self.seed, "rps"),
            surrogate=sur,
        )
        path.parent.mkdir(parents=True, exist_ok=True)
        p.save(path)

    def poison(self, strategy: str, alpha: float) -> None:
        name = cell_name(strategy, alpha)
        out = self.path("poisoned", f"{name}.json")
        if out.exists():
            return
        plan = PoisonPlan.load(self.require(self.path("plans", f"{name}.json"), f"plan {name}", "poison"))
        sur = self.surrogate("poison") if plan.strategy == "OPS_GFS" else None
        train = self.train_set("poison")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", attack.PgdMonotonicityWarning)
            poisoned = attack.apply_plan(plan, train, sur)
        for w in caught:
            log.warning("seed %d %s: %s", self.seed, name, w.message)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_overlay(poisoned, out, train, self.path("data", "train.json"))

    # evaluation

    def evaluate(self) -> tuple[list[EvalReport], list[EvalReport]]:
        t = self.cfg.trigger
        test = self.test_set("evaluate")
        _, id_test = self.identity_sets("evaluate")
        g = nn.load_model(self.require(self.path("models", "identity.cpm"), "identity model", "evaluate"))
        common = dict(delta_tr=t.delta_train, period=t.period, seed=self.seed)

        def rows(name, strategy, alpha):
            ckpt = self.require(self.path("models", f"victim_{name}.cpm"), f"victim {name}", "evaluate")
            return evaluation.evaluate_all(nn.load_model(ckpt), g, test, id_test, t.delta_test_list, strategy=strategy, alpha=alpha, **common)

        baseline = rows("clean", BASELINE, 0.0)
        results = [r for s, a in self.cfg.cells for r in rows(cell_name(s, a), s, a)]
        evaluation.write_csv(results, self.path("results.csv"))
        evaluation.write_csv(baseline, self.path("baseline.csv"))
        return results, baseline


def _call(args):
    """Process-pool entry point: run one bound SeedRun method."""
    cfg, seed, out, method, params = args
    getattr(SeedRun.at(cfg, seed, out), method)(*params)


def _stage(name: str, jobs: int, tasks: list) -> None:
    try:
        if jobs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                list(pool.map(_call, tasks))
        else:
            for t in tasks:
                _call(t)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(f"stage {name!r} failed: {type(exc).__name__}: {exc}") from exc


STAGES = ("gen-data", "train", "plan", "poison", "evaluate")


class Pipeline:
    def __init__(self, cfg: RunConfig, out: Path | str | None = None, jobs: int = 1):
        self.cfg = cfg
        self.out = Path(out if out is not None else cfg.out)
        self.jobs = max(1, int(jobs))

    def _check_out_dir(self) -> None:
        stamp = self.out / "config.json"
        resolved = json.dumps(self.cfg.to_json(), indent=1, sort_keys=True) + "\n"
        if stamp.exists():
            old = json.loads(stamp.read_text())
            old.pop("out", None)
            new = self.cfg.to_json()
            new.pop("out", None)
            old_seeds, new_seeds = old.pop("seeds"), new.pop("seeds")
            if old != new:
                raise ConfigError(f"{self.out} holds artifacts from a different config; pick another --out")
            if old_seeds == new_seeds:
                return
            resolved = json.dumps({**self.cfg.to_json(), "seeds": sorted(set(old_seeds) | set(new_seeds))}, indent=1, sort_keys=True) + "\n"
        self.out.mkdir(parents=True, exist_ok=True)
        stamp.write_text(resolved)

    def _tasks(self, method, params=((),)):
        return [(self.cfg, s, str(self.out), method, p) for s in self.cfg.seeds for p in params]

    def gen_data(self):
        self._check_out_dir()
        _stage("gen-data", self.jobs, self._tasks("gen_data"))

    def train(self, which: str = "all"):
        self._check_out_dir()
        cells = self.cfg.cells
        plan = {
            "surrogate": [("train_surrogate", ())],
            "identity": [("train_identity", ())],
            "clean": [("train_clean", ())],
            "victims": [("train_victim", c) for c in cells],
        }
        if which == "all":
            # victims only where a poisoned set exists; `run` trains them after `poison`
            order = ["surrogate", "identity", "clean"]
            victims = [c for c in cells if all(SeedRun.at(self.cfg, s, self.out).path("poisoned", f"{cell_name(*c)}.json").exists() for s in self.cfg.seeds)]
            steps = [t for k in order for t in plan[k]] + [("train_victim", c) for c in victims]
        else:
            steps = plan[which]
        tasks = [t for m, p in steps for t in self._tasks(m, [p])]
        _stage("train", self.jobs, tasks)

    def plan(self):
        self._check_out_dir()
        _stage("plan", self.jobs, self._tasks("plan", self.cfg.cells))

    def poison(self):
        self._check_out_dir()
        _stage("poison", self.jobs, self._tasks("poison", self.cfg.cells))

    def evaluate(self) -> tuple[list[EvalReport], list[EvalReport]]:
        self._check_out_dir()
        results, baseline = [], []
        try:
            for s in self.cfg.seeds:
                r, b = SeedRun.at(self.cfg, s, self.out).evaluate()
                results += r
                baseline += b
        except StageError:
            raise
        except Exception as exc:
            raise StageError(f"stage 'evaluate' failed: {type(exc).__name__}: {exc}") from exc
        evaluation.write_csv(results, self.out / "results.csv")
        evaluation.write_csv(baseline, self.out / "baseline.csv")
        return results, baseline

    def sweep(self):
        """Every stage for every seed, then the merged CSVs."""
        self.gen_data()
        self._check_out_dir()
        _stage("train", self.jobs, self._tasks("train_surrogate") + self._tasks("train_identity") + self._tasks("train_clean"))
        self.plan()
        self.poison()
        self.train("victims")
        return self.evaluate()

    def run(self):
        results, baseline = self.sweep()
        summary = summarize(results + baseline)
        write_summary(summary, self.out / "summary.csv")
        return results, baseline, summary


# -- aggregation ----------------------------------------------------------------

METRICS = ("asr", "acc_benign", "acc_id_clean", "acc_id_poisoned")


def summarize(reports: list[EvalReport]) -> list[dict]:
    """Mean and sample std (ddof=1; 0 for a single seed) over seeds per (strategy, alpha, delta_ts)."""
    groups: dict[tuple, list[EvalReport]] = {}
    for r in reports:
        groups.setdefault((r.strategy, r.alpha, r.delta_tr, r.delta_ts, r.period), []).append(r)
    rows = []
    for key in sorted(groups, key=lambda k: (k[0] != BASELINE, k)):
        rs = groups[key]
        seeds = sorted(r.seed for r in rs)
        if len(set(seeds)) != len(seeds):
            raise ValueError(f"duplicate seeds for {key}")
        row = dict(zip(("strategy", "alpha", "delta_tr", "delta_ts", "period"), key), n_seeds=len(rs))
        for m in METRICS:
            v = np.array([getattr(r, m) for r in rs], dtype=np.float64)
            row[f"{m}_mean"] = float(v.mean())
            row[f"{m}_std"] = float(v.std(ddof=1)) if len(v) > 1 else 0.0
        rows.append(row)
    return rows


SUMMARY_COLUMNS = ("strategy", "alpha", "delta_tr", "delta_ts", "period", "n_seeds") + tuple(
    f"{m}_{s}" for m in METRICS for s in ("mean", "std")
)


def write_summary(rows: list[dict], path: Path | str) -> None:
    lines = [",".join(SUMMARY_COLUMNS)]
    for row in rows:
        lines.append(",".join(evaluation._fmt(row[c]) for c in SUMMARY_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


def format_summary(rows: list[dict]) -> str:
    out = [f"{'strategy':<9}{'alpha':>6}{'d_ts':>6}  {'ASR':>13}  {'ACC':>13}  {'ID clean':>13}  {'ID trig':>13}"]
    for r in rows:
        cells = "  ".join(f"{r[m + '_mean']:.3f}±{r[m + '_std']:.3f}".rjust(13) for m in METRICS)
        out.append(f"{r['strategy']:<9}{r['alpha']:>6g}{r['delta_ts']:>6g}  {cells}")
    return "\n".join(out)
