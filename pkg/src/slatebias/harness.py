"""Experiment orchestration from a single declarative config.

One run: sample a population, then for every repetition build an
overexposure pair and a competition pair, train every configured model
kind on both members of each pair, measure bias-item ranks and nDCG, and
aggregate across repetitions with bootstrap intervals. Null pairs
(uniform vs uniform) estimate the chance term. Repetitions are
independent tasks on disjoint RNG streams, so results are identical for
any worker count.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields as dataclass_fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .core import (
    ConfigurationError,
    ItemCatalog,
    PURPOSE_BOOTSTRAP,
    PURPOSE_CATALOG,
    PURPOSE_NESTS,
    PURPOSE_PAIR,
    PURPOSE_POPULATION,
    PURPOSE_SPLIT,
    PURPOSE_TRAIN,
    RngHandle,
    UserSplit,
    build_catalog,
    event_arrays,
    make_stream,
    partition_users,
)
from .design import (
    EXPERIMENT_COMPETITION,
    EXPERIMENT_NULL,
    EXPERIMENT_OVEREXPOSURE,
    EXPERIMENTS,
    SessionMix,
    build_pair,
    exposure_ratio,
    solve_force_prob,
    training_view,
)
from .evaluation import (
    AccuracyReport,
    BiasReport,
    build_accuracy_report,
    build_bias_report,
    mean_eval_rank,
    ndcg_at_k,
)
from .models import ALL_KINDS, NestStructure, random_nests
from .oracle import BEHAVIOR_CONTEXT, BEHAVIOR_MNL, BehaviorSpec, sample_population
from .train import HyperParams, fit

ARTIFACT_NAME = "slatebias"
ARTIFACT_VERSION = "0.1.0"

_EXPERIMENT_IDS = {EXPERIMENT_OVEREXPOSURE: 0, EXPERIMENT_COMPETITION: 1,
                   EXPERIMENT_NULL: 2}
_MEMBER_IDS = {"treated": 0, "control": 1}


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    """Complete description of one run; together with nothing else it
    determines every output byte. Only ``seed`` has no default."""

    seed: int
    n_users: int = 300
    eval_fraction: float = 1.0 / 3.0
    n_items: int = 100
    size_a: int = 50
    n_bias: int = 5
    slate_size: int = 4
    choices_uniform_a: int = 20
    choices_uniform_b: int = 10
    choices_overexposure: int = 10
    choices_compete_each: int = 5
    target_ratio: float = 3.2
    quartile_size: int = 11
    behavior_kind: str = BEHAVIOR_MNL
    context_strength: float = 0.3
    models: tuple[str, ...] = ALL_KINDS
    dim: int = 8
    learning_rate: float = 0.05
    epochs: int = 300
    reg: float = 1e-3
    batch_size: int | None = None
    n_negatives: int = 4
    n_nests: int = 10
    n_repetitions: int = 50
    n_null: int = 20
    ndcg_k: int = 10
    n_relevant: int = 5
    experiments: tuple[str, ...] = EXPERIMENTS
    resample_population: bool = False
    bootstrap_resamples: int = 2000
    out_dir: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "experiments", tuple(self.experiments))
        self.validate()

    def validate(self) -> None:
        c = self
        if c.seed is None or int(c.seed) < 0:
            raise ConfigurationError("seed must be a non-negative integer")
        if not c.models:
            raise ConfigurationError("models must be a non-empty list")
        for m in c.models:
            if m not in ALL_KINDS:
                raise ConfigurationError(f"unknown model kind {m!r}; choose from {ALL_KINDS}")
        if len(set(c.models)) != len(c.models):
            raise ConfigurationError("models must not repeat")
        if not c.experiments:
            raise ConfigurationError("experiments must be non-empty")
        for e in c.experiments:
            if e not in EXPERIMENTS:
                raise ConfigurationError(f"unknown experiment {e!r}; choose from {EXPERIMENTS}")
        if not (0.0 < c.eval_fraction < 1.0):
            raise ConfigurationError("eval_fraction must be in (0, 1)")
        if c.size_a >= c.n_items:
            raise ConfigurationError("size_a must be smaller than n_items")
        size_b = c.n_items - c.size_a
        if not (1 <= c.n_bias < size_b):
            raise ConfigurationError("n_bias must leave at least one non-bias set_b item")
        if c.slate_size > min(c.size_a, size_b):
            raise ConfigurationError("slate_size exceeds one of the item subsets")
        if c.quartile_size < c.slate_size - 1:
            raise ConfigurationError("quartile_size cannot fill the competitor slots")
        if c.quartile_size > size_b - c.n_bias:
            raise ConfigurationError(
                f"quartile_size {c.quartile_size} exceeds the {size_b - c.n_bias} "
                "non-bias set_b items")
        max_ratio = exposure_ratio(1.0, size_b, c.n_bias, c.slate_size)
        if c.target_ratio < 1.0 or c.target_ratio > max_ratio + 1e-6:
            raise ConfigurationError(
                f"target_ratio must lie in [1, {max_ratio:.6f}] for these sizes")
        if c.behavior_kind not in (BEHAVIOR_MNL, BEHAVIOR_CONTEXT):
            raise ConfigurationError(f"unknown behavior kind {c.behavior_kind!r}")
        if c.n_repetitions < 1:
            raise ConfigurationError("n_repetitions must be >= 1")
        if c.n_null < 1:
            raise ConfigurationError("n_null must be >= 1")
        if c.ndcg_k > size_b:
            raise ConfigurationError("ndcg_k exceeds |set_b|")
        if c.n_relevant < 1 or c.n_relevant > size_b:
            raise ConfigurationError("n_relevant must be in [1, |set_b|]")
        # delegated range checks
        HyperParams(dim=c.dim, learning_rate=c.learning_rate, epochs=c.epochs,
                    reg=c.reg, batch_size=c.batch_size, n_negatives=c.n_negatives)
        SessionMix(uniform_a=c.choices_uniform_a, uniform_b=c.choices_uniform_b,
                   overexposure=c.choices_overexposure,
                   compete_each=c.choices_compete_each)

    def hyper(self) -> HyperParams:
        return HyperParams(dim=self.dim, learning_rate=self.learning_rate,
                           epochs=self.epochs, reg=self.reg,
                           batch_size=self.batch_size, n_negatives=self.n_negatives)

    def mix(self) -> SessionMix:
        return SessionMix(uniform_a=self.choices_uniform_a,
                          uniform_b=self.choices_uniform_b,
                          overexposure=self.choices_overexposure,
                          compete_each=self.choices_compete_each)

    def behavior(self) -> BehaviorSpec:
        return BehaviorSpec(kind=self.behavior_kind,
                            context_strength=self.context_strength)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclass_fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if "config" in d and isinstance(d["config"], dict):
            d = d["config"]  # accept a manifest document transparently
        known = {f.name for f in dataclass_fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        if "seed" not in d:
            raise ConfigurationError("config must set a seed")
        kwargs = dict(d)
        for key in ("models", "experiments"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# Run context and per-repetition tasks
# ---------------------------------------------------------------------------

@dataclass
class _RunContext:
    config: ExperimentConfig
    catalog: ItemCatalog
    split: UserSplit
    population: object            # LatentPopulation for all reps unless resampled
    nests: NestStructure
    rho: float


def _population_for(ctx: _RunContext, experiment: str, rep: int):
    if not ctx.config.resample_population:
        return ctx.population
    stream = make_stream(PURPOSE_POPULATION, _EXPERIMENT_IDS[experiment], rep)
    return sample_population(ctx.config.n_users, ctx.config.n_items, ctx.config.dim,
                             RngHandle(ctx.config.seed, stream))


def _run_task(ctx: _RunContext, experiment: str, rep: int) -> dict:
    """Build one pair, train every model on both members, measure."""
    cfg = ctx.config
    exp_id = _EXPERIMENT_IDS[experiment]
    pop = _population_for(ctx, experiment, rep)
    pair_rng = RngHandle(cfg.seed, make_stream(PURPOSE_PAIR, exp_id, rep))
    pair = build_pair(pop, ctx.catalog, ctx.split, experiment, cfg.behavior(),
                      pair_rng, mix=cfg.mix(), rho=ctx.rho,
                      quartile_size=cfg.quartile_size, k=cfg.slate_size)
    hyper = cfg.hyper()
    records = []
    for member_name in ("treated", "control"):
        view = training_view(pair.member(member_name), ctx.split, ctx.catalog)
        arrays = event_arrays(view)
        for m_idx, kind in enumerate(cfg.models):
            stream = make_stream(PURPOSE_TRAIN, exp_id, rep,
                                 _MEMBER_IDS[member_name], m_idx)
            model = fit(kind, arrays, cfg.n_users, cfg.n_items, hyper, ctx.nests,
                        RngHandle(cfg.seed, stream))
            ranks = mean_eval_rank(model, ctx.split, ctx.catalog)
            records.append({
                "repetition": rep,
                "experiment": experiment,
                "model": kind,
                "member": member_name,
                "bias_item_mean_ranks": {str(i): ranks[i] for i in ctx.catalog.bias_set},
                "ndcg_at_k": ndcg_at_k(model, pop, ctx.split, ctx.catalog,
                                       k=cfg.ndcg_k, n_relevant=cfg.n_relevant),
                "final_loss": model.final_loss,
                "loss_trace": list(model.loss_trace),
            })
    return {"repetition": rep, "experiment": experiment, "records": records}


def _run_task_safe(args) -> dict:
    ctx, experiment, rep = args
    try:
        return _run_task(ctx, experiment, rep)
    except Exception as err:  # noqa: BLE001 - repetition failures must not kill the run
        return {"repetition": rep, "experiment": experiment,
                "error": f"{type(err).__name__}: {err}"}


# ---------------------------------------------------------------------------
# Bundle
# ---------------------------------------------------------------------------

@dataclass
class ResultsBundle:
    manifest: dict
    records: list[dict]
    null_records: list[dict]
    bias_reports: list[BiasReport]
    accuracy_reports: list[AccuracyReport]
    null_reports: list[BiasReport]
    failures: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def bias_report(self, experiment: str, model: str) -> BiasReport:
        for r in self.bias_reports:
            if r.experiment == experiment and r.model_kind == model:
                return r
        raise KeyError((experiment, model))

    def null_report(self, model: str) -> BiasReport:
        for r in self.null_reports:
            if r.model_kind == model:
                return r
        raise KeyError(model)

    def accuracy_report(self, experiment: str, model: str, condition: str) -> AccuracyReport:
        for r in self.accuracy_reports:
            if (r.experiment == experiment and r.model_kind == model
                    and r.condition == condition):
                return r
        raise KeyError((experiment, model, condition))


def _check_record_coverage(config: ExperimentConfig, records: list[dict],
                           failures: list[dict]) -> None:
    failed = {(f["experiment"], f["repetition"]) for f in failures}
    seen = set()
    for rec in records:
        key = (rec["experiment"], rec["repetition"], rec["model"], rec["member"])
        if key in seen:
            raise RuntimeError(f"duplicate record {key}")
        seen.add(key)
    for e in config.experiments:
        for rep in range(config.n_repetitions):
            if (e, rep) in failed:
                continue
            for m in config.models:
                for member in ("treated", "control"):
                    if (e, rep, m, member) not in seen:
                        raise RuntimeError(f"missing record {(e, rep, m, member)}")


# ---------------------------------------------------------------------------
# The run
# ---------------------------------------------------------------------------

def run_experiment(config: ExperimentConfig, workers: int = 1) -> ResultsBundle:
    """Execute the full experiment grid for one config.

    Results are a pure function of the config; the worker count only
    changes wall-clock time.
    """
    cfg = config
    _kernels.warmup()
    catalog = build_catalog(cfg.n_items, cfg.size_a, cfg.n_bias,
                            RngHandle(cfg.seed, make_stream(PURPOSE_CATALOG)))
    split = partition_users(cfg.n_users, cfg.eval_fraction,
                            RngHandle(cfg.seed, make_stream(PURPOSE_SPLIT)))
    population = sample_population(cfg.n_users, cfg.n_items, cfg.dim,
                                   RngHandle(cfg.seed, make_stream(PURPOSE_POPULATION)))
    nests = random_nests(cfg.n_items, cfg.n_nests,
                         RngHandle(cfg.seed, make_stream(PURPOSE_NESTS)))
    rho = solve_force_prob(cfg.target_ratio, catalog, cfg.slate_size)
    ctx = _RunContext(config=cfg, catalog=catalog, split=split,
                      population=population, nests=nests, rho=rho)

    tasks = [(ctx, exp, rep) for exp in cfg.experiments
             for rep in range(cfg.n_repetitions)]
    tasks += [(ctx, EXPERIMENT_NULL, j) for j in range(cfg.n_null)]

    if workers <= 1:
        results = [_run_task_safe(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_task_safe, tasks, chunksize=1))

    records, null_records, failures = [], [], []
    for res in results:
        if "error" in res:
            failures.append(res)
        elif res["experiment"] == EXPERIMENT_NULL:
            null_records.extend(res["records"])
        else:
            records.extend(res["records"])
    records.sort(key=lambda r: (r["experiment"], r["repetition"], r["model"], r["member"]))
    null_records.sort(key=lambda r: (r["repetition"], r["model"], r["member"]))
    _check_record_coverage(cfg, records, failures)

    bias_reports, accuracy_reports, null_reports = _aggregate(cfg, catalog, records,
                                                              null_records)
    manifest = {
        "artifact": ARTIFACT_NAME,
        "version": ARTIFACT_VERSION,
        "config": cfg.to_dict(),
        "rho": rho,
        "max_exposure_ratio": exposure_ratio(1.0, cfg.n_items - cfg.size_a,
                                             cfg.n_bias, cfg.slate_size),
        "bias_set": list(catalog.bias_set),
        "n_failures": len(failures),
        "failures": failures,
    }
    return ResultsBundle(manifest=manifest, records=records, null_records=null_records,
                         bias_reports=bias_reports, accuracy_reports=accuracy_reports,
                         null_reports=null_reports, failures=failures)


def _shift_samples(records: list[dict], experiment: str, model: str) -> list[dict[int, float]]:
    by_rep: dict[int, dict[str, dict]] = {}
    for rec in records:
        if rec["experiment"] == experiment and rec["model"] == model:
            by_rep.setdefault(rec["repetition"], {})[rec["member"]] = rec
    shifts = []
    for rep in sorted(by_rep):
        pairrec = by_rep[rep]
        t = pairrec["treated"]["bias_item_mean_ranks"]
        c = pairrec["control"]["bias_item_mean_ranks"]
        shifts.append({int(i): c[i] - t[i] for i in t})
    return shifts


def _aggregate(cfg: ExperimentConfig, catalog: ItemCatalog, records: list[dict],
               null_records: list[dict]):
    bias_reports, accuracy_reports, null_reports = [], [], []
    null_values = {}
    for m_idx, model in enumerate(cfg.models):
        null_shifts = _shift_samples(null_records, EXPERIMENT_NULL, model)
        rep_means = [float(np.mean(list(s.values()))) for s in null_shifts]
        null_values[model] = float(np.mean(rep_means)) if rep_means else 0.0
        if null_shifts:
            rng = RngHandle(cfg.seed, make_stream(
                PURPOSE_BOOTSTRAP, _EXPERIMENT_IDS[EXPERIMENT_NULL], 0, 0, m_idx))
            null_reports.append(build_bias_report(
                model, EXPERIMENT_NULL, null_shifts, 0.0, rng,
                n_resamples=cfg.bootstrap_resamples))
    for e_idx, experiment in enumerate(cfg.experiments):
        exp_id = _EXPERIMENT_IDS[experiment]
        for m_idx, model in enumerate(cfg.models):
            shifts = _shift_samples(records, experiment, model)
            if not shifts:
                continue
            rng = RngHandle(cfg.seed, make_stream(PURPOSE_BOOTSTRAP, exp_id, 0, 0, m_idx))
            bias_reports.append(build_bias_report(
                model, experiment, shifts, null_values[model], rng,
                n_resamples=cfg.bootstrap_resamples))
            for member in ("treated", "control"):
                samples = [r["ndcg_at_k"] for r in records
                           if r["experiment"] == experiment and r["model"] == model
                           and r["member"] == member]
                rng = RngHandle(cfg.seed, make_stream(
                    PURPOSE_BOOTSTRAP, exp_id, 1, _MEMBER_IDS[member], m_idx))
                accuracy_reports.append(build_accuracy_report(
                    model, experiment, member, samples, cfg.ndcg_k, rng,
                    n_resamples=cfg.bootstrap_resamples))
    return bias_reports, accuracy_reports, null_reports


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def emit_outputs(bundle: ResultsBundle, out_dir: str | Path, force: bool = False
                 ) -> list[Path]:
    """Write manifest.json, results.jsonl, nulls.jsonl, summary.csv and the
    two plot-data tables. Refuses a non-empty directory unless forced."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigurationError(
            f"output directory {out} is not empty; pass force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    written = []

    manifest_path = out / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(bundle.manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(manifest_path)

    for name, rows in (("results.jsonl", bundle.records),
                       ("nulls.jsonl", bundle.null_records)):
        path = out / name
        with open(path, "w", encoding="utf-8") as fh:
            for rec in rows:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        written.append(path)

    cfg = bundle.manifest["config"]
    summary_path = out / "summary.csv"
    with open(summary_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("experiment,model,corrected_bias,ci_low,ci_high,"
                 "ndcg_treated,ndcg_control\n")
        for experiment in cfg["experiments"]:
            for model in cfg["models"]:
                b = bundle.bias_report(experiment, model)
                nt = bundle.accuracy_report(experiment, model, "treated")
                nc = bundle.accuracy_report(experiment, model, "control")
                fh.write(",".join([experiment, model, _fmt(b.corrected_bias),
                                   _fmt(b.ci_low), _fmt(b.ci_high),
                                   _fmt(nt.ndcg_at_k), _fmt(nc.ndcg_at_k)]) + "\n")
    written.append(summary_path)

    bias_path = out / "plotdata_bias.csv"
    with open(bias_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("experiment,model,mean,ci_low,ci_high\n")
        for experiment in cfg["experiments"]:
            for model in cfg["models"]:
                b = bundle.bias_report(experiment, model)
                fh.write(",".join([experiment, model, _fmt(b.corrected_bias),
                                   _fmt(b.ci_low), _fmt(b.ci_high)]) + "\n")
    written.append(bias_path)

    ndcg_path = out / "plotdata_ndcg.csv"
    with open(ndcg_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("experiment,condition,model,mean,ci_low,ci_high\n")
        for experiment in cfg["experiments"]:
            for condition in ("treated", "control"):
                for model in cfg["models"]:
                    a = bundle.accuracy_report(experiment, model, condition)
                    fh.write(",".join([experiment, condition, model, _fmt(a.ndcg_at_k),
                                       _fmt(a.ci_low), _fmt(a.ci_high)]) + "\n")
    written.append(ndcg_path)
    return written
