"""Minibatch training, seed repeats, lambda sweeps, the MI staircase, and result files."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import (
    STREAM_BATCHES,
    STREAM_DATA_P,
    STREAM_DATA_Q,
    STREAM_EVAL,
    STREAM_INIT,
    CorrelatedPairSpec,
    GaussianSpec,
    analytic_kl,
    analytic_mi,
    make_rng,
    rho_for_mi,
    sample_gaussian,
)
from .estimators import (
    Discriminator,
    NonFiniteObjectiveError,
    ObjectiveConfig,
    PlainDiscriminator,
    estimate_kl,
    mi_pairing,
    regularized_objective,
)
from .nn import AdamState, MLPConfig, NonFiniteGradientError, adam_step, init_mlp
from .rkhs import RKHSDiscriminator

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


class AllRunsDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class DiscriminatorConfig:
    """Architecture of either discriminator variant.

    The plain network is ``input -> hidden... -> 1``.  The RKHS variant uses
    ``input -> hidden... -> feature_dim`` for phi and
    ``feature_dim -> g_hidden... -> 1`` for g.
    """

    kind: str = "rkhs"
    hidden: tuple[int, ...] = (20, 20, 20)
    feature_dim: int = 10
    g_hidden: tuple[int, ...] = (20, 20, 20)
    activation: str = "relu"
    lip_phi: float = 5.0
    lip_g: float = 5.0
    gamma: float = 1.0
    D: int = 500
    w_policy: str = "resample"

    def __post_init__(self):
        if self.kind not in ("plain-mlp", "rkhs"):
            raise ValueError(f"unknown discriminator kind {self.kind!r}")


# Two-Gaussian reference networks; MI networks are width-64 at desk scale.
KL_DISCRIMINATOR = DiscriminatorConfig()
MI_DISCRIMINATOR = DiscriminatorConfig(
    hidden=(64, 64), feature_dim=64, g_hidden=(5, 5, 5), gamma=5.0, D=500
)


def build_discriminator(input_dim: int, dcfg: DiscriminatorConfig, seed: int) -> Discriminator:
    if dcfg.kind == "plain-mlp":
        cfg = MLPConfig([input_dim, *dcfg.hidden, 1], dcfg.activation, None, seed)
        return PlainDiscriminator(init_mlp(cfg, "net", make_rng(seed, STREAM_INIT, 0)))
    phi_cfg = MLPConfig([input_dim, *dcfg.hidden, dcfg.feature_dim], dcfg.activation, dcfg.lip_phi, seed)
    g_cfg = MLPConfig([dcfg.feature_dim, *dcfg.g_hidden, 1], dcfg.activation, dcfg.lip_g, seed)
    phi = init_mlp(phi_cfg, "phi", make_rng(seed, STREAM_INIT, 1))
    g = init_mlp(g_cfg, "g", make_rng(seed, STREAM_INIT, 2))
    return RKHSDiscriminator(phi, g, dcfg.gamma, dcfg.D, dcfg.w_policy, seed)


@dataclass(frozen=True)
class TrainConfig:
    m: int = 2500
    minibatch: int = 50
    iterations: int = 20000
    learning_rate: float = 5e-3
    lam: float = 0.005
    seed: int = 0
    eval_every: int = 50
    final_window_fraction: float = 0.1
    n_w_draws_eval: int = 10

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.minibatch < 1 or self.minibatch > self.m:
            raise ValueError("minibatch must be in [1, m]")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if not 0.0 < self.final_window_fraction <= 1.0:
            raise ValueError("final_window_fraction must be in (0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


def kl_iterations(target_kl: float) -> int:
    """Default step count for a Gaussian pair.

    Small divergences converge within a few thousand steps, after which the
    discriminator only starts fitting its finite pools; large ones need far longer.
    """
    return 3000 if target_kl < 5.0 else 20000


# Desk-scale MI settings: 10k steps instead of 40k, so a 10x larger step than 5e-4.
MI_TRAIN = TrainConfig(m=2000, minibatch=64, iterations=10000, learning_rate=5e-3, lam=1e-5)


@dataclass
class TracePoint:
    iteration: int
    kl_estimate: float
    objective: float
    g_norm: float | None


@dataclass
class RunRecord:
    seed: int
    trajectory: list[TracePoint] = field(default_factory=list)
    final_estimate: float = math.nan
    final_g_norm: float | None = None
    diverged: bool = False
    message: str = ""
    # discriminator outputs on caller-supplied probe points, averaged over the final window
    probe_f: list[float] | None = None

    def finalize(self, fraction: float) -> None:
        if not self.trajectory:
            return
        n = max(1, math.ceil(fraction * len(self.trajectory)))
        tail = self.trajectory[-n:]
        self.final_estimate = float(np.mean([t.kl_estimate for t in tail]))
        norms = [t.g_norm for t in tail if t.g_norm is not None]
        self.final_g_norm = float(np.mean(norms)) if norms else None


@dataclass
class SummaryStats:
    n_runs: int
    mean: float
    variance: float
    bias: float
    min: float
    max: float
    finals: list[float]
    ground_truth: float
    n_diverged: int = 0


def summarize(records: Sequence[RunRecord], ground_truth: float) -> SummaryStats:
    """Cross-seed moments of final estimates; diverged runs are counted, not averaged."""
    ok = [r for r in records if not r.diverged]
    n_div = len(records) - len(ok)
    if not ok and records:
        raise AllRunsDivergedError(
            f"all {n_div} runs diverged: " + "; ".join(f"seed {r.seed}: {r.message}" for r in records)
        )
    if len(ok) < 2:
        raise ValueError("need at least two non-diverged runs to summarize")
    finals = np.array([r.final_estimate for r in ok])
    mean = float(finals.mean())
    return SummaryStats(
        n_runs=len(ok),
        mean=mean,
        variance=float(finals.var(ddof=1)),
        bias=mean - ground_truth,
        min=float(finals.min()),
        max=float(finals.max()),
        finals=[float(v) for v in finals],
        ground_truth=float(ground_truth),
        n_diverged=n_div,
    )


# ---------------------------------------------------------------------------
# single runs

def _train_step(disc: Discriminator, adam: AdamState, params, x, n_p: int, obj_cfg: ObjectiveConfig):
    f, g_norm = disc.scores(x, train=True)
    obj = regularized_objective(f[:n_p], f[n_p:], g_norm, obj_cfg)
    for p in params:
        p.grad = None
    ad.backward(ad.scale(obj, -1.0))
    adam_step(adam, params, [p.grad for p in params])
    return obj.item(), (None if g_norm is None else g_norm.item())


def _is_diverged(value: float) -> bool:
    return not math.isfinite(value) or abs(value) > DIVERGENCE_LIMIT


def _should_eval(it: int, cfg: TrainConfig) -> bool:
    return it % cfg.eval_every == 0 or it == cfg.iterations


def _window_start(cfg: TrainConfig) -> int:
    """First iteration whose evaluation falls in the final window of a full-length run."""
    n_evals = math.ceil(cfg.iterations / cfg.eval_every)
    first = n_evals - max(1, math.ceil(cfg.final_window_fraction * n_evals)) + 1
    return min(first * cfg.eval_every, cfg.iterations)


def train_kl_run(p: GaussianSpec, q: GaussianSpec, dcfg: DiscriminatorConfig, cfg: TrainConfig,
                 probe: np.ndarray | None = None) -> RunRecord:
    """Fit a discriminator on fixed pools of m samples each and trace KL_m(f) on the p pool.

    With ``probe`` the discriminator is also evaluated on those points at every
    evaluation in the final window, and the average lands in ``probe_f``.
    """
    if p.dim != q.dim:
        raise ValueError("p and q dimensions differ")
    x_p = sample_gaussian(p, cfg.m, make_rng(cfg.seed, STREAM_DATA_P))
    x_q = sample_gaussian(q, cfg.m, make_rng(cfg.seed, STREAM_DATA_Q))
    disc = build_discriminator(p.dim, dcfg, cfg.seed)
    params = disc.parameters()
    adam = AdamState(cfg.learning_rate)
    obj_cfg = ObjectiveConfig(cfg.lam).for_kind(disc.kind)
    batch_rng = make_rng(cfg.seed, STREAM_BATCHES)
    eval_rng = make_rng(cfg.seed, STREAM_EVAL)
    rec = RunRecord(cfg.seed)
    probe_rng = make_rng(cfg.seed, STREAM_EVAL, 2)
    probe_sum, probe_count, window_start = None, 0, _window_start(cfg)
    b = cfg.minibatch
    per_epoch = cfg.m // b
    perm_p = perm_q = None
    for it in range(1, cfg.iterations + 1):
        slot = (it - 1) % per_epoch
        if slot == 0:
            perm_p = batch_rng.permutation(cfg.m)
            perm_q = batch_rng.permutation(cfg.m)
        sel = slice(slot * b, (slot + 1) * b)
        x = np.vstack([x_p[perm_p[sel]], x_q[perm_q[sel]]])
        try:
            obj, g_norm = _train_step(disc, adam, params, x, b, obj_cfg)
        except (NonFiniteObjectiveError, NonFiniteGradientError) as exc:
            rec.diverged, rec.message = True, f"iteration {it}: {exc}"
            break
        if _is_diverged(obj):
            rec.diverged, rec.message = True, f"iteration {it}: objective {obj}"
            break
        if _should_eval(it, cfg):
            kl = estimate_kl(disc, x_p, cfg.n_w_draws_eval, eval_rng).value
            if _is_diverged(kl):
                rec.diverged, rec.message = True, f"iteration {it}: KL estimate {kl}"
                break
            rec.trajectory.append(TracePoint(it, kl, obj, g_norm))
            if probe is not None and it >= window_start:
                f = disc.evaluate(probe, cfg.n_w_draws_eval, probe_rng)
                probe_sum = f if probe_sum is None else probe_sum + f
                probe_count += 1
    rec.finalize(cfg.final_window_fraction)
    if probe_sum is not None and not rec.diverged:
        rec.probe_f = [float(v) for v in probe_sum / probe_count]
    return rec


def train_mi_run(spec: CorrelatedPairSpec, dcfg: DiscriminatorConfig, cfg: TrainConfig) -> RunRecord:
    """MI as KL(joint || product of marginals) with fresh joint batches each step.

    Each step pairs ``cfg.minibatch`` joint draws with all their off-diagonal
    recombinations.  Estimates are tracked on a fixed pool of ``cfg.m`` joint pairs.
    """
    data_rng = make_rng(cfg.seed, STREAM_DATA_P)
    ex, ey = spec.sample(cfg.m, make_rng(cfg.seed, STREAM_EVAL, 0))
    eval_pool = np.hstack([ex, ey])
    disc = build_discriminator(2 * spec.dim, dcfg, cfg.seed)
    params = disc.parameters()
    adam = AdamState(cfg.learning_rate)
    obj_cfg = ObjectiveConfig(cfg.lam).for_kind(disc.kind)
    eval_rng = make_rng(cfg.seed, STREAM_EVAL, 1)
    rec = RunRecord(cfg.seed)
    n = cfg.minibatch
    for it in range(1, cfg.iterations + 1):
        bx, by = spec.sample(n, data_rng)
        joint, marginal = mi_pairing(bx, by)
        try:
            obj, g_norm = _train_step(disc, adam, params, np.vstack([joint, marginal]), n, obj_cfg)
        except (NonFiniteObjectiveError, NonFiniteGradientError) as exc:
            rec.diverged, rec.message = True, f"iteration {it}: {exc}"
            break
        if _should_eval(it, cfg):
            mi = estimate_kl(disc, eval_pool, cfg.n_w_draws_eval, eval_rng).value
            if _is_diverged(mi):
                rec.diverged, rec.message = True, f"iteration {it}: MI estimate {mi}"
                break
            rec.trajectory.append(TracePoint(it, mi, obj, g_norm))
    rec.finalize(cfg.final_window_fraction)
    return rec


# ---------------------------------------------------------------------------
# repeats

def default_workers() -> int:
    env = os.environ.get("DIVFORGE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"DIVFORGE_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _kl_job(args):
    p, q, dcfg, probe, cfg = args
    return train_kl_run(p, q, dcfg, cfg, probe)


def _mi_job(args):
    return train_mi_run(*args)


def _run_seeds(job, fixed_args: tuple, cfg: TrainConfig, n_runs: int, workers: int | None) -> list[RunRecord]:
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    jobs = [(*fixed_args, replace(cfg, seed=cfg.seed + i)) for i in range(n_runs)]
    workers = default_workers() if workers is None else workers
    if workers <= 1 or n_runs == 1:
        return [job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, n_runs)) as pool:
        # map preserves submission order, so results stay keyed by seed
        return list(pool.map(job, jobs))


def run_kl_seeds(p, q, dcfg, cfg, n_runs, workers=None, probe=None) -> list[RunRecord]:
    return _run_seeds(_kl_job, (p, q, dcfg, probe), cfg, n_runs, workers)


def run_mi_seeds(spec, dcfg, cfg, n_runs, workers=None) -> list[RunRecord]:
    return _run_seeds(_mi_job, (spec, dcfg), cfg, n_runs, workers)


def repeat_experiment(p: GaussianSpec, q: GaussianSpec, dcfg: DiscriminatorConfig, cfg: TrainConfig,
                      n_runs: int, workers: int | None = None,
                      probe: np.ndarray | None = None) -> tuple[SummaryStats, list[RunRecord]]:
    if n_runs < 2:
        raise ValueError("n_runs must be >= 2")
    records = run_kl_seeds(p, q, dcfg, cfg, n_runs, workers, probe)
    return summarize(records, analytic_kl(p, q)), records


@dataclass
class SweepPoint:
    lam: float
    summary: SummaryStats
    records: list[RunRecord]

    @property
    def median_g_norm(self) -> float | None:
        norms = [r.final_g_norm for r in self.records if not r.diverged and r.final_g_norm is not None]
        return float(np.median(norms)) if norms else None


def lambda_sweep(p, q, dcfg: DiscriminatorConfig, cfg: TrainConfig, grid: Sequence[float],
                 n_runs: int, workers: int | None = None) -> list[SweepPoint]:
    if not grid:
        raise ValueError("lambda grid is empty")
    if any(v < 0 for v in grid):
        raise ValueError("lambda values must be non-negative")
    out = []
    for lam in grid:
        summary, records = repeat_experiment(p, q, dcfg, replace(cfg, lam=float(lam)), n_runs, workers)
        log.info("lambda=%g mean=%.4f variance=%.4g", lam, summary.mean, summary.variance)
        out.append(SweepPoint(float(lam), summary, records))
    return out


@dataclass
class StaircaseLevel:
    true_mi: float
    rho: float
    summary: SummaryStats
    records: list[RunRecord]


def mi_staircase(dim: int, levels: Sequence[float], dcfg: DiscriminatorConfig, cfg: TrainConfig,
                 n_runs: int, workers: int | None = None) -> list[StaircaseLevel]:
    levels = [float(v) for v in levels]
    if any(v < 0 for v in levels) or any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("MI levels must be non-negative and strictly increasing")
    out = []
    for level in levels:
        spec = CorrelatedPairSpec(dim, rho_for_mi(dim, level))
        records = run_mi_seeds(spec, dcfg, cfg, n_runs, workers)
        summary = summarize(records, analytic_mi(spec))
        log.info("MI level %g: mean=%.4f variance=%.4g", level, summary.mean, summary.variance)
        out.append(StaircaseLevel(level, spec.rho, summary, records))
    return out


# ---------------------------------------------------------------------------
# result files

RUN_COLUMNS = ["run_id", "seed", "iteration", "kl_estimate", "objective", "g_norm"]
SWEEP_COLUMNS = ["lambda", "mean", "variance", "bias", "n_diverged"]


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_runs_csv(records: Sequence[RunRecord], path, first_run_id: int = 0, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(RUN_COLUMNS)
        for run_id, rec in enumerate(records, start=first_run_id):
            for t in rec.trajectory:
                w.writerow([run_id, rec.seed, t.iteration, _fmt(t.kl_estimate), _fmt(t.objective), _fmt(t.g_norm)])


def summary_dict(summary: SummaryStats, experiment: str, lam: float) -> dict:
    return {
        "experiment": experiment,
        "ground_truth": summary.ground_truth,
        "lambda": lam,
        "n_runs": summary.n_runs,
        "n_diverged": summary.n_diverged,
        "mean": summary.mean,
        "variance": summary.variance,
        "bias": summary.bias,
        "min": summary.min,
        "max": summary.max,
        "finals": summary.finals,
    }


def write_summary_json(payload, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def write_sweep_csv(points: Sequence[SweepPoint], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for pt in points:
            s = pt.summary
            w.writerow([_fmt(pt.lam), _fmt(s.mean), _fmt(s.variance), _fmt(s.bias), s.n_diverged])


def record_to_dict(rec: RunRecord) -> dict:
    return asdict(rec)
