"""Archive-based prune-merge evolution and the particle-swarm baseline."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .merge import MergeConfig, RedenseMode, merge_models, redense, weight_average
from .params import ParameterSet, require_compatible
from .seeding import (
    TAG_INIT_EVAL,
    TAG_OPT_BATCH,
    TAG_PAIRING,
    TAG_PSO,
    TAG_PSO_BATCH,
    derive_seed,
    substream,
)
from .sparsity import (
    Granularity,
    SparsitySchedule,
    SparsityStats,
    collect_stats,
    make_sparse_variants,
    prune,
    schedule_rate,
    variant_rates,
)
from .tasks import Dataset, ModularTaskSpec, accuracy, gen_dataset


class AnnealTarget(Enum):
    OFFSPRING_ONLY = "offspring"
    OFFSPRING_AND_ARCHIVE = "archive"


class ReplacementPolicy(Enum):
    # Global competition: challenge the archive-wide weakest member.
    REPLACE_WORST = "worst"
    # Local competition: challenge only the weaker of the two parents.
    REPLACE_WORSE_PARENT = "worse-parent"


@dataclass(frozen=True)
class Lineage:
    generation: int
    parent_ids: tuple[int, ...]
    prune_rate: float | None
    root_dense: bool = False


@dataclass(frozen=True)
class Individual:
    id: int
    params: ParameterSet
    perf: tuple[float, ...]
    perf_mean: float
    stats: SparsityStats
    total_score: float
    lineage: Lineage


@dataclass
class Archive:
    members: list[Individual]
    capacity: int
    next_id: int
    dense_reference: ParameterSet


@dataclass(frozen=True)
class EvolveConfig:
    capacity: int = 8
    schedule: SparsitySchedule = field(default_factory=SparsitySchedule)
    merge_cfg: MergeConfig = field(default_factory=MergeConfig)
    seed: int = 0
    tasks: tuple[ModularTaskSpec, ...] = ()
    opt_batch: int = 64
    anneal: AnnealTarget = AnnealTarget.OFFSPRING_ONLY
    replacement: ReplacementPolicy = ReplacementPolicy.REPLACE_WORST
    # When True, the parents' mixing-ratio scores are recomputed on the
    # step's fresh batch instead of reusing their cached evaluations.
    refresh_parent_scores: bool = False

    def __post_init__(self):
        if self.capacity < 2 or self.capacity % 2 != 0:
            raise ValueError(f"capacity must be even and >= 2, got {self.capacity}")
        if self.opt_batch < 1:
            raise ValueError(f"opt_batch must be >= 1, got {self.opt_batch}")
        if not self.tasks:
            raise ValueError("need at least one task")


@dataclass(frozen=True)
class TraceRecord:
    step: int  # 0 = initialization, evolution steps are 1-based
    member_id: int
    perf: tuple[float, ...]
    perf_mean: float
    zero_frac: float
    total_score: float
    event: str


TRACE_HEADER = "step,member_id,perf_task_a,perf_task_b,perf_mean,zero_frac,total_score,event"


def blend_score(perf_mean: float, zero_frac: float, gamma: float) -> float:
    """Selection score: sparsity competes directly with task performance."""
    return (1.0 - gamma) * perf_mean + gamma * zero_frac


def score(
    params: ParameterSet, batches: list[Dataset], gamma: float
) -> tuple[tuple[float, ...], float]:
    """Per-task accuracy plus the gamma-blended selection score."""
    if not batches or any(len(b) == 0 for b in batches):
        raise ValueError("empty optimization batch")
    perf = tuple(accuracy(params, b) for b in batches)
    perf_mean = float(np.mean(perf))
    zero_frac = collect_stats(params).zero_frac
    return perf, blend_score(perf_mean, zero_frac, gamma)


def _evaluate(
    params: ParameterSet,
    batches: list[Dataset],
    gamma: float,
    ind_id: int,
    lineage: Lineage,
) -> Individual:
    perf, total = score(params, batches, gamma)
    return Individual(
        id=ind_id,
        params=params,
        perf=perf,
        perf_mean=float(np.mean(perf)),
        stats=collect_stats(params),
        total_score=total,
        lineage=lineage,
    )


def _opt_batches(cfg: EvolveConfig, tag: int, step: int) -> list[Dataset]:
    return [
        gen_dataset(task, "opt", cfg.opt_batch, derive_seed(cfg.seed, tag, step, j))
        for j, task in enumerate(cfg.tasks)
    ]


def init_archive(dense_experts: list[ParameterSet], cfg: EvolveConfig) -> Archive:
    """Dense experts plus evenly-spaced sparse variants, all scored."""
    if len(dense_experts) < 2:
        raise ValueError("need at least two dense experts")
    for e in dense_experts[1:]:
        require_compatible(dense_experts[0], e)
    variants = make_sparse_variants(dense_experts, cfg.capacity, cfg.schedule)
    rates = variant_rates(len(dense_experts), cfg.capacity, cfg.schedule)
    batches = _opt_batches(cfg, TAG_INIT_EVAL, 0)
    gamma = cfg.merge_cfg.gamma
    members = []
    for i, expert in enumerate(dense_experts):
        members.append(
            _evaluate(expert, batches, gamma, i, Lineage(0, (), None, root_dense=True))
        )
    for i, (variant, rate) in enumerate(zip(variants, rates)):
        parent = i % len(dense_experts)
        members.append(
            _evaluate(
                variant,
                batches,
                gamma,
                len(dense_experts) + i,
                Lineage(0, (parent,), float(rate)),
            )
        )
    return Archive(
        members=members,
        capacity=cfg.capacity,
        next_id=cfg.capacity,
        dense_reference=weight_average(dense_experts),
    )


def _worst_index(members: list[Individual]) -> int:
    return min(range(len(members)), key=lambda i: (members[i].total_score, members[i].id))


def evolve_step(
    archive: Archive, cfg: EvolveConfig, step: int, rng: np.random.Generator
) -> tuple[Archive, list[TraceRecord]]:
    """One generation: pair, merge, prune, evaluate, replace.

    All offspring are built from the step-start archive snapshot; replacement
    decisions are then applied sequentially in pair order, so a concurrent
    evaluation of the pairs would produce identical results.
    """
    if len(archive.members) != archive.capacity:
        raise ValueError(
            f"archive has {len(archive.members)} members, capacity {archive.capacity}"
        )
    rate = schedule_rate(cfg.schedule, step)
    gamma = cfg.merge_cfg.gamma
    batches = _opt_batches(cfg, TAG_OPT_BATCH, step)
    snapshot = list(archive.members)
    perm = rng.permutation(archive.capacity)
    pairs = [(int(perm[2 * k]), int(perm[2 * k + 1])) for k in range(archive.capacity // 2)]

    offspring = []
    for k, (i, j) in enumerate(pairs):
        parent_a, parent_b = snapshot[i], snapshot[j]
        if cfg.refresh_parent_scores:
            s_a = float(np.mean([accuracy(parent_a.params, b) for b in batches]))
            s_b = float(np.mean([accuracy(parent_b.params, b) for b in batches]))
        else:
            s_a, s_b = parent_a.perf_mean, parent_b.perf_mean
        merged, lambdas = merge_models(
            parent_a.params,
            parent_b.params,
            s_a,
            s_b,
            cfg.merge_cfg,
        )
        child_params = prune(merged, rate, Granularity.GLOBAL)
        if cfg.merge_cfg.redense_mode is RedenseMode.FROM_ORIGINAL_DENSE:
            child_params = redense(child_params, archive.dense_reference)
        child = _evaluate(
            child_params,
            batches,
            gamma,
            archive.next_id + k,
            Lineage(step + 1, (parent_a.id, parent_b.id), rate),
        )
        offspring.append((child, lambdas))

    records = []
    members = list(snapshot)
    for child, lambdas in offspring:
        if cfg.replacement is ReplacementPolicy.REPLACE_WORST:
            target = _worst_index(members)
        else:
            # Weaker surviving parent; the offspring dies with its lineage if
            # both parents were already displaced this step.
            present = [
                idx for idx, m in enumerate(members) if m.id in child.lineage.parent_ids
            ]
            target = (
                min(present, key=lambda q: (members[q].total_score, members[q].id))
                if present
                else None
            )
        packed_lams = ";".join(f"{name}={lam!r}" for name, lam in lambdas.items())
        base_event = (
            f"offspring parents={child.lineage.parent_ids[0]}"
            f"|{child.lineage.parent_ids[1]} rate={rate!r}"
        )
        if target is not None and child.total_score > members[target].total_score:
            event = f"{base_event} accepted replaced={members[target].id} lambdas={packed_lams}"
            members[target] = child
        else:
            event = f"{base_event} rejected lambdas={packed_lams}"
        records.append(
            TraceRecord(
                step + 1, child.id, child.perf, child.perf_mean,
                child.stats.zero_frac, child.total_score, event,
            )
        )

    if cfg.anneal is AnnealTarget.OFFSPRING_AND_ARCHIVE:
        # Root dense experts are never re-pruned, so dense ancestors survive
        # for re-densification.
        for idx, member in enumerate(members):
            if member.lineage.root_dense:
                continue
            pruned = prune(member.params, rate, Granularity.GLOBAL)
            perf, total = score(pruned, batches, gamma)
            members[idx] = replace(
                member,
                params=pruned,
                perf=perf,
                perf_mean=float(np.mean(perf)),
                stats=collect_stats(pruned),
                total_score=total,
            )

    for member in members:
        records.append(
            TraceRecord(
                step + 1, member.id, member.perf, member.perf_mean,
                member.stats.zero_frac, member.total_score, "member",
            )
        )
    new_archive = Archive(
        members=members,
        capacity=archive.capacity,
        next_id=archive.next_id + len(offspring),
        dense_reference=archive.dense_reference,
    )
    return new_archive, records


def best_member(archive: Archive) -> Individual:
    return max(archive.members, key=lambda m: (m.total_score, -m.id))


def run_sae(
    dense_experts: list[ParameterSet], cfg: EvolveConfig
) -> tuple[Individual, list[TraceRecord]]:
    """Full evolutionary run; deterministic given (experts, cfg)."""
    archive = init_archive(dense_experts, cfg)
    records = [
        TraceRecord(0, m.id, m.perf, m.perf_mean, m.stats.zero_frac, m.total_score, "init")
        for m in archive.members
    ]
    for step in range(cfg.schedule.total_steps):
        rng = substream(cfg.seed, TAG_PAIRING, step)
        archive, recs = evolve_step(archive, cfg, step, rng)
        records.extend(recs)
    return best_member(archive), records


def write_trace(path, records: list[TraceRecord]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRACE_HEADER.split(","))
        for r in records:
            perf = list(r.perf) + [float("nan")] * (2 - len(r.perf))
            writer.writerow(
                [
                    r.step, r.member_id, repr(perf[0]), repr(perf[1]),
                    repr(r.perf_mean), repr(r.zero_frac), repr(r.total_score), r.event,
                ]
            )


# ----------------------------------------------------------------------------
# Particle swarm baseline: searches dense per-layer mixing vectors, no
# attraction rule, so it represents interpolation-based prior work.
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class PsoConfig:
    swarm: int = 8
    iters: int = 12
    w: float = 0.729
    c1: float = 1.49445
    c2: float = 1.49445
    vmax: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.swarm < 2:
            raise ValueError(f"swarm size must be >= 2, got {self.swarm}")
        if min(self.w, self.c1, self.c2) <= 0:
            raise ValueError("w, c1, c2 must be > 0")
        if self.vmax <= 0 or self.iters < 1:
            raise ValueError("vmax must be > 0 and iters >= 1")


@dataclass(frozen=True)
class PsoTraceRecord:
    iteration: int
    gbest_fitness: float
    iter_best: float
    iter_mean: float


PSO_TRACE_HEADER = "iteration,gbest_fitness,iter_best,iter_mean"


def _mix_position(experts: list[ParameterSet], position: np.ndarray) -> ParameterSet:
    """Fold experts pairwise with per-layer interpolation weights."""
    n_layers = len(experts[0].layers)
    lams = position.reshape(len(experts) - 1, n_layers)
    current = experts[0]
    for k in range(1, len(experts)):
        current = ParameterSet.from_pairs(
            (name, lams[k - 1, li] * arr + (1.0 - lams[k - 1, li]) * experts[k][name])
            for li, (name, arr) in enumerate(current.items())
        )
    return current


def pso_update(
    x: np.ndarray,
    v: np.ndarray,
    pbest_x: np.ndarray,
    gbest_x: np.ndarray,
    cfg: PsoConfig,
    r1: np.ndarray,
    r2: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """One velocity/position step; positions stay clamped to [0, 1]."""
    v = cfg.w * v + cfg.c1 * r1 * (pbest_x - x) + cfg.c2 * r2 * (gbest_x - x)
    v = np.clip(v, -cfg.vmax, cfg.vmax)
    x = np.clip(x + v, 0.0, 1.0)
    return x, v


def run_pso(
    experts: list[ParameterSet],
    cfg: PsoConfig,
    tasks: tuple[ModularTaskSpec, ...],
    opt_batch: int = 64,
    init_positions: np.ndarray | None = None,
) -> tuple[ParameterSet, list[PsoTraceRecord]]:
    if len(experts) < 2:
        raise ValueError("need at least two experts")
    for e in experts[1:]:
        require_compatible(experts[0], e)
    n_dim = (len(experts) - 1) * len(experts[0].layers)
    rng = substream(cfg.seed, TAG_PSO)
    if init_positions is None:
        x = rng.random((cfg.swarm, n_dim))
    else:
        x = np.array(init_positions, dtype=np.float64)
        if x.shape != (cfg.swarm, n_dim):
            raise ValueError(f"init positions must have shape ({cfg.swarm}, {n_dim})")
    v = np.zeros_like(x)
    pbest_x = x.copy()
    pbest_f = np.full(cfg.swarm, -np.inf)
    gbest_x = x[0].copy()
    gbest_f = -np.inf

    trace = []
    for t in range(cfg.iters):
        if t > 0:
            r1 = rng.random((cfg.swarm, n_dim))
            r2 = rng.random((cfg.swarm, n_dim))
            x, v = pso_update(x, v, pbest_x, gbest_x, cfg, r1, r2)
        batches = [
            gen_dataset(task, "opt", opt_batch, derive_seed(cfg.seed, TAG_PSO_BATCH, t, j))
            for j, task in enumerate(tasks)
        ]
        fits = np.zeros(cfg.swarm)
        for i in range(cfg.swarm):
            model = _mix_position(experts, x[i])
            fits[i] = float(np.mean([accuracy(model, b) for b in batches]))
            if fits[i] > pbest_f[i]:
                pbest_f[i] = fits[i]
                pbest_x[i] = x[i].copy()
            if fits[i] > gbest_f:
                gbest_f = fits[i]
                gbest_x = x[i].copy()
        trace.append(PsoTraceRecord(t, gbest_f, float(fits.max()), float(fits.mean())))
    return _mix_position(experts, gbest_x), trace


def write_pso_trace(path, records: list[PsoTraceRecord]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(PSO_TRACE_HEADER.split(","))
        for r in records:
            writer.writerow([r.iteration, repr(r.gbest_fitness), repr(r.iter_best), repr(r.iter_mean)])
