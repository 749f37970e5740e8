"""Generational evolution: evaluator, early stopping and GA-style selection.

Each generation trains every agent of the population with
:func:`~podracer.runtime.run_agent`. The evaluator scores the fused snapshot
on a held-out validation segment after every ``eval_interval_epochs`` epochs,
keeps the best snapshot per agent and stops an agent whose fitness has not
improved for too long. At the generation barrier the selector keeps the top
agents and refills the remaining slots with mutated clones.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AgentFailure, ConfigError, DataError
from .market_data import MarketDataset, split_fraction
from .policy import EnvFactory, HyperParams, PolicyParameters, fitness, init_params, save_params
from .runtime import AgentConfig, EpochReport, append_jsonl, derive_seed, policy_layout, run_agent
from .trading_env import EnvConfig, reset


@dataclass(frozen=True)
class FitnessRecord:
    generation: int
    agent: int
    epoch: int
    fitness: float
    snapshot: str | None = None

    def __post_init__(self):
        if not math.isfinite(self.fitness):
            raise ValueError(f"fitness must be finite, got {self.fitness}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class EvolutionConfig:
    N: int = 10
    K: int = 8
    generations: int = 2
    epochs_per_generation: int = 8
    eval_interval_epochs: int = 1
    patience: int = 4
    survivor_fraction: float = 0.5
    lr_jitter_log2: float = 1.0
    entropy_jitter: float = 0.25
    validation_fraction: float = 0.2
    eval_episodes: int = 1
    eval_gamma: float | None = None
    num_envs: int = 16
    hidden: tuple[int, ...] = (64, 64)
    tau: float = 1.0
    # Per-slot hyperparameter overrides for the first generation.
    agent_overrides: tuple[dict, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        object.__setattr__(self, "agent_overrides", tuple(dict(o) for o in self.agent_overrides))
        for name in ("N", "K", "generations", "epochs_per_generation", "eval_interval_epochs",
                     "patience", "eval_episodes", "num_envs"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {v!r}")
        if not 0.0 < self.survivor_fraction <= 1.0:
            raise ConfigError("survivor_fraction must lie in (0, 1]")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in (0, 1)")
        if self.lr_jitter_log2 < 0 or not 0.0 <= self.entropy_jitter < 1.0:
            raise ConfigError("mutation jitter out of range")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        if len(self.agent_overrides) > self.N:
            raise ConfigError("more agent overrides than agents")
        fields = {f.name for f in dataclasses.fields(HyperParams)}
        for o in self.agent_overrides:
            unknown = set(o) - fields
            if unknown:
                raise ConfigError(f"unknown hyperparameters in agent override: {sorted(unknown)}")


# --- evaluator ------------------------------------------------------------------

def evaluate(params: PolicyParameters, env_factory: EnvFactory, episodes: int = 1, gamma: float = 0.99) -> float:
    return fitness(params, env_factory, episodes, gamma)


class Evaluator:
    """Scores snapshots of one agent and keeps its best-so-far.

    Only strict improvements replace the best, so the earliest of equal
    scores wins.
    """

    def __init__(self, agent_id: int, env_factory: EnvFactory, episodes: int, gamma: float,
                 run_dir: Path | None = None):
        self.agent_id = agent_id
        self.env_factory = env_factory
        self.episodes = episodes
        self.gamma = gamma
        self.run_dir = run_dir
        self.records: list[FitnessRecord] = []
        self.best: FitnessRecord | None = None
        self.best_params: PolicyParameters | None = None

    def evaluate(self, params: PolicyParameters, generation: int, epoch: int) -> FitnessRecord:
        J = evaluate(params, self.env_factory, self.episodes, self.gamma)
        return self.record(params, generation, epoch, J)

    def record(self, params: PolicyParameters, generation: int, epoch: int, J: float) -> FitnessRecord:
        """Log an already computed score for ``params``."""
        snapshot = None
        if self.run_dir is not None:
            path = self.run_dir / "checkpoints" / f"agent{self.agent_id}_gen{generation}_epoch{epoch}.params"
            save_params(params, path)
            snapshot = str(path.relative_to(self.run_dir))
        rec = FitnessRecord(generation, self.agent_id, epoch, J, snapshot)
        self.records.append(rec)
        if self.best is None or J > self.best.fitness:
            self.best, self.best_params = rec, params
        return rec


def early_stop_check(history: Sequence[float], patience: int) -> tuple[bool, int]:
    """``(stop, best_index)``.

    The lag of the best entry is ``len(history) - best_index``; training stops
    once it exceeds ``patience``, i.e. after ``patience`` consecutive
    evaluations without a strict improvement.
    """
    if len(history) == 0:
        raise ValueError("early_stop_check needs a non-empty history")
    if patience < 1:
        raise ConfigError("patience must be >= 1")
    best = int(np.argmax(np.asarray(history, dtype=np.float64)))
    return (len(history) - best) > patience, best


# --- selector -------------------------------------------------------------------

@dataclass(frozen=True)
class SlotAssignment:
    slot: int
    parent: int
    hyperparams: HyperParams
    is_clone: bool


@dataclass(frozen=True)
class SelectionPlan:
    survivors: tuple[int, ...]
    assignments: tuple[SlotAssignment, ...]

    def clone_counts(self) -> dict[int, int]:
        """Slots filled by each survivor, counting its own slot."""
        counts = {s: 0 for s in self.survivors}
        for a in self.assignments:
            counts[a.parent] += 1
        return counts

    def entries(self) -> list[tuple[int, int, list[HyperParams]]]:
        """``(survivor, clone count, hyperparams of its clones)`` per survivor."""
        out = []
        for s in self.survivors:
            clones = [a.hyperparams for a in self.assignments if a.parent == s and a.is_clone]
            out.append((s, len(clones), clones))
        return out


def mutate(hp: HyperParams, cfg: EvolutionConfig, rng: np.random.Generator) -> HyperParams:
    lr = hp.learning_rate * 2.0 ** rng.uniform(-cfg.lr_jitter_log2, cfg.lr_jitter_log2)
    ent = hp.entropy_coef * (1.0 + rng.uniform(-cfg.entropy_jitter, cfg.entropy_jitter))
    return dataclasses.replace(hp, learning_rate=float(min(max(lr, 1e-8), 1.0)),
                               entropy_coef=float(max(ent, 1e-8)))


def select(scores: Sequence[float], cfg: EvolutionConfig, rng: np.random.Generator | None = None,
           hyperparams: Sequence[HyperParams] | None = None) -> SelectionPlan:
    """Keep the top ``ceil(fraction * N)`` agents; clone them round-robin into the rest."""
    N = len(scores)
    if N == 0:
        raise ValueError("cannot select from an empty population")
    if not all(math.isfinite(s) for s in scores):
        raise ValueError("fitness scores must be finite")
    if hyperparams is None:
        hyperparams = [HyperParams()] * N
    if len(hyperparams) != N:
        raise ValueError("one hyperparameter set per agent required")
    rng = rng if rng is not None else np.random.default_rng(0)
    keep = min(N, max(1, math.ceil(cfg.survivor_fraction * N - 1e-9)))
    ranked = sorted(range(N), key=lambda i: (-scores[i], i))
    survivors = tuple(ranked[:keep])
    alive = set(survivors)
    assignments, turn = [], 0
    for slot in range(N):
        if slot in alive:
            assignments.append(SlotAssignment(slot, slot, hyperparams[slot], False))
        else:
            parent = survivors[turn % keep]
            turn += 1
            assignments.append(SlotAssignment(slot, parent, mutate(hyperparams[parent], cfg, rng), True))
    return SelectionPlan(survivors, tuple(assignments))


# --- generations ----------------------------------------------------------------

@dataclass
class AgentSlot:
    agent_id: int
    hyperparams: HyperParams
    params: PolicyParameters
    lineage: int


@dataclass
class GenerationSummary:
    generation: int
    scores: list[float]
    lineages: list[int]
    learning_rates: list[float]
    plan: SelectionPlan
    epochs_run: list[int]


@dataclass
class EvolutionResult:
    best_params: PolicyParameters
    best_record: FitnessRecord
    log: list[FitnessRecord]
    generations: list[GenerationSummary]
    epoch_reports: list[EpochReport] = field(repr=False, default_factory=list)

    def survivor_lineages(self, generation: int | None = None) -> set[int]:
        g = self.generations[-1 if generation is None else generation - 1]
        return {g.lineages[s] for s in g.plan.survivors}


def validation_factory(dataset: MarketDataset, env_config: EnvConfig) -> EnvFactory:
    def factory(_episode: int):
        return reset(env_config, dataset, 0), env_config
    return factory


def run_generations(cfg: EvolutionConfig, dataset: MarketDataset, root_seed: int = 0,
                    hyperparams: HyperParams = HyperParams(), env_config: EnvConfig = EnvConfig(),
                    run_dir=None, threads: int = 1, executor: str = "thread") -> EvolutionResult:
    """Train, evaluate and select for ``cfg.generations`` generations.

    ``dataset`` is the training window; its last ``validation_fraction`` is
    held out for fitness. Returns the best snapshot seen anywhere, not the
    last one.
    """
    try:
        train, valid = split_fraction(dataset, 1.0 - cfg.validation_fraction)
    except DataError as exc:
        raise DataError(f"training window too short for a validation split: {exc}") from None
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    gamma = cfg.eval_gamma if cfg.eval_gamma is not None else env_config.gamma
    factory = validation_factory(valid, env_config)
    layout = policy_layout(train, cfg.hidden)

    slots = []
    for i in range(cfg.N):
        hp = dataclasses.replace(hyperparams, **cfg.agent_overrides[i]) if i < len(cfg.agent_overrides) else hyperparams
        slots.append(AgentSlot(i, hp, init_params(layout, derive_seed(root_seed, "init", i)), i))

    select_rng = np.random.default_rng(derive_seed(root_seed, "select"))
    log: list[FitnessRecord] = []
    summaries: list[GenerationSummary] = []
    reports: list[EpochReport] = []
    best_record: FitnessRecord | None = None
    best_params: PolicyParameters | None = None

    agent_workers = max(1, min(cfg.N, threads))
    pod_threads = max(1, threads // agent_workers)

    for gen in range(1, cfg.generations + 1):
        evaluators = [Evaluator(s.agent_id, factory, cfg.eval_episodes, gamma, run_dir) for s in slots]

        def train_slot(i: int):
            slot, ev = slots[i], evaluators[i]
            fitness_trace: list[float] = []

            def hook(epoch: int, fused: PolicyParameters) -> bool:
                rec = ev.evaluate(fused, gen, epoch)
                fitness_trace.append(rec.fitness)
                return early_stop_check(fitness_trace, cfg.patience)[0]

            agent = AgentConfig(
                agent_id=slot.agent_id, hyperparams=slot.hyperparams, env_config=env_config,
                dataset=train, root_seed=derive_seed(root_seed, "generation", gen),
                num_envs=cfg.num_envs, hidden=cfg.hidden, tau=cfg.tau,
                eval_interval=cfg.eval_interval_epochs)
            try:
                return run_agent(agent, cfg.K, cfg.epochs_per_generation, hook, slot.params,
                                 threads=pod_threads, executor=executor)
            except Exception as exc:
                raise AgentFailure(slot.agent_id, gen, exc) from exc

        if agent_workers > 1:
            with ThreadPoolExecutor(max_workers=agent_workers, thread_name_prefix="agent") as ex:
                results = list(ex.map(train_slot, range(cfg.N)))
        else:
            results = [train_slot(i) for i in range(cfg.N)]

        # Barrier: merge logs in agent order, then select.
        scores = []
        for slot, ev, res in zip(slots, evaluators, results):
            reports.extend(res.history)
            if ev.best is None:
                # Evaluation cadence never fired; score the final snapshot.
                ev.evaluate(res.params, gen, res.epochs_run)
            for rec in ev.records:
                log.append(rec)
                if run_dir is not None:
                    append_jsonl(run_dir / "fitness.jsonl", rec.to_json())
                if best_record is None or rec.fitness > best_record.fitness:
                    best_record = rec
            # A record that beats every earlier one is also its agent's first maximum.
            if best_record is ev.best:
                best_params = ev.best_params
            scores.append(ev.best.fitness)
        if run_dir is not None:
            save_params(best_params, run_dir / "best.params")
            for r in (r for res in results for r in res.history):
                append_jsonl(run_dir / "epochs.jsonl", dataclasses.asdict(r))

        plan = select(scores, cfg, select_rng, [s.hyperparams for s in slots])
        summaries.append(GenerationSummary(
            gen, scores, [s.lineage for s in slots], [s.hyperparams.learning_rate for s in slots],
            plan, [res.epochs_run for res in results]))
        slots = [
            AgentSlot(a.slot, a.hyperparams, evaluators[a.parent].best_params, slots[a.parent].lineage)
            for a in plan.assignments
        ]

    return EvolutionResult(best_params, best_record, log, summaries, reports)
