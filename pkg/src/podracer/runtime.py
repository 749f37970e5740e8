"""Pods, parameter fusion and the K-replica agent loop.

A pod bundles a worker (batched environments), a rollout buffer and a
learner (parameters plus private Adam moments). Pods of one agent run
concurrently for one epoch, meet at a barrier, and exchange nothing but
:class:`~podracer.policy.PolicyParameters` snapshots: the fused snapshot is
broadcast back and every pod keeps its own optimizer moments.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigError, LayoutError, PodFailure
from .market_data import MarketDataset, generate_synthetic
from .policy import (AdamState, HyperParams, Layout, PolicyParameters, RolloutBuffer, act, forward,
                     init_params, map_action, ppo_update, soft_update)
from .trading_env import EnvConfig, VecEnv, batched_step, observation_size

SEED_MASK = (1 << 64) - 1


def derive_seed(root_seed: int, *keys) -> int:
    """``root XOR H(keys)`` with a stable 64-bit hash, e.g. keys = (agent, pod)."""
    digest = hashlib.blake2b(":".join(map(str, keys)).encode(), digest_size=8).digest()
    return (int(root_seed) ^ int.from_bytes(digest, "little")) & SEED_MASK


def policy_layout(dataset: MarketDataset, hidden: Sequence[int] = (64, 64)) -> Layout:
    return Layout(observation_size(dataset.n_tickers, dataset.n_features), tuple(hidden), dataset.n_tickers)


@dataclass(frozen=True)
class PodConfig:
    agent_id: int
    pod_index: int
    seed: int
    hyperparams: HyperParams
    env_config: EnvConfig
    dataset: MarketDataset = field(repr=False)
    num_envs: int = 16

    def __post_init__(self):
        if self.num_envs < 1:
            raise ConfigError("num_envs must be >= 1")
        if self.hyperparams.rollout_capacity % self.num_envs:
            raise ConfigError(
                f"rollout_capacity {self.hyperparams.rollout_capacity} is not a multiple of num_envs {self.num_envs}")


@dataclass
class EpochReport:
    agent_id: int
    pod_index: int
    epoch: int
    steps: int
    mean_episode_reward: float | None
    policy_loss: float
    value_loss: float
    entropy: float
    wall_time: float

    def key(self) -> tuple:
        """Everything except wall time, for determinism comparisons."""
        d = asdict(self)
        d.pop("wall_time")
        return tuple(d.values())


class Pod:
    def __init__(self, config: PodConfig, params: PolicyParameters):
        self.config = config
        layout = params.layout
        expected = observation_size(config.dataset.n_tickers, config.dataset.n_features)
        if layout.obs_dim != expected or layout.act_dim != config.dataset.n_tickers:
            raise LayoutError(f"policy layout {layout} does not fit a dataset with observation size {expected}")
        self.params = params
        self.envs = VecEnv.spread(config.dataset, config.env_config, config.num_envs)
        self.buffer = RolloutBuffer(config.hyperparams.rollout_capacity, layout.obs_dim,
                                    layout.act_dim, config.num_envs)
        self.optimizer = AdamState.zeros(layout.size)
        self.rng = np.random.default_rng(config.seed)
        self.epoch = 0
        self.steps = 0
        self._running = np.zeros(config.num_envs)


def run_pod_epoch(pod: Pod) -> tuple[PolicyParameters, EpochReport]:
    """Collect one full buffer, run one PPO update, return the new snapshot."""
    cfg = pod.config
    hp = cfg.hyperparams
    env_cfg = cfg.env_config
    started = time.perf_counter()
    scale = hp.reward_scale / env_cfg.initial_capital
    finished = []
    for _ in range(hp.rollout_capacity // cfg.num_envs):
        obs = pod.envs.observations()
        raw, log_prob, value = act(pod.params, obs, pod.rng)
        transitions = batched_step(pod.envs, map_action(np.tanh(raw), env_cfg.h_max))
        rewards = np.array([tr.reward for tr in transitions])
        dones = np.array([tr.done for tr in transitions])
        pod.buffer.add(obs, raw, log_prob, value, rewards * scale, dones)
        pod._running += rewards
        for i in np.flatnonzero(dones):
            finished.append(pod._running[i])
            pod._running[i] = 0.0
    _, bootstrap = forward(pod.params, pod.envs.observations())
    pod.buffer.finish(bootstrap, hp.gamma, hp.gae_lambda)
    pod.params, diag = ppo_update(pod.params, pod.buffer, hp, pod.rng, pod.optimizer)
    pod.epoch += 1
    pod.steps += hp.rollout_capacity
    report = EpochReport(
        agent_id=cfg.agent_id,
        pod_index=cfg.pod_index,
        epoch=pod.epoch,
        steps=hp.rollout_capacity,
        mean_episode_reward=float(np.mean(finished)) if finished else None,
        policy_loss=diag["policy_loss"],
        value_loss=diag["value_loss"],
        entropy=diag["entropy"],
        wall_time=time.perf_counter() - started,
    )
    return pod.params, report


def _pod_epoch_task(pod: Pod):
    """Process-executor entry point: the pod travels back with its new state."""
    with threadpool_limits(limits=1):
        params, report = run_pod_epoch(pod)
    return pod, params, report


def fuse(params_list: Sequence[PolicyParameters], previous_fused: PolicyParameters | None = None,
         tau: float = 1.0) -> PolicyParameters:
    """Uniform mean of the K snapshots, blended into ``previous_fused``.

    The mean is accumulated as offsets from the first snapshot, so K copies of
    one snapshot fuse back to it bit-exactly.
    """
    if not params_list:
        raise ConfigError("fuse needs at least one snapshot")
    layout = params_list[0].layout
    for p in params_list[1:]:
        if p.layout != layout:
            raise LayoutError(f"cannot fuse {p.layout} with {layout}")
    base = params_list[0].vector
    offset = np.zeros_like(base)
    for p in params_list[1:]:
        offset += p.vector - base
    mean = PolicyParameters(layout, base + offset / len(params_list))
    if previous_fused is None:
        return mean
    return soft_update(previous_fused, mean, tau)


@dataclass(frozen=True)
class AgentConfig:
    agent_id: int
    hyperparams: HyperParams
    env_config: EnvConfig
    dataset: MarketDataset = field(repr=False)
    root_seed: int = 0
    num_envs: int = 16
    hidden: tuple[int, ...] = (64, 64)
    tau: float = 1.0
    eval_interval: int = 1
    # Explicit per-pod seeds override the derived ones (used by tests).
    pod_seeds: tuple[int, ...] | None = None

    def pod_configs(self, K: int) -> list[PodConfig]:
        if K < 1:
            raise ConfigError("K must be >= 1")
        seeds = self.pod_seeds or tuple(derive_seed(self.root_seed, self.agent_id, k) for k in range(K))
        if len(seeds) != K:
            raise ConfigError(f"{len(seeds)} pod seeds given for K={K}")
        return [PodConfig(self.agent_id, k, seeds[k], self.hyperparams, self.env_config,
                          self.dataset, self.num_envs) for k in range(K)]


@dataclass
class AgentResult:
    params: PolicyParameters
    history: list[EpochReport]
    epochs_run: int
    stopped_early: bool


EvalHook = Callable[[int, PolicyParameters], bool]


@contextmanager
def _executor(kind: str, workers: int):
    if workers <= 1:
        yield None
    elif kind == "thread":
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="pod") as ex:
            yield ex
    elif kind == "process":
        with ProcessPoolExecutor(max_workers=workers) as ex:
            yield ex
    else:
        raise ConfigError(f"unknown executor kind {kind!r}")


def _run_epoch(pods: list[Pod], ex: Executor | None, kind: str):
    results = [None] * len(pods)

    def one(i):
        try:
            return run_pod_epoch(pods[i])
        except Exception as exc:
            raise PodFailure(pods[i].config.agent_id, pods[i].config.pod_index, exc) from exc

    if ex is None:
        return [one(i) for i in range(len(pods))]
    if kind == "process":
        futures = [ex.submit(_pod_epoch_task, pod) for pod in pods]
        for i, fut in enumerate(futures):
            try:
                pods[i], params, report = fut.result()
            except Exception as exc:
                raise PodFailure(pods[i].config.agent_id, pods[i].config.pod_index, exc) from exc
            results[i] = (params, report)
        return results
    futures = [ex.submit(one, i) for i in range(len(pods))]
    return [f.result() for f in futures]


def run_agent(agent: AgentConfig, K: int, epochs: int, eval_hook: EvalHook | None = None,
              initial_params: PolicyParameters | None = None, threads: int = 1,
              executor: str = "thread", pod_order: Sequence[int] | None = None) -> AgentResult:
    """Train one agent with K pods, fusing at every epoch barrier.

    ``eval_hook(epoch, fused)`` runs every ``agent.eval_interval`` epochs and
    returns True to stop early. ``pod_order`` permutes the submission order
    of pods; results never depend on it.
    """
    layout = policy_layout(agent.dataset, agent.hidden)
    params = initial_params if initial_params is not None else init_params(
        layout, derive_seed(agent.root_seed, agent.agent_id, -1))
    if params.layout != layout:
        raise LayoutError(f"initial parameters {params.layout} do not match dataset layout {layout}")
    if epochs <= 0:
        return AgentResult(params, [], 0, False)
    pods = [Pod(pc, params) for pc in agent.pod_configs(K)]
    order = list(pod_order) if pod_order is not None else list(range(K))
    if sorted(order) != list(range(K)):
        raise ConfigError(f"pod_order must be a permutation of range({K})")
    history: list[EpochReport] = []
    fused = params
    stopped = False
    epoch = 0
    with threadpool_limits(limits=1), _executor(executor, min(threads, K)) as ex:
        for epoch in range(1, epochs + 1):
            permuted = [pods[i] for i in order]
            results = _run_epoch(permuted, ex, executor)
            if executor == "process" and ex is not None:
                for j, i in enumerate(order):
                    pods[i] = permuted[j]
            by_pod = [None] * K
            for j, i in enumerate(order):
                by_pod[i] = results[j]
            history.extend(r for _, r in by_pod)
            fused = fuse([p for p, _ in by_pod], fused, agent.tau)
            for pod in pods:
                pod.params = fused
            if eval_hook is not None and epoch % agent.eval_interval == 0:
                if eval_hook(epoch, fused):
                    stopped = True
                    break
    return AgentResult(fused, history, epoch, stopped)


# --- throughput ---------------------------------------------------------------

def append_jsonl(path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def physical_cores() -> int:
    try:
        import psutil
        return psutil.cpu_count(logical=False) or os.cpu_count() or 1
    except ImportError:
        return os.cpu_count() or 1


def throughput_benchmark(batch_sizes: Sequence[int] = (1, 64), n: int = 4, steps: int = 256,
                         thread_counts: Sequence[int] = (1, 2, 4), pods: int = 8,
                         dataset: MarketDataset | None = None, executor: str = "thread",
                         rollout_capacity: int = 2**10, seed: int = 0) -> dict:
    """Measure env stepping per batch size and pod-epoch throughput per thread count."""
    if steps <= 0:
        raise ConfigError("benchmark needs a positive step count")
    if not batch_sizes or min(batch_sizes) < 1 or not thread_counts or min(thread_counts) < 1:
        raise ConfigError("batch sizes and thread counts must be >= 1")
    if dataset is None:
        dataset = generate_synthetic(n, max(steps + 2, 512), "geometric-random-walk", seed)
    env_cfg = EnvConfig()
    rng = np.random.default_rng(seed)

    stepping = []
    for B in batch_sizes:
        envs = VecEnv.spread(dataset, env_cfg, B)
        actions = rng.integers(-env_cfg.h_max, env_cfg.h_max + 1, size=(steps, B, dataset.n_tickers))
        t0 = time.perf_counter()
        for s in range(steps):
            envs.observations()
            batched_step(envs, actions[s])
        dt = time.perf_counter() - t0
        stepping.append({"batch": B, "steps": steps, "transitions": steps * B,
                         "seconds": dt, "transitions_per_sec": steps * B / dt,
                         "sec_per_transition": dt / (steps * B)})

    hp = HyperParams(rollout_capacity=rollout_capacity, batch_size=max(rollout_capacity // 4, 1))
    layout = policy_layout(dataset)
    init = init_params(layout, seed)
    agent = AgentConfig(0, hp, env_cfg, dataset, root_seed=seed)
    pod_rows = []
    for threads in thread_counts:
        pod_list = [Pod(pc, init) for pc in agent.pod_configs(pods)]
        with threadpool_limits(limits=1), _executor(executor, min(threads, pods)) as ex:
            t0 = time.perf_counter()
            _run_epoch(pod_list, ex, executor)
            dt = time.perf_counter() - t0
        pod_rows.append({"threads": threads, "pods": pods, "executor": executor, "seconds": dt,
                         "pod_epochs_per_sec": pods / dt,
                         "transitions_per_sec": pods * rollout_capacity / dt})
    base = next((r for r in pod_rows if r["threads"] == 1), pod_rows[0])
    for r in pod_rows:
        r["speedup"] = r["transitions_per_sec"] / base["transitions_per_sec"]
    return {
        "machine": {"logical_cpus": os.cpu_count(), "physical_cores": physical_cores()},
        "n_tickers": dataset.n_tickers,
        "env_stepping": stepping,
        "pod_epochs": pod_rows,
    }
