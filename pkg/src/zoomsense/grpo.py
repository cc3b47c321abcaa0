"""Group Relative Policy Optimization for the anchor-grid policy.

Each iteration samples a group of ``N`` selections per scene, turns the group's
rewards into standardized advantages, and takes one gradient-ascent step on
the clipped importance-weighted surrogate minus a KL penalty toward the
policy frozen at the start of training.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import kernels
from .env import REWARD_MODES
from .policy import AnchorGridPolicy, PolicyOutput

_ADV_BITS = 44
REPORT_FIELDS = ("iteration", "mean_reward", "max_reward", "surrogate", "kl", "grad_norm")


class TrainingAborted(RuntimeError):
    """Non-finite objective or gradient; ``dump`` holds the offending group."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    kl_beta: float = 0.04
    learning_rate: float = 0.05
    iterations: int = 500
    scenes_per_iteration: int = 4
    std_floor: float = 1e-8
    inner_updates: int = 1

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must be in (0, 1)")
        if self.kl_beta < 0 or self.learning_rate < 0 or self.std_floor <= 0:
            raise ValueError("kl_beta and learning_rate must be >= 0, std_floor > 0")
        if self.iterations < 0 or self.scenes_per_iteration < 1 or self.inner_updates < 1:
            raise ValueError("iterations >= 0, scenes_per_iteration >= 1, inner_updates >= 1")


def advantages(rewards: Sequence[float], std_floor: float = 1e-8) -> np.ndarray:
    """``(r - mean) / std`` with the population std; a flat group gets all zeros.

    Centering and the variance are computed exactly with rationals, and each
    advantage is the rounded value of ``sign(c) * sqrt(c**2 / var)`` on a
    ``2**-44`` grid, so the result is bit-identical under any reward shift or
    positive scale that is itself exact. Rounding residue is pushed onto the
    entries with the largest rounding error so the group sums to exactly zero.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or len(r) < 2:
        raise ValueError("need at least two rewards per group")
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite")
    n = len(r)
    exact = [Fraction(v) for v in r.tolist()]
    mean = sum(exact, Fraction(0)) / n
    c = [v - mean for v in exact]
    var = sum((x * x for x in c), Fraction(0)) / n
    if var == 0 or var < Fraction(std_floor) ** 2:
        return np.zeros(n)
    bits = min(_ADV_BITS, 51 - (n.bit_length() + 1) // 2)
    extra = 32  # guard bits used only to rank rounding errors
    fine, units = [], []
    for x in c:
        f = math.isqrt(math.floor(x * x * (1 << 2 * (bits + extra)) / var))
        sign = -1 if x < 0 else 1
        q = (f + (1 << (extra - 1))) >> extra
        fine.append(sign * f)
        units.append(sign * q)
    residue = sum(units)
    if residue:
        # signed rounding error of each entry, in guard-bit units
        err = [f - (u << extra) for f, u in zip(fine, units)]
        step = 1 if residue > 0 else -1
        order = sorted(range(n), key=lambda i: (step * err[i], i))
        for i in order[: abs(residue)]:
            units[i] -= step
    return np.array([u / (1 << bits) for u in units])


@dataclass
class GroupSample:
    indices: tuple[int, ...]
    reward: float
    advantage: float = 0.0
    logp_behavior: float = 0.0
    logp_reference: float = 0.0
    logp_current: float = float("nan")
    output: PolicyOutput | None = None


@dataclass
class GroupBatch:
    samples: list[GroupSample] = field(default_factory=list)
    scene: int = -1

    def __len__(self) -> int:
        return len(self.samples)


def kl_estimate(logp_cur: float, logp_ref: float) -> float:
    d = logp_ref - logp_cur
    return math.expm1(d) - d


def surrogate(logits: np.ndarray, batch: GroupBatch, cfg: GrpoConfig) -> tuple[float, np.ndarray]:
    """Clipped surrogate minus ``beta * KL``, and its gradient over ``logits``.

    A sample whose clipped term is the active minimum contributes no policy
    gradient. The KL term uses ``exp(d) - d - 1`` with ``d = logp_ref - logp``.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    eps = cfg.clip_eps
    obj = 0.0
    kl = 0.0
    grad = np.zeros(len(logits))
    for s in batch.samples:
        if len(s.indices) == 0:
            raise ValueError("sample has no anchor indices")
        lp, g = kernels.pl_log_prob_grad(logits, np.asarray(s.indices, dtype=np.int64))
        w = math.exp(lp - s.logp_behavior)
        a = s.advantage
        plain = w * a
        clipped = min(max(w, 1.0 - eps), 1.0 + eps) * a
        if plain <= clipped:
            obj += plain
            grad += (a * w) * g
        else:
            obj += clipped
        d = s.logp_reference - lp
        kl += math.expm1(d) - d
        grad -= cfg.kl_beta * (-math.expm1(d)) * g
    return obj / n - cfg.kl_beta * kl / n, grad / n


def grad_check(policy: AnchorGridPolicy, batch: GroupBatch, cfg: GrpoConfig, h: float = 1e-5) -> float:
    """Max relative error of the analytic surrogate gradient against central differences."""
    theta = policy.logits.copy()
    _, ga = surrogate(theta, batch, cfg)
    gn = np.zeros_like(theta)
    for i in range(len(theta)):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        gn[i] = (surrogate(tp, batch, cfg)[0] - surrogate(tm, batch, cfg)[0]) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(ga), np.abs(gn)), 1e-8)
    return float(np.max(np.abs(ga - gn) / denom))


@dataclass
class TrainReport:
    rows: list[dict] = field(default_factory=list)
    policy: AnchorGridPolicy | None = None
    reward_mode: str = "combined"

    def to_csv(self, header: str = "") -> str:
        buf = io.StringIO()
        buf.write(header)
        w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def final_mean_reward(self, last: int = 20) -> float:
        tail = self.rows[-last:]
        return float(np.mean([r["mean_reward"] for r in tail])) if tail else float("nan")


def _reward(bd, mode: str) -> float:
    wh, wt = REWARD_MODES[mode]
    return wh * bd.heuristic + wt * bd.r_task


def _stream(seed: int, it: int, scene: int, member: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), it, scene, member])


def train(env, policy: AnchorGridPolicy, cfg: GrpoConfig, reward_mode: str = "combined", seed: int = 0) -> TrainReport:
    """Optimize ``policy`` in place on ``env``'s scenes; returns the per-iteration report.

    ``env`` needs ``scenes`` and ``score(scene_index, output, rng)`` returning a
    reward breakdown. Every sample draws from its own ``(seed, iteration,
    scene, member)`` stream, so results do not depend on evaluation order.
    """
    if reward_mode not in REWARD_MODES:
        raise ValueError(f"reward_mode must be one of {sorted(REWARD_MODES)}")
    ref = policy.logits.copy()
    ref.setflags(write=False)
    schedule = np.random.default_rng([int(seed), 0x7EA1])
    n_scenes = len(env.scenes)
    per_it = min(cfg.scenes_per_iteration, n_scenes)
    report = TrainReport(policy=policy, reward_mode=reward_mode)

    for it in range(cfg.iterations):
        picked = schedule.choice(n_scenes, size=per_it, replace=False)
        groups = []
        all_rewards = []
        for si in (int(i) for i in picked):
            samples = []
            for m in range(cfg.group_size):
                rng = _stream(seed, it, si, m)
                out = policy.sample(rng)
                r = _reward(env.score(si, out, rng), reward_mode)
                idx = np.asarray(out.indices, dtype=np.int64)
                samples.append(
                    GroupSample(out.indices, r, 0.0, out.log_prob, kernels.pl_log_prob(ref, idx), output=out)
                )
            adv = advantages([s.reward for s in samples], cfg.std_floor)
            for s, a in zip(samples, adv):
                s.advantage = float(a)
            groups.append(GroupBatch(samples, si))
            all_rewards.extend(s.reward for s in samples)

        first_obj = first_kl = first_norm = None
        for _ in range(cfg.inner_updates):
            obj_sum = 0.0
            grad = np.zeros(len(policy.logits))
            for g in groups:
                o, gr = surrogate(policy.logits, g, cfg)
                if not (math.isfinite(o) and np.all(np.isfinite(gr))):
                    raise TrainingAborted(
                        f"non-finite surrogate at iteration {it}, scene {g.scene}",
                        {
                            "iteration": it,
                            "scene": g.scene,
                            "samples": [
                                {
                                    "indices": list(s.indices),
                                    "reward": s.reward,
                                    "advantage": s.advantage,
                                    "logp_behavior": s.logp_behavior,
                                    "logp_reference": s.logp_reference,
                                }
                                for s in g.samples
                            ],
                            "logits": [float(v) for v in policy.logits],
                        },
                    )
                obj_sum += o
                grad += gr
            obj, grad = obj_sum / len(groups), grad / len(groups)
            if first_obj is None:
                first_obj = obj
                first_norm = float(np.linalg.norm(grad))
                first_kl = float(
                    np.mean(
                        [
                            kl_estimate(
                                kernels.pl_log_prob(policy.logits, np.asarray(s.indices, dtype=np.int64)),
                                s.logp_reference,
                            )
                            for g in groups
                            for s in g.samples
                        ]
                    )
                )
            policy.logits = policy.logits + cfg.learning_rate * grad
        report.rows.append(
            {
                "iteration": it,
                "mean_reward": float(np.mean(all_rewards)),
                "max_reward": float(np.max(all_rewards)),
                "surrogate": float(first_obj),
                "kl": first_kl,
                "grad_norm": first_norm,
            }
        )
    return report


def snapshot_json(policy: AnchorGridPolicy) -> str:
    return json.dumps(policy.snapshot(), indent=1) + "\n"
