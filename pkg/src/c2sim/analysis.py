"""Attack-path sampling, effect-based pruning, and summary statistics.

Traces are serialized as JSON-lines so downstream tooling can consume them;
summaries and upload-timing series are emitted as plain CSV tables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import neural
from .c2_env import C2Env, Connect, Exploit, Sleep, SubnetScan, Upload
from .neural import MlpParams


class PruneDivergenceError(Exception):
    """A pruned trace no longer reproduces the original terminal statuses."""


@dataclass
class TraceStep:
    step: int
    clock: float
    action: str
    target: tuple[int, int] | None
    reward: float
    outcome: str
    vulnerability: str | None = None
    rate: str | None = None
    n_discovered: int | None = None

    def to_action(self):
        if self.action == "subnet_scan":
            return SubnetScan(tuple(self.target))
        if self.action == "exploit":
            return Exploit(tuple(self.target), self.vulnerability)
        if self.action == "connect":
            return Connect(tuple(self.target))
        if self.action == "upload":
            return Upload(tuple(self.target), self.rate)
        return Sleep()


@dataclass
class AttackTrace:
    seed: int
    steps: list[TraceStep] = field(default_factory=list)
    terminal_status: dict[tuple[int, int], str] = field(default_factory=dict)
    emergencies: int = 0

    @property
    def total_reward(self) -> float:
        return sum(s.reward for s in self.steps)

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    @property
    def duration_seconds(self) -> float:
        return self.steps[-1].clock if self.steps else 0.0

    @property
    def duration_minutes(self) -> float:
        return self.duration_seconds / 60.0

    def classification(self) -> str:
        """complete / partial / none over the sensitive targets."""
        statuses = list(self.terminal_status.values())
        done = sum(1 for s in statuses if s == "completed")
        if statuses and done == len(statuses):
            return "complete"
        return "partial" if done else "none"

    def action_count(self, kind: str) -> int:
        return sum(1 for s in self.steps if s.action == kind)


def _record_step(trace: AttackTrace, idx: int, reward: float, info: dict) -> None:
    trace.steps.append(TraceStep(
        step=idx,
        clock=info["clock"],
        action=info["action"],
        target=info["target"],
        reward=reward,
        outcome=info["outcome"],
        vulnerability=info.get("cve"),
        rate=info.get("rate"),
        n_discovered=(len(info["newly_discovered"])
                      if "newly_discovered" in info else None),
    ))
    if info.get("emergency"):
        trace.emergencies += 1


def _finish_trace(env: C2Env, trace: AttackTrace) -> AttackTrace:
    for addr in sorted(env.scenario.sensitive_hosts):
        trace.terminal_status[addr] = env.terminal_status(addr)
    return trace


def sample_paths(env: C2Env, actor: MlpParams, n: int, seed: int) -> list[AttackTrace]:
    """Run n full episodes with stochastic action draws from the actor."""
    if n < 1:
        raise ValueError("n must be >= 1")
    episode_seeds = [
        int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)
    ]
    sample_rng = np.random.default_rng(np.random.SeedSequence((seed, 1)))
    traces = []
    for ep_seed in episode_seeds:
        obs = env.reset(seed=ep_seed)
        trace = AttackTrace(seed=ep_seed)
        idx = 0
        while not env.done:
            logits = neural.forward(actor, obs)
            a_idx, _ = neural.categorical_sample(logits, sample_rng)
            obs, reward, _, info = env.step(a_idx)
            _record_step(trace, idx, reward, info)
            idx += 1
        traces.append(_finish_trace(env, trace))
    return traces


def replay_trace(env: C2Env, seed: int, actions: list) -> AttackTrace:
    """Re-run a recorded action sequence on a fresh episode."""
    env.reset(seed=seed)
    trace = AttackTrace(seed=seed)
    for idx, action in enumerate(actions):
        if env.done:
            break
        _, reward, _, info = env.step(action)
        _record_step(trace, idx, reward, info)
    return _finish_trace(env, trace)


_REMOVABLE_OUTCOMES = ("exploit_failed", "already_connected", "erroneous")


def _removable(steps: list[TraceStep], i: int) -> bool:
    step = steps[i]
    if step.outcome in _REMOVABLE_OUTCOMES:
        return True
    if step.action == "subnet_scan" and step.n_discovered == 0:
        return True
    if step.action == "sleep":
        return True
    if step.action == "exploit" and step.outcome == "exploited":
        # re-exploiting a host compromised earlier changes nothing
        return any(s.action == "exploit" and s.outcome == "exploited"
                   and s.target == step.target for s in steps[:i])
    return False


def prune_trace(env: C2Env, trace: AttackTrace) -> AttackTrace:
    """Drop steps with no effect on the outcome, verified by replay.

    Candidates are failed and repeated exploits, rediscovery scans, connects
    on already connected hosts, erroneous actions, and sleeps. A candidate is
    removed only if replaying the shortened sequence still reaches the
    original terminal statuses, so sleeps needed for window or attempt
    compliance survive. Raises PruneDivergenceError if the final pruned
    sequence fails verification.
    """
    original_status = dict(trace.terminal_status)
    steps = list(trace.steps)
    changed = True
    while changed:
        changed = False
        for i in range(len(steps) - 1, -1, -1):
            if not _removable(steps, i):
                continue
            candidate = [s.to_action() for j, s in enumerate(steps) if j != i]
            probe = replay_trace(env, trace.seed, candidate)
            if probe.terminal_status == original_status:
                del steps[i]
                changed = True
        if changed:
            # refresh outcomes so later passes judge the shortened sequence
            steps = replay_trace(
                env, trace.seed, [s.to_action() for s in steps]
            ).steps

    result = replay_trace(env, trace.seed, [s.to_action() for s in steps])
    if result.terminal_status != original_status:
        raise PruneDivergenceError(
            f"pruned trace reaches {result.terminal_status}, "
            f"original was {original_status}"
        )
    return result


def summarize(traces: list[AttackTrace]) -> "PathSummary":
    if not traces:
        raise ValueError("no traces to summarize")
    return PathSummary.from_traces(traces)


def _stats(values) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std()),
        "min": float(arr.min()),
        "max": float(arr.max()),
    }


@dataclass
class PathSummary:
    per_trace: list[dict]
    steps: dict[str, float]
    duration_minutes: dict[str, float]
    rewards: dict[str, float]
    n_traces: int
    n_complete: int
    n_partial: int
    n_none: int
    # connect/upload/sleep statistics over fully successful traces only
    action_counts: dict[str, dict[str, float]]

    @classmethod
    def from_traces(cls, traces: list[AttackTrace]) -> "PathSummary":
        per_trace = [{
            "steps": t.n_steps,
            "duration_minutes": t.duration_minutes,
            "reward": t.total_reward,
            "classification": t.classification(),
        } for t in traces]
        classes = [r["classification"] for r in per_trace]
        successful = [t for t in traces if t.classification() == "complete"]
        counts = {}
        for kind in ("connect", "upload", "sleep"):
            if successful:
                counts[kind] = _stats([t.action_count(kind) for t in successful])
            else:
                counts[kind] = {"mean": float("nan"), "std": float("nan"),
                                "min": float("nan"), "max": float("nan")}
        return cls(
            per_trace=per_trace,
            steps=_stats([r["steps"] for r in per_trace]),
            duration_minutes=_stats([r["duration_minutes"] for r in per_trace]),
            rewards=_stats([r["reward"] for r in per_trace]),
            n_traces=len(traces),
            n_complete=classes.count("complete"),
            n_partial=classes.count("partial"),
            n_none=classes.count("none"),
            action_counts=counts,
        )

    def to_csv(self) -> str:
        lines = ["metric,mean,std,min,max"]
        for name, stats in (("steps", self.steps),
                            ("duration_minutes", self.duration_minutes),
                            ("reward", self.rewards)):
            lines.append(f"{name},{stats['mean']:.6g},{stats['std']:.6g},"
                         f"{stats['min']:.6g},{stats['max']:.6g}")
        for kind in ("connect", "upload", "sleep"):
            s = self.action_counts[kind]
            lines.append(f"{kind}_actions,{s['mean']:.6g},{s['std']:.6g},"
                         f"{s['min']:.6g},{s['max']:.6g}")
        lines.append(f"outcomes,complete={self.n_complete},"
                     f"partial={self.n_partial},none={self.n_none},"
                     f"total={self.n_traces}")
        return "\n".join(lines) + "\n"


def upload_timing(trace: AttackTrace) -> tuple[list[float], list[float]]:
    """Upload timestamps plus inter-upload gaps.

    Gaps are measured between consecutive uploads of the same target so an
    interleaved two-target schedule still reflects each channel's cadence;
    the per-target gap lists are concatenated.
    """
    events = [(s.target, s.clock) for s in trace.steps
              if s.action == "upload" and s.outcome == "uploaded"]
    times = [t for _, t in events]
    gaps: list[float] = []
    targets = sorted({tgt for tgt, _ in events})
    for tgt in targets:
        own = [t for e_tgt, t in events if e_tgt == tgt]
        gaps.extend(np.diff(own).tolist())
    return times, gaps


def timing_to_csv(traces: list[AttackTrace]) -> tuple[str, str]:
    """(upload times CSV, inter-upload gaps CSV) over a trace collection."""
    time_lines = ["trace,event,time_s"]
    gap_lines = ["trace,gap_s"]
    for i, trace in enumerate(traces):
        times, gaps = upload_timing(trace)
        for j, t in enumerate(times):
            time_lines.append(f"{i},{j},{t:.6g}")
        for g in gaps:
            gap_lines.append(f"{i},{g:.6g}")
    return "\n".join(time_lines) + "\n", "\n".join(gap_lines) + "\n"


# ---------------------------------------------------------------------------
# JSON-lines trace persistence


def _addr_key(addr: tuple[int, int]) -> str:
    return f"{addr[0]},{addr[1]}"


def write_traces_jsonl(traces: list[AttackTrace], fh) -> None:
    for i, trace in enumerate(traces):
        meta = {
            "record": "trace",
            "trace": i,
            "seed": trace.seed,
            "terminal_status": {
                _addr_key(a): s for a, s in sorted(trace.terminal_status.items())
            },
            "emergencies": trace.emergencies,
        }
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for s in trace.steps:
            row = {
                "record": "step",
                "trace": i,
                "step": s.step,
                "clock": s.clock,
                "action": s.action,
                "target": list(s.target) if s.target else None,
                "reward": s.reward,
                "outcome": s.outcome,
            }
            if s.vulnerability:
                row["vulnerability"] = s.vulnerability
            if s.rate:
                row["rate"] = s.rate
            if s.n_discovered is not None:
                row["n_discovered"] = s.n_discovered
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_traces_jsonl(fh) -> list[AttackTrace]:
    traces: dict[int, AttackTrace] = {}
    for line in fh:
        line = line.strip()
        if not line:
            continue
        row = json.loads(line)
        if row["record"] == "trace":
            status = {
                tuple(int(x) for x in key.split(",")): value
                for key, value in row["terminal_status"].items()
            }
            traces[row["trace"]] = AttackTrace(
                seed=row["seed"], terminal_status=status,
                emergencies=row.get("emergencies", 0),
            )
        elif row["record"] == "step":
            traces[row["trace"]].steps.append(TraceStep(
                step=row["step"],
                clock=row["clock"],
                action=row["action"],
                target=tuple(row["target"]) if row["target"] else None,
                reward=row["reward"],
                outcome=row["outcome"],
                vulnerability=row.get("vulnerability"),
                rate=row.get("rate"),
                n_discovered=row.get("n_discovered"),
            ))
    return [traces[k] for k in sorted(traces)]
