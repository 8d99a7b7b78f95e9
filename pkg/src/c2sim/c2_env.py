"""The three-stage attack campaign MDP.

Stage one: discover hosts with subnet scans and compromise them with
exploits. Stage two: establish a channel from a compromised sensitive host
out to the remote server, across every firewall on the path to the internet.
Stage three: upload the host's payload without tripping the firewalls'
rate monitors.

All timing is wall-clock seconds, advanced per action. Firewalls update on a
24h schedule and in response to suspicious traffic; an update blocks future
connections from hosts compromised before it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import yaml

from .net_model import (
    Address,
    Host,
    NetworkTopology,
    firewall_path,
)

# Fixed length of the rate-monitoring window (the "five-minute window").
WINDOW_SECONDS = 300.0

NOT_CONNECTED = "not_connected"
CONNECTED = "connected"
ISOLATED = "isolated"
CONNECTION_STATUSES = (NOT_CONNECTED, CONNECTED, ISOLATED)

# Connect attempt outcomes.
OUTCOME_CONNECTED = "connected"
OUTCOME_BLOCKED = "blocked_by_update"
OUTCOME_FAILED = "failed_random"
OUTCOME_EMERGENCY = "triggered_emergency"
OUTCOME_ALREADY = "already_connected"

# Base action cost by type plus a penalty for the target's defense tier;
# the total always lands in [1, 6].
BASE_COST = {"subnet_scan": 2, "exploit": 4, "connect": 1, "upload": 2, "sleep": 1}
TIER_PENALTY = {"low": 0, "medium": 1, "high": 2}

# Observation scaling so features sit near unit range.
VALUE_SCALE = 1e-3
INFECTION_TIME_SCALE = 1.0 / 3600.0
UPLOAD_TIME_SCALE = 1.0 / 60.0
UPLOAD_VOLUME_SCALE = 1e-3


class ScenarioError(Exception):
    """Scenario config inconsistent with the topology."""


class EpisodeDoneError(Exception):
    """step() was called on a finished episode."""


# ---------------------------------------------------------------------------
# Actions


@dataclass(frozen=True)
class SubnetScan:
    host: Address
    kind = "subnet_scan"


@dataclass(frozen=True)
class Exploit:
    host: Address
    cve_id: str
    kind = "exploit"


@dataclass(frozen=True)
class Connect:
    host: Address
    kind = "connect"


@dataclass(frozen=True)
class Upload:
    host: Address
    rate: str  # "fast" | "slow"
    kind = "upload"


@dataclass(frozen=True)
class Sleep:
    kind = "sleep"


Action = SubnetScan | Exploit | Connect | Upload | Sleep


@dataclass(frozen=True)
class RewardTable:
    discovery: float = 1000.0
    infection: float = 1000.0
    connection: float = 1000.0
    upload_per_mb: float = 0.1
    upload_bonus: float = 10000.0


@dataclass(frozen=True)
class ActionTimes:
    """Wall-clock seconds consumed by each action type. Erroneous actions
    are interrupted early and consume one second."""

    subnet_scan: float = 30.0
    exploit: float = 10.0
    connect: float = 1.0
    upload: float = 10.0
    sleep: float = 60.0
    erroneous: float = 1.0

    def of(self, action: Action) -> float:
        return getattr(self, action.kind)


@dataclass(frozen=True)
class ScenarioConfig:
    initial_foothold: Address
    sensitive_hosts: tuple[Address, ...]
    payload_size_mb: float = 10000.0
    max_steps: int = 10000
    decay_factor: float = 0.999
    rewards: RewardTable = field(default_factory=RewardTable)
    action_times: ActionTimes = field(default_factory=ActionTimes)
    upload_rates: dict[str, float] = field(
        default_factory=lambda: {"fast": 1000.0, "slow": 10.0}
    )
    cvss_scaled_exploits: bool = False
    topology_ref: str | None = None

    def __post_init__(self) -> None:
        if self.payload_size_mb <= 0:
            raise ScenarioError("payload_size_mb must be positive")
        if not 0.0 < self.decay_factor < 1.0:
            raise ScenarioError("decay_factor must be in (0, 1)")
        if self.max_steps < 1:
            raise ScenarioError("max_steps must be >= 1")

    @classmethod
    def from_yaml(cls, text: str) -> "ScenarioConfig":
        doc = yaml.safe_load(text)
        rewards = RewardTable(**doc.get("rewards", {}))
        times = ActionTimes(**doc.get("action_times", {}))
        rates = {k: float(v) for k, v in doc.get(
            "upload_rates", {"fast": 1000.0, "slow": 10.0}).items()}
        return cls(
            initial_foothold=tuple(doc["initial_foothold"]),
            sensitive_hosts=tuple(tuple(a) for a in doc["sensitive_hosts"]),
            payload_size_mb=float(doc.get("payload_size_mb", 10000.0)),
            max_steps=int(doc.get("max_steps", 10000)),
            decay_factor=float(doc.get("decay_factor", 0.999)),
            rewards=rewards,
            action_times=times,
            upload_rates=rates,
            cvss_scaled_exploits=bool(doc.get("cvss_scaled_exploits", False)),
            topology_ref=doc.get("topology"),
        )

    def to_yaml(self) -> str:
        doc = {
            "schema_version": 1,
            "initial_foothold": list(self.initial_foothold),
            "sensitive_hosts": [list(a) for a in self.sensitive_hosts],
            "payload_size_mb": self.payload_size_mb,
            "max_steps": self.max_steps,
            "decay_factor": self.decay_factor,
            "rewards": {
                "discovery": self.rewards.discovery,
                "infection": self.rewards.infection,
                "connection": self.rewards.connection,
                "upload_per_mb": self.rewards.upload_per_mb,
                "upload_bonus": self.rewards.upload_bonus,
            },
            "action_times": {
                "subnet_scan": self.action_times.subnet_scan,
                "exploit": self.action_times.exploit,
                "connect": self.action_times.connect,
                "upload": self.action_times.upload,
                "sleep": self.action_times.sleep,
                "erroneous": self.action_times.erroneous,
            },
            "upload_rates": dict(self.upload_rates),
            "cvss_scaled_exploits": self.cvss_scaled_exploits,
        }
        if self.topology_ref:
            doc["topology"] = self.topology_ref
        return yaml.safe_dump(doc, sort_keys=False)


# ---------------------------------------------------------------------------
# Runtime state


@dataclass
class UploadEvent:
    time: float
    mb: float
    duration: float


@dataclass
class HostRuntimeState:
    discovered: bool = False
    infected: bool = False
    infection_time: float = 0.0
    connection_status: str = NOT_CONNECTED
    payload_remaining: float = 0.0
    cum_connect_attempts: float = 0.0
    cum_upload_time: float = 0.0
    cum_upload_volume: float = 0.0
    upload_events: list[UploadEvent] = field(default_factory=list)


@dataclass
class FirewallRuntimeState:
    last_update_time: float
    next_scheduled_update: float


@dataclass
class EnvState:
    clock: float = 0.0
    step_count: int = 0
    hosts: dict[Address, HostRuntimeState] = field(default_factory=dict)
    firewalls: dict[str, FirewallRuntimeState] = field(default_factory=dict)
    accumulated_reward: dict[Address, float] = field(default_factory=dict)


def apply_decay(c: float, elapsed: float, d: float) -> float:
    """Exponential decay of a cumulative metric over elapsed wall-clock."""
    if c < 0 or elapsed < 0:
        raise ValueError("decay inputs must be non-negative")
    return c * d ** elapsed


def action_cost(action: Action, target: Host | None) -> float:
    """Cost in [1, 6] from the action type and the target's defense tier."""
    base = BASE_COST[action.kind]
    if target is None:
        return float(base)
    return float(base + TIER_PENALTY[target.max_defense_tier()])


def build_action_space(topology: NetworkTopology,
                       scenario: ScenarioConfig) -> list[Action]:
    """Flat, deterministic enumeration of every action in the MDP."""
    actions: list[Action] = []
    hosts = topology.hosts()
    for h in hosts:
        actions.append(SubnetScan(h.address))
    for h in hosts:
        seen = set()
        for b in h.services:
            for v in b.vulnerabilities:
                if v.cve_id not in seen:
                    seen.add(v.cve_id)
                    actions.append(Exploit(h.address, v.cve_id))
    sensitive = sorted(scenario.sensitive_hosts)
    for addr in sensitive:
        actions.append(Connect(addr))
    for addr in sensitive:
        actions.append(Upload(addr, "fast"))
        actions.append(Upload(addr, "slow"))
    actions.append(Sleep())
    return actions


class C2Env:
    """Episodic environment over a fixed topology and scenario.

    One instance is single-threaded; run several instances with separate
    seeds for parallel rollouts. The topology is never mutated.
    """

    def __init__(self, topology: NetworkTopology, scenario: ScenarioConfig):
        self.topology = topology
        self.scenario = scenario
        self._validate_scenario()

        self.actions = build_action_space(topology, scenario)
        self.n_actions = len(self.actions)
        self._hosts = {h.address: h for h in topology.hosts()}
        self._host_order = [h.address for h in topology.hosts()]
        self._sensitive = sorted(scenario.sensitive_hosts)

        self._paths = {
            s.id: firewall_path(topology, s.id) for s in topology.subnets
        }
        self._fw_by_id = {fw.id: fw for fw in topology.firewalls}

        self._build_obs_layout()
        self.state: EnvState | None = None
        self._done = True
        self._rng: np.random.Generator | None = None

    # -- setup ------------------------------------------------------------

    def _validate_scenario(self) -> None:
        try:
            foothold = self.topology.host(self.scenario.initial_foothold)
        except KeyError as exc:
            raise ScenarioError(f"initial foothold not in topology: {exc}") from exc
        del foothold
        if not self.scenario.sensitive_hosts:
            raise ScenarioError("scenario names no sensitive hosts")
        if len(set(self.scenario.sensitive_hosts)) != len(
                self.scenario.sensitive_hosts):
            raise ScenarioError("duplicate sensitive host addresses")
        for addr in self.scenario.sensitive_hosts:
            try:
                host = self.topology.host(addr)
            except KeyError as exc:
                raise ScenarioError(f"sensitive host not in topology: {exc}") from exc
            if addr == self.scenario.initial_foothold:
                continue
            if not any(self._vuln_applies(host, v) for v in host.vulnerabilities()):
                raise ScenarioError(
                    f"sensitive host {addr} has no vulnerability exploitable "
                    f"on its own os/services"
                )

    def _build_obs_layout(self) -> None:
        subnet_ids = self.topology.subnet_ids
        self._subnet_index = {sid: i for i, sid in enumerate(subnet_ids)}
        self._local_index = {}
        max_local = 0
        for s in self.topology.subnets:
            ordered = sorted(h.local_id for h in s.hosts)
            for i, lid in enumerate(ordered):
                self._local_index[(s.id, lid)] = i
            max_local = max(max_local, len(ordered))
        self._service_vocab = sorted({
            b.service_name for h in self.topology.hosts() for b in h.services
        })
        svc_index = {name: i for i, name in enumerate(self._service_vocab)}

        n_sub = len(subnet_ids)
        n_svc = len(self._service_vocab)
        self.host_block_len = n_sub + max_local + 2 + n_svc + 4
        self.sensitive_block_len = 3 + 5
        self.obs_len = (len(self._host_order) * self.host_block_len
                        + len(self._sensitive) * self.sensitive_block_len)

        template = np.zeros(self.obs_len, dtype=np.float64)
        self._host_offsets = {}
        off = 0
        for addr in self._host_order:
            h = self._hosts[addr]
            template[off + self._subnet_index[h.subnet_id]] = 1.0
            base = off + n_sub
            template[base + self._local_index[addr]] = 1.0
            base += max_local
            template[base + (0 if h.os == "windows" else 1)] = 1.0
            base += 2
            for b in h.services:
                template[base + svc_index[b.service_name]] = 1.0
            base += n_svc
            template[base + 0] = h.discovery_value * VALUE_SCALE
            template[base + 2] = h.infection_value * VALUE_SCALE
            # base+1 and base+3 are the discovered / infected status bits
            self._host_offsets[addr] = base
            off += self.host_block_len
        self._sensitive_offsets = {}
        for addr in self._sensitive:
            self._sensitive_offsets[addr] = off
            off += self.sensitive_block_len
        self._obs_template = template

    # -- episode control ---------------------------------------------------

    def reset(self, seed: int | None = None) -> np.ndarray:
        self._rng = np.random.default_rng(seed)
        hosts = {addr: HostRuntimeState() for addr in self._host_order}
        for addr in self._sensitive:
            hosts[addr].payload_remaining = self.scenario.payload_size_mb
        foothold = hosts[self.scenario.initial_foothold]
        foothold.discovered = True
        foothold.infected = True
        foothold.infection_time = 0.0

        firewalls = {}
        for fw in self.topology.firewalls:
            firewalls[fw.id] = FirewallRuntimeState(
                last_update_time=0.0,
                next_scheduled_update=fw.params.update_period_seconds,
            )
        self.state = EnvState(
            hosts=hosts,
            firewalls=firewalls,
            accumulated_reward={addr: 0.0 for addr in self._host_order},
        )
        self._done = False
        return self.encode_observation()

    @property
    def done(self) -> bool:
        return self._done

    def action_at(self, index: int) -> Action:
        return self.actions[index]

    def step(self, action: int | Action):
        """Apply one action. Returns (observation, reward, done, info)."""
        if self.state is None or self._done:
            raise EpisodeDoneError("step() after episode end; call reset()")
        if isinstance(action, (int, np.integer)):
            action = self.actions[int(action)]

        st = self.state
        valid = self._is_valid(action)
        elapsed = (self.scenario.action_times.of(action) if valid
                   else self.scenario.action_times.erroneous)
        st.clock += elapsed
        self._decay_all(elapsed)
        self._scheduled_updates()

        target = getattr(action, "host", None)
        reward = -action_cost(action, self._hosts.get(target))
        info = {
            "action": action.kind,
            "target": target,
            "valid": valid,
            "elapsed": elapsed,
            "outcome": "erroneous",
            "emergency": False,
            "penalty": 0.0,
        }
        if isinstance(action, Exploit):
            info["cve"] = action.cve_id
        if isinstance(action, Upload):
            info["rate"] = action.rate

        if valid:
            if isinstance(action, SubnetScan):
                newly, gained = self._do_subnet_scan(action.host)
                reward += gained
                info["outcome"] = "scanned"
                info["newly_discovered"] = newly
            elif isinstance(action, Exploit):
                success, gained = self._do_exploit(action.host, action.cve_id)
                reward += gained
                info["outcome"] = "exploited" if success else "exploit_failed"
            elif isinstance(action, Connect):
                outcome, result, gained, penalty = self._do_connect(action.host)
                reward += gained - penalty
                info["outcome"] = outcome
                info["connect_result"] = result
                info["emergency"] = outcome == OUTCOME_EMERGENCY
                info["penalty"] = penalty
            elif isinstance(action, Upload):
                mb, gained, penalty, emergency = self._do_upload(
                    action.host, action.rate)
                reward += gained - penalty
                info["outcome"] = "uploaded"
                info["mb"] = mb
                info["emergency"] = emergency
                info["penalty"] = penalty
            else:
                info["outcome"] = "slept"

        st.step_count += 1
        self._done = self._check_done()
        info["clock"] = st.clock
        if st.step_count >= self.scenario.max_steps and not self._all_targets_settled():
            info["truncated"] = True
        return self.encode_observation(), reward, self._done, info

    # -- action semantics ---------------------------------------------------

    def _is_valid(self, action: Action) -> bool:
        st = self.state
        if isinstance(action, Sleep):
            return True
        hs = st.hosts[action.host]
        if isinstance(action, SubnetScan):
            return hs.infected
        if isinstance(action, Exploit):
            return hs.discovered
        if isinstance(action, Connect):
            return (action.host in self._sensitive and hs.infected
                    and hs.connection_status != ISOLATED)
        if isinstance(action, Upload):
            return (action.host in self._sensitive
                    and hs.connection_status == CONNECTED
                    and hs.payload_remaining > 0)
        raise TypeError(f"unknown action {action!r}")

    def _decay_all(self, elapsed: float) -> None:
        d = self.scenario.decay_factor
        factor = d ** elapsed
        for addr in self._sensitive:
            hs = self.state.hosts[addr]
            hs.cum_connect_attempts *= factor
            hs.cum_upload_time *= factor
            hs.cum_upload_volume *= factor

    def _scheduled_updates(self) -> None:
        clock = self.state.clock
        for fw in self.topology.firewalls:
            fws = self.state.firewalls[fw.id]
            period = fw.params.update_period_seconds
            while fws.next_scheduled_update <= clock:
                fws.last_update_time = fws.next_scheduled_update
                fws.next_scheduled_update += period

    def _credit(self, addr: Address, amount: float) -> None:
        self.state.accumulated_reward[addr] += amount

    def _do_subnet_scan(self, origin: Address) -> tuple[list[Address], float]:
        """Discover same-subnet hosts plus allow-rule-visible neighbors."""
        st = self.state
        sid = origin[0]
        newly: list[Address] = []

        def discover(host: Host) -> None:
            hs = st.hosts[host.address]
            if not hs.discovered:
                hs.discovered = True
                newly.append(host.address)

        for h in self.topology.subnet(sid).hosts:
            discover(h)
        for nb in self.topology.neighbors(sid):
            allowed = self.topology.allowed_ports(sid, nb)
            if allowed is not None and not allowed:
                continue
            for h in self.topology.subnet(nb).hosts:
                if not h.services:
                    continue
                if allowed is None or any(b.port in allowed for b in h.services):
                    discover(h)

        gained = 0.0
        for addr in newly:
            value = self._hosts[addr].discovery_value
            gained += value
            self._credit(addr, value)
        return sorted(newly), gained

    def _vuln_applies(self, host: Host, vuln) -> bool:
        if vuln.required_service and vuln.required_service not in host.service_names:
            return False
        if vuln.required_os is not None and vuln.required_os != host.os:
            return False
        return True

    def _do_exploit(self, target: Address, cve_id: str) -> tuple[bool, float]:
        host = self._hosts[target]
        hs = self.state.hosts[target]
        matching = [v for v in host.vulnerabilities() if v.cve_id == cve_id]
        applicable = [v for v in matching if self._vuln_applies(host, v)]
        success = bool(applicable)
        if success and self.scenario.cvss_scaled_exploits:
            best = max(v.cvss_score for v in applicable)
            success = self._rng.random() < best / 10.0
        if not success:
            return False, 0.0
        if hs.infected:
            return True, 0.0
        hs.infected = True
        hs.infection_time = self.state.clock
        self._credit(target, host.infection_value)
        return True, host.infection_value

    def _path_firewalls(self, addr: Address):
        return [self._fw_by_id[fid] for fid in self._paths[addr[0]]]

    def _do_connect(self, target: Address) -> tuple[str, str, float, float]:
        """Returns (outcome, attempt result, reward gained, penalty).

        The attempt result records how the attempt itself resolved even when
        the threshold check afterwards escalates the outcome to an emergency.
        """
        st = self.state
        hs = st.hosts[target]
        hs.cum_connect_attempts += 1.0

        path = self._path_firewalls(target)
        gained = 0.0
        if hs.connection_status == CONNECTED:
            result = OUTCOME_ALREADY
        elif any(st.firewalls[fw.id].last_update_time > hs.infection_time
                 for fw in path):
            result = OUTCOME_BLOCKED
        else:
            p_all = math.prod(fw.params.connect_probability for fw in path)
            if self._rng.random() < p_all:
                hs.connection_status = CONNECTED
                gained = self.scenario.rewards.connection
                self._credit(target, gained)
                result = OUTCOME_CONNECTED
            else:
                result = OUTCOME_FAILED

        penalty = 0.0
        outcome = result
        if self.check_emergency(target):
            penalty = self._trigger_emergency(target)
            outcome = OUTCOME_EMERGENCY
        return outcome, result, gained, penalty

    def _do_upload(self, target: Address, rate: str) -> tuple[float, float, float, bool]:
        """Returns (mb uploaded, reward gained, emergency penalty, emergency)."""
        st = self.state
        hs = st.hosts[target]
        mb = min(self.scenario.upload_rates[rate], hs.payload_remaining)
        duration = self.scenario.action_times.upload
        hs.payload_remaining -= mb
        hs.upload_events.append(UploadEvent(time=st.clock, mb=mb, duration=duration))
        hs.cum_upload_volume += mb
        hs.cum_upload_time += duration

        gained = self.scenario.rewards.upload_per_mb * mb
        self._credit(target, gained)
        if hs.payload_remaining <= 0.0:
            hs.payload_remaining = 0.0
            # Completion bonus is never part of the per-host accumulation,
            # so a later detection cannot revoke it.
            gained += self.scenario.rewards.upload_bonus

        penalty = 0.0
        emergency = self.check_emergency(target)
        if emergency:
            penalty = self._trigger_emergency(target)
        return mb, gained, penalty, emergency

    def window_totals(self, target: Address) -> tuple[float, float]:
        """Upload volume (MB) and time (s) inside the trailing window.

        An event counts iff its timestamp lies in (clock - 300, clock].
        """
        st = self.state
        lo = st.clock - WINDOW_SECONDS
        vol = 0.0
        tim = 0.0
        for ev in reversed(st.hosts[target].upload_events):
            if ev.time <= lo:
                break
            vol += ev.mb
            tim += ev.duration
        return vol, tim

    def check_emergency(self, target: Address) -> bool:
        """True when the host's traffic exceeds a path firewall threshold."""
        hs = self.state.hosts[target]
        path = self._path_firewalls(target)
        max_attempts = min(fw.params.max_connect_attempts for fw in path)
        max_volume = min(fw.params.max_upload_volume for fw in path)
        max_time = min(fw.params.max_upload_time_seconds for fw in path)
        if hs.cum_connect_attempts > max_attempts:
            return True
        vol, tim = self.window_totals(target)
        return vol > max_volume or tim > max_time

    def _trigger_emergency(self, target: Address) -> float:
        """Update the path firewalls, isolate the host, forfeit its rewards."""
        st = self.state
        for fw in self._path_firewalls(target):
            fws = st.firewalls[fw.id]
            fws.last_update_time = st.clock
            fws.next_scheduled_update = st.clock + fw.params.update_period_seconds
        hs = st.hosts[target]
        hs.connection_status = ISOLATED
        penalty = st.accumulated_reward[target]
        st.accumulated_reward[target] = 0.0
        return penalty

    # -- termination & encoding ---------------------------------------------

    def _all_targets_settled(self) -> bool:
        for addr in self._sensitive:
            hs = self.state.hosts[addr]
            if hs.payload_remaining > 0 and hs.connection_status != ISOLATED:
                return False
        return True

    def _check_done(self) -> bool:
        return (self._all_targets_settled()
                or self.state.step_count >= self.scenario.max_steps)

    def terminal_status(self, addr: Address) -> str:
        """completed | isolated | incomplete for a sensitive host."""
        hs = self.state.hosts[addr]
        if hs.payload_remaining <= 0.0:
            return "completed"
        if hs.connection_status == ISOLATED:
            return "isolated"
        return "incomplete"

    def encode_observation(self) -> np.ndarray:
        st = self.state
        obs = self._obs_template.copy()
        for addr in self._host_order:
            hs = st.hosts[addr]
            base = self._host_offsets[addr]
            obs[base + 1] = 1.0 if hs.discovered else 0.0
            obs[base + 3] = 1.0 if hs.infected else 0.0
        for addr in self._sensitive:
            hs = st.hosts[addr]
            off = self._sensitive_offsets[addr]
            obs[off + CONNECTION_STATUSES.index(hs.connection_status)] = 1.0
            since = st.clock - hs.infection_time if hs.infected else 0.0
            obs[off + 3] = since * INFECTION_TIME_SCALE
            obs[off + 4] = hs.payload_remaining / self.scenario.payload_size_mb
            obs[off + 5] = hs.cum_connect_attempts
            obs[off + 6] = hs.cum_upload_time * UPLOAD_TIME_SCALE
            obs[off + 7] = hs.cum_upload_volume * UPLOAD_VOLUME_SCALE
        return obs
