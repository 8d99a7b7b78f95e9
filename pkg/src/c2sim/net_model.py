"""Network domain model: subnets, hosts, services, firewalls, and the YAML
manifest format that persists them.

A topology is immutable once loaded/validated and can be shared freely across
environment instances.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import yaml

SCHEMA_VERSION = 1

# Sentinel for the internet side of a firewall edge / adjacency.
INTERNET = "internet"

OS_WINDOWS = "windows"
OS_LINUX = "linux"
KNOWN_OSES = (OS_WINDOWS, OS_LINUX)

DEFENSE_TIERS = ("high", "medium", "low")


class TopologyError(Exception):
    """A manifest violated a structural invariant."""


class ManifestParseError(TopologyError):
    """The manifest text is not well-formed YAML or misses required keys."""


class UnreachableSubnetError(TopologyError):
    """A subnet has no path to the internet gateway."""


@dataclass(frozen=True)
class Vulnerability:
    """A CVE record attached to a service binding."""

    cve_id: str
    cvss_score: float
    cvss_vector: str
    required_service: str
    required_os: str | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.cvss_score <= 10.0:
            raise TopologyError(
                f"{self.cve_id}: cvss_score must be in [0, 10], got {self.cvss_score}"
            )


@dataclass(frozen=True)
class ServiceBinding:
    """A service (with optional CPE label) listening on one port of a host."""

    port: int
    service_name: str
    cpe: str
    vulnerabilities: tuple[Vulnerability, ...] = ()
    defense_tier: str = "low"

    def __post_init__(self) -> None:
        if self.defense_tier not in DEFENSE_TIERS:
            raise TopologyError(
                f"port {self.port}: defense_tier must be one of {DEFENSE_TIERS}, "
                f"got {self.defense_tier!r}"
            )


Address = tuple[int, int]


@dataclass(frozen=True)
class Host:
    address: Address
    os: str
    open_ports: frozenset[int]
    services: tuple[ServiceBinding, ...] = ()
    discovery_value: float = 1000.0
    infection_value: float = 1000.0
    is_sensitive: bool = False
    is_security_product: bool = False

    @property
    def subnet_id(self) -> int:
        return self.address[0]

    @property
    def local_id(self) -> int:
        return self.address[1]

    @property
    def service_names(self) -> frozenset[str]:
        return frozenset(b.service_name for b in self.services)

    def max_defense_tier(self) -> str:
        """Highest tier among the host's services; 'low' when unserviced."""
        tiers = {b.defense_tier for b in self.services}
        for tier in ("high", "medium"):
            if tier in tiers:
                return tier
        return "low"

    def vulnerabilities(self) -> list[Vulnerability]:
        return [v for b in self.services for v in b.vulnerabilities]


@dataclass(frozen=True)
class AllowRule:
    """Permits traffic between the owning subnet and ``peer`` on ``port``.

    ``port`` of None means all ports.
    """

    peer: int
    port: int | None = None


@dataclass(frozen=True)
class Subnet:
    id: int
    hosts: tuple[Host, ...]
    allow_rules: tuple[AllowRule, ...] = ()

    def __post_init__(self) -> None:
        if self.id <= 0:
            raise TopologyError(f"subnet id must be positive, got {self.id}")


@dataclass(frozen=True)
class FirewallParams:
    """Behavioural parameters of one firewall (times in native units:
    upload window in MB and minutes, update period in hours)."""

    connect_probability: float = 0.8
    max_connect_attempts: int = 3
    max_upload_volume: float = 5000.0
    max_upload_time: float = 4.0
    update_frequency: float = 24.0

    def __post_init__(self) -> None:
        if not 0.0 < self.connect_probability <= 1.0:
            raise TopologyError(
                f"connect_probability must be in (0, 1], got {self.connect_probability}"
            )
        for name in ("max_connect_attempts", "max_upload_volume",
                     "max_upload_time", "update_frequency"):
            if getattr(self, name) <= 0:
                raise TopologyError(f"{name} must be strictly positive")

    @property
    def max_upload_time_seconds(self) -> float:
        return self.max_upload_time * 60.0

    @property
    def update_period_seconds(self) -> float:
        return self.update_frequency * 3600.0


@dataclass(frozen=True)
class Firewall:
    id: str
    edge: tuple[int | str, int | str]
    params: FirewallParams = field(default_factory=FirewallParams)


@dataclass(frozen=True)
class NetworkTopology:
    """Validated, immutable description of an enterprise network.

    Collections are canonicalized on construction (subnets by id, hosts by
    address, firewall edges low-to-high with the internet side last), so two
    logically identical topologies compare equal regardless of input order.
    """

    subnets: tuple[Subnet, ...]
    firewalls: tuple[Firewall, ...]
    internet_gateway_subnets: frozenset[int]
    adjacency: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "subnets", _canonical_subnets(self.subnets))
        object.__setattr__(self, "firewalls", _canonical_firewalls(self.firewalls))
        object.__setattr__(
            self, "internet_gateway_subnets",
            frozenset(self.internet_gateway_subnets))
        object.__setattr__(
            self, "adjacency",
            tuple(sorted(tuple(sorted(e)) for e in self.adjacency)))
        validate_topology(self)

    @property
    def subnet_ids(self) -> list[int]:
        return sorted(s.id for s in self.subnets)

    def subnet(self, subnet_id: int) -> Subnet:
        for s in self.subnets:
            if s.id == subnet_id:
                return s
        raise KeyError(f"no subnet {subnet_id}")

    def hosts(self) -> list[Host]:
        """All hosts ordered by (subnet_id, local_id)."""
        out = [h for s in self.subnets for h in s.hosts]
        out.sort(key=lambda h: h.address)
        return out

    def host(self, address: Address) -> Host:
        sid, lid = address
        for h in self.subnet(sid).hosts:
            if h.local_id == lid:
                return h
        raise KeyError(f"no host {address}")

    def neighbors(self, subnet_id: int) -> list[int]:
        out = set()
        for a, b in self.adjacency:
            if a == subnet_id:
                out.add(b)
            elif b == subnet_id:
                out.add(a)
        return sorted(out)

    def allowed_ports(self, subnet_a: int, subnet_b: int) -> set[int] | None:
        """Ports permitted between two subnets, or None meaning all ports.

        Rules are treated symmetrically: a rule on either side opens the port
        for both. An empty set means no traffic is allowed.
        """
        ports: set[int] = set()
        for sid, peer in ((subnet_a, subnet_b), (subnet_b, subnet_a)):
            for rule in self.subnet(sid).allow_rules:
                if rule.peer != peer:
                    continue
                if rule.port is None:
                    return None
                ports.add(rule.port)
        return ports

    def firewall_on_edge(self, side_a: int | str, side_b: int | str) -> Firewall:
        key = frozenset((side_a, side_b))
        for fw in self.firewalls:
            if frozenset(fw.edge) == key:
                return fw
        raise KeyError(f"no firewall on edge ({side_a}, {side_b})")


def _canonical_subnets(subnets) -> tuple[Subnet, ...]:
    out = []
    for s in sorted(subnets, key=lambda s: s.id):
        hosts = tuple(sorted(
            (replace(h, services=tuple(sorted(h.services, key=lambda b: b.port)))
             for h in s.hosts),
            key=lambda h: h.address,
        ))
        rules = tuple(sorted(s.allow_rules,
                             key=lambda r: (r.peer, -1 if r.port is None else r.port)))
        out.append(replace(s, hosts=hosts, allow_rules=rules))
    return tuple(out)


def _canonical_firewalls(firewalls) -> tuple[Firewall, ...]:
    out = []
    for fw in firewalls:
        a, b = fw.edge
        if a == INTERNET:
            a, b = b, a
        elif b != INTERNET and a > b:
            a, b = b, a
        out.append(replace(fw, edge=(a, b)))
    return tuple(sorted(out, key=lambda f: f.id))


def validate_topology(t: NetworkTopology) -> None:
    """Raise TopologyError naming the first violated invariant."""
    if not t.subnets:
        raise TopologyError("topology has no subnets")

    subnet_ids = [s.id for s in t.subnets]
    if len(set(subnet_ids)) != len(subnet_ids):
        raise TopologyError("duplicate subnet ids")
    id_set = set(subnet_ids)

    seen: set[Address] = set()
    for s in t.subnets:
        for h in s.hosts:
            if h.subnet_id != s.id:
                raise TopologyError(
                    f"host {h.address} listed under subnet {s.id}"
                )
            if h.address in seen:
                raise TopologyError(f"duplicate host address {h.address}")
            seen.add(h.address)
            if h.os not in KNOWN_OSES:
                raise TopologyError(
                    f"host {h.address}: unknown os {h.os!r}"
                )
            cpe_count = sum(1 for b in h.services if b.cpe)
            if cpe_count > len(h.open_ports):
                raise TopologyError(
                    f"host {h.address}: cpe count exceeds open ports "
                    f"({cpe_count} > {len(h.open_ports)})"
                )
            bound_ports = [b.port for b in h.services]
            if len(set(bound_ports)) != len(bound_ports):
                raise TopologyError(
                    f"host {h.address}: multiple services bound to one port"
                )
            for b in h.services:
                if b.port not in h.open_ports:
                    raise TopologyError(
                        f"host {h.address}: service on closed port {b.port}"
                    )
            if h.is_sensitive and not h.vulnerabilities():
                raise TopologyError(
                    f"sensitive host {h.address} has no exploitable vulnerability"
                )
        for rule in s.allow_rules:
            if rule.peer not in id_set:
                raise TopologyError(
                    f"subnet {s.id}: allow rule references unknown subnet {rule.peer}"
                )

    if not t.internet_gateway_subnets:
        raise TopologyError("no internet gateway subnet")
    for gw in t.internet_gateway_subnets:
        if gw not in id_set:
            raise TopologyError(f"internet gateway {gw} is not a subnet")

    edges = set()
    for a, b in t.adjacency:
        if a not in id_set or b not in id_set:
            raise TopologyError(f"adjacency edge ({a}, {b}) references unknown subnet")
        if a == b:
            raise TopologyError(f"self-edge on subnet {a}")
        key = frozenset((a, b))
        if key in edges:
            raise TopologyError(f"duplicate adjacency edge ({a}, {b})")
        edges.add(key)

    # Firewalls must sit on existing edges, one per edge, covering every edge
    # of the subnet graph including each gateway's link to the internet.
    required = set(edges)
    required.update(frozenset((gw, INTERNET)) for gw in t.internet_gateway_subnets)
    covered = set()
    for fw in t.firewalls:
        a, b = fw.edge
        for side in (a, b):
            if side != INTERNET and side not in id_set:
                raise TopologyError(
                    f"firewall {fw.id}: edge side {side!r} is not a subnet"
                )
        key = frozenset(fw.edge)
        if key not in required:
            raise TopologyError(
                f"firewall {fw.id} sits on non-existent edge {fw.edge}"
            )
        if key in covered:
            raise TopologyError(f"two firewalls on edge {fw.edge}")
        covered.add(key)
    missing = required - covered
    if missing:
        edge = sorted(missing, key=lambda k: sorted(map(str, k)))[0]
        raise TopologyError(f"edge {tuple(sorted(map(str, edge)))} has no firewall")

    # Connectivity: every subnet must reach the internet through the graph.
    dist = _distances_to_internet(t)
    for sid in subnet_ids:
        if sid not in dist:
            raise UnreachableSubnetError(f"subnet {sid} has no path to the internet")


def _distances_to_internet(t: NetworkTopology) -> dict[int, int]:
    """Hop count from each subnet to the internet node (gateways are 1)."""
    dist: dict[int, int] = {}
    q: deque[int] = deque()
    for gw in sorted(t.internet_gateway_subnets):
        dist[gw] = 1
        q.append(gw)
    while q:
        cur = q.popleft()
        for nxt in t.neighbors(cur):
            if nxt not in dist:
                dist[nxt] = dist[cur] + 1
                q.append(nxt)
    return dist


def firewall_path(t: NetworkTopology, from_subnet: int) -> list[str]:
    """Firewall ids along the fewest-hops path from a subnet to the internet.

    Ties between equal-length paths are broken by always stepping to the
    lowest-numbered next subnet, so the result is deterministic.
    """
    if from_subnet not in {s.id for s in t.subnets}:
        raise KeyError(f"no subnet {from_subnet}")
    dist = _distances_to_internet(t)
    if from_subnet not in dist:
        raise UnreachableSubnetError(
            f"subnet {from_subnet} has no path to the internet"
        )
    path: list[str] = []
    cur = from_subnet
    while dist[cur] > 1:
        nxt = min(n for n in t.neighbors(cur) if dist.get(n) == dist[cur] - 1)
        path.append(t.firewall_on_edge(cur, nxt).id)
        cur = nxt
    path.append(t.firewall_on_edge(cur, INTERNET).id)
    return path


def host_ip(address: Address) -> str:
    """Dotted-quad for a host: each subnet owns a /24 inside 10.0.0.0/8."""
    sid, lid = address
    return f"10.{(sid >> 8) & 0xFF}.{sid & 0xFF}.{lid + 1}"


# ---------------------------------------------------------------------------
# YAML manifest serialization


def load_topology(yaml_text: str) -> NetworkTopology:
    """Parse and validate a YAML manifest."""
    try:
        doc = yaml.safe_load(yaml_text)
    except yaml.YAMLError as exc:
        raise ManifestParseError(f"malformed YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ManifestParseError("manifest root must be a mapping")

    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ManifestParseError(
            f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})"
        )

    sensitive = {_parse_address(a) for a in doc.get("sensitive_hosts", [])}
    security = {_parse_address(a) for a in doc.get("security_products", [])}

    rules_by_subnet: dict[int, list[AllowRule]] = {}
    for raw in doc.get("allow_rules", []):
        rule = AllowRule(
            peer=int(raw["peer"]),
            port=None if raw.get("port", "all") == "all" else int(raw["port"]),
        )
        rules_by_subnet.setdefault(int(raw["subnet"]), []).append(rule)

    try:
        subnets = tuple(
            _parse_subnet(raw, rules_by_subnet, sensitive, security)
            for raw in doc["subnets"]
        )
        firewalls = tuple(_parse_firewall(raw) for raw in doc.get("firewalls", []))
        adjacency = tuple(
            (int(a), int(b)) for a, b in doc.get("adjacency", [])
        )
        gateways = frozenset(int(g) for g in doc.get("internet_gateways", []))
    except KeyError as exc:
        raise ManifestParseError(f"manifest missing key {exc}") from exc

    return NetworkTopology(
        subnets=subnets,
        firewalls=firewalls,
        internet_gateway_subnets=gateways,
        adjacency=adjacency,
    )


def _parse_address(raw) -> Address:
    if not isinstance(raw, (list, tuple)) or len(raw) != 2:
        raise ManifestParseError(f"address must be a [subnet, local] pair, got {raw!r}")
    return (int(raw[0]), int(raw[1]))


def _parse_subnet(raw, rules_by_subnet, sensitive, security) -> Subnet:
    sid = int(raw["id"])
    hosts = []
    for h in raw.get("hosts", []):
        addr = (sid, int(h["local_id"]))
        services = tuple(_parse_service(s) for s in h.get("services", []))
        hosts.append(Host(
            address=addr,
            os=str(h["os"]),
            open_ports=frozenset(int(p) for p in h.get("open_ports", [])),
            services=services,
            discovery_value=float(h.get("discovery_value", 1000.0)),
            infection_value=float(h.get("infection_value", 1000.0)),
            is_sensitive=addr in sensitive or bool(h.get("is_sensitive", False)),
            is_security_product=addr in security
            or bool(h.get("is_security_product", False)),
        ))
    return Subnet(
        id=sid,
        hosts=tuple(hosts),
        allow_rules=tuple(rules_by_subnet.get(sid, ())),
    )


def _parse_service(raw) -> ServiceBinding:
    vulns = tuple(
        Vulnerability(
            cve_id=str(v["id"]),
            cvss_score=float(v["cvss_score"]),
            cvss_vector=str(v["cvss_vector"]),
            required_service=str(v.get("required_service", raw["name"])),
            required_os=v.get("required_os"),
        )
        for v in raw.get("cves", [])
    )
    return ServiceBinding(
        port=int(raw["port"]),
        service_name=str(raw["name"]),
        cpe=str(raw.get("cpe", "")),
        vulnerabilities=vulns,
        defense_tier=str(raw.get("defense_tier", "low")),
    )


def save_topology(t: NetworkTopology) -> str:
    """Serialize a topology to manifest YAML. load_topology round-trips it."""
    doc = {
        "schema_version": SCHEMA_VERSION,
        "subnets": [_dump_subnet(s) for s in sorted(t.subnets, key=lambda s: s.id)],
        "adjacency": sorted([list(e) for e in (sorted(e) for e in t.adjacency)]),
        "internet_gateways": sorted(t.internet_gateway_subnets),
        "firewalls": [_dump_firewall(fw) for fw in sorted(t.firewalls, key=lambda f: f.id)],
        "allow_rules": [
            {"subnet": s.id, "peer": r.peer, "port": "all" if r.port is None else r.port}
            for s in sorted(t.subnets, key=lambda s: s.id)
            for r in sorted(s.allow_rules, key=lambda r: (r.peer, r.port or -1))
        ],
        "sensitive_hosts": sorted(
            [list(h.address) for h in t.hosts() if h.is_sensitive]
        ),
        "security_products": sorted(
            [list(h.address) for h in t.hosts() if h.is_security_product]
        ),
    }
    return yaml.safe_dump(doc, sort_keys=False, allow_unicode=True, width=100)


def _dump_subnet(s: Subnet) -> dict:
    return {
        "id": s.id,
        "hosts": [
            {
                "local_id": h.local_id,
                "os": h.os,
                "open_ports": sorted(h.open_ports),
                "discovery_value": h.discovery_value,
                "infection_value": h.infection_value,
                "services": [
                    {
                        "port": b.port,
                        "name": b.service_name,
                        "cpe": b.cpe,
                        "defense_tier": b.defense_tier,
                        "cves": [
                            {
                                "id": v.cve_id,
                                "cvss_score": v.cvss_score,
                                "cvss_vector": v.cvss_vector,
                                "required_service": v.required_service,
                                "required_os": v.required_os,
                            }
                            for v in b.vulnerabilities
                        ],
                    }
                    for b in sorted(h.services, key=lambda b: b.port)
                ],
            }
            for h in sorted(s.hosts, key=lambda h: h.local_id)
        ],
    }


def _dump_firewall(fw: Firewall) -> dict:
    return {
        "id": fw.id,
        "edge": [fw.edge[0], fw.edge[1]],
        "params": {
            "connect_probability": fw.params.connect_probability,
            "max_connect_attempts": fw.params.max_connect_attempts,
            "max_upload_volume": fw.params.max_upload_volume,
            "max_upload_time": fw.params.max_upload_time,
            "update_frequency": fw.params.update_frequency,
        },
    }


def _parse_firewall(raw) -> Firewall:
    a, b = raw["edge"]
    side_a = a if a == INTERNET else int(a)
    side_b = b if b == INTERNET else int(b)
    params = raw.get("params") or {}
    return Firewall(
        id=str(raw["id"]),
        edge=(side_a, side_b),
        params=FirewallParams(
            connect_probability=float(params.get("connect_probability", 0.8)),
            max_connect_attempts=int(params.get("max_connect_attempts", 3)),
            max_upload_volume=float(params.get("max_upload_volume", 5000.0)),
            max_upload_time=float(params.get("max_upload_time", 4.0)),
            update_frequency=float(params.get("update_frequency", 24.0)),
        ),
    )
