"""Kademlia-style DHT: XOR metric, k-buckets with admission policy, lookups.

Routing tables hold up to ``k`` peers per bucket, with at most
``subnet_limit`` records per bucket sharing a /24 subnet tag (the admission
policy that makes eclipse attacks require address diversity).  Lookups come
in two flavors: iterative (the querier contacts every intermediate node
itself) and recursive (intermediates forward on the querier's behalf), plus
a hardened iterative variant that explores several node-disjoint paths.
Node IDs can be minted under a proof-of-work rule requiring trailing zero
bits, and a prefix "region" mode stores and retrieves values from every node
whose ID falls under a keyspace prefix rather than from the k closest only.
"""

from __future__ import annotations

from bisect import bisect_left
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .core import ID_BITS, DeterministicRng, NodeProfile, derive_node_id
from .engine import (COORD_WIRE_BYTES, KEY_WIRE_BYTES, NODE_RECORD_WIRE_BYTES,
                     SIGNALING_BASE_BYTES, Message, MessageClass, RpcActor,
                     Simulation)


def xor_distance(a: int, b: int) -> int:
    return a ^ b


def bucket_index(owner: int, other: int) -> int:
    """Position of the highest differing bit; bucket 255 is the farthest half."""
    d = owner ^ other
    if d == 0:
        raise ValueError("a node has no bucket for itself")
    return d.bit_length() - 1


@dataclass(slots=True)
class NodeRecord:
    """Routing-table entry: identity plus reachability and freshness."""

    node_id: int
    subnet: int
    last_seen: int = 0

    @property
    def handle(self) -> int:
        # In-simulator reachability is the id itself.
        return self.node_id


class AdmitOutcome(Enum):
    ADMITTED = "admitted"
    UPDATED = "updated"
    REJECTED_SELF = "self"
    REJECTED_SUBNET = "subnet_limit"
    REJECTED_FULL = "bucket_full"
    EVICTED_STALE = "evicted_stale"


class RoutingTable:
    """256 LRU-ordered k-buckets (least-recently-seen first)."""

    def __init__(self, owner: int, k: int = 16, subnet_limit: int = 2):
        self.owner = owner
        self.k = k
        self.subnet_limit = subnet_limit
        self.buckets: list[list[NodeRecord]] = [[] for _ in range(ID_BITS)]
        self._ids: set[int] = set()

    def __contains__(self, node_id: int) -> bool:
        return node_id in self._ids

    @property
    def size(self) -> int:
        return len(self._ids)

    def records(self):
        for bucket in self.buckets:
            yield from bucket

    def admit(self, record: NodeRecord, now: int = 0,
              ping: Callable[[NodeRecord], bool] | None = None) -> AdmitOutcome:
        """Insert or refresh a record under the capacity and subnet rules.

        A full bucket triggers the classic eviction check on its
        least-recently-seen resident: the resident survives (and the newcomer
        is dropped) unless ``ping`` says it is unreachable.
        """
        if record.node_id == self.owner:
            return AdmitOutcome.REJECTED_SELF
        idx = bucket_index(self.owner, record.node_id)
        bucket = self.buckets[idx]
        for i, existing in enumerate(bucket):
            if existing.node_id == record.node_id:
                existing.last_seen = now
                bucket.append(bucket.pop(i))
                return AdmitOutcome.UPDATED
        same_subnet = sum(1 for r in bucket if r.subnet == record.subnet)
        if same_subnet >= self.subnet_limit:
            return AdmitOutcome.REJECTED_SUBNET
        record.last_seen = now
        if len(bucket) < self.k:
            bucket.append(record)
            self._ids.add(record.node_id)
            return AdmitOutcome.ADMITTED
        oldest = bucket[0]
        if ping is not None and not ping(oldest):
            bucket.pop(0)
            self._ids.discard(oldest.node_id)
            bucket.append(record)
            self._ids.add(record.node_id)
            return AdmitOutcome.EVICTED_STALE
        return AdmitOutcome.REJECTED_FULL

    def remove(self, node_id: int) -> None:
        if node_id not in self._ids:
            return
        idx = bucket_index(self.owner, node_id)
        self.buckets[idx] = [r for r in self.buckets[idx] if r.node_id != node_id]
        self._ids.discard(node_id)

    def closest(self, target: int, n: int) -> list[NodeRecord]:
        ranked = sorted(self.records(), key=lambda r: r.node_id ^ target)
        return ranked[:n]

    def audit(self) -> None:
        """Raise if any structural invariant is violated."""
        for idx, bucket in enumerate(self.buckets):
            if len(bucket) > self.k:
                raise AssertionError(f"bucket {idx} over capacity")
            subnets: dict[int, int] = {}
            for r in bucket:
                if bucket_index(self.owner, r.node_id) != idx:
                    raise AssertionError(f"{r.node_id:#x} misplaced in bucket {idx}")
                subnets[r.subnet] = subnets.get(r.subnet, 0) + 1
            for subnet, cnt in subnets.items():
                if cnt > self.subnet_limit:
                    raise AssertionError(
                        f"bucket {idx} holds {cnt} records from subnet {subnet:#x}")


class LookupMode(Enum):
    ITERATIVE = "iterative"
    RECURSIVE = "recursive"


@dataclass(frozen=True)
class LookupConfig:
    mode: LookupMode = LookupMode.ITERATIVE
    alpha: int = 3
    k_closest: int = 16
    disjoint_paths: int = 1
    rpc_timeout_us: int = 1_000_000
    deadline_us: int = 8_000_000

    def __post_init__(self):
        if self.alpha < 1:
            raise ValueError("alpha must be at least 1")
        if self.disjoint_paths < 1:
            raise ValueError("disjoint_paths must be at least 1")
        if self.disjoint_paths > self.alpha * self.k_closest:
            raise ValueError("disjoint_paths must not exceed alpha * k_closest")


@dataclass
class LookupTrace:
    contacted: list[int] = field(default_factory=list)
    failed: list[int] = field(default_factory=list)
    hops: int = 0
    started_us: int = 0
    finished_us: int = 0
    invalid_values: int = 0

    @property
    def contacted_count(self) -> int:
        return len(self.contacted)

    @property
    def elapsed_us(self) -> int:
        return self.finished_us - self.started_us


@dataclass
class LookupResult:
    ok: bool
    closest: list[int]
    trace: LookupTrace
    value: object = None
    failure: str | None = None


def _record_wire(records: list) -> int:
    return SIGNALING_BASE_BYTES + NODE_RECORD_WIRE_BYTES * len(records)


class DhtNode(RpcActor):
    """Honest DHT participant: routing table, value store, RPC handlers."""

    def __init__(self, profile: NodeProfile, table: RoutingTable,
                 directory: dict[int, NodeProfile]):
        super().__init__(profile.node_id)
        self.profile = profile
        self.table = table
        self.directory = directory          # id -> profile, shared read-only
        self.storage: dict[int, tuple[object, int]] = {}   # key -> (value, wire bytes)
        self.verify_value: Callable[[object], bool] | None = None
        self.drop_recursive = False
        self.rpc_handlers = {
            "ping": self._h_ping,
            "find_node": self._h_find_node,
            "find_value": self._h_find_value,
            "store": self._h_store,
            "region_members": self._h_region_members,
        }

    # Learning requesters keeps tables converging organically.
    def _learn(self, sim: Simulation, src: int) -> None:
        prof = self.directory.get(src)
        if prof is not None:
            self.table.admit(NodeRecord(src, prof.subnet), now=sim.now)

    def _h_ping(self, sim, src, payload):
        self._learn(sim, src)
        return ("pong", SIGNALING_BASE_BYTES, MessageClass.SIGNALING)

    def _h_find_node(self, sim, src, target):
        self._learn(sim, src)
        records = [(r.node_id, r.subnet) for r in self.table.closest(target, self.table.k)]
        return (("nodes", records), _record_wire(records), MessageClass.SIGNALING)

    def _h_find_value(self, sim, src, key):
        self._learn(sim, src)
        held = self.storage.get(key)
        if held is not None:
            value, wire = held
            return (("value", value), wire, MessageClass.CELL_TRANSFER)
        records = [(r.node_id, r.subnet) for r in self.table.closest(key, self.table.k)]
        return (("nodes", records), _record_wire(records), MessageClass.SIGNALING)

    def _h_store(self, sim, src, payload):
        self._learn(sim, src)
        key, value, wire = payload
        self.storage[key] = (value, wire)
        return ("ack", SIGNALING_BASE_BYTES, MessageClass.SIGNALING)

    def _h_region_members(self, sim, src, payload):
        prefix, depth = payload
        records = [(r.node_id, r.subnet) for r in self.table.records()
                   if (r.node_id >> (ID_BITS - depth)) == prefix]
        return (("nodes", records), _record_wire(records), MessageClass.SIGNALING)

    # -- recursive forwarding -------------------------------------------------

    def on_plain_message(self, sim: Simulation, msg: Message) -> None:
        body = msg.body
        if isinstance(body, tuple) and body and body[0] == "recursive_find":
            if self.drop_recursive:
                return
            self._forward_recursive(sim, body)

    def _forward_recursive(self, sim: Simulation, body: tuple) -> None:
        _, origin, target, path, want_value, path_id = body
        path = path + (self.node_id,)
        if want_value and target in self.storage:
            value, wire = self.storage[target]
            sim.send_message(self.node_id, origin, wire, MessageClass.CELL_TRANSFER,
                             ("recursive_result", path_id, "value", value, path))
            return
        my_dist = self.node_id ^ target
        nxt = None
        for rec in self.table.closest(target, self.table.k):
            if rec.node_id ^ target < my_dist and rec.node_id not in path and rec.node_id != origin:
                nxt = rec.node_id
                break
        if nxt is None:
            records = [(r.node_id, r.subnet) for r in self.table.closest(target, self.table.k)]
            records.insert(0, (self.node_id, self.profile.subnet))
            sim.send_message(self.node_id, origin, _record_wire(records),
                             MessageClass.SIGNALING,
                             ("recursive_result", path_id, "nodes", records, path))
            return
        sim.send_message(self.node_id, nxt, SIGNALING_BASE_BYTES + KEY_WIRE_BYTES,
                         MessageClass.SIGNALING,
                         ("recursive_find", origin, target, path, want_value, path_id))


class SybilDhtNode(DhtNode):
    """Adversarial participant: poisons lookups, discards stores, serves garbage.

    Never fabricates an integrity proof for a payload it does not hold; the
    garbage it serves is detectable by verification.
    """

    def __init__(self, profile, table, directory, peers: list[tuple[int, int]],
                 rng: DeterministicRng, garbage_wire: int,
                 garbage_factory: Callable[[DeterministicRng], object] | None = None):
        super().__init__(profile, table, directory)
        self.sybil_peers = peers            # (id, subnet) of fellow sybils
        self.rng = rng
        self.garbage_wire = garbage_wire
        self.garbage_factory = garbage_factory
        self.drop_recursive = True

    def _h_find_node(self, sim, src, target):
        records = sorted(self.sybil_peers, key=lambda p: p[0] ^ target)[:self.table.k]
        return (("nodes", records), _record_wire(records), MessageClass.SIGNALING)

    def _h_find_value(self, sim, src, key):
        if self.garbage_factory is not None:
            return (("value", self.garbage_factory(self.rng)),
                    self.garbage_wire, MessageClass.CELL_TRANSFER)
        records = sorted(self.sybil_peers, key=lambda p: p[0] ^ key)[:self.table.k]
        return (("nodes", records), _record_wire(records), MessageClass.SIGNALING)

    def _h_store(self, sim, src, payload):
        # Pretend to accept, keep nothing.
        return ("ack", SIGNALING_BASE_BYTES, MessageClass.SIGNALING)


class _IterativePath:
    """One convergence path of an iterative lookup (possibly one of several)."""

    def __init__(self, lookup: "_IterativeLookup", path_id: int):
        self.lookup = lookup
        self.path_id = path_id
        self.inflight = 0
        self.done = False

    def dispatch(self, sim: Simulation) -> None:
        lk = self.lookup
        if lk.finished or self.done:
            return
        while self.inflight < lk.config.alpha:
            nxt = lk.next_candidate(self.path_id)
            if nxt is None:
                break
            lk.claim(nxt, self.path_id)
            self.inflight += 1
            lk.query(sim, self, nxt)
        if self.inflight == 0 and lk.next_candidate(self.path_id) is None:
            self.done = True
            lk.path_finished(sim)


class _IterativeLookup:
    """Engine-driven state machine shared by plain and disjoint-path lookups."""

    def __init__(self, sim: Simulation, origin: DhtNode, target: int,
                 config: LookupConfig, on_done: Callable,
                 want_value: bool = False,
                 verify: Callable[[object], bool] | None = None):
        self.origin = origin
        self.target = target
        self.config = config
        self.on_done = on_done
        self.want_value = want_value
        self.verify = verify
        self.known: dict[int, int] = {}       # id -> subnet
        self.depth: dict[int, int] = {}
        self.claimed: dict[int, int] = {}     # id -> path_id
        self.queried: set[int] = set()
        self.responded: set[int] = set()
        self.failed: set[int] = set()
        self.finished = False
        self.trace = LookupTrace(started_us=sim.now)
        self.value = None
        self.paths = [_IterativePath(self, i) for i in range(config.disjoint_paths)]
        self._active_paths = len(self.paths)

        for rec in origin.table.closest(target, config.k_closest):
            self.known[rec.node_id] = rec.subnet
            self.depth[rec.node_id] = 1
        if not self.known:
            self.finished = True
            self.trace.finished_us = sim.now
            on_done(sim, LookupResult(False, [], self.trace, failure="no peers known"))
            return
        for path in self.paths:
            path.dispatch(sim)

    def next_candidate(self, path_id: int) -> int | None:
        """Closest unqueried node among the current best k, honoring claims."""
        ranked = sorted((nid for nid in self.known if nid not in self.failed),
                        key=lambda n: n ^ self.target)
        for nid in ranked[:self.config.k_closest]:
            if nid in self.queried:
                continue
            owner = self.claimed.get(nid)
            if owner is None or owner == path_id:
                return nid
        return None

    def claim(self, nid: int, path_id: int) -> None:
        self.claimed[nid] = path_id
        self.queried.add(nid)
        self.trace.contacted.append(nid)

    def query(self, sim: Simulation, path: _IterativePath, nid: int) -> None:
        kind = "find_value" if self.want_value else "find_node"

        def on_reply(sim2, payload, nid=nid, path=path):
            path.inflight -= 1
            self._on_reply(sim2, nid, payload)
            path.dispatch(sim2)

        self.origin.rpc_call(sim, nid, kind, self.target,
                             SIGNALING_BASE_BYTES + KEY_WIRE_BYTES,
                             MessageClass.SIGNALING, on_reply,
                             self.config.rpc_timeout_us)

    def _on_reply(self, sim: Simulation, nid: int, payload) -> None:
        if self.finished:
            return
        if payload is None:
            self.failed.add(nid)
            self.trace.failed.append(nid)
            return
        self.responded.add(nid)
        tag, data = payload
        if tag == "value":
            if self.verify is None or self.verify(data):
                self.value = data
                self._finish(sim, True)
                return
            self.trace.invalid_values += 1
            return
        base_depth = self.depth.get(nid, 1)
        for rid, subnet in data:
            if rid == self.origin.node_id or rid in self.known:
                continue
            self.known[rid] = subnet
            self.depth[rid] = base_depth + 1

    def path_finished(self, sim: Simulation) -> None:
        self._active_paths -= 1
        if self._active_paths <= 0 and not self.finished:
            self._finish(sim, not self.want_value)

    def _finish(self, sim: Simulation, ok: bool) -> None:
        if self.finished:
            return
        self.finished = True
        self.trace.finished_us = sim.now
        self.trace.hops = max((self.depth[n] for n in self.responded), default=0)
        closest = sorted(self.responded, key=lambda n: n ^ self.target)
        closest = closest[:self.config.k_closest]
        if self.want_value and not ok:
            failure = "verification_failed" if self.trace.invalid_values else "not_found"
        else:
            failure = None if ok or closest else "no progress"
            ok = ok or bool(closest)
        self.on_done(sim, LookupResult(ok, closest, self.trace, value=self.value,
                                       failure=failure))


def iterative_lookup(sim: Simulation, origin: DhtNode, target: int,
                     config: LookupConfig, on_done: Callable) -> None:
    """Converge on the k closest nodes to ``target``; calls ``on_done`` once."""
    _IterativeLookup(sim, origin, target, config, on_done)


class _RecursiveLookup:
    """Origin-side state for forwarded lookups: one probe per disjoint first hop."""

    _next_path_id = 0

    def __init__(self, sim: Simulation, origin: DhtNode, target: int,
                 config: LookupConfig, on_done: Callable,
                 want_value: bool = False,
                 verify: Callable[[object], bool] | None = None):
        self.origin = origin
        self.target = target
        self.config = config
        self.on_done = on_done
        self.want_value = want_value
        self.verify = verify
        self.trace = LookupTrace(started_us=sim.now)
        self.finished = False
        self.results: list[tuple[int, int]] = []
        self.value = None
        self.paths_pending = 0
        self.invalid = 0

        origin.recursive_sink = self._on_result
        seeds = origin.table.closest(target, max(config.disjoint_paths, config.alpha))
        first_hops = [r.node_id for r in seeds][:config.disjoint_paths]
        if not first_hops:
            self._finish(sim, False, "no peers known")
            return
        self.path_ids = {}
        for hop in first_hops:
            _RecursiveLookup._next_path_id += 1
            pid = _RecursiveLookup._next_path_id
            self.path_ids[pid] = hop
            self.paths_pending += 1
            self.trace.contacted.append(hop)
            sim.send_message(origin.node_id, hop,
                             SIGNALING_BASE_BYTES + KEY_WIRE_BYTES,
                             MessageClass.SIGNALING,
                             ("recursive_find", origin.node_id, target, (),
                              want_value, pid))
        self.timer = sim.schedule_callback(config.deadline_us, self._on_deadline)

    def _on_result(self, sim: Simulation, body: tuple) -> None:
        if self.finished:
            return
        _, path_id, tag, data, path = body
        if path_id not in self.path_ids:
            return
        self.trace.hops = max(self.trace.hops, len(path))
        if tag == "value":
            if self.verify is None or self.verify(data):
                self.value = data
                self._finish(sim, True, None)
                return
            self.invalid += 1
        else:
            self.results.extend(data)
        self.paths_pending -= 1
        if self.paths_pending <= 0:
            self._settle(sim)

    def _on_deadline(self, sim: Simulation) -> None:
        if not self.finished:
            self._settle(sim, timed_out=True)

    def _settle(self, sim: Simulation, timed_out: bool = False) -> None:
        if self.want_value:
            failure = "verification_failed" if self.invalid else (
                "timeout" if timed_out else "not_found")
            self._finish(sim, False, failure)
        elif self.results:
            self._finish(sim, True, None)
        else:
            self._finish(sim, False, "timeout" if timed_out else "no progress")

    def _finish(self, sim: Simulation, ok: bool, failure: str | None) -> None:
        if self.finished:
            return
        self.finished = True
        self.timer.cancel()
        self.origin.recursive_sink = None
        self.trace.finished_us = sim.now
        seen = {}
        for rid, subnet in self.results:
            seen.setdefault(rid, subnet)
        closest = sorted(seen, key=lambda n: n ^ self.target)[:self.config.k_closest]
        self.on_done(sim, LookupResult(ok, closest, self.trace,
                                       value=self.value, failure=failure))


def _install_recursive_sink():
    """DhtNode gains a slot for routing recursive results back to a lookup."""
    original = DhtNode.on_plain_message

    def patched(self, sim, msg):
        body = msg.body
        if isinstance(body, tuple) and body and body[0] == "recursive_result":
            sink = getattr(self, "recursive_sink", None)
            if sink is not None:
                sink(sim, body)
            return
        original(self, sim, msg)

    DhtNode.on_plain_message = patched


_install_recursive_sink()
DhtNode.recursive_sink = None


def recursive_lookup(sim: Simulation, origin: DhtNode, target: int,
                     config: LookupConfig, on_done: Callable) -> None:
    _RecursiveLookup(sim, origin, target, config, on_done)


def start_lookup(sim: Simulation, origin: DhtNode, target: int,
                 config: LookupConfig, on_done: Callable) -> None:
    if config.mode is LookupMode.RECURSIVE:
        recursive_lookup(sim, origin, target, config, on_done)
    else:
        iterative_lookup(sim, origin, target, config, on_done)


# -- put / get -------------------------------------------------------------------


def dht_put(sim: Simulation, origin: DhtNode, key: int, value: object,
            value_wire_bytes: int, config: LookupConfig, on_done: Callable,
            copies: int | None = None) -> None:
    """Store ``value`` on the closest nodes to ``key`` found by lookup.

    ``copies`` limits replication to the first so-many of the k-closest set
    (default: the full set).  ``on_done(sim, stored_ids)`` fires after every
    store RPC settled.
    """

    def after_lookup(sim2, result: LookupResult):
        targets = result.closest[:copies] if copies else result.closest
        if not targets:
            on_done(sim2, [])
            return
        stored: list[int] = []
        pending = [len(targets)]

        def on_ack(sim3, payload, nid=None):
            if payload is not None:
                stored.append(nid)
            pending[0] -= 1
            if pending[0] == 0:
                on_done(sim3, stored)

        for nid in targets:
            origin.rpc_call(sim2, nid, "store", (key, value, value_wire_bytes),
                            value_wire_bytes, MessageClass.CELL_TRANSFER,
                            lambda s, p, nid=nid: on_ack(s, p, nid),
                            config.rpc_timeout_us)

    iterative_lookup(sim, origin, key, config, after_lookup)


def dht_get(sim: Simulation, origin: DhtNode, key: int, config: LookupConfig,
            on_done: Callable, verify: Callable[[object], bool] | None = None) -> None:
    """Fetch the value for ``key``; only verified values are accepted."""
    if config.mode is LookupMode.RECURSIVE:
        _RecursiveLookup(sim, origin, key, config, on_done,
                         want_value=True, verify=verify)
    else:
        _IterativeLookup(sim, origin, key, config, on_done,
                         want_value=True, verify=verify)


# -- proof-of-work identities ------------------------------------------------------


def pow_node_id(difficulty_bits: int, rng: DeterministicRng) -> tuple[bytes, int, int]:
    """Mint a key pair whose derived ID ends in ``difficulty_bits`` zero bits.

    Returns (secret, node_id, attempts); expected attempts = 2^difficulty.
    """
    if not (0 <= difficulty_bits <= 24):
        raise ValueError("difficulty_bits must be within [0, 24]")
    mask = (1 << difficulty_bits) - 1
    attempts = 0
    while True:
        attempts += 1
        secret = rng.randbytes(32)
        node_id = derive_node_id(secret)
        if node_id & mask == 0:
            return secret, node_id, attempts


# -- region mode --------------------------------------------------------------------


@dataclass(frozen=True)
class Region:
    """Keyspace prefix: all IDs whose leading ``depth`` bits equal ``prefix``."""

    prefix: int
    depth: int

    def __post_init__(self):
        if not (0 <= self.depth <= 24):
            raise ValueError("region depth must be within [0, 24]")
        if self.depth and not (0 <= self.prefix < (1 << self.depth)):
            raise ValueError("prefix must fit in depth bits")

    @staticmethod
    def around(key: int, depth: int) -> "Region":
        return Region(prefix=key >> (ID_BITS - depth) if depth else 0, depth=depth)

    def contains(self, node_id: int) -> bool:
        if self.depth == 0:
            return True
        return (node_id >> (ID_BITS - self.depth)) == self.prefix

    @property
    def center_key(self) -> int:
        return self.prefix << (ID_BITS - self.depth) if self.depth else 0


class RegionEmpty(Exception):
    pass


class _RegionCrawl:
    """Discover every reachable region member by member-of-member flooding.

    Navigates toward the prefix with a regular lookup, then queries each
    discovered member for further members; stops after a confirmation round
    finds nothing new.
    """

    def __init__(self, sim: Simulation, origin: DhtNode, region: Region,
                 config: LookupConfig, on_done: Callable):
        self.origin = origin
        self.region = region
        self.config = config
        self.on_done = on_done
        self.members: dict[int, int] = {}
        self.queried: set[int] = set()
        self.inflight = 0
        self.confirming = False
        self.finished = False
        for rec in origin.table.records():
            if region.contains(rec.node_id):
                self.members[rec.node_id] = rec.subnet
        iterative_lookup(sim, origin, region.center_key, config, self._after_seed)

    def _after_seed(self, sim: Simulation, result: LookupResult) -> None:
        for nid in result.closest:
            if self.region.contains(nid):
                self.members.setdefault(nid, self.origin.directory[nid].subnet
                                        if nid in self.origin.directory else 0)
        if not self.members:
            self._finish(sim)
            return
        self._dispatch(sim)

    def _dispatch(self, sim: Simulation) -> None:
        fresh = sorted(n for n in self.members if n not in self.queried)
        for nid in fresh:
            self.queried.add(nid)
            self.inflight += 1
            self.origin.rpc_call(sim, nid, "region_members",
                                 (self.region.prefix, self.region.depth),
                                 SIGNALING_BASE_BYTES + KEY_WIRE_BYTES,
                                 MessageClass.SIGNALING, self._on_reply,
                                 self.config.rpc_timeout_us)
        if not fresh and self.inflight == 0:
            if self.confirming or not self.members:
                self._finish(sim)
            else:
                # confirmation round: re-query everyone once more
                self.confirming = True
                self.queried.clear()
                self._dispatch(sim)

    def _on_reply(self, sim: Simulation, payload) -> None:
        self.inflight -= 1
        grew = False
        if payload is not None:
            _, records = payload
            for rid, subnet in records:
                if self.region.contains(rid) and rid not in self.members:
                    self.members[rid] = subnet
                    grew = True
        if grew and self.confirming:
            self.confirming = False
        if self.inflight == 0:
            self._dispatch(sim)

    def _finish(self, sim: Simulation) -> None:
        if self.finished:
            return
        self.finished = True
        self.on_done(sim, dict(self.members))


def region_lookup(sim: Simulation, origin: DhtNode, region: Region,
                  config: LookupConfig, on_done: Callable) -> None:
    """``on_done(sim, members)`` with every discovered member id -> subnet."""
    _RegionCrawl(sim, origin, region, config, on_done)


def region_put(sim: Simulation, origin: DhtNode, key: int, value: object,
               value_wire_bytes: int, region: Region, config: LookupConfig,
               on_done: Callable) -> None:
    """Store on ALL discovered region members."""

    def after_crawl(sim2, members: dict):
        targets = sorted(members)
        if not targets:
            on_done(sim2, [])
            return
        stored: list[int] = []
        pending = [len(targets)]

        def on_ack(sim3, payload, nid=None):
            if payload is not None:
                stored.append(nid)
            pending[0] -= 1
            if pending[0] == 0:
                on_done(sim3, stored)

        for nid in targets:
            origin.rpc_call(sim2, nid, "store", (key, value, value_wire_bytes),
                            value_wire_bytes, MessageClass.CELL_TRANSFER,
                            lambda s, p, nid=nid: on_ack(s, p, nid),
                            config.rpc_timeout_us)

    region_lookup(sim, origin, region, config, after_crawl)


def region_get(sim: Simulation, origin: DhtNode, key: int, region: Region,
               config: LookupConfig, on_done: Callable,
               verify: Callable[[object], bool] | None = None) -> None:
    """Query every region member for the value; first verified copy wins."""

    def after_crawl(sim2, members: dict):
        targets = sorted(members)
        trace = LookupTrace(started_us=sim2.now)
        if not targets:
            trace.finished_us = sim2.now
            on_done(sim2, LookupResult(False, [], trace, failure="region_empty"))
            return
        state = {"pending": len(targets), "done": False, "invalid": 0}

        def on_reply(sim3, payload, nid=None):
            if state["done"]:
                return
            state["pending"] -= 1
            if payload is not None:
                tag, data = payload
                if tag == "value":
                    if verify is None or verify(data):
                        state["done"] = True
                        trace.finished_us = sim3.now
                        on_done(sim3, LookupResult(True, targets, trace, value=data))
                        return
                    state["invalid"] += 1
            if state["pending"] == 0:
                state["done"] = True
                trace.finished_us = sim3.now
                trace.invalid_values = state["invalid"]
                failure = "verification_failed" if state["invalid"] else "not_found"
                on_done(sim3, LookupResult(False, targets, trace, failure=failure))

        for nid in targets:
            trace.contacted.append(nid)
            origin.rpc_call(sim2, nid, "find_value", key,
                            SIGNALING_BASE_BYTES + KEY_WIRE_BYTES,
                            MessageClass.SIGNALING,
                            lambda s, p, nid=nid: on_reply(s, p, nid),
                            config.rpc_timeout_us)

    region_lookup(sim, origin, region, config, after_crawl)


# -- offline convergence ------------------------------------------------------------


def build_converged_tables(profiles: list[NodeProfile], rng: DeterministicRng,
                           k: int = 16, subnet_limit: int = 2) -> dict[int, RoutingTable]:
    """Fill every node's routing table as a long-running network would have.

    For each node, the sorted ID array is split along the node's own bit
    path; every split gives the contiguous ID range belonging to one bucket,
    from which up to ``k`` members are sampled under the admission policy.
    Deterministic given ``rng``.
    """
    ids = sorted(p.node_id for p in profiles)
    by_id = {p.node_id: p for p in profiles}
    tables: dict[int, RoutingTable] = {}
    for i, prof in enumerate(profiles):
        v = prof.node_id
        table = RoutingTable(v, k=k, subnet_limit=subnet_limit)
        node_rng = rng.substream("table", i)
        a, b = 0, len(ids)
        for level in range(ID_BITS):
            if b - a <= 1:
                break
            shift = ID_BITS - 1 - level
            boundary = ((v >> shift) | 1) << shift
            mid = bisect_left(ids, boundary, a, b)
            if (v >> shift) & 1:
                flip_lo, flip_hi = a, mid
                a = mid
            else:
                flip_lo, flip_hi = mid, b
                b = mid
            span = flip_hi - flip_lo
            if span == 0:
                continue
            if span <= k:
                picks = range(flip_lo, flip_hi)
            else:
                picks = sorted(node_rng.sample(range(flip_lo, flip_hi), min(span, k + 8)))
            admitted = 0
            for idx in picks:
                peer = by_id[ids[idx]]
                if table.admit(NodeRecord(peer.node_id, peer.subnet)) is AdmitOutcome.ADMITTED:
                    admitted += 1
                    if admitted >= k:
                        break
        tables[v] = table
    return tables
