"""Scenario drivers, metrics and aggregation for VCube-PS vs SRPT comparisons.

A :class:`Scenario` fixes one configuration; :func:`run_scenario` executes it
for one seed and returns a :class:`MetricsRecord`.  Presets bundle the sweeps
behind each published figure and table.
"""

from __future__ import annotations

import csv
import json
import math
import os
import statistics
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Iterable, Optional, Sequence

from . import oracle
from .baselines import BrokerAssignment, SrptSystem
from .protocol import Kind, VCubeNode, bootstrap_topic
from .simnet import DelayModel, Simulator, rng_stream
from .topology import HypercubeConfig

SCHEMA = "vcubeps-metrics/1"
ZIPF_COEFFICIENT = 0.825
TABLE1_EDGES = (0, 2, 4, 8, 16, 32, 4096, 8192)
SCENARIOS = (
    "single_publisher",
    "several_publishers",
    "message_order",
    "multi_topic",
    "churn",
    "broker_compare",
)
SYSTEMS = ("vcube", "srpt-s", "srpt-b")
# traces are kept (and validated) up to this size by default
VALIDATE_MAX_NODES = 128


def table1_bucket(value: float) -> str:
    """Label of the queue-size bucket holding ``value`` (edges 0,2,4,...,8192)."""
    if value < 0:
        raise ValueError("queue sizes are non-negative")
    if value == 0:
        return "0"
    lo = 0
    for hi in TABLE1_EDGES[1:]:
        if value <= hi:
            return f"({lo},{hi}]"
        lo = hi
    return f">{TABLE1_EDGES[-1]}"


def table1_labels() -> list[str]:
    labels = ["0"]
    for lo, hi in zip(TABLE1_EDGES, TABLE1_EDGES[1:]):
        labels.append(f"({lo},{hi}]")
    labels.append(f">{TABLE1_EDGES[-1]}")
    return labels


@dataclass(frozen=True)
class Scenario:
    name: str
    n_nodes: int
    system: str = "vcube"
    subscriber_pct: float = 100.0
    publisher_pct: float = 100.0
    ratio: int = 100
    publish_window: float = 1000.0
    wait_p: int = 1
    t_w_max: float = 1000.0
    n_topics: int = 1
    distribution: str = "uniform"
    zipf_coefficient: float = ZIPF_COEFFICIENT
    message_limit: int = 128
    publish_interval_mean: float = 500.0
    initial_subscriber_pct: float = 75.0
    churn_pct: float = 12.5
    churn_period: float = 300.0
    broker_count: Optional[int] = None
    control: str = "bypass"
    # False runs VCube-PS nodes without the protocol repairs
    repairs: bool = True

    def __post_init__(self) -> None:
        if self.name not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.name!r}")
        if self.system not in SYSTEMS:
            raise ValueError(f"unknown system {self.system!r}")
        HypercubeConfig.for_size(self.n_nodes)
        for pct in ("subscriber_pct", "publisher_pct", "initial_subscriber_pct", "churn_pct"):
            v = getattr(self, pct)
            if not 0 < v <= 100:
                raise ValueError(f"{pct} must be in (0, 100], got {v}")
        for pos in ("publish_window", "t_w_max", "publish_interval_mean", "churn_period"):
            if getattr(self, pos) <= 0:
                raise ValueError(f"{pos} must be positive")
        if self.ratio not in (100, 1000):
            raise ValueError("ratio is 100 or 1000 (t_pp / t_pc)")
        if self.distribution not in ("uniform", "zipf"):
            raise ValueError(f"unknown topic distribution {self.distribution!r}")
        if self.wait_p < 1 or self.wait_p >= self.n_nodes:
            raise ValueError("wait_p must be in [1, N)")
        if self.n_topics < 1 or self.message_limit < 1:
            raise ValueError("n_topics and message_limit must be positive")
        if self.system == "srpt-b":
            b = self.broker_count
            if b is None or b < 1 or b & (b - 1) or b >= self.n_nodes:
                raise ValueError("srpt-b needs a power-of-two broker_count below N")
            if self.name != "broker_compare":
                raise ValueError("srpt-b is only wired into broker_compare")

    @property
    def delay(self) -> DelayModel:
        return DelayModel(t_pc=1, t_t=1, t_pp=self.ratio, control=self.control)

    @property
    def parameter(self) -> Any:
        """The swept parameter used to key aggregate tables."""
        return {
            "single_publisher": self.subscriber_pct,
            "several_publishers": self.publisher_pct,
            "message_order": self.wait_p,
            "multi_topic": (self.distribution, self.message_limit),
            "churn": self.churn_pct,
            "broker_compare": self.broker_count,
        }[self.name]

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsRecord:
    scenario: Scenario
    seed: int
    run_index: int = 0
    published: int = 0
    receptions: int = 0
    latency_sum: float = 0.0
    latency_max: float = 0.0
    deliveries: int = 0
    delivery_latency_sum: float = 0.0
    pub_messages: int = 0
    false_positives: int = 0
    control_messages: int = 0
    tree_latency_sum: float = 0.0
    bs_latency_sum: float = 0.0
    cb_sizes: Counter = field(default_factory=Counter)
    # delivery delay after reception, ceil'ed to whole u.t.; 0 means none
    delivery_delay: Counter = field(default_factory=Counter)
    queue_sizes: list = field(default_factory=list)
    queue_enqueued: list = field(default_factory=list)
    root: Optional[int] = None
    restructure_edges: int = 0
    # publications drawn from subscribers still propagating their own SUB
    unsettled_publishers: int = 0
    events: int = 0
    end_time: float = 0.0
    stalls: int = 0
    violations: int = 0

    @property
    def mean_latency(self) -> float:
        return self.latency_sum / self.receptions if self.receptions else math.nan

    @property
    def mean_delivery_latency(self) -> float:
        return self.delivery_latency_sum / self.deliveries if self.deliveries else math.nan

    @property
    def mean_tree_latency(self) -> float:
        return self.tree_latency_sum / self.receptions if self.receptions else math.nan

    @property
    def mean_bs_latency(self) -> float:
        return self.bs_latency_sum / self.receptions if self.receptions else math.nan

    def queue_histogram(self) -> Counter:
        return Counter(table1_bucket(q) for q in self.queue_sizes)

    def scalars(self) -> dict:
        return {
            "published": self.published,
            "receptions": self.receptions,
            "mean_latency": self.mean_latency,
            "max_latency": self.latency_max,
            "mean_delivery_latency": self.mean_delivery_latency,
            "mean_tree_latency": self.mean_tree_latency,
            "mean_bs_latency": self.mean_bs_latency,
            "pub_messages": self.pub_messages,
            "false_positives": self.false_positives,
            "control_messages": self.control_messages,
            "restructure_edges": self.restructure_edges,
            "unsettled_publishers": self.unsettled_publishers,
            "max_queue": max(self.queue_sizes, default=0.0),
            "events": self.events,
            "end_time": self.end_time,
            "stalls": self.stalls,
            "violations": self.violations,
        }

    def as_dict(self) -> dict:
        return {
            "scenario": self.scenario.as_dict(),
            "seed": self.seed,
            "run_index": self.run_index,
            **self.scalars(),
            "root": self.root,
            "cb_sizes": {str(k): v for k, v in sorted(self.cb_sizes.items())},
            "delivery_delay": {str(k): v for k, v in sorted(self.delivery_delay.items())},
            "queue_sizes": self.queue_sizes,
            "queue_enqueued": self.queue_enqueued,
        }


class _Collector:
    """Simulator observer that folds events into a :class:`MetricsRecord`."""

    def __init__(self, rec: MetricsRecord) -> None:
        self.rec = rec
        self.publish_time: dict[tuple, float] = {}
        self.rx: dict[tuple, float] = {}

    def on_app(self, sim, node, op, topic, ok) -> None:
        if op == "publish" and ok:
            mid = (node, topic, sim.nodes[node].counter - 1)
            self.publish_time[mid] = sim.now
            self.rec.published += 1

    def on_start(self, sim, node, msg) -> None:
        if msg.kind == Kind.PUB:
            self.rec.cb_sizes[len(msg.cb)] += 1

    def on_send(self, sim, src, dst, msg, tq) -> None:
        if msg.kind != Kind.PUB:
            self.rec.control_messages += 1

    def on_receive(self, sim, dst, src, msg, fwd) -> None:
        if msg.kind != Kind.PUB:
            return
        rec = self.rec
        rec.pub_messages += 1
        if fwd:
            rec.false_positives += 1
        if dst == msg.source or not sim.nodes[dst].is_member(msg.topic):
            return
        mid = (msg.source, msg.topic, msg.counter)
        key = (dst, mid)
        if key in self.rx:
            return
        now = sim.now
        pt = self.publish_time[mid]
        lat = now - pt
        rec.receptions += 1
        rec.latency_sum += lat
        if lat > rec.latency_max:
            rec.latency_max = lat
        stamp = getattr(msg, "stamp", None)
        if stamp is not None:
            rec.tree_latency_sum += stamp - pt
            rec.bs_latency_sum += now - stamp
        self.rx[key] = now

    def on_deliver(self, sim, node, msg) -> None:
        if node == msg.source:
            return
        mid = (msg.source, msg.topic, msg.counter)
        t_rx = self.rx.pop((node, mid), None)
        if t_rx is None:
            return
        rec = self.rec
        rec.deliveries += 1
        rec.delivery_latency_sum += sim.now - self.publish_time[mid]
        rec.delivery_delay[math.ceil(sim.now - t_rx)] += 1


# -- system wiring --------------------------------------------------------------


class _World:
    """One simulator plus one system under test, with membership bookkeeping."""

    def __init__(self, sc: Scenario, seed: int, trace: bool, observers: list,
                 rec: Optional["MetricsRecord"] = None) -> None:
        self.sc = sc
        self.rec = rec
        self.seed = seed
        self.n = sc.n_nodes
        self.d = HypercubeConfig.for_size(self.n).dimension
        self.sim = Simulator(self.n, sc.delay, run_id=seed, trace=trace, observers=observers)
        self.sim.note("config", None, None, f"n={self.n} repairs={int(sc.repairs)}")
        self.rng = rng_stream(seed, f"{sc.name}/setup")
        self.subs: dict[Any, set[int]] = {}
        # subscribers whose own SUB flood has completed; publish_random draws here
        self.settled: dict[Any, set[int]] = {}
        self._sub_counter: dict[tuple, int] = {}
        self.srpt: Optional[SrptSystem] = None
        self.roots: dict[Any, int] = {}
        if sc.system == "vcube":
            self.nodes = [VCubeNode(i, self.d, self.sim, repairs=sc.repairs)
                          for i in range(self.n)]
        else:
            assignment = None
            if sc.system == "srpt-b":
                brokers = sorted(self.rng.sample(range(self.n), sc.broker_count))
                self.brokers = brokers
                clients = sorted(set(range(self.n)) - set(brokers))
                assignment = BrokerAssignment.even(brokers, clients)
            self.srpt = SrptSystem(self.sim, self.d, assignment=assignment)
            self.nodes = self.srpt.nodes
        self.sim.attach(self.nodes)
        self.sim.observers.append(self)

    def on_done(self, sim, node: int, msg) -> None:
        if msg.kind == Kind.SUB and self._sub_counter.get((node, msg.topic)) == msg.counter:
            del self._sub_counter[(node, msg.topic)]
            if node in self.subs[msg.topic]:
                self.settled[msg.topic].add(node)

    def on_app(self, *a) -> None:
        pass

    on_start = on_send = on_receive = on_deliver = on_app

    def install_topic(self, topic: Any, members: Iterable[int]) -> None:
        """Start ``topic`` with ``members`` already subscribed and known to everyone."""
        members = sorted(set(members))
        self.subs[topic] = set(members)
        self.settled[topic] = set(members)
        if self.srpt is None:
            bootstrap_topic(self.nodes, topic, members)
            for j in members:
                self.sim.record_app(j, "subscribe", topic, self.nodes[j].counter - 1, True)
            return
        if self.srpt.broker_mode:
            root = self.rng.choice(self.brokers)
        else:
            root = self.rng.randrange(self.n)
        self.roots[topic] = root
        self.srpt.create_topic(topic, root, members)
        for j in members:
            self.sim.record_app(j, "subscribe", topic, None, True)

    def subscribe(self, node: int, topic: Any) -> None:
        if self.sim.app_call(node, "subscribe", topic):
            self.subs[topic].add(node)
            if self.srpt is None:
                self._sub_counter[(node, topic)] = self.nodes[node].counter - 1
            else:
                self.settled[topic].add(node)

    def unsubscribe(self, node: int, topic: Any) -> None:
        if self.sim.app_call(node, "unsubscribe", topic):
            self.subs[topic].discard(node)
            self.settled[topic].discard(node)

    def publish(self, node: int, topic: Any) -> None:
        if not self.sim.app_call(node, "publish", topic):
            raise RuntimeError(f"scenario asked non-subscriber {node} to publish on {topic!r}")

    def publish_random(self, topic: Any, rng) -> None:
        """Publish from a random settled subscriber (any subscriber if none is)."""
        pool = self.settled[topic]
        if not pool:
            pool = self.subs[topic]
            if self.rec is not None:
                self.rec.unsettled_publishers += 1
        self.publish(rng.choice(sorted(pool)), topic)


def _sample_pct(rng, population: Sequence[int], pct: float) -> list[int]:
    k = max(1, round(len(population) * pct / 100))
    return sorted(rng.sample(list(population), k))


def _exp_times(rng, mean: float, count: int, start: float = 0.0) -> list[float]:
    out, t = [], start
    for _ in range(count):
        t += rng.expovariate(1.0 / mean)
        out.append(t)
    return out


# -- scenario setups -------------------------------------------------------------


def _setup_single_publisher(w: _World) -> None:
    sc = w.sc
    subs = _sample_pct(w.rng, range(w.n), sc.subscriber_pct)
    w.install_topic(0, subs)
    pub = w.rng.choice(subs)
    w.sim.schedule_action(0.0, w.publish, pub, 0)


def _setup_several_publishers(w: _World) -> None:
    sc = w.sc
    w.install_topic(0, range(w.n))
    pubs = _sample_pct(w.rng, range(w.n), sc.publisher_pct)
    rng = rng_stream(w.seed, "several_publishers/times")
    for p in pubs:
        w.sim.schedule_action(rng.uniform(0, sc.publish_window), w.publish, p, 0)


class _ReplyOnSeeds:
    """Each non-seed node publishes once, ``t_w`` after delivering every seed message.

    Seed publishers publish nothing else, so any message they source is a seed.
    """

    def __init__(self, w: _World, seeds: set[int]) -> None:
        self.w = w
        self.seeds = seeds
        self.got: Counter = Counter()
        self.rng = rng_stream(w.seed, "message_order/t_w")

    def on_deliver(self, sim, node, msg) -> None:
        if msg.source not in self.seeds or node in self.seeds:
            return
        self.got[node] += 1
        if self.got[node] == len(self.seeds):
            sim.schedule_action(sim.now + self.rng.uniform(0, self.w.sc.t_w_max),
                                self.w.publish, node, 0)

    def on_app(self, *a) -> None:
        pass

    on_start = on_send = on_receive = on_app


def _setup_message_order(w: _World) -> None:
    sc = w.sc
    w.install_topic(0, range(w.n))
    seeds = set(w.rng.sample(range(w.n), sc.wait_p))
    w.sim.observers.append(_ReplyOnSeeds(w, seeds))
    for s in sorted(seeds):
        w.sim.schedule_action(0.0, w.publish, s, 0)


def topic_weights(n_topics: int, distribution: str, coefficient: float = ZIPF_COEFFICIENT) -> list[float]:
    if distribution == "uniform":
        return [1.0] * n_topics
    return [rank ** -coefficient for rank in range(1, n_topics + 1)]


def _setup_multi_topic(w: _World) -> None:
    sc = w.sc
    for t in range(sc.n_topics):
        w.install_topic(t, range(w.n))
    rng = rng_stream(w.seed, "multi_topic/times")
    pick = rng_stream(w.seed, f"multi_topic/topics/{sc.distribution}")
    # enough per-node arrivals that the merged stream reaches message_limit
    per_node = sc.message_limit // w.n + 8
    events = []
    for node in range(w.n):
        for t in _exp_times(rng, sc.publish_interval_mean, per_node):
            events.append((t, node))
    events.sort()
    weights = topic_weights(sc.n_topics, sc.distribution, sc.zipf_coefficient)
    topics = pick.choices(range(sc.n_topics), weights=weights, k=sc.message_limit)
    for (t, node), topic in zip(events, topics):
        w.sim.schedule_action(t, w.publish, node, topic)


def _setup_churn(w: _World) -> None:
    sc = w.sc
    init = _sample_pct(w.rng, range(w.n), sc.initial_subscriber_pct)
    w.install_topic(0, init)
    k = round(w.n * sc.churn_pct / 100)
    horizon = sc.message_limit * sc.publish_interval_mean
    crng = rng_stream(w.seed, "churn/waves")
    prng = rng_stream(w.seed, "churn/publishers")
    root = w.roots.get(0)

    def wave() -> None:
        current = w.subs[0]
        outside = sorted(set(range(w.n)) - current)
        leavers = crng.sample(sorted(current - {root}), min(k, len(current) - 1))
        joiners = crng.sample(outside, min(k, len(outside)))
        w.sim.note("churn", None, 0, f"leave={len(leavers)} join={len(joiners)}")
        for j in leavers:
            w.unsubscribe(j, 0)
        for j in joiners:
            w.subscribe(j, 0)

    t = sc.churn_period
    while t < horizon:
        w.sim.schedule_action(t, wave)
        t += sc.churn_period
    for j in range(1, sc.message_limit + 1):
        w.sim.schedule_action(j * sc.publish_interval_mean, w.publish_random, 0, prng)


def _setup_broker_compare(w: _World) -> None:
    sc = w.sc
    if sc.system == "srpt-b":
        members = sorted(set(range(w.n)) - set(w.brokers))
    else:
        members = list(range(w.n))
    w.install_topic(0, members)
    rng = rng_stream(w.seed, "broker_compare/publishers")
    for t in _exp_times(rng, sc.publish_interval_mean, sc.message_limit):
        w.sim.schedule_action(t, w.publish_random, 0, rng)


_SETUPS = {
    "single_publisher": _setup_single_publisher,
    "several_publishers": _setup_several_publishers,
    "message_order": _setup_message_order,
    "multi_topic": _setup_multi_topic,
    "churn": _setup_churn,
    "broker_compare": _setup_broker_compare,
}

BASELINE_CHECKS = ("integrity",)


@dataclass
class RunResult:
    metrics: MetricsRecord
    report: Optional[oracle.Report] = None
    records: Optional[list] = None


def run_scenario(
    sc: Scenario,
    seed: int,
    *,
    run_index: int = 0,
    trace: Optional[bool] = None,
    validate: Optional[bool] = None,
    max_events: Optional[int] = None,
) -> RunResult:
    """Execute one seeded run of ``sc`` to quiescence.

    Traces are kept, and validated by the oracle, for N <= 128 unless told
    otherwise; validation needs the trace.
    """
    if validate is None:
        validate = sc.n_nodes <= VALIDATE_MAX_NODES if trace is None else bool(trace)
    if trace is None:
        trace = validate
    if validate and not trace:
        raise ValueError("validation needs the trace")
    rec = MetricsRecord(sc, seed, run_index)
    collector = _Collector(rec)
    w = _World(sc, seed, trace, [collector], rec)
    if max_events is not None:
        w.sim.max_events = max_events
    _SETUPS[sc.name](w)
    w.sim.run()
    sim = w.sim
    rec.events = sim.events_processed
    rec.end_time = sim.now
    rec.queue_sizes = [q.relay_queue_size(sc.delay.t_t) for q in sim.queues]
    rec.queue_enqueued = [q.enqueued for q in sim.queues]
    if w.srpt is not None:
        rec.root = w.roots.get(0)
        rec.restructure_edges = w.srpt.restructure_edges
    report = None
    if validate:
        if sc.system == "vcube":
            report = oracle.validate(sim.records, w.n)
        else:
            report = oracle.validate(sim.records, w.n, checks=BASELINE_CHECKS)
        rec.violations = len(report.violations)
        rec.stalls = len(report.stalls)
    return RunResult(rec, report, sim.records if trace else None)


# -- public scenario entry points ---------------------------------------------------


def scenario_single_publisher(n: int, subscriber_pct: float, system: str = "vcube",
                              seed: int = 0, **kw) -> MetricsRecord:
    sc = Scenario("single_publisher", n, system, subscriber_pct=subscriber_pct, **kw)
    return run_scenario(sc, seed).metrics


def scenario_several_publishers(n: int, publisher_pct: float, ratio: int = 100,
                                system: str = "vcube", seed: int = 0, **kw) -> MetricsRecord:
    sc = Scenario("several_publishers", n, system, publisher_pct=publisher_pct, ratio=ratio, **kw)
    return run_scenario(sc, seed).metrics


def scenario_message_order(n: int, wait_p: int, system: str = "vcube", seed: int = 0,
                           **kw) -> MetricsRecord:
    sc = Scenario("message_order", n, system, wait_p=wait_p, **kw)
    return run_scenario(sc, seed).metrics


def scenario_multi_topic(n: int, n_topics: int, distribution: str, message_total: int,
                         system: str = "vcube", seed: int = 0, **kw) -> MetricsRecord:
    sc = Scenario("multi_topic", n, system, n_topics=n_topics, distribution=distribution,
                  message_limit=message_total, **kw)
    return run_scenario(sc, seed).metrics


def scenario_churn(n: int, churn_pct: float, churn_period: float = 300.0, message_limit: int = 128,
                   system: str = "vcube", seed: int = 0, **kw) -> MetricsRecord:
    sc = Scenario("churn", n, system, churn_pct=churn_pct, churn_period=churn_period,
                  message_limit=message_limit, **kw)
    return run_scenario(sc, seed).metrics


def scenario_broker_compare(n: int = 4096, broker_counts: Sequence[int] = (32, 256, 2048),
                            seed: int = 0, **kw) -> dict[str, MetricsRecord]:
    """VCube-PS, SRPT-S and one SRPT-B run per broker count, keyed by label."""
    out = {}
    for system in ("vcube", "srpt-s"):
        out[system] = run_scenario(Scenario("broker_compare", n, system, **kw), seed).metrics
    for b in broker_counts:
        sc = Scenario("broker_compare", n, "srpt-b", broker_count=b, **kw)
        out[f"srpt-b-{b}"] = run_scenario(sc, seed).metrics
    return out


# -- aggregation ------------------------------------------------------------------------


def _stats(values: list[float]) -> dict:
    vals = [v for v in values if not (isinstance(v, float) and math.isnan(v))]
    if not vals:
        return {"mean": math.nan, "std": math.nan, "min": math.nan, "max": math.nan}
    return {
        "mean": statistics.fmean(vals),
        "std": statistics.stdev(vals) if len(vals) > 1 else 0.0,
        "min": min(vals),
        "max": max(vals),
    }


def _fractions(counter: Counter) -> dict:
    total = sum(counter.values())
    return {k: v / total for k, v in sorted(counter.items())} if total else {}


def aggregate(runs: Sequence[MetricsRecord]) -> dict:
    """Mean/std/min/max per scalar metric plus pooled distributions."""
    if not runs:
        raise ValueError("aggregate needs at least one run")
    first = runs[0].scenario
    for r in runs[1:]:
        if r.scenario != first:
            raise ValueError("aggregate needs runs of a single scenario")
    scal = [r.scalars() for r in runs]
    out = {
        "scenario": first.as_dict(),
        "runs": len(runs),
        "metrics": {k: _stats([s[k] for s in scal]) for k in scal[0]},
    }
    queue = Counter()
    cb = Counter()
    delay = Counter()
    for r in runs:
        queue.update(r.queue_histogram())
        cb.update(r.cb_sizes)
        delay.update(r.delivery_delay)
    n_nodes = sum(len(r.queue_sizes) for r in runs)
    out["queue_buckets"] = {lab: queue.get(lab, 0) / n_nodes if n_nodes else 0.0
                            for lab in table1_labels()}
    above = [q for r in runs for q in r.queue_sizes if q > 4096]
    out["queue_above_4096"] = {"nodes_per_run": len(above) / len(runs), **_stats(above)}
    out["cb_size_fraction"] = _fractions(cb)
    out["delivery_delay_fraction"] = _fractions(delay)
    return out


def summary_row(agg: dict) -> dict:
    sc = agg["scenario"]
    m = agg["metrics"]
    return {
        "scenario": sc["name"],
        "system": sc["system"] + (f"-{sc['broker_count']}" if sc["broker_count"] else ""),
        "n_nodes": sc["n_nodes"],
        "parameter": Scenario(**sc).parameter,
        "runs": agg["runs"],
        "mean_latency": m["mean_latency"]["mean"],
        "std_latency": m["mean_latency"]["std"],
        "mean_tree_latency": m["mean_tree_latency"]["mean"],
        "mean_bs_latency": m["mean_bs_latency"]["mean"],
        "pub_messages": m["pub_messages"]["mean"],
        "false_positives": m["false_positives"]["mean"],
        "max_queue": m["max_queue"]["mean"],
        "violations": m["violations"]["max"],
        "stalls": m["stalls"]["mean"],
    }


# -- presets ------------------------------------------------------------------------------


def assumption_manifest(control: str = "bypass") -> dict:
    """Modelling choices the published results leave open."""
    return {
        "delay_model": "t_pc=1 per copy (pipelined), t_t=1 serialised per sender, t_pp=ratio",
        "control_queueing": control,
        "queue_metric": "mean queue length (itself included) found by each relayed PUB copy",
        "srpt_root": "uniform random node per topic (broker for srpt-b); never churns",
        "srpt_tree": "union of lowest-bit-first routes from members to the root",
        "srpt_publish": "publisher sends one direct hop to the root (srpt-b: via own broker)",
        "srpt_churn": "graft/prune per changed edge, one control message per edge",
        "publish_intervals": "exponential, mean 500 u.t. (churn: fixed 500 u.t.)",
        "t_w": "uniform [0, 1000] u.t.",
        "zipf": f"topic rank^-{ZIPF_COEFFICIENT}",
        "initial_membership": "installed converged at t=0 (no start-up floods)",
        "message_order_replies": "every non-seed node replies once after delivering all seeds",
        "churn_publisher": "random subscriber whose latest SUB propagation finished "
                           "(fallback to any subscriber, counted as unsettled_publishers)",
        "vcube_repairs": "UNS flooded like SUB, views tracked while unsubscribed, "
                         "held barrier entries never skipped, SUB always answered with own entry, "
                         "pending publications dropped at unsubscribe",
    }


@dataclass(frozen=True)
class Preset:
    description: str
    scenarios: tuple
    runs: int = 40


def _grid(name: str, sizes, systems, runs: int, desc: str, **fixed_and_swept) -> Preset:
    swept = {k: v for k, v in fixed_and_swept.items() if isinstance(v, (list, tuple))}
    fixed = {k: v for k, v in fixed_and_swept.items() if k not in swept}
    combos = [{}]
    for k, vals in swept.items():
        combos = [dict(c, **{k: v}) for c in combos for v in vals]
    scs = []
    for n in sizes:
        for system in systems:
            for c in combos:
                scs.append(Scenario(name, n, system, **fixed, **c))
    return Preset(desc, tuple(scs), runs)


def _broker_preset(n: int, runs: int, desc: str, messages: int = 128) -> Preset:
    scs = [Scenario("broker_compare", n, s, message_limit=messages) for s in ("vcube", "srpt-s")]
    scs += [Scenario("broker_compare", n, "srpt-b", broker_count=b, message_limit=messages)
            for b in (2048, 256, 32)]
    return Preset(desc, tuple(scs), runs)


_SIZES = [8, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096]

PRESETS: dict[str, Preset] = {
    "paper-fig-4a": _grid("single_publisher", _SIZES, ("vcube", "srpt-s"), 40,
                          "single publisher latency/messages vs N", subscriber_pct=[25.0, 100.0]),
    "paper-fig-5": _grid("single_publisher", [4096, 8192], ("vcube", "srpt-s"), 40,
                         "subscriber share sweep (both sizes the figure and text name)",
                         subscriber_pct=[10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0]),
    "paper-fig-6": _grid("several_publishers", _SIZES, ("vcube", "srpt-s"), 40,
                         "several publishers latency", publisher_pct=[25.0, 100.0], ratio=[100, 1000]),
    "paper-table-1": _grid("several_publishers", [1024], ("vcube", "srpt-s"), 40,
                           "queue-size distribution, all publishers", publisher_pct=100.0),
    "paper-fig-7": _grid("message_order", [256], ("vcube",), 40,
                         "causal barrier sizes and delivery delay", wait_p=[1, 10]),
    "paper-fig-8": _grid("multi_topic", [256], ("vcube", "srpt-s"), 40,
                         "128 topics, uniform vs zipf", n_topics=128,
                         distribution=["uniform", "zipf"], message_limit=[2 ** k for k in range(8, 15)]),
    "paper-fig-9": _grid("churn", [256, 512, 1024, 2048], ("vcube", "srpt-s"), 40,
                         "churn latency and false positives", churn_pct=[12.5, 25.0]),
    "paper-fig-10": _broker_preset(4096, 40, "broker-based SRPT decomposition"),
    # reduced profiles for CI and the acceptance suite
    "ci-fig-4a": _grid("single_publisher", [8, 64, 512, 4096], ("vcube", "srpt-s"), 5,
                       "reduced single publisher", subscriber_pct=[25.0, 100.0]),
    "ci-table-1": _grid("several_publishers", [1024], ("vcube", "srpt-s"), 1,
                        "reduced queue-size distribution", publisher_pct=100.0),
    "ci-fig-7": _grid("message_order", [256], ("vcube",), 5, "reduced message order",
                      wait_p=[1, 10]),
    "ci-fig-8": _grid("multi_topic", [256], ("vcube", "srpt-s"), 1, "reduced multi-topic",
                      n_topics=128, distribution=["uniform", "zipf"], message_limit=2 ** 14),
    "ci-fig-9": _grid("churn", [2048], ("vcube", "srpt-s"), 1,
                      "reduced churn (4 messages)", churn_pct=[12.5, 25.0], message_limit=4),
    "ci-fig-10": _broker_preset(4096, 1, "reduced broker comparison"),
    "ci-smoke": _grid("single_publisher", [8, 16, 32], ("vcube", "srpt-s"), 2,
                      "smoke test", subscriber_pct=[50.0, 100.0]),
}


def run_preset(name: str, seed: int = 0, runs: Optional[int] = None, progress=None) -> list[dict]:
    """Run every scenario of a preset; returns one aggregate per scenario."""
    preset = PRESETS[name]
    k = preset.runs if runs is None else runs
    out = []
    for sc in preset.scenarios:
        recs = run_many(sc, seed, k)
        agg = aggregate(recs)
        agg["records"] = recs
        out.append(agg)
        if progress is not None:
            progress(sc, agg)
    return out


# -- randomized correctness workload ----------------------------------------------------

FUZZ_SIZES = (8, 16, 32, 64, 128)


@dataclass(frozen=True)
class FuzzShape:
    n_nodes: int
    topics: int
    ops: int
    window: float
    control: str
    churn_waves: int
    churn_pct: float


def fuzz_shape(seed: int) -> FuzzShape:
    """Workload shape for one randomized run; N cycles through :data:`FUZZ_SIZES`."""
    rng = rng_stream(seed, "fuzz-shape")
    return FuzzShape(
        n_nodes=FUZZ_SIZES[seed % len(FUZZ_SIZES)],
        topics=rng.choice((1, 2, 3)),
        ops=rng.choice((40, 100, 200)),
        window=rng.choice((500.0, 2000.0, 6000.0)),
        control=rng.choice(("shared", "bypass")),
        churn_waves=rng.choice((0, 0, 4, 10)),
        churn_pct=rng.choice((12.5, 25.0)),
    )


def random_schedule(seed: int, repairs: bool = True,
                    shape: Optional[FuzzShape] = None) -> tuple[list, FuzzShape]:
    """Run random subscribe/unsubscribe/publish calls (plus churn waves) to quiescence.

    Nobody starts subscribed: every membership change is a real SUB/UNS flood.
    Returns the trace and the shape used.
    """
    sh = fuzz_shape(seed) if shape is None else shape
    n = sh.n_nodes
    sim = Simulator(n, DelayModel(control=sh.control), run_id=seed)
    d = n.bit_length() - 1
    sim.attach([VCubeNode(i, d, sim, repairs=repairs) for i in range(n)])
    sim.note("config", None, None, f"n={n} repairs={int(repairs)}")
    rng = rng_stream(seed, "fuzz-ops")
    ops = ("subscribe", "unsubscribe", "publish")
    for _ in range(sh.ops):
        sim.schedule_action(rng.uniform(0, sh.window), sim.app_call, rng.randrange(n),
                            rng.choices(ops, (3, 1, 5))[0], rng.randrange(sh.topics))
    if sh.churn_waves:
        period = sh.window / sh.churn_waves
        k = max(1, round(n * sh.churn_pct / 100))

        def wave() -> None:
            t = rng.randrange(sh.topics)
            for j in rng.sample(range(n), k):
                op = "unsubscribe" if sim.nodes[j].is_subscribed(t) else "subscribe"
                sim.app_call(j, op, t)

        for w in range(sh.churn_waves):
            sim.schedule_action(period * (w + 0.5), wave)
    sim.run()
    return sim.records, sh


def run_many(sc: Scenario, seed: int, runs: int, **kw) -> list[MetricsRecord]:
    return [run_scenario(sc, seed + r, run_index=r, **kw).metrics for r in range(runs)]


# -- output -----------------------------------------------------------------------------------


_CSV_SCENARIO_FIELDS = [f.name for f in fields(Scenario)]


def write_metrics_csv(records: Iterable[MetricsRecord], path: str) -> None:
    records = list(records)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {SCHEMA}\n")
        cols = _CSV_SCENARIO_FIELDS + ["seed", "run_index"] + list(MetricsRecord(
            Scenario("single_publisher", 8), 0).scalars())
        w = csv.writer(fh)
        w.writerow(cols)
        for r in records:
            sc = r.scenario.as_dict()
            row = [sc[c] for c in _CSV_SCENARIO_FIELDS] + [r.seed, r.run_index]
            row += list(r.scalars().values())
            w.writerow(row)


def write_metrics_json(records: Iterable[MetricsRecord], path: str) -> None:
    with open(path, "w") as fh:
        json.dump({"schema": SCHEMA, "records": [r.as_dict() for r in records]}, fh,
                  indent=1, default=float)


def write_summary_csv(aggs: Iterable[dict], path: str) -> None:
    rows = [summary_row(a) for a in aggs]
    with open(path, "w", newline="") as fh:
        fh.write(f"# {SCHEMA}\n")
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def write_outputs(out_dir: str, records: list[MetricsRecord], aggs: list[dict],
                  manifest: Optional[dict] = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_metrics_csv(records, os.path.join(out_dir, "runs.csv"))
    write_metrics_json(records, os.path.join(out_dir, "runs.json"))
    write_summary_csv(aggs, os.path.join(out_dir, "summary.csv"))
    clean = [{k: v for k, v in a.items() if k != "records"} for a in aggs]
    with open(os.path.join(out_dir, "aggregate.json"), "w") as fh:
        json.dump({"schema": SCHEMA, "aggregates": clean}, fh, indent=1, default=str)
    if manifest is not None:
        with open(os.path.join(out_dir, "assumptions.json"), "w") as fh:
            json.dump(manifest, fh, indent=1)
