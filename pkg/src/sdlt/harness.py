"""Scenario configs, deterministic trace execution and Monte Carlo plumbing.

A :class:`ScenarioConfig` fixes everything about one execution: consensus
kind, roster, genesis, event schedule, adversary strategy and seed.
:func:`run_scenario` turns it into a :class:`Trace`, the ground-truth states
S_0..S_T together with the local-state bag a joining node would see at each
step.

Seeds for independent trials come from :func:`derive_seed`, which hashes the
master seed with the trial coordinates (SHA-256, first 8 bytes big-endian),
so results never depend on how trials are scheduled across workers.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from multiprocessing import get_context
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .adversary import (
    FORGERY_KINDS,
    MinerDraw,
    fabricate_ba_bag,
    forge_ba_state,
    fork_event,
    ground_record,
    long_range_attack,
    mining_race,
    mirror_network,
    run_pos,
)
from .consensus import (
    EventBatch,
    NodeProfile,
    default_event,
    pow_record,
    pow_total,
    sample_producer,
    step_ba,
)
from .errors import (
    ConfigError,
    InvalidConfiguration,
    InvalidShare,
    SdltError,
    StepError,
)
from .ledger import (
    GenesisDescriptor,
    LedgerState,
    LocalStateBag,
    NodeId,
    Transfer,
    bag_to_json,
    genesis_state,
    genesis_to_json,
    state_digest,
    state_to_json,
    truncate,
)

CONSENSUS_KINDS = ("BA", "PoW", "PoS")
ADVERSARY_KINDS = ("none", "ba_forge", "private_mine", "long_range")

Z99 = 2.5758293035489004  # two-sided 99% normal quantile


# -- seeds and workers ------------------------------------------------------


def derive_seed(master_seed: int, *coords: int) -> int:
    h = hashlib.sha256(b"sdlt-seed")
    h.update(struct.pack(">Q", master_seed & 0xFFFFFFFFFFFFFFFF))
    for c in coords:
        h.update(struct.pack(">Q", c & 0xFFFFFFFFFFFFFFFF))
    return int.from_bytes(h.digest()[:8], "big")


def worker_width(width: int | None = None) -> int:
    """Pool width: explicit argument, else SDLT_THREADS (0 or unset means all cores)."""
    if width is None:
        raw = os.environ.get("SDLT_THREADS", "0").strip() or "0"
        try:
            width = int(raw)
        except ValueError:
            raise ConfigError(f"SDLT_THREADS must be an integer, got {raw!r}") from None
    if width < 0:
        raise ConfigError("worker width must be >= 0")
    return width or (os.cpu_count() or 1)


def run_trials(fn: Callable, jobs: Sequence, width: int | None = None) -> list:
    """``[fn(*job) for job in jobs]``, possibly on a process pool; order is preserved."""
    width = worker_width(width)
    if width <= 1 or len(jobs) < 2:
        return [fn(*job) for job in jobs]
    chunk = max(1, len(jobs) // (width * 8))
    with ProcessPoolExecutor(max_workers=width, mp_context=get_context("fork")) as pool:
        return list(pool.map(_star, [(fn, job) for job in jobs], chunksize=chunk))


def _star(item):
    fn, job = item
    return fn(*job)


# -- statistics -------------------------------------------------------------


def binomial_stderr(rate: float, n: int) -> float:
    """Standard error of a proportion; worst case (p = 1/2) below 30 samples."""
    if n < 30:
        return math.sqrt(0.25 / n)
    return math.sqrt(rate * (1.0 - rate) / n)


@dataclass(frozen=True)
class MetricSummary:
    n: int
    mean: float
    stderr: float

    @property
    def ci99(self) -> tuple[float, float]:
        half = Z99 * self.stderr
        return (self.mean - half, self.mean + half)

    def to_json(self) -> dict:
        if math.isnan(self.stderr):  # a single sample has no spread estimate
            return {"n": self.n, "mean": self.mean, "stderr": None, "ci99": None}
        lo, hi = self.ci99
        return {"n": self.n, "mean": self.mean, "stderr": self.stderr, "ci99": [lo, hi]}


def summarize(values: Sequence[float]) -> MetricSummary:
    n = len(values)
    mean = math.fsum(values) / n
    if all(v in (0, 1) for v in values):
        return MetricSummary(n, mean, binomial_stderr(mean, n))
    if n == 1:
        return MetricSummary(1, mean, math.nan)
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return MetricSummary(n, mean, math.sqrt(var / n))


def catchup_oracle(p: float, q: float, k: int) -> float:
    """Probability that a random walk k steps behind, moving up w.p. q, ever reaches zero."""
    if not (math.isclose(p + q, 1.0, abs_tol=1e-12) and p > q > 0):
        raise InvalidShare(f"need p + q = 1 and p > q > 0, got p={p}, q={q}")
    if k < 0:
        raise ValueError("deficit must be non-negative")
    return (q / p) ** k


def catchup_within(q: float, k: int, horizon: int) -> float:
    """Probability that the walk reaches zero within ``horizon`` steps (exact, by dynamic programming).

    The gap to :func:`catchup_oracle` is the mass a horizon-bounded race
    censors.
    """
    if k <= 0:
        return 1.0
    if k > horizon:
        return 0.0
    dist = np.zeros(k + horizon + 2)
    dist[k] = 1.0
    reached = 0.0
    for _ in range(horizon):
        reached += dist[1] * q
        nxt = np.zeros_like(dist)
        nxt[1:-1] += dist[2:] * q
        nxt[2:] += dist[1:-1] * (1.0 - q)
        dist = nxt
    return float(reached)


def rewrite_bound(lam: float, k: int) -> float:
    """(4 lambda)^k, i.e. exp(-c k) with c = log(1 / (4 lambda))."""
    return (4.0 * lam) ** k


# -- scenario configuration -------------------------------------------------


@dataclass(frozen=True)
class AdversarySpec:
    kind: str = "none"
    params: Mapping[str, Any] = field(default_factory=dict)

    def get(self, key: str, default=None):
        return self.params.get(key, default)


@dataclass(frozen=True)
class ScenarioConfig:
    consensus: str
    horizon: int
    roster: tuple[NodeProfile, ...]
    genesis: GenesisDescriptor
    events: tuple[EventBatch, ...]
    adversary: AdversarySpec = AdversarySpec()
    seed: int = 0
    coalitions: tuple[tuple[NodeId, ...], ...] | None = None
    extras: Mapping[str, Any] = field(default_factory=dict)
    source: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.consensus not in CONSENSUS_KINDS:
            raise ConfigError(f"consensus must be one of {CONSENSUS_KINDS}, got {self.consensus!r}")
        if self.horizon < 0:
            raise ConfigError("horizon must be non-negative")
        if len(self.events) != self.horizon:
            raise ConfigError(f"{len(self.events)} event batches for horizon {self.horizon}")
        ids = [p.id for p in self.roster]
        if len(set(ids)) != len(ids):
            raise ConfigError("roster ids are not unique")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.adversary.kind not in ADVERSARY_KINDS:
            raise ConfigError(f"unknown adversary kind {self.adversary.kind!r}")
        g = self.genesis
        if self.consensus == "BA":
            if g.ba_committee is None:
                raise ConfigError("BA scenario needs genesis.ba_committee")
            missing = set(g.ba_committee) - set(ids)
            if missing:
                raise ConfigError(f"committee members missing from roster: {sorted(map(str, missing))}")
        if self.consensus == "PoS" and g.initial_stake is None:
            raise ConfigError("PoS scenario needs genesis.initial_stake")
        if self.coalitions is not None and len(self.coalitions) != self.horizon:
            raise ConfigError("coalitions must list one coalition per step")
        expected = {"BA": ("none", "ba_forge"), "PoW": ("none", "private_mine"),
                    "PoS": ("none", "long_range")}[self.consensus]
        if self.adversary.kind not in expected:
            raise ConfigError(f"adversary {self.adversary.kind!r} does not apply to {self.consensus}")

    def profile(self, node: NodeId) -> NodeProfile:
        for p in self.roster:
            if p.id == node:
                return p
        raise KeyError(node)

    def online(self, t: int) -> list[NodeProfile]:
        return [p for p in self.roster if p.is_online(t)]

    def digest(self) -> str:
        blob = json.dumps(config_to_json(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, seed=seed)


def parse_node(label) -> NodeId:
    if not isinstance(label, str):
        raise ConfigError(f"node ids are strings, got {label!r}")
    try:
        return NodeId.from_label(label)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _bytes(value, what: str) -> bytes:
    if value is None:
        return b""
    if isinstance(value, str):
        return value.encode("utf-8", "surrogateescape")
    raise ConfigError(f"{what} must be a string")


def _text(data: bytes) -> str:
    return data.decode("utf-8", "surrogateescape")


def config_from_json(doc: Mapping[str, Any]) -> ScenarioConfig:
    """Build a config from its JSON document; every problem surfaces as ConfigError."""
    if not isinstance(doc, Mapping):
        raise ConfigError("config root must be a JSON object")
    try:
        consensus = doc["consensus"]
        horizon = int(doc["horizon"])
        g = doc.get("genesis", {})
        committee = g.get("ba_committee")
        stake = g.get("initial_stake")
        genesis = GenesisDescriptor(
            _bytes(g.get("tag"), "genesis.tag"),
            None if committee is None else tuple(parse_node(n) for n in committee),
            None if stake is None else {parse_node(n): int(a) for n, a in stake.items()},
        )
        roster = tuple(
            NodeProfile(
                parse_node(r["id"]),
                bool(r.get("honest", True)),
                float(r.get("power", 0.0)),
                None if r.get("online") is None else frozenset(int(t) for t in r["online"]),
            )
            for r in doc.get("roster", [])
        )
        raw_events = doc.get("events")
        if raw_events is None:
            events = tuple(default_event(t) for t in range(horizon))
        else:
            events = tuple(
                EventBatch(
                    int(e.get("time", t)),
                    _bytes(e.get("payload", f"batch-{t}"), "event payload"),
                    tuple(Transfer(parse_node(a), parse_node(b), int(x)) for a, b, x in e.get("transfers", [])),
                )
                for t, e in enumerate(raw_events)
            )
        adv = doc.get("adversary") or {"kind": "none"}
        adversary = AdversarySpec(adv.get("kind", "none"), {k: v for k, v in adv.items() if k != "kind"})
        coalitions = doc.get("coalitions")
        if coalitions is not None:
            coalitions = tuple(tuple(parse_node(n) for n in c) for c in coalitions)
        return ScenarioConfig(
            consensus=consensus,
            horizon=horizon,
            roster=roster,
            genesis=genesis,
            events=events,
            adversary=adversary,
            seed=int(doc.get("seed", 0)),
            coalitions=coalitions,
            extras=dict(doc.get("estimate", {})),
            source=dict(doc),
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        what = f"missing field {exc}" if isinstance(exc, KeyError) else str(exc)
        raise ConfigError(f"invalid config: {what}") from None


def load_config(path) -> ScenarioConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: JSON parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return config_from_json(doc)


def config_to_json(cfg: ScenarioConfig) -> dict:
    """Inverse of :func:`config_from_json` (events are always written out)."""
    g = cfg.genesis
    return {
        "consensus": cfg.consensus,
        "horizon": cfg.horizon,
        "seed": cfg.seed,
        "genesis": {
            "tag": _text(g.tag),
            "ba_committee": None if g.ba_committee is None else [str(n) for n in g.ba_committee],
            "initial_stake": None if g.initial_stake is None else {str(n): a for n, a in g.initial_stake},
        },
        "roster": [
            {
                "id": str(p.id),
                "honest": p.honest,
                "power": p.power,
                "online": None if p.online is None else sorted(p.online),
            }
            for p in cfg.roster
        ],
        "events": [
            {
                "time": e.time,
                "payload": _text(e.payload),
                "transfers": [[str(t.src), str(t.dst), t.amount] for t in e.transfers],
            }
            for e in cfg.events
        ],
        "adversary": {"kind": cfg.adversary.kind, **dict(cfg.adversary.params)},
        "coalitions": None if cfg.coalitions is None else [[str(n) for n in c] for c in cfg.coalitions],
        "estimate": dict(cfg.extras),
    }


# -- traces -----------------------------------------------------------------


@dataclass(frozen=True)
class Trace:
    genesis: GenesisDescriptor
    states: tuple[LedgerState, ...]
    bags: tuple[LocalStateBag, ...]
    meta: Mapping[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "meta": dict(self.meta),
            "genesis": genesis_to_json(self.genesis),
            "steps": [
                {"t": t, "height": s.height, "truth": state_digest(s), "bag": bag_to_json(b)}
                for t, (s, b) in enumerate(zip(self.states, self.bags))
            ],
            "final_state": state_to_json(self.states[-1], with_genesis=False),
        }


def run_scenario(config: ScenarioConfig) -> Trace:
    """Execute ``config`` deterministically: S_0 = I and S_{t+1} = sigma(S_t, N_t, E_t)."""
    runner = {"BA": _run_ba, "PoW": _run_pow, "PoS": _run_pos}[config.consensus]
    states, bags, meta = runner(config)
    meta = {"seed": config.seed, "config_digest": config.digest(), **meta}
    return Trace(config.genesis, tuple(states), tuple(bags), meta)


def _run_ba(cfg: ScenarioConfig):
    committee = cfg.genesis.ba_committee
    byzantine = {p.id for p in cfg.roster if not p.honest}
    forging = cfg.adversary.kind == "ba_forge"
    kind = cfg.adversary.get("forgery", "replace_last")
    if kind not in FORGERY_KINDS:
        raise ConfigError(f"forgery must be one of {FORGERY_KINDS}")
    withholding = byzantine if cfg.adversary.get("withhold", False) else set()
    state = genesis_state(cfg.genesis)
    states = [state]
    for t, e in enumerate(cfg.events):
        try:
            state = step_ba(state, committee, withholding, e)
        except SdltError as exc:
            raise StepError(t, exc) from exc
        states.append(state)
    bags = []
    for t, truth in enumerate(states):
        online = {p.id for p in cfg.online(t)}
        members = [n for n in committee if n in online]
        liars = {n for n in online & byzantine} if forging else set()
        observers = sorted(online - set(committee) - liars)
        forgery = forge_ba_state(truth, sorted(liars & set(committee)), kind)
        bag = fabricate_ba_bag(truth, members, liars & set(committee), forgery, observers)
        outsiders = sorted(liars - set(committee))
        if outsiders:
            bag = bag.merged(LocalStateBag(tuple((n, forgery) for n in outsiders)))
        bags.append(bag)
    return states, bags, {"byzantine": sorted(map(str, byzantine)), "forgery": kind if forging else None}


def _run_pow(cfg: ScenarioConfig):
    rng = np.random.default_rng(cfg.seed)
    mining = cfg.adversary.kind == "private_mine"
    depth = int(cfg.adversary.get("fork_depth", 1))
    launch = int(cfg.adversary.get("launch_step", 0))
    if depth < 0 or launch < 0:
        raise ConfigError("fork_depth and launch_step must be non-negative")
    truth = genesis_state(cfg.genesis)
    fork: LedgerState | None = None
    states = [truth]
    forks = [None]
    producers = []
    honest_blocks = adversary_blocks = adoptions = 0
    for t, e in enumerate(cfg.events):
        try:
            producer = sample_producer(cfg.online(t), rng)
        except SdltError as exc:
            raise StepError(t, exc) from exc
        producers.append(str(producer))
        if cfg.profile(producer).honest:
            honest_blocks += 1
            truth = truth.append(pow_record(e, producer))
        else:
            adversary_blocks += 1
            if not mining or t < launch:
                truth = truth.append(pow_record(e, producer))
            elif fork is None:
                base = truncate(truth, depth)
                if base.height < truth.height:
                    block = ground_record(truth.records[base.height], producer, e.time)
                else:
                    block = pow_record(fork_event(e.time), producer)
                fork = base.append(block)
            else:
                fork = fork.append(pow_record(fork_event(e.time), producer))
        if fork is not None and pow_total(fork) >= pow_total(truth):
            truth, fork = fork, None
            adoptions += 1
        states.append(truth)
        forks.append(fork)
    bags = []
    for t, truth in enumerate(states):
        entries = []
        for p in cfg.online(t):
            claim = truth if p.honest or forks[t] is None else forks[t]
            entries.append((p.id, claim))
        bags.append(LocalStateBag(tuple(entries)))
    meta = {
        "producers": producers,
        "honest_blocks": honest_blocks,
        "adversary_blocks": adversary_blocks,
        "adoptions": adoptions,
    }
    return states, bags, meta


def _run_pos(cfg: ScenarioConfig):
    t = cfg.horizon
    try:
        if cfg.adversary.kind == "long_range":
            pool = [parse_node(n) for n in cfg.adversary.get("pool", [])]
            mirror = mirror_network(cfg.roster, pool)
            trace = long_range_attack(cfg.genesis, cfg.events, cfg.roster, mirror, t, cfg.coalitions)
            meta = {
                "mirror": {str(a): str(b) for a, b in mirror.pairs},
                "mirrored_states": [state_digest(s) for s in trace.adversary_states],
            }
            return list(trace.honest_states), list(trace.merged_bags), meta
        states = run_pos(cfg.genesis, cfg.events, t, cfg.coalitions)
    except SdltError as exc:
        raise StepError(-1, exc) from exc
    bags = [
        LocalStateBag(tuple((p.id, s) for p in cfg.online(step)))
        for step, s in enumerate(states)
    ]
    return states, bags, {}


# -- Monte Carlo ------------------------------------------------------------


def _scenario_trial(config: ScenarioConfig, collector) -> dict[str, float]:
    return dict(collector(run_scenario(config)))


def monte_carlo(
    base: ScenarioConfig,
    trials: int,
    collector: Callable[[Trace], Mapping[str, float]],
    width: int | None = None,
) -> dict[str, MetricSummary]:
    """Run ``trials`` copies of ``base`` under derived seeds and summarise each metric.

    ``collector`` maps a trace to named metric values; per-trial values are
    folded in trial order, so the result is the same for any pool width.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    jobs = [(base.with_seed(derive_seed(base.seed, i)), collector) for i in range(trials)]
    rows = run_trials(_scenario_trial, jobs, width)
    names = sorted({name for row in rows for name in row})
    return {name: summarize([row[name] for row in rows if name in row]) for name in names}


# -- PoW rewrite trials -----------------------------------------------------


@dataclass(frozen=True)
class PowTrial:
    """One joining-node observation: the bag at time t and the true state at t'."""

    genesis: GenesisDescriptor
    bag: LocalStateBag
    truth_t: LedgerState
    future: LedgerState
    caught_up: bool


class PrivateForkTrials:
    """Scenario generator for the probabilistic check on PoW.

    At time t the honest chain holds t blocks and the adversary withholds one
    block that replaces the honest block k+1 deep, so it trails by k.  Both
    sides then mine for t' - t more blocks by power share.  If the fork
    catches up, honest miners switch to it (the adversary wins the tie
    through its ground first block) and the true state at t' no longer
    contains S_t truncated by k.
    """

    def __init__(self, miners: Sequence[NodeProfile], genesis: GenesisDescriptor | None = None):
        self.miners = tuple(miners)
        self.genesis = genesis or GenesisDescriptor(b"pow-rewrite")
        self.honest = [m for m in self.miners if m.honest and m.power > 0]
        self.adversary = [m for m in self.miners if not m.honest and m.power > 0]
        if not self.honest or not self.adversary:
            raise InvalidConfiguration("need at least one honest and one adversarial miner")
        MinerDraw(self.miners)  # validates shares
        self.p = math.fsum(m.power for m in self.honest)
        self.q = math.fsum(m.power for m in self.adversary)

    @classmethod
    def from_shares(cls, p: float, q: float) -> "PrivateForkTrials":
        return cls([
            NodeProfile(NodeId.from_label("honest"), True, p),
            NodeProfile(NodeId.from_label("adversary"), False, q),
        ])

    def share_schedule(self, t_prime: int) -> list[tuple[float, float]]:
        return [(self.p, self.q)] * t_prime

    def __call__(self, k: int, t: int, t_prime: int, seed: int) -> PowTrial:
        if t < k + 1:
            raise InvalidConfiguration(f"t = {t} leaves no room for a fork {k + 1} deep")
        if t_prime < t:
            raise InvalidConfiguration("t' must not precede t")
        rng = np.random.default_rng(seed)
        honest_draw = MinerDraw([replace(m, power=m.power / self.p) for m in self.honest])
        picks = honest_draw.draw(rng, t)
        records = tuple(pow_record(default_event(i + 1), honest_draw.ids[j]) for i, j in enumerate(picks))
        truth_t = LedgerState(self.genesis, records)
        race = mining_race(truth_t, k + 1, self.miners, t_prime - t, rng, head_start=1)
        claim = LedgerState(self.genesis, race.fork.records[: t - k])
        if race.caught_up:
            future = race.fork
            draw = MinerDraw(self.miners)
            start = t + race.caught_up_at
            for step, j in enumerate(draw.draw(rng, t_prime - start), start=start + 1):
                future = future.append(pow_record(default_event(step), draw.ids[j]))
        else:
            future = race.honest
        entries = [(m.id, truth_t) for m in self.honest]
        entries += [(m.id, claim) for m in self.adversary]
        return PowTrial(self.genesis, LocalStateBag(tuple(entries)), truth_t, future, race.caught_up)
