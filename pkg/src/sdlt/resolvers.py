"""Joining-node resolution functions and the three statelessness checkers."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence, Union

import numpy as np

from .adversary import AttackTrace, relabel_state, swapped_worlds
from .consensus import pow_total
from .errors import InvalidConfiguration, NotBaGenesis
from .harness import (
    Z99,
    PowTrial,
    ScenarioConfig,
    binomial_stderr,
    catchup_oracle,
    catchup_within,
    derive_seed,
    parse_node,
    rewrite_bound,
    run_trials,
)
from .ledger import (
    GenesisDescriptor,
    LedgerState,
    LocalStateBag,
    bag_equal,
    bag_to_json,
    is_prefix,
    state_digest,
    truncate,
)


class Bottom(enum.Enum):
    """The distinguished "cannot decide" outcome."""

    BOTTOM = "⊥"

    def __repr__(self):
        return "BOTTOM"


BOTTOM = Bottom.BOTTOM

ResolutionOutcome = Union[LedgerState, Bottom]
Resolver = Callable[[GenesisDescriptor, LocalStateBag], ResolutionOutcome]


def _same_genesis(genesis: GenesisDescriptor, bag: LocalStateBag) -> bool:
    g = bag.genesis
    return g is genesis or (g is not None and g == genesis)


def resolve_ba(genesis: GenesisDescriptor, bag: LocalStateBag) -> ResolutionOutcome:
    """The state claimed by strictly more than half of the committee, else BOTTOM."""
    if genesis.ba_committee is None:
        raise NotBaGenesis("genesis carries no BA committee")
    if not _same_genesis(genesis, bag):
        return BOTTOM
    committee = genesis.committee_set
    counts: dict[bytes, int] = {}
    for node, state in bag.entries:
        if node in committee:
            key = state.canonical
            n = counts.get(key, 0) + 1
            if 2 * n > len(committee):
                return state
            counts[key] = n
    return BOTTOM


def resolve_pow(genesis: GenesisDescriptor, bag: LocalStateBag) -> ResolutionOutcome:
    """The claimed state with the most work; ties go to the smallest canonical bytes."""
    if not _same_genesis(genesis, bag):
        return BOTTOM
    best = None
    best_key = None
    for _, state in bag.entries:
        key = (-pow_total(state), state.canonical)
        if best_key is None or key < best_key:
            best, best_key = state, key
    return best


# -- checkers ---------------------------------------------------------------


class TraceLike(Protocol):
    genesis: GenesisDescriptor
    states: Sequence[LedgerState]
    bags: Sequence[LocalStateBag]


def _matches(outcome: ResolutionOutcome, truth: LedgerState) -> bool:
    return outcome is not BOTTOM and outcome.canonical == truth.canonical


def describe(outcome: ResolutionOutcome) -> str:
    return "BOTTOM" if outcome is BOTTOM else state_digest(outcome)


@dataclass
class WeakReport:
    passed: bool
    steps: int
    failures: list[dict] = field(default_factory=list)

    def __bool__(self):
        return self.passed


def check_weak(resolver: Resolver, trace: TraceLike) -> WeakReport:
    """resolver(I, bag_t) must equal S_t at every recorded step; BOTTOM counts as failure."""
    failures = []
    for t, (truth, bag) in enumerate(zip(trace.states, trace.bags)):
        got = resolver(trace.genesis, bag)
        if not _matches(got, truth):
            failures.append({
                "step": t,
                "expected": state_digest(truth),
                "got": describe(got),
                "bag": bag_to_json(bag),
            })
    return WeakReport(not failures, len(trace.states), failures)


@dataclass
class StrongReport:
    passed: bool
    weak: WeakReport
    exhaustive: bool
    subsets_checked: int
    # classes[subset size] = {"subsets", "truth", "bottom", "wrong"}
    classes: dict[int, dict[str, int]] = field(default_factory=dict)
    counterexample: dict | None = None
    largest_bag: int = 0

    def __bool__(self):
        return self.passed

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        if self.exhaustive:
            return f"strong: {verdict} (exhaustive, 2^{self.largest_bag} subsets)"
        return f"strong: {verdict} (sampled, not exhaustive, {self.subsets_checked} subsets)"


def _subset_masks(n: int, budget: int, rng: np.random.Generator) -> tuple[Sequence[int], bool]:
    if n <= math.log2(budget):
        return range(1 << n), True
    return [int(x) for x in rng.integers(0, 1 << n, size=budget, dtype=np.uint64)], False


def _all_subsets(entries: tuple) -> list[tuple]:
    """Every subset of ``entries`` in mask order, each built from a smaller one."""
    subsets = [()] * (1 << len(entries))
    for mask in range(1, len(subsets)):
        low = mask & -mask
        subsets[mask] = (entries[low.bit_length() - 1],) + subsets[mask ^ low]
    return subsets


def check_strong(
    resolver: Resolver,
    trace: TraceLike,
    subset_budget: int = 4096,
    seed: int = 0,
) -> StrongReport:
    """check_weak, plus resolver(I, A) in {S_t, BOTTOM} for every subset A of each bag.

    Subsets are enumerated exhaustively while 2^|bag| fits the budget;
    larger bags are checked on ``subset_budget`` uniformly drawn subsets and
    the report is flagged as sampled.
    """
    if subset_budget < 1:
        raise ValueError("subset budget must be positive")
    weak = check_weak(resolver, trace)
    rng = np.random.default_rng(seed)
    exhaustive = True
    checked = 0
    classes: dict[int, dict[str, int]] = {}
    counterexample = None
    largest = 0
    for t, (truth, bag) in enumerate(zip(trace.states, trace.bags)):
        entries = bag.entries
        largest = max(largest, len(entries))
        masks, full = _subset_masks(len(entries), subset_budget, rng)
        exhaustive = exhaustive and full
        if full:
            subsets = _all_subsets(entries)
        else:
            subsets = [tuple(e for i, e in enumerate(entries) if mask >> i & 1) for mask in masks]
        key = truth.canonical
        for subset in subsets:
            got = resolver(trace.genesis, LocalStateBag._trusted(subset))
            cls = classes.get(len(subset))
            if cls is None:
                cls = classes[len(subset)] = {"subsets": 0, "truth": 0, "bottom": 0, "wrong": 0}
            cls["subsets"] += 1
            checked += 1
            if got is BOTTOM:
                cls["bottom"] += 1
            elif got.canonical == key:
                cls["truth"] += 1
            else:
                cls["wrong"] += 1
                if counterexample is None:
                    counterexample = {
                        "kind": "subset",
                        "step": t,
                        "expected": state_digest(truth),
                        "got": state_digest(got),
                        "subset": bag_to_json(LocalStateBag._trusted(subset)),
                    }
    if counterexample is None and weak.failures:
        counterexample = {"kind": "full_bag", **weak.failures[0]}
    passed = weak.passed and counterexample is None
    return StrongReport(passed, weak, exhaustive, checked, classes, counterexample, largest)


# -- probabilistic ----------------------------------------------------------


class TrialGenerator(Protocol):
    def share_schedule(self, t_prime: int) -> list[tuple[float, float]]: ...

    def __call__(self, k: int, t: int, t_prime: int, seed: int) -> PowTrial: ...


def _trial_failed(resolver: Resolver, generator: TrialGenerator, k: int, t: int, t_prime: int, seed: int) -> bool:
    trial = generator(k, t, t_prime, seed)
    got = resolver(trial.genesis, trial.bag)
    if got is BOTTOM:
        return True
    return not is_prefix(truncate(got, k), trial.future)


@dataclass(frozen=True)
class ProbabilisticRow:
    k: int
    trials: int
    failures: int
    failure_rate: float
    stderr: float
    bound: float
    oracle: float | None
    oracle_within_horizon: float | None = None

    @property
    def half_width99(self) -> float:
        return Z99 * self.stderr

    def sigma_at(self, value: float) -> float:
        return math.sqrt(value * (1.0 - value) / self.trials)

    @property
    def within_bound(self) -> bool:
        return self.failure_rate <= self.bound + 3.0 * self.sigma_at(min(self.bound, 1.0))

    @property
    def tracks_oracle(self) -> bool | None:
        if self.oracle is None:
            return None
        return abs(self.failure_rate - self.oracle) <= 3.0 * self.sigma_at(self.oracle)


@dataclass(frozen=True)
class ProbabilisticTable:
    rows: tuple[ProbabilisticRow, ...]
    lam: float
    p: float
    q: float
    trials: int

    @property
    def meaningful(self) -> bool:
        return self.trials >= 30

    @property
    def passed(self) -> bool:
        return all(r.within_bound for r in self.rows)

    def decay_rates(self) -> dict[str, float | None]:
        """Per-block decay constant c in rate ~ exp(-c k): fitted, implied by the bound, and by the oracle.

        The fit is least squares on log(rate) over rows with at least one
        failure; ``None`` when fewer than two such rows exist.
        """
        pts = [(r.k, math.log(r.failure_rate)) for r in self.rows if r.failures > 0]
        fitted = None
        if len({k for k, _ in pts}) >= 2:
            slope = np.polyfit([k for k, _ in pts], [y for _, y in pts], 1)[0]
            fitted = float(-slope)
        bound = -math.log(4.0 * self.lam) if self.lam < 0.25 else 0.0
        oracle = math.log(self.p / self.q) if self.p > self.q > 0 else None
        return {"fitted": fitted, "bound": bound, "oracle": oracle}


def check_probabilistic(
    resolver: Resolver,
    scenario_generator: TrialGenerator,
    k_values: Sequence[int],
    t: int,
    t_prime: int,
    trials: int,
    master_seed: int,
    width: int | None = None,
) -> ProbabilisticTable:
    """Estimate, per k, how often resolver(I, bag_t) truncated by k fails to prefix S_{t'}.

    Each estimate is reported next to the bound (4 lambda)^k, lambda being
    the largest p_t q_t over the schedule, and, when the shares are constant,
    the catch-up probability (q/p)^k.
    """
    if t_prime < t:
        raise InvalidConfiguration("t' must not precede t")
    if trials < 1:
        raise InvalidConfiguration("trials must be >= 1")
    shares = scenario_generator.share_schedule(t_prime)
    for step, (p, q) in enumerate(shares):
        if p <= q:
            raise InvalidConfiguration(f"hypothesis p>q violated at step {step}: p={p}, q={q}")
    lam = max(p * q for p, q in shares)
    constant = len(set(shares)) == 1
    p, q = shares[0]
    rows = []
    for k in k_values:
        jobs = [(resolver, scenario_generator, k, t, t_prime, derive_seed(master_seed, k, i))
                for i in range(trials)]
        failures = sum(run_trials(_trial_failed, jobs, width))
        rate = failures / trials
        rows.append(ProbabilisticRow(
            k=k,
            trials=trials,
            failures=failures,
            failure_rate=rate,
            stderr=binomial_stderr(rate, trials),
            bound=rewrite_bound(lam, k),
            oracle=catchup_oracle(p, q, k) if constant else None,
            oracle_within_horizon=catchup_within(q, k, t_prime - t) if constant else None,
        ))
    return ProbabilisticTable(tuple(rows), lam, p, q, trials)


# -- PoS falsifier ----------------------------------------------------------


@dataclass
class WitnessReport:
    falsified: bool
    reason: str
    step: int
    bags_equal: bool
    truths_equal: bool
    trace_a: AttackTrace | None = None
    trace_b: AttackTrace | None = None

    def __bool__(self):
        return self.falsified

    def truths(self) -> tuple[LedgerState, LedgerState]:
        return self.trace_a.honest_states[self.step], self.trace_b.honest_states[self.step]


def falsify_pos_statelessness(scenario: ScenarioConfig) -> WitnessReport:
    """Build the swapped-world pair and check it defeats every resolver.

    Both worlds hand the joining node the same bag at step t while their
    ground truths differ, so any function of (I, bag) is wrong in one of them.
    """
    if scenario.consensus != "PoS":
        raise InvalidConfiguration("falsifier needs a PoS scenario")
    t = scenario.horizon
    pool = [parse_node(n) for n in scenario.adversary.get("pool", [])]
    if not any(p.honest for p in scenario.roster):
        return WitnessReport(False, "no honest stakeholder to mirror", t, True, True)
    trace_a, trace_b = swapped_worlds(
        scenario.genesis, scenario.events, scenario.roster, pool, t, scenario.coalitions
    )
    bags_equal = bag_equal(trace_a.merged_bags[t], trace_b.merged_bags[t])
    truth_a = trace_a.honest_states[t]
    truth_b = trace_b.honest_states[t]
    truths_equal = truth_a.canonical == truth_b.canonical
    if t == 0:
        reason = "degenerate: no appends (not falsified at t=0)"
    elif truths_equal:
        reason = "no honest identity appears in the history; both worlds coincide"
    elif not bags_equal:
        reason = "joining-node inputs differ; construction failed"
    elif len(trace_a.merged_bags[t]) == 0:
        reason = "no honest node online at t; nothing to observe"
    else:
        reason = "witness: identical bags, distinct ground truths"
    falsified = bags_equal and not truths_equal and t > 0 and len(trace_a.merged_bags[t]) > 0
    return WitnessReport(falsified, reason, t, bags_equal, truths_equal, trace_a, trace_b)


def mirror_consistent(trace: AttackTrace) -> bool:
    """Relabeling the mirrored world through the inverse map gives the honest world byte for byte."""
    inverse = trace.mirror.inverse()
    return all(
        relabel_state(adv, inverse).canonical == honest.canonical
        for honest, adv in zip(trace.honest_states, trace.adversary_states)
    )
