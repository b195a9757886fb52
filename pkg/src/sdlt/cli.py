"""Command-line entry point.

Exit codes: 0 all properties verified, 1 property falsified (or the witness
outcome the command documents), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

from .errors import ConfigError, InvalidConfiguration, SdltError
from .harness import (
    PrivateForkTrials,
    ScenarioConfig,
    Trace,
    load_config,
    monte_carlo,
    run_scenario,
)
from .ledger import state_digest, state_to_json
from .resolvers import (
    check_probabilistic,
    check_strong,
    falsify_pos_statelessness,
    mirror_consistent,
    resolve_ba,
    resolve_pow,
)

log = logging.getLogger("sdlt")

EXIT_OK, EXIT_FALSIFIED, EXIT_USAGE = 0, 1, 2

DEFAULT_K = list(range(1, 9))


class UsageError(Exception):
    pass


class Outputs:
    """Collects report files and writes them only once all are known."""

    def __init__(self, out_dir: Path, fmt: str, force: bool):
        self.out_dir = out_dir
        self.fmt = fmt
        self.force = force
        self.files: dict[str, bytes] = {}
        self.messages: list[str] = []

    def say(self, line: str) -> None:
        self.messages.append(line)

    @property
    def want_json(self):
        return self.fmt in ("json", "both")

    @property
    def want_csv(self):
        return self.fmt in ("csv", "both")

    def json(self, name: str, doc) -> None:
        text = json.dumps(doc, indent=2, sort_keys=False, ensure_ascii=False, allow_nan=False)
        self.files[name] = (text + "\n").encode("utf-8")

    def csv(self, name: str, header: list[str], rows: list[list]) -> None:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        self.files[name] = buf.getvalue().encode("utf-8")

    def figure(self, name: str, render) -> None:
        self.files[name] = render

    def check_clobber(self, names) -> None:
        if self.force:
            return
        existing = [n for n in names if (self.out_dir / n).exists()]
        if existing:
            raise UsageError(f"refusing to overwrite {', '.join(existing)} in {self.out_dir} (use --force)")

    def flush(self) -> list[Path]:
        self.check_clobber(self.files)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for name, payload in self.files.items():
            path = self.out_dir / name
            if callable(payload):
                payload(path)
            else:
                path.write_bytes(payload)
            written.append(path)
        return written


def _fmt(x: float) -> str:
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def _load(args) -> ScenarioConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = cfg.with_seed(args.seed)
    return cfg


def _expect(cfg: ScenarioConfig, kind: str) -> None:
    if cfg.consensus != kind:
        raise ConfigError(f"this command needs a {kind} config, got {cfg.consensus}")


# -- commands ---------------------------------------------------------------


def cmd_ba_check(args, out: Outputs) -> int:
    cfg = _load(args)
    _expect(cfg, "BA")
    trace = run_scenario(cfg)
    budget = int(cfg.extras.get("subset_budget", 1 << 12))
    report = check_strong(resolve_ba, trace, subset_budget=budget, seed=cfg.seed)
    weak = report.weak
    lines = [f"weak: {'PASS' if weak.passed else 'FAIL'} ({weak.steps} steps)", report.summary()]
    doc = {
        "command": "ba-check",
        "config_digest": trace.meta["config_digest"],
        "seed": cfg.seed,
        "committee": [str(n) for n in cfg.genesis.ba_committee],
        "byzantine": trace.meta["byzantine"],
        "weak": {"passed": weak.passed, "steps": weak.steps, "failures": weak.failures},
        "strong": {
            "passed": report.passed,
            "exhaustive": report.exhaustive,
            "subsets_checked": report.subsets_checked,
            "classes": {str(k): v for k, v in sorted(report.classes.items())},
            "counterexample": report.counterexample,
        },
        "summary": lines,
    }
    if out.want_json:
        out.json("ba_check.json", doc)
    if out.want_csv:
        rows = [[size, c["subsets"], c["truth"], c["bottom"], c["wrong"]]
                for size, c in sorted(report.classes.items())]
        out.csv("ba_subsets.csv", ["subset_size", "subsets", "truth", "bottom", "wrong"], rows)
    from .plots import plot_subset_classes

    out.figure("ba_subsets.png", lambda path: plot_subset_classes(report, path))
    for line in lines:
        out.say(line)
    return EXIT_OK if report.passed else EXIT_FALSIFIED


def cmd_pow_estimate(args, out: Outputs) -> int:
    cfg = _load(args)
    _expect(cfg, "PoW")
    est = dict(cfg.extras)
    k_values = [int(k) for k in est.get("k_values", DEFAULT_K)]
    trials = int(args.trials if args.trials is not None else est.get("trials", 10_000))
    t = int(est.get("t", max(k_values) + 1))
    t_prime = int(est.get("t_prime", t + 200))
    if trials < 1 or not k_values or min(k_values) < 1:
        raise ConfigError("need trials >= 1 and positive k values")
    miners = [p for p in cfg.roster if p.power > 0]
    generator = PrivateForkTrials(miners, cfg.genesis)
    table = check_probabilistic(resolve_pow, generator, k_values, t, t_prime, trials, cfg.seed)
    flags = [] if table.meaningful else ["statistically meaningless"]
    rows_doc = [
        {
            "k": r.k,
            "failures": r.failures,
            "failure_rate": r.failure_rate,
            "stderr": r.stderr,
            "ci99_half_width": r.half_width99,
            "bound": r.bound,
            "oracle": r.oracle,
            "oracle_within_horizon": r.oracle_within_horizon,
            "within_bound": r.within_bound,
            "tracks_oracle": r.tracks_oracle,
        }
        for r in table.rows
    ]
    doc = {
        "command": "pow-estimate",
        "seed": cfg.seed,
        "p": table.p,
        "q": table.q,
        "lambda": table.lam,
        "t": t,
        "t_prime": t_prime,
        "trials": trials,
        "flags": flags,
        "passed": table.passed,
        "decay_per_block": table.decay_rates(),
        "rows": rows_doc,
    }
    if out.want_json:
        out.json("pow_estimate.json", doc)
    if out.want_csv:
        rows = [
            ["failure_rate", r.k, _fmt(r.failure_rate), _fmt(r.stderr), _fmt(r.bound),
             "" if r.oracle is None else _fmt(r.oracle)]
            for r in table.rows
        ]
        out.csv("pow_estimate.csv", ["metric", "k", "estimate", "stderr", "bound", "oracle"], rows)
    from .plots import plot_failure_rates

    out.figure("pow_estimate.png", lambda path: plot_failure_rates(table, path))
    for r in table.rows:
        mark = "ok" if r.within_bound else "ABOVE BOUND"
        out.say(f"k={r.k}: rate={r.failure_rate:.5f} bound={r.bound:.5f} oracle={r.oracle:.5f} {mark}")
    for flag in flags:
        out.say(f"note: {flag}")
    return EXIT_OK if table.passed else EXIT_FALSIFIED


def cmd_pos_attack(args, out: Outputs) -> int:
    cfg = _load(args)
    _expect(cfg, "PoS")
    report = falsify_pos_statelessness(cfg)
    doc = {
        "command": "pos-attack",
        "seed": cfg.seed,
        "step": report.step,
        "witness": report.falsified,
        "reason": report.reason,
        "bags_equal": report.bags_equal,
        "truths_equal": report.truths_equal,
    }
    worlds = {}
    if report.trace_a is not None:
        truth_a, truth_b = report.truths()
        doc["truth_a"] = state_digest(truth_a)
        doc["truth_b"] = state_digest(truth_b)
        doc["mirror_consistent"] = mirror_consistent(report.trace_a) and mirror_consistent(report.trace_b)
        doc["mirror"] = {str(a): str(b) for a, b in report.trace_a.mirror.pairs}
        for name, trace in (("world_a", report.trace_a), ("world_b", report.trace_b)):
            worlds[name] = {
                "honest_states": [state_digest(s) for s in trace.honest_states],
                "mirrored_states": [state_digest(s) for s in trace.adversary_states],
                "final_truth": state_to_json(trace.honest_states[-1]),
                "merged_bag": [{"node": str(n), "state": state_digest(s)}
                               for n, s in trace.merged_bags[-1]],
            }
    if out.want_json:
        out.json("pos_witness.json", doc)
        for name, body in worlds.items():
            out.json(f"pos_{name}.json", body)
    if out.want_csv and report.trace_a is not None:
        a, b = report.trace_a, report.trace_b
        rows = [
            [t, state_digest(a.honest_states[t]), state_digest(b.honest_states[t]),
             str(a.merged_bags[t].key() == b.merged_bags[t].key()).lower()]
            for t in range(len(a.honest_states))
        ]
        out.csv("pos_steps.csv", ["step", "truth_a", "truth_b", "bags_equal"], rows)
    out.say(f"bags_equal: {str(report.bags_equal).lower()}, truths_equal: {str(report.truths_equal).lower()}")
    out.say(report.reason)
    return EXIT_OK if report.falsified else EXIT_FALSIFIED


def _run_collector(trace: Trace) -> dict[str, float]:
    final = trace.states[-1]
    metrics = {"final_height": float(final.height)}
    if "adversary_blocks" in trace.meta:
        horizon = max(1, len(trace.states) - 1)
        metrics["adversary_share"] = trace.meta["adversary_blocks"] / horizon
        metrics["adopted_fork"] = float(trace.meta["adoptions"] > 0)
    return metrics


def cmd_run(args, out: Outputs) -> int:
    cfg = _load(args)
    trace = run_scenario(cfg)
    if out.want_json:
        out.json("trace.json", trace.to_json())
    if out.want_csv:
        rows = [[t, s.height, state_digest(s), len(b)] for t, (s, b) in enumerate(zip(trace.states, trace.bags))]
        out.csv("trace.csv", ["step", "height", "truth", "bag_size"], rows)
    if args.trials is not None:
        if args.trials < 1:
            raise ConfigError("--trials must be >= 1")
        agg = monte_carlo(cfg, args.trials, _run_collector)
        if out.want_json:
            out.json("aggregates.json", {name: s.to_json() for name, s in agg.items()})
        if out.want_csv:
            rows = [[name, "", _fmt(s.mean), _fmt(s.stderr), ""] for name, s in agg.items()]
            out.csv("aggregates.csv", ["metric", "k", "estimate", "stderr", "bound"], rows)
    out.say(f"{cfg.consensus}: {len(trace.states) - 1} steps, final state {state_digest(trace.states[-1])[:16]}")
    return EXIT_OK


COMMANDS = {
    "ba-check": (cmd_ba_check, "check weak and strong statelessness of a BA scenario"),
    "pow-estimate": (cmd_pow_estimate, "estimate PoW rewrite rates against the (4pq)^k bound"),
    "pos-attack": (cmd_pos_attack, "build the PoS long-range witness"),
    "run": (cmd_run, "execute a scenario and write its trace"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdlt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, type=Path, metavar="PATH")
        p.add_argument("--seed", type=int, metavar="U64")
        p.add_argument("--trials", type=int, metavar="N")
        p.add_argument("--out", type=Path, default=Path("out"), metavar="DIR")
        p.add_argument("--format", choices=("json", "csv", "both"), default="both")
        p.add_argument("--force", action="store_true", help="overwrite existing output files")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Outputs(args.out, args.format, args.force)
    fn = COMMANDS[args.command][0]
    try:
        status = fn(args, out)
        out.flush()
        for line in out.messages:
            print(line)
    except (UsageError, ConfigError, InvalidConfiguration) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SdltError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return status


if __name__ == "__main__":
    sys.exit(main())
