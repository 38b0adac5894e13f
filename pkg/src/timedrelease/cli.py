"""Command line: ``timedrelease <command> ...``.

Every command prints ``key=value`` lines followed by human-readable lines
starting with ``#``. Exit codes: 0 success, 1 a conditions mismatch,
2 bad input (spec, config or parameters), 3 no feasible route.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .core import eth, fmt_eth
from .economics import (ParamViolation, PricingParams, default_params, per_peer_payment,
                        report_award, required_deposit, total_remuneration, value_multiplier)
from .selection import (NoFeasibleRoute, SelectionRequest, format_instance, generate_instance,
                        read_instance, select_peers)

EXIT_MISMATCH, EXIT_INPUT, EXIT_NO_ROUTE = 1, 2, 3


def _emit(pairs, summary=()):
    for k, v in pairs:
        print(f"{k}={v}")
    for line in summary:
        print(f"# {line}")


def _load_params(path: str | None) -> PricingParams:
    if not path:
        return default_params()
    return PricingParams.from_config(json.loads(Path(path).read_text()))


def cmd_gen_instance(args) -> int:
    windows = generate_instance(args.seed, args.n, args.horizon, mean_start=args.mean_start,
                                mean_len=args.mean_len, std_len=args.std_len)
    text = format_instance(windows)
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
        _emit([("windows", len(windows)), ("path", args.out)])
    if args.n == 0:
        print("warning: empty instance", file=sys.stderr)
    return 0


def cmd_select(args) -> int:
    windows = read_instance(args.instance)
    req = SelectionRequest(args.t_s, args.t_r, args.transfer, eth(args.deposit), args.registration_deadline)
    try:
        plan = select_peers(windows, req)
    except NoFeasibleRoute as exc:
        _emit([("hops", "none")], [f"no feasible route: {exc}"])
        return EXIT_NO_ROUTE
    pairs = [("hops", len(plan))]
    for i, hop in enumerate(plan.hops, 1):
        pairs.append((f"hop.{i}", f"{hop.owner},{hop.window.begin},{hop.window.end},"
                                  f"{hop.segment.begin},{hop.segment.end}"))
    _emit(pairs, [f"{len(plan)} peers cover hours {args.t_s}..{args.t_r}: " + " -> ".join(plan.owners)])
    return 0


def cmd_quote(args) -> int:
    params = _load_params(args.params)
    v = eth(args.v)
    total = total_remuneration(v, args.hours, args.k, params)
    # even split of the storage hours, earlier peers take the shorter share
    base, extra = divmod(args.hours, args.k)
    ranges, start = [], 1
    for i in range(args.k):
        n = base + (1 if i >= args.k - extra else 0)
        if n:
            ranges.append((start, start + n - 1))
        start += n
    pairs = [("multiplier", f"{value_multiplier(v, params):.12f}"), ("total", fmt_eth(total))]
    for i, (a, b) in enumerate(ranges, 1):
        pairs.append((f"peer.{i}", f"{a}-{b},{fmt_eth(per_peer_payment(v, a, b, params))}"))
    pairs += [("deposit", fmt_eth(required_deposit(v, params))), ("award", fmt_eth(report_award(v, params)))]
    _emit(pairs, [f"storing {fmt_eth(v)} ETH of value for {args.hours}h over {args.k} peers costs "
                  f"{fmt_eth(total)} ETH"])
    return 0


def cmd_simulate(args) -> int:
    from .harness import ScenarioSpec, run_scenario
    spec = ScenarioSpec.from_json(Path(args.spec).read_text())
    try:
        result = run_scenario(spec)
    except NoFeasibleRoute as exc:
        _emit([("status", "NoRoute")], [f"no feasible route: {exc}"])
        return EXIT_NO_ROUTE
    if args.trace:
        Path(args.trace).write_text("\n".join(result.trace_lines()) + "\n")
    pairs = [("status", result.status), ("guilty", result.guilty or "-"),
             ("route", ",".join(result.route) or "-")]
    pairs += [(f"final.{k}", fmt_eth(v)) for k, v in result.finals.items()]
    pairs += [("locked_delta", fmt_eth(result.locked_delta)), ("conserved", str(result.conserved).lower())]
    _emit(pairs, [f"service ended {result.status}" + (f", {result.guilty} guilty" if result.guilty else "")])
    return 0


def cmd_analyze_game(args) -> int:
    from .game import (GameParams, analyze_bayesian_variants, analyze_drop_dispute_game,
                       analyze_release_bribery_game, build_enforcement_game, check_dominance,
                       enumerate_nash, honest_profile)
    params = GameParams(v=eth(args.v), c=eth(args.c), r=eth(args.r), d=eth(args.d), a=eth(args.a))
    game = build_enforcement_game(params, args.peers)
    eq = enumerate_nash(game)
    honest = honest_profile(args.peers)
    pairs = [("players", ",".join(game.players)), ("equilibria", len(eq))]
    pairs += [(f"equilibrium.{i}", ",".join(p)) for i, p in enumerate(eq, 1)]
    for player in game.players:
        a, b = game.actions(player)
        pairs.append((f"dominant.{player}", str(check_dominance(game, player, a, b)).lower()))
    summary = []
    if eq == [honest]:
        summary.append("unique pure NE: all-honest")
    elif honest in eq:
        summary.append(f"all-honest is one of {len(eq)} pure equilibria")
    else:
        summary.append("all-honest is not an equilibrium")
    if params.d > params.v:
        pairs.append(("types_all_honest", str(analyze_bayesian_variants(params, args.peers)["all_honest"]).lower()))
    bribery = analyze_release_bribery_game(params, eth(args.bribe))
    pairs.append(("bribery_equilibrium", ",".join(bribery["equilibrium"])))
    try:
        dispute = analyze_drop_dispute_game(params)
        pairs.append(("dispute_no_drop", "true"))
        pairs.append(("dispute_report_dominant", str(dispute["report_dominant"]).lower()))
    except ParamViolation as exc:
        pairs.append(("dispute_no_drop", "false"))
        summary.append(str(exc))
    _emit(pairs, summary)
    return 0


def cmd_conditions(args) -> int:
    from .harness import check_condition, condition_suite, run_scenario
    failed = 0
    pairs, summary = [], []
    for i, cond in enumerate(condition_suite(), 1):
        res = run_scenario(cond.spec, record_trace=False)
        problems = check_condition(cond, res)
        failed += bool(problems)
        pairs.append((f"condition.{i}", "pass" if not problems else "fail"))
        pairs += [(f"condition.{i}.{k}", fmt_eth(v)) for k, v in res.finals.items()]
        summary.append(f"{cond.name}: " + ("ok" if not problems else "; ".join(problems)))
    pairs.append(("passed", f"{5 - failed}/5"))
    _emit(pairs, summary)
    return EXIT_MISMATCH if failed else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="timedrelease", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-instance", help="random registered working windows")
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--horizon", type=int, default=1200)
    g.add_argument("--mean-start", type=float, default=300.0)
    g.add_argument("--mean-len", type=float, default=15.0)
    g.add_argument("--std-len", type=float, default=5.0)
    g.add_argument("--out", default="-")
    g.set_defaults(fn=cmd_gen_instance)

    s = sub.add_parser("select", help="pick a route from an instance file")
    s.add_argument("instance")
    s.add_argument("--t-s", type=int, required=True)
    s.add_argument("--t-r", type=int, required=True)
    s.add_argument("--transfer", type=int, default=5)
    s.add_argument("--deposit", default="0", help="ETH each peer must have unfrozen")
    s.add_argument("--registration-deadline", type=int, default=None)
    s.set_defaults(fn=cmd_select)

    q = sub.add_parser("quote", help="remuneration, deposit and award for a service")
    q.add_argument("--v", required=True, help="value in ETH")
    q.add_argument("--hours", type=int, required=True)
    q.add_argument("--k", type=int, default=1)
    q.add_argument("--params", help="JSON pricing config")
    q.set_defaults(fn=cmd_quote)

    m = sub.add_parser("simulate", help="run a JSON scenario")
    m.add_argument("spec")
    m.add_argument("--trace", help="write the event trace (JSON lines) here")
    m.set_defaults(fn=cmd_simulate)

    a = sub.add_parser("analyze-game", help="equilibria of the enforcement and reporting games")
    a.add_argument("--v", default="3")
    a.add_argument("--d", default="3.6")
    a.add_argument("--r", default="0.010")
    a.add_argument("--c", default="0.005")
    a.add_argument("--a", default="0.3")
    a.add_argument("--bribe", default="1")
    a.add_argument("--peers", type=int, default=1)
    a.set_defaults(fn=cmd_analyze_game)

    c = sub.add_parser("conditions", help="replay the five evaluation conditions")
    c.set_defaults(fn=cmd_conditions)
    return ap


def main(argv=None) -> int:
    from .harness import SpecError
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (SpecError, ParamViolation, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
