"""Command-line entry point: ``python3 -m tdoanet <command> <scenario.json> ...``.

Exit codes: 0 ok, 2 configuration error, 3 observability or gain failure,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from tdoanet import gain as gainmod
from tdoanet import harness
from tdoanet.errors import ConfigError, TdoaNetError
from tdoanet.network import check_distributed_observability, edge_connectivity, is_strongly_connected
from tdoanet.scenario import load_scenario


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tdoanet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log synthesis details to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("scenario", help="scenario JSON file")
        return s

    add("check-observability", "structural and numerical observability of the network")
    s = add("design-gain", "synthesize and certify the block-diagonal gain")
    s.add_argument("-o", "--output", required=True, help="gain JSON to write")
    for name, help_ in (("simulate", "single-trial run"), ("mc", "Monte-Carlo run")):
        s = add(name, help_)
        s.add_argument("--gain", help="gain JSON (designed on the fly if omitted)")
        s.add_argument("--per-sensor", action="store_true", help="also write per-sensor MSEE curves")
    s = add("compare-kf", "centralized KF: linear vs linearized output models")
    s = add("link-removal", "remove a link, repair W, redesign K and rerun")
    s.add_argument("--link", required=True, help="link as 'j,i'")
    s = add("delay-sweep", "delay bound for max delays 0..M")
    s.add_argument("--tau-max", type=int, required=True)
    s.add_argument("--gain", help="gain JSON (designed on the fly if omitted)")
    for s in sub.choices.values():
        if s.prog.split()[-1] in ("mc", "simulate", "compare-kf", "link-removal", "delay-sweep"):
            s.add_argument("--csv", help="CSV output path (default: scenario output.csv or stdout)")
            s.add_argument("--gnuplot-script", help="also write a gnuplot script for the CSV here")
        if s.prog.split()[-1] in ("mc", "link-removal"):
            s.add_argument("--workers", type=int, default=1, help="parallel trial processes")
    return p


def _emit(rows, args, sc) -> None:
    path = getattr(args, "csv", None) or sc.output.csv
    text = harness.write_csv(rows, path)
    if path is None:
        sys.stdout.write(text)
    if getattr(args, "gnuplot_script", None):
        Path(args.gnuplot_script).write_text(harness.gnuplot_script(path or "-"), encoding="utf-8")


def _gain(args, sc, setup):
    if getattr(args, "gain", None):
        g = gainmod.GainSet.load(args.gain)
        if g.n != setup.mm.n or g.N != setup.model.N:
            raise ConfigError(f"gain file is for n={g.n}, N={g.N}; scenario has n={setup.mm.n}, N={setup.model.N}")
        return g
    print("warning: no gain file given, designing one for this run", file=sys.stderr)
    return harness.design_gain(sc, setup)


def _run(args) -> int:
    sc = load_scenario(args.scenario)
    cmd = args.command
    if cmd == "check-observability":
        setup = harness.build_setup(sc)
        v = check_distributed_observability(setup.graph, setup.model, cm=setup.cm, mm=setup.mm)
        sc_ok = is_strongly_connected(setup.graph)
        print(f"structurally observable: {v.observable_structural}")
        print(f"  full generic rank of F: {v.full_generic_rank}")
        print(f"  parent SCCs measured: {v.parents_measured}")
        print(f"  network strongly connected: {v.strongly_connected}")
        print(f"numerical rank: {v.numerical_rank}/{v.dimension}")
        if sc_ok:
            print(f"link redundancy q: {edge_connectivity(setup.graph)}")
        return 0 if v.observable_structural and v.numerically_observable else 3
    if cmd == "design-gain":
        setup = harness.build_setup(sc)
        g = harness.design_gain(sc, setup)
        g.save(args.output)
        print(f"certified rho = {g.rho_closed_loop:.9f}")
        return 0
    if cmd in ("simulate", "mc"):
        setup = harness.build_setup(sc)
        g = _gain(args, sc, setup)
        run_sc = sc.replace(trials=1) if cmd == "simulate" else sc
        res = harness.run_monte_carlo(run_sc, g, setup, getattr(args, "workers", 1))
        _emit(res.rows(per_sensor=args.per_sensor), args, sc)
        return 0
    if cmd == "compare-kf":
        _emit(harness.compare_kf(sc).rows(), args, sc)
        return 0
    if cmd == "link-removal":
        try:
            link = tuple(int(x) for x in args.link.split(","))
        except ValueError:
            link = ()
        if len(link) != 2:
            raise ConfigError(f"--link must look like 'j,i', got {args.link!r}")
        _emit(harness.link_removal_experiment(sc, link, args.workers).rows(), args, sc)
        return 0
    if cmd == "delay-sweep":
        if args.tau_max < 0:
            raise ConfigError("--tau-max must be >= 0")
        setup = harness.build_setup(sc)
        g = _gain(args, sc, setup) if args.gain else None
        _emit(harness.delay_sweep_rows(sc, args.tau_max, g), args, sc)
        return 0
    raise ConfigError(f"unknown command {cmd}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return _run(args)
    except TdoaNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
