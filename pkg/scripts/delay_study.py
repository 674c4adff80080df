"""Delay bound versus exact delayed radius, for a delay-free and a delay-aware gain.

    python3 scripts/delay_study.py [--scenario scenarios/ring10_ncv_delay4.json]
                                   [--tau-max 8] [--maps 5] [--csv delay_study.csv]

For each max delay the script reports the bound radius and the worst exact
radius of the delayed error recursion over a few random delay maps. The two
columns can disagree: a gain designed for zero delay may satisfy the bound
while the delayed recursion it drives is unstable.
"""
import argparse
import sys
from pathlib import Path

from tdoanet import gain as gainmod
from tdoanet import harness
from tdoanet.network import DelayMap
from tdoanet.scenario import derive_rng, load_scenario

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", type=Path, default=ROOT / "scenarios" / "ring10_ncv_delay4.json")
    ap.add_argument("--tau-max", type=int, default=8)
    ap.add_argument("--maps", type=int, default=5, help="random delay maps per max delay")
    ap.add_argument("--csv", type=Path, default=None)
    args = ap.parse_args(argv)

    sc = load_scenario(args.scenario)
    setup = harness.build_setup(sc)
    rng_tag = derive_rng(sc.gain.seed, "gain")
    designs = {
        "delay_free": gainmod.synthesize_gain(
            setup.cm, setup.model, setup.mm,
            gainmod.LmiConfig(method=sc.gain.method, rho_target=sc.gain.rho_target), rng_tag,
        ),
        "delay_aware": harness.design_gain(sc, setup),
    }
    rows = []
    print(f"{'gain':<12} {'tau':>3} {'bound':>9} {'exact max':>10}")
    for name, K in designs.items():
        for m in gainmod.delay_sweep(setup.cm, setup.model, setup.mm, K, args.tau_max):
            exact = 0.0
            if m.tau_bar > 0:
                for s in range(args.maps):
                    dm = DelayMap.random(setup.graph, m.tau_bar, derive_rng(sc.delays.seed, "study", 1000 * m.tau_bar + s))
                    exact = max(exact, gainmod.exact_delay_radius(setup.cm, setup.model, setup.mm, K, dm))
            else:
                exact = m.rho_delayed
            rows += [
                (m.tau_bar, "mean", name, "rho_delay_bound", m.rho_delayed),
                (m.tau_bar, "mean", name, "rho_delayed_exact_max", exact),
            ]
            print(f"{name:<12} {m.tau_bar:>3} {m.rho_delayed:>9.6f} {exact:>10.6f}")
    harness.write_csv(rows, args.csv)
    return 0


if __name__ == "__main__":
    sys.exit(main())
