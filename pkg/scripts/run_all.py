"""Run every shipped scenario and write one CSV per scenario.

    python3 scripts/run_all.py --out results/ [--workers 1] [--quick]

``--quick`` shortens runs to a few hundred steps, for smoke checks.
"""
import argparse
import dataclasses
import sys
from pathlib import Path

from tdoanet import harness
from tdoanet.scenario import load_scenario

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenarios", type=Path, default=ROOT / "scenarios")
    ap.add_argument("--out", type=Path, default=Path("results"))
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)

    for path in sorted(args.scenarios.glob("*.json")):
        sc = load_scenario(path)
        if args.quick:
            sc = sc.replace(steps=300, trials=2)
            if sc.detector.enabled:
                sc = sc.replace(
                    steps=1600,
                    detector=dataclasses.replace(sc.detector, burn_in=600),
                    faults=[dataclasses.replace(f, onset=1200) for f in sc.faults],
                )
        if path.stem.endswith("_kf"):
            rows = harness.compare_kf(sc).rows()
        else:
            res = harness.run_monte_carlo(sc, workers=args.workers)
            rows = res.rows(per_sensor=True)
            tail = res.msee[-max(1, sc.steps // 4):].mean()
            print(f"{sc.name}: steady MSEE {tail:.4g}, " + ", ".join(f"{k}={v:.6f}" for k, v in res.rhos.items()))
        harness.write_csv(rows, args.out / f"{sc.name}.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
