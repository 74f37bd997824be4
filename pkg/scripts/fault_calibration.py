"""Sweep the mock's phrasing sensitivity and compare observed failure rates.

For each injected probability p the observed rate over n decided pairs
should sit within three binomial standard deviations of p.

    python3 scripts/fault_calibration.py --seeds 3
"""

from __future__ import annotations

import argparse
import itertools
import math
from importlib.resources import files

from mtharness.adapters import MockFaultModel, SutSpec
from mtharness.core import SourceInput, TaskKind
from mtharness.engine import RunPlan, run_plan
from mtharness.mrspec import parse

DISTRACTOR = "By the way, it rained on Tuesday."
SUBJECTS = ["Our neighbor", "The teacher", "My cousin", "A tourist", "The manager", "Every student",
            "The pilot", "Her brother", "The chef", "An engineer", "The author"]
OBJECTS = ["a big house", "a small car", "the movie", "the story", "a great job", "the price"]
PLACES = ["in the city", "near the shop", "after the question", "before the ending"]


def suite() -> list[SourceInput]:
    rows = itertools.product(SUBJECTS, OBJECTS, PLACES)
    return [SourceInput(f"c{k:03d}", TaskKind.GENERIC, f"{s} described {o} {p}, briefly.") for k, (s, o, p) in enumerate(rows)]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--probs", default="0,0.05,0.1,0.2,0.3,0.5")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--workers", type=int, default=4)
    args = ap.parse_args()

    text = files("mtharness.data").joinpath("corpus").joinpath("invariance.mrs").read_text("utf-8")
    relations = parse(text).relations
    inputs = suite()
    print(f"{'p':>6} {'seed':>5} {'pairs':>6} {'rate':>8} {'3sigma':>8}  ok")
    for p in (float(x) for x in args.probs.split(",")):
        for seed in range(args.seeds):
            fault = MockFaultModel(phrasing_sensitivity=p, rng_seed=seed, strip_phrases=(DISTRACTOR,))
            result = run_plan(RunPlan(inputs, relations, SutSpec("mock-faulty", fault=fault), worker_budget=args.workers))
            n = len(result.pairs)
            rate = result.report.total_violations / n
            band = 3 * math.sqrt(p * (1 - p) / n)
            ok = abs(rate - p) <= max(band, 1e-12)
            print(f"{p:>6.2f} {seed:>5} {n:>6} {rate:>8.4f} {band:>8.4f}  {'yes' if ok else 'NO'}")


if __name__ == "__main__":
    main()
