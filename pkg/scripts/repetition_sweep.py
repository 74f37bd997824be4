"""How repetitions and aggregation absorb answer nondeterminism.

The mock answers every query inconsistently with probability q while its
phrasing sensitivity is zero, so every violation is a false alarm. The
sweep shows the false-alarm rate per (repetitions, aggregation) cell.

    python3 scripts/repetition_sweep.py --q 0.1
"""

from __future__ import annotations

import argparse
from importlib.resources import files

from mtharness.adapters import MockFaultModel, SutSpec
from mtharness.config import load_suite
from mtharness.core import Aggregation, MetamorphicRelation
from mtharness.engine import RunPlan, run_plan
from mtharness.relations import ComparatorSpec, Equivalence
from mtharness.transforms import TransformStep


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--q", type=float, default=0.1, help="nondeterminism probability")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    inputs = load_suite(files("mtharness.data").joinpath("suites").joinpath("generic.jsonl"))
    sut = SutSpec("mock-faulty", fault=MockFaultModel(nondeterminism=args.q, rng_seed=args.seed))
    print(f"q = {args.q}")
    print(f"{'reps':>5} {'aggregation':>14} {'false-alarm rate':>17}")
    for reps in (1, 3, 5, 7):
        for agg in Aggregation:
            mr = MetamorphicRelation(
                "case",
                (TransformStep("case-perturb", {"mode": "swap"}),),
                Equivalence(),
                ComparatorSpec("exact", 1.0, 0.0),
                repetitions=reps,
                aggregation=agg,
            )
            report = run_plan(RunPlan(inputs, [mr], sut, derivation_seed=args.seed)).report
            print(f"{reps:>5} {agg.value:>14} {report.per_mr['case'].failure_rate:>17.4f}")


if __name__ == "__main__":
    main()
