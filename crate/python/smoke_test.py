#!/usr/bin/env python3
"""Smoke test for the mitokit_py extension module.

Builds the cdylib if needed, stages it under an importable name, and
exercises every exported function. Exits non-zero on the first failure.
"""

import math
import shutil
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def stage_module() -> Path:
    subprocess.run(
        ["cargo", "build", "-p", "mitokit-py"], cwd=ROOT, check=True
    )
    built = ROOT / "target" / "debug" / "libmitokit_py.so"
    staged = Path(__file__).resolve().parent / "mitokit_py.so"
    shutil.copyfile(built, staged)
    return staged


def main() -> None:
    staged = stage_module()
    sys.path.insert(0, str(staged.parent))
    import mitokit_py as mk

    assert math.isclose(mk.harmonic_f1(0.746, 0.839), 0.789, abs_tol=1e-3)
    assert mk.microns_to_pixels(7.5, 0.25) == 30.0
    assert mk.derive_seed(0, "augment", 1) == mk.derive_seed(0, "augment", 1)
    assert mk.derive_seed(0, "a", 0) != mk.derive_seed(0, "b", 0)

    origins = mk.plan_tile_grid(1000.0, 380.0, 380, 76)
    assert sorted({x for x, _ in origins}) == [0.0, 304.0, 608.0, 620.0]

    kept = mk.radius_suppress([(0.0, 0.0, 0.9), (5.0, 0.0, 0.8), (100.0, 0.0, 0.7)], 30.0)
    assert kept == [(0.0, 0.0, 0.9), (100.0, 0.0, 0.7)]

    dets = [(4.0, 0.0, 0.9), (8.0, 0.0, 0.8)]
    anns = [(0.0, 0.0), (5.0, 0.0)]
    assert mk.match_points(dets, anns, 5.0, "greedy") == (1, 1, 1)
    assert mk.match_points(dets, anns, 5.0, "optimal") == (2, 0, 0)

    assert mk.average_precision([(50.0, 50.0, 0.9)], [(50.0, 50.0)]) == 1.0
    assert mk.average_precision([(500.0, 500.0, 0.9), (50.0, 50.0, 0.8)], [(50.0, 50.0)]) == 0.5

    cases = [(f"case-{i}", f"domain-{i % 2}") for i in range(20)]
    splits = mk.split_cases(cases, seed=7)
    assert len(splits) == 20
    counts = {s: list(splits.values()).count(s) for s in ("train", "valid", "test")}
    # two domains of 10 cases each, apportioned 7/2/1 per domain
    assert counts == {"train": 14, "valid": 4, "test": 2}
    assert splits == mk.split_cases(cases, seed=7)

    p, r, f1 = mk.synthetic_end_to_end(width=1200, n_annotations=20, seed=3)
    assert (p, r, f1) == (1.0, 1.0, 1.0)
    p, r, f1 = mk.synthetic_end_to_end(
        width=1200, n_annotations=20, drop_rate=0.5, fp_rate=1.0, seed=3
    )
    assert r < 1.0 and p < 1.0

    print("smoke test OK")


if __name__ == "__main__":
    main()
