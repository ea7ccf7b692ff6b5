"""Smoke test for the bevlocate_py extension.

Build it first:
    cargo build -p bevlocate-py --release --features extension-module
then run:
    python3 python/smoke_test.py
"""

import importlib
import math
import random
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    try:
        return importlib.import_module("bevlocate_py")
    except ImportError:
        pass
    for profile in ("release", "debug"):
        for name in ("libbevlocate_py.so", "libbevlocate_py.dylib", "bevlocate_py.dll"):
            lib = ROOT / "target" / profile / name
            if lib.exists():
                tmp = Path(tempfile.mkdtemp())
                suffix = ".pyd" if name.endswith(".dll") else ".so"
                shutil.copy(lib, tmp / f"bevlocate_py{suffix}")
                sys.path.insert(0, str(tmp))
                return importlib.import_module("bevlocate_py")
    sys.exit("bevlocate_py not built; see the module docstring")


def main():
    bl = load_module()

    assert bl.meters_to_px(200.0) == 874
    assert bl.meters_to_px(51.296) == 224
    assert bl.meters_to_px(100.0) == 437

    report = bl.summarize([2.0, 15.0, 9.0, 11.0, 3.0], 10.0)
    assert math.isclose(report.match_rate, 0.6)
    assert math.isclose(report.ape_mean, 8.0)
    assert math.isclose(report.ape_std, math.sqrt(24.0))
    assert bl.summarize([10.0]).match_rate == 0.0

    d = bl.ape_series([(3.0, 4.0), (1.0, 1.0)], [(0.0, 0.0), (1.0, 1.0)])
    assert d == [5.0, 0.0]

    rng = random.Random(0)
    region = [[rng.random() for _ in range(40)] for _ in range(30)]
    template = [row[11:23] for row in region[7:17]]
    row, col, score = bl.ncc_argmax(template, region)
    assert (row, col) == (7, 11) and abs(score - 1.0) < 1e-9
    fast = bl.ncc_map(template, region, fast=True)
    slow = bl.ncc_map(template, region, fast=False)
    worst = max(abs(a - b) for fr, sr in zip(fast, slow) for a, b in zip(fr, sr))
    assert worst < 1e-9, worst

    try:
        bl.ncc_map([[0.5, 0.5], [0.5, 0.5]], region)
    except ValueError as e:
        assert "degenerate" in str(e)
    else:
        raise AssertionError("constant template accepted")

    enc, ren, total = bl.param_count()
    assert enc == 122_400 and total == enc + ren

    checks = bl.gradcheck_suite(0)
    failed = [name for name, _, ok in checks if not ok]
    assert not failed, failed

    print(f"ok: {len(checks)} gradient checks, parameters {enc} + {ren} = {total}")


if __name__ == "__main__":
    main()
