#!/usr/bin/env python3
"""Builds the cbfstl_py extension and walks the pipeline end to end.

Run from anywhere:

    python3 python/smoke_test.py

The script compiles the `cbfstl-py` crate with cargo, stages the shared
object under a temporary directory, imports it, and checks the branch
scenario: compile, plan, simulate, and monitor all have to agree.
"""

import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
SCENARIO = ROOT / "scenarios" / "branch_choice.json"


def stage_module() -> None:
    subprocess.run(["cargo", "build", "-p", "cbfstl-py"], cwd=ROOT, check=True)
    src = ROOT / "target" / "debug" / "libcbfstl_py.so"
    stage = Path(tempfile.mkdtemp(prefix="cbfstl-py-"))
    shutil.copy2(src, stage / "cbfstl_py.so")
    sys.path.insert(0, str(stage))


def main() -> None:
    stage_module()
    import cbfstl_py as m

    sc = m.load_scenario(SCENARIO)
    assert sc.formula == "F[2,10] near | F[2,10] wide", sc.formula
    assert sc.state_dim == 1 and sc.input_dim == 1
    assert math.isclose(sc.horizon, 10.0)
    assert sc.predicate_names == ["near", "wide"]

    compiled = m.compile(sc)
    assert compiled.selected == 1, compiled.selected
    assert abs(compiled.r_star - 4.0 / 11.0) < 1e-6, compiled.r_star
    margins = compiled.margins
    assert len(margins) == 2 and all(v is not None for v in margins)
    assert margins[compiled.selected] == compiled.r_star
    assert margins[1] > margins[0]

    assert compiled.contains(sc.x0, 0.0)
    rows, offsets = compiled.set_at(0.0)
    assert all(
        sum(d * x for d, x in zip(row, sc.x0)) + c >= -1e-9
        for row, c in zip(rows, offsets)
    )
    assert compiled.value(sc.x0, 0.0) >= 0.0
    assert compiled.beta_max == 6.0, compiled.beta_max
    assert compiled.switch_times() == [0.0, 6.0]

    planned = m.plan(sc, seed=7, iters=200)
    assert planned.times[0] == 0.0 and planned.times[-1] == 10.0
    assert planned.robustness >= planned.r_star - 1e-3, planned.robustness
    assert planned.best_cost <= planned.first_cost + 1e-9
    replay = m.plan(sc, seed=7, iters=200)
    assert replay.times == planned.times
    assert replay.states() == planned.states()

    rho = m.robustness(sc, planned.times, planned.states())
    assert rho == planned.robustness, (rho, planned.robustness)

    with tempfile.TemporaryDirectory() as d:
        csv_path = Path(d) / "trajectory.csv"
        planned.write_csv(csv_path)
        header = csv_path.read_text().splitlines()[0]
        assert header.startswith("t,"), header

    rolled = m.simulate(sc, dt=0.01)
    assert rolled.min_barrier >= -1e-3, rolled.min_barrier
    assert rolled.robustness >= rolled.r_star - 1e-3, rolled.robustness
    assert len(rolled.times) == len(rolled.states())

    try:
        m.load_scenario(ROOT / "scenarios" / "missing.json")
    except OSError:
        pass
    else:
        raise AssertionError("loading a missing scenario must raise OSError")

    try:
        m.robustness(sc, [0.0, 1.0], [[0.0], [0.0]])
    except ValueError:
        pass
    else:
        raise AssertionError("a signal short of the horizon must raise ValueError")

    print("smoke test passed")


if __name__ == "__main__":
    main()
