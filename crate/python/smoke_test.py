#!/usr/bin/env python3
"""Smoke test for the rddpc_py extension module.

The module is built as a plain cdylib (`cargo build -p rddpc-py`); this
script copies the shared library next to itself under the importable name
and exercises the main entry points on a tiny configuration.
"""

import math
import shutil
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    candidates = [
        ROOT / "target" / profile / f"librddpc_py{ext}"
        for profile in ("release", "debug")
        for ext in (".so", ".dylib")
    ]
    lib = next((p for p in candidates if p.exists()), None)
    if lib is None:
        sys.exit("build the extension first: cargo build -p rddpc-py")
    dest = Path(__file__).resolve().parent / "rddpc_py.so"
    if not dest.exists() or lib.stat().st_mtime > dest.stat().st_mtime:
        shutil.copy2(lib, dest)
    sys.path.insert(0, str(dest.parent))
    import rddpc_py

    return rddpc_py


def main():
    rddpc_py = load_module()

    # Small data set and short horizon to keep this quick.
    cfg = rddpc_py.ExperimentConfig(
        """
        n_test = 10
        trials = 2
        [collection]
        kind = "open_loop"
        period = 120
        amplitude = 1.0
        noise_var = 0.01
        length = 120
        [lambda]
        mode = "fixed"
        value = 0.5
        """
    )
    assert cfg.l_p == 5 and cfg.l_f == 5
    assert "n_test = 10" in cfg.to_toml()

    exp = rddpc_py.Experiment(cfg)
    assert exp.lambda_ == 0.5
    assert exp.residual_ratio() > 0.0

    u_p = [0.0] * cfg.l_p
    y_p = [0.0] * (4 * cfg.l_p)
    y_r = [0.4, 0.0, 0.0, 0.0] * cfg.l_f
    spc = exp.solve("spc", u_p, y_p, y_r)
    rob = exp.solve("rddpc", u_p, y_p, y_r)
    assert len(rob["u_applied"]) == 1 and len(rob["u_f"]) == cfg.l_f
    assert rob["psi"] >= 0.0 and math.isfinite(rob["objective"])
    # The robust objective upper-bounds the nominal one.
    assert rob["objective"] >= spc["objective"] - 1e-6

    trial = exp.run_trial("rddpc", seed=3)
    assert trial["error"] is None
    assert math.isfinite(trial["j_total"]) and trial["j_total"] > 0.0
    assert len(trial["solve_times"]) == cfg.n_test

    lam = rddpc_py.tune_lambda(cfg)
    assert lam > 0.0

    mc = rddpc_py.monte_carlo(cfg, trials=2)
    for name in ("spc", "pbr", "rddpc", "frddpc"):
        assert mc[name]["n_failed"] == 0, mc[name]
        assert math.isfinite(mc[name]["mean_j"])

    rows = rddpc_py.grid_search(cfg, [0.1, 1.0])
    assert {r[0] for r in rows} == {"spc", "pbr", "rddpc", "frddpc"}
    assert sum(1 for r in rows if r[0] == "rddpc" and r[4]) == 1

    print("smoke test passed")


if __name__ == "__main__":
    main()
