"""Simulation studies behind the acceptance criteria, with an on-disk cache.

Each study's report is stored under ``acceptance_results/`` together with
a key built from its configuration and a hash of the numeric modules, so a
cached report is reused only when neither has changed. Run this module to
compute every study::

    python3 tests/acceptance_studies.py
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from pathlib import Path

import matchsens
from matchsens.inference import BootConfig
from matchsens.sim import StudyReport, preset, run_study, _summarize

ROOT = Path(__file__).resolve().parents[1]
RESULTS = ROOT / "acceptance_results"
N_REPS = 200
N_BOOT = 300
SEED = 2024
FIT_P = 0.5

#: study name -> (preset, fitting grid)
STUDIES = {
    "linear-s1": ("linear-s1", [(2.0, 2.0), (2.5, 2.5), (3.0, 3.0)]),
    "nonlinear": ("nonlinear", [(2.0, 2.0), (2.5, 2.5)]),
    "linear-small": ("linear-small", [(1.5, 1.5), (2.0, 2.0)]),
    "laplace": ("laplace", []),
    "t2": ("t2", []),
    "jitter-02": ("jitter-02", [(1.5, 1.5)]),
    "jitter-10": ("jitter-10", [(1.5, 1.5)]),
}


#: modules whose code can change a study's numbers
NUMERIC_MODULES = ("_kernels", "_rng", "em", "inference", "model", "sim")


def source_hash() -> str:
    h = hashlib.sha256()
    pkg = Path(matchsens.__file__).parent
    for f in (pkg / f"{m}.py" for m in NUMERIC_MODULES):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def _key(name: str) -> dict:
    preset_name, grid = STUDIES[name]
    key = {"preset": preset_name, "grid": grid, "n_reps": N_REPS, "n_boot": N_BOOT,
           "seed": SEED, "fit_p": FIT_P, "source": source_hash()}
    # normalized as stored (tuples become lists)
    return json.loads(json.dumps(key))


def load_or_run(name: str, verbose: bool = False) -> StudyReport:
    key = _key(name)
    path = RESULTS / f"{name}.json"
    if path.exists():
        doc = json.loads(path.read_text())
        if doc.get("key") == key:
            cfg, _ = preset(key["preset"], SEED)
            grid = tuple(tuple(g) for g in doc["grid"])
            boot = BootConfig(n_boot=N_BOOT)
            return _summarize(cfg, grid, FIT_P, boot, doc["records"])
    cfg, _ = preset(key["preset"], SEED)
    t0 = time.time()

    def progress(done, total):
        if verbose and (done % 10 == 0 or done == total):
            print(f"  {name}: {done}/{total} ({time.time() - t0:.0f}s)", flush=True)

    rep = run_study(cfg, key["grid"], N_REPS, BootConfig(n_boot=N_BOOT), fit_p=FIT_P,
                    progress=progress)
    RESULTS.mkdir(exist_ok=True)
    doc = {"key": key, "grid": [list(g) for g in rep.grid], "records": rep.records,
           "seconds": round(time.time() - t0, 1)}
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(doc))
    os.replace(tmp, path)
    return rep


if __name__ == "__main__":
    names = sys.argv[1:] or list(STUDIES)
    for nm in names:
        r = load_or_run(nm, verbose=True)
        print(nm, "coverage", r.coverage, "power", r.power_by_params, flush=True)
