"""Flat binary arrays with a JSON manifest, plus CSV helpers.

Every array is written as raw little-endian float64 (`<f8`) in its own file.
The manifest records shapes, sha256 checksums and whatever metadata the
caller attaches. `verify_dir` re-hashes everything.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path
from typing import Optional

import numpy as np

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"


class ManifestError(RuntimeError):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_arrays(out_dir, arrays: dict, meta: Optional[dict] = None, kind: str = "arrays") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(arrays):
        a = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f8"))
        fn = f"{name}.bin"
        a.tofile(out / fn)
        entries[name] = {"file": fn, "shape": list(a.shape), "dtype": "<f8",
                         "sha256": _sha256(out / fn)}
    manifest = {"schema_version": SCHEMA_VERSION, "kind": kind,
                "arrays": entries, "meta": meta or {}}
    with open(out / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return out


def read_manifest(path) -> dict:
    p = Path(path) / MANIFEST
    if not p.exists():
        raise ManifestError(f"no manifest in {path}")
    with open(p) as fh:
        man = json.load(fh)
    if man.get("schema_version") != SCHEMA_VERSION:
        raise ManifestError(f"unsupported schema version {man.get('schema_version')}")
    return man


def read_arrays(path, check: bool = True) -> tuple[dict, dict]:
    man = read_manifest(path)
    d = Path(path)
    out = {}
    for name, e in man["arrays"].items():
        fp = d / e["file"]
        if check and _sha256(fp) != e["sha256"]:
            raise ManifestError(f"checksum mismatch for {e['file']}")
        out[name] = np.fromfile(fp, dtype="<f8").reshape(e["shape"])
    return out, man["meta"]


def verify_dir(path) -> list[str]:
    """Problems found in a manifest directory (empty list when intact)."""
    problems = []
    try:
        man = read_manifest(path)
    except (ManifestError, json.JSONDecodeError) as exc:
        return [str(exc)]
    d = Path(path)
    for name, e in man["arrays"].items():
        fp = d / e["file"]
        if not fp.exists():
            problems.append(f"{name}: missing {e['file']}")
            continue
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        if fp.stat().st_size != 8 * n:
            problems.append(f"{name}: size {fp.stat().st_size} != {8 * n}")
        elif _sha256(fp) != e["sha256"]:
            problems.append(f"{name}: checksum mismatch")
    return problems


def find_manifests(root) -> list[Path]:
    return sorted(p.parent for p in Path(root).rglob(MANIFEST))


# ----------------------------------------------------------------- stacks

def save_stack(stack, out_dir, surface_spec: dict) -> Path:
    arrays = {"A": stack.A, "a": stack.a, "s": stack.s}
    levels = []
    for lev in stack.levels:
        n = lev.n_valid
        arrays[f"I1_{lev.j}"] = lev.I1[:n]
        arrays[f"I2_{lev.j}"] = lev.I2[:n]
        levels.append({"j": lev.j, "r": lev.r, "s_top": lev.s_top, "s_prev": lev.s_prev,
                       "n_valid": n})
    g = stack.gspec
    meta = {"params": stack.params.as_dict(), "surface": surface_spec,
            "grid": {"h": g.h, "L": g.L, "s_min": g.s_min, "s_max": g.s_max,
                     "per_decade": g.per_decade},
            "levels": levels, "shrink_log": stack.shrink_log}
    return write_arrays(out_dir, arrays, meta, kind="ansatz-stack")


def load_stack(path, bundle=None):
    """Rebuild an AnsatzStack from disk. The bundle is rebuilt from the
    recorded surface spec unless given."""
    from .ansatz import AnsatzStack, GridSpec, Level
    from .core import chi, derive_params
    from .config import surface_from_spec
    from .geometry import build_bundle

    arrays, meta = read_arrays(path)
    P = meta["params"]
    params = derive_params(P["dim"], P["p"], P["k"], P["R"])
    if bundle is None:
        bundle = build_bundle(surface_from_spec(P["dim"], meta["surface"]), params)
    stack = AnsatzStack(params, bundle, GridSpec(**meta["grid"]))
    if not np.array_equal(stack.s, arrays["s"]):
        raise ManifestError("stored s-grid does not match the grid spec")
    for lev in meta["levels"]:
        n = lev["n_valid"]
        I1 = np.full((stack.s.size,) + stack.grid.shape, np.nan)
        I2 = np.full_like(I1, np.nan)
        I1[:n] = arrays[f"I1_{lev['j']}"]
        I2[:n] = arrays[f"I2_{lev['j']}"]
        stack.levels.append(Level(lev["j"], lev["r"], lev["s_top"], lev["s_prev"], I1, I2,
                                  chi(stack.A / lev["r"]), n_valid=n))
    stack.shrink_log = list(meta.get("shrink_log", []))
    return stack


def save_trajectory(traj, out_dir, meta: Optional[dict] = None) -> Path:
    arrays = {"s": traj.s, "v": traj.v, "vs": traj.vs, "w": traj.w, "ws": traj.ws}
    m = {"S_n": traj.S_n, "grid": {"dim": traj.grid.dim, "L": traj.grid.L, "h": traj.grid.h},
         **{k: v for k, v in traj.meta.items()}, **(meta or {})}
    return write_arrays(out_dir, arrays, m, kind="trajectory")


def load_trajectory(path):
    from .grid import SpatialGrid
    from .solver import Trajectory

    arrays, meta = read_arrays(path)
    g = meta["grid"]
    grid = SpatialGrid(g["dim"], g["L"], g["h"])
    return Trajectory(grid, arrays["s"], arrays["v"], arrays["vs"], arrays["w"], arrays["ws"],
                      meta["S_n"], meta)


# -------------------------------------------------------------------- csv

def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([fmt(x) for x in r])


def write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def cache_dir() -> Optional[Path]:
    v = os.environ.get("FORGE_CACHE")
    return Path(v) if v else None
