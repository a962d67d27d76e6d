"""On-disk formats: sample directories, loss traces and run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import shutil
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .dgp import ConfoundedSample
from .raster import Raster, read_raster_csv, write_raster_csv

UNIT_COLUMNS = ["scene", "h", "w", "propensity", "T", "Y", "u", "propensity_marginal"]
MANIFEST = "manifest.json"


class OutputExistsError(FileExistsError):
    pass


def prepare_out_dir(path: str | Path, force: bool) -> Path:
    """Create ``path``; an existing nonempty directory is an error unless ``force``."""
    path = Path(path)
    if path.exists():
        if not path.is_dir():
            raise OutputExistsError(f"{path} exists and is not a directory")
        if any(path.iterdir()):
            if not force:
                raise OutputExistsError(f"{path} is not empty; pass --force to overwrite")
            shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _r(x) -> str:
    return repr(float(x))


def save_sample(sample: ConfoundedSample, out: str | Path, meta: dict[str, Any]) -> list[Path]:
    """Write images, confounder grids, the unit table and ``sample.json`` into ``out``."""
    out = Path(out)
    (out / "rasters").mkdir(parents=True, exist_ok=True)
    (out / "confounder").mkdir(exist_ok=True)
    written = []
    for s, img in enumerate(sample.images):
        p = out / "rasters" / f"scene_{s:04d}.csv"
        write_raster_csv(Raster(img), p)
        q = out / "confounder" / f"scene_{s:04d}.csv"
        write_raster_csv(Raster(sample.u_pixel[s]), q)
        written += [p, q]
    n, h, w = sample.u_pixel.shape
    x = sample.covariates
    n_x = 0 if x is None else (1 if x.ndim == 1 else x.shape[1])
    x_cols = [f"x_{j}" for j in range(n_x)]
    units = out / "units.csv"
    marginal = sample.marginal_propensity
    with units.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(UNIT_COLUMNS + x_cols)
        for k in range(sample.n_units):
            if sample.level == "pixel":
                s, rem = divmod(k, h * w)
                loc = [s, *divmod(rem, w)]
            else:
                loc = [k, "", ""]
            xs = [] if x is None else [_r(v) for v in np.atleast_1d(x[k])]
            writer.writerow(loc + [
                _r(sample.true_propensity[k]), int(sample.treatment[k]), _r(sample.outcome[k]),
                _r(sample.u[k]), "" if marginal is None else _r(marginal[k]),
            ] + xs)
    written.append(units)
    info = out / "sample.json"
    info.write_text(json.dumps({
        "level": sample.level, "n_scenes": n, "height": h, "width": w,
        "channels": sample.images.shape[3], "n_units": sample.n_units, **meta,
    }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(info)
    return written


def load_sample(path: str | Path) -> tuple[ConfoundedSample, dict[str, Any]]:
    path = Path(path)
    info_path = path / "sample.json"
    if not info_path.exists():
        raise FileNotFoundError(f"{path} is not a sample directory (no sample.json)")
    info = json.loads(info_path.read_text(encoding="utf-8"))
    n = info["n_scenes"]
    images = np.stack([read_raster_csv(path / "rasters" / f"scene_{s:04d}.csv").values for s in range(n)])
    u_pixel = np.stack([read_raster_csv(path / "confounder" / f"scene_{s:04d}.csv").values[:, :, 0] for s in range(n)])
    with (path / "units.csv").open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[: len(UNIT_COLUMNS)] != UNIT_COLUMNS:
            raise ValueError(f"{path / 'units.csv'}: unexpected header {header}")
        rows = list(reader)
    col = {name: i for i, name in enumerate(header)}

    def column(name, dtype=float):
        return np.array([dtype(r[col[name]]) for r in rows])

    x_names = [c for c in header if c.startswith("x_")]
    covariates = np.array([[float(r[col[c]]) for c in x_names] for r in rows]) if x_names else None
    marginal = None if rows and rows[0][col["propensity_marginal"]] == "" else column("propensity_marginal")
    sample = ConfoundedSample(
        level=info["level"],
        images=images,
        u_pixel=u_pixel,
        u_scene=None if info["level"] == "pixel" else column("u"),
        true_propensity=column("propensity"),
        treatment=column("T", int),
        outcome=column("Y"),
        marginal_propensity=marginal,
        covariates=covariates,
    )
    return sample, info


def write_loss_trace(trace, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "test_loss"])
        for epoch, tr, te in trace:
            writer.writerow([epoch, _r(tr), "" if te is None else _r(te)])


def _inventory(out: Path) -> list[dict[str, Any]]:
    items = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != MANIFEST:
            items.append({
                "path": p.relative_to(out).as_posix(),
                "bytes": p.stat().st_size,
                "sha256": hashlib.sha256(p.read_bytes()).hexdigest(),
            })
    return items


def now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(out: str | Path, command: str, config: dict[str, Any], config_hash: str,
                   seed: int, started: str, extra: dict[str, Any] | None = None) -> Path:
    """Record what produced ``out``: full config, its hash, seed, version and file inventory."""
    out = Path(out)
    doc = {
        "tool": "imgconf",
        "version": __version__,
        "command": command,
        "config_hash": config_hash,
        "seed": seed,
        "config": config,
        "started": started,
        "finished": now(),
        "outputs": _inventory(out),
    }
    if extra:
        doc.update(extra)
    path = out / MANIFEST
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
