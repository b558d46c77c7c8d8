"""On-disk formats: raw f32le volumes with JSON sidecars, projection
directories, field checkpoints, run configs, and PGM slice export.

All payloads are little-endian 32-bit floats so round trips are bit-exact
and trivially diffable.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .field import FieldConfig, RdaField
from .geometry import Aabb, ScanGeometry, make_circular_geometry
from .phantom import Volume
from .projector import ProjectionSet
from .sart import SartConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


def _base(path) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p


# ---------------------------------------------------------------- volumes

def write_volume(path, vol: Volume) -> None:
    base = _base(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    sidecar = {
        "dims": [int(d) for d in vol.dims],
        "spacing": [float(s) for s in vol.spacing],
        "origin": [float(o) for o in vol.origin],
        "dtype": "f32le",
        "order": "x-fastest",
    }
    base.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    payload = vol.data.astype("<f4").ravel(order="F").tobytes()
    base.with_suffix(".raw").write_bytes(payload)


def read_volume(path) -> Volume:
    base = _base(path)
    sidecar_path = base.with_suffix(".json")
    raw_path = base.with_suffix(".raw")
    if not sidecar_path.exists():
        raise FileNotFoundError(f"missing volume sidecar {sidecar_path}")
    if not raw_path.exists():
        raise FileNotFoundError(f"missing volume payload {raw_path}")
    meta = json.loads(sidecar_path.read_text())
    for key in ("dims", "spacing", "origin", "dtype", "order"):
        if key not in meta:
            raise ConfigError(f"{sidecar_path}: missing field {key!r}")
    if meta["dtype"] != "f32le" or meta["order"] != "x-fastest":
        raise ConfigError(f"{sidecar_path}: unsupported dtype/order")
    dims = tuple(int(d) for d in meta["dims"])
    payload = np.frombuffer(raw_path.read_bytes(), dtype="<f4")
    if payload.size != int(np.prod(dims)):
        raise ConfigError(
            f"{raw_path}: payload has {payload.size} values, expected {int(np.prod(dims))}"
        )
    data = payload.astype(np.float64).reshape(dims, order="F")
    return Volume(data, np.array(meta["spacing"]), np.array(meta["origin"]))


# ------------------------------------------------------------- geometry

def geometry_to_dict(geom: ScanGeometry) -> dict:
    return {
        "n_views": geom.n_views,
        "source_to_isocenter": geom.source_to_isocenter,
        "source_to_detector": geom.source_to_detector,
        "detector_rows": geom.detector_rows,
        "detector_cols": geom.detector_cols,
        "pixel_pitch_u": geom.pixel_pitch_u,
        "pixel_pitch_v": geom.pixel_pitch_v,
        "angular_range": geom.angular_range,
        "volume_bounds": {
            "min": [float(x) for x in geom.volume_bounds.min],
            "max": [float(x) for x in geom.volume_bounds.max],
        },
    }


def geometry_from_dict(d: dict, source: str = "geometry.json") -> ScanGeometry:
    required = {
        "n_views", "source_to_isocenter", "source_to_detector",
        "detector_rows", "detector_cols", "pixel_pitch_u", "pixel_pitch_v",
        "angular_range", "volume_bounds",
    }
    missing = required - d.keys()
    if missing:
        raise ConfigError(f"{source}: missing geometry fields {sorted(missing)}")
    unknown = d.keys() - required
    if unknown:
        raise ConfigError(f"{source}: unknown geometry fields {sorted(unknown)}")
    vb = d["volume_bounds"]
    bounds = Aabb(np.array(vb["min"]), np.array(vb["max"]))
    return make_circular_geometry(
        d["n_views"], d["source_to_isocenter"], d["source_to_detector"],
        d["detector_rows"], d["detector_cols"],
        d["pixel_pitch_u"], d["pixel_pitch_v"], bounds,
        angular_range=d["angular_range"],
    )


# ----------------------------------------------------------- projections

def write_projections(dirpath, p: ProjectionSet) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    (d / "geometry.json").write_text(json.dumps(geometry_to_dict(p.geom), indent=2) + "\n")
    for view in range(p.geom.n_views):
        (d / f"view_{view:04d}.raw").write_bytes(p.images[view].astype("<f4").tobytes())


def read_projections(dirpath) -> ProjectionSet:
    d = Path(dirpath)
    geo_path = d / "geometry.json"
    if not geo_path.exists():
        raise FileNotFoundError(f"missing {geo_path}")
    geom = geometry_from_dict(json.loads(geo_path.read_text()), source=str(geo_path))
    rows, cols = geom.detector_rows, geom.detector_cols
    images = np.zeros((geom.n_views, rows, cols), dtype=np.float64)
    for view in range(geom.n_views):
        f = d / f"view_{view:04d}.raw"
        if not f.exists():
            raise FileNotFoundError(f"missing projection file {f}")
        payload = np.frombuffer(f.read_bytes(), dtype="<f4")
        if payload.size != rows * cols:
            raise ConfigError(f"{f}: expected {rows * cols} values, got {payload.size}")
        images[view] = payload.astype(np.float64).reshape(rows, cols)
    return ProjectionSet(geom, images)


# ------------------------------------------------------------ checkpoints

def save_checkpoint(path, field: RdaField, attend: bool = True, seed: int = 0) -> None:
    """JSON manifest (hyperparameters, shapes, offset table) + f32le blob."""
    base = _base(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    offsets = {}
    chunks = []
    cursor = 0
    for name, p in field.named_parameters():
        arr = p.detach().cpu().numpy().astype("<f4")
        offsets[name] = {"offset": cursor, "shape": list(arr.shape)}
        cursor += arr.size
        chunks.append(arr.ravel())
    manifest = {
        "kind": "rda_checkpoint",
        "field": {
            "levels": field.cfg.levels,
            "table_size": field.cfg.table_size,
            "feats_per_level": field.cfg.feats_per_level,
            "base_res": field.cfg.base_res,
            "growth": field.cfg.growth,
            "d_model": field.cfg.d_model,
            "n_heads": field.cfg.n_heads,
            "n_blocks": field.cfg.n_blocks,
            "use_t_channel": field.cfg.use_t_channel,
        },
        "bounds": {
            "min": [float(x) for x in field.bounds_min],
            "max": [float(x) for x in field.bounds_max],
        },
        "attend": bool(attend),
        "seed": int(seed),
        "dtype": "f32le",
        "params": offsets,
        "total_values": cursor,
    }
    base.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n")
    base.with_suffix(".raw").write_bytes(np.concatenate(chunks).tobytes())


def load_checkpoint(path) -> tuple[RdaField, bool]:
    """Returns (field, attend flag)."""
    import torch

    base = _base(path)
    manifest_path = base.with_suffix(".json")
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing checkpoint manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("kind") != "rda_checkpoint":
        raise ConfigError(f"{manifest_path}: not a checkpoint manifest")
    cfg = FieldConfig(**manifest["field"])
    bounds = Aabb(np.array(manifest["bounds"]["min"]), np.array(manifest["bounds"]["max"]))
    field = RdaField(cfg, bounds)
    payload = np.frombuffer(base.with_suffix(".raw").read_bytes(), dtype="<f4")
    if payload.size != manifest["total_values"]:
        raise ConfigError(f"{base}.raw: parameter blob size mismatch")
    params = dict(field.named_parameters())
    for name, entry in manifest["params"].items():
        if name not in params:
            raise ConfigError(f"{manifest_path}: unknown parameter {name!r}")
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        vals = payload[entry["offset"] : entry["offset"] + n].reshape(shape)
        with torch.no_grad():
            params[name].copy_(torch.from_numpy(vals.astype(np.float32)))
    return field, bool(manifest.get("attend", True))


# ------------------------------------------------------------ run config

_TRAIN_KEYS = {
    "iterations", "batch_rays", "n1", "n2", "learning_rate", "lr_decay",
    "occupancy_refresh_every", "seed", "use_xray_sampling", "use_rda",
    "log_every", "tv_weight", "occupancy_res", "occupancy_tau_rel",
    "occupancy_ema", "segments_from_intervals", "attend_per_interval",
    "param_ema", "grad_clip", "pointwise_anchor", "field",
}
_FIELD_KEYS = {
    "levels", "table_size", "feats_per_level", "base_res", "growth",
    "d_model", "n_heads", "n_blocks", "use_t_channel",
}
_SART_KEYS = {"iterations", "relaxation", "nonneg_clamp"}
_PATH_KEYS = {"projections", "ground_truth", "checkpoint", "report"}


def _check_keys(given: dict, allowed: set, where: str):
    unknown = given.keys() - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def parse_run_config(doc: dict, source: str = "config") -> tuple[TrainConfig, SartConfig, dict]:
    """Strictly validated config document; unknown keys abort."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be an object")
    _check_keys(doc, {"train", "sart", "paths"}, source)
    train_doc = dict(doc.get("train", {}))
    _check_keys(train_doc, _TRAIN_KEYS, f"{source}.train")
    field_doc = dict(train_doc.pop("field", {}))
    _check_keys(field_doc, _FIELD_KEYS, f"{source}.train.field")
    sart_doc = dict(doc.get("sart", {}))
    _check_keys(sart_doc, _SART_KEYS, f"{source}.sart")
    paths = dict(doc.get("paths", {}))
    _check_keys(paths, _PATH_KEYS, f"{source}.paths")
    try:
        train_cfg = TrainConfig(field=FieldConfig(**field_doc), **train_doc)
        sart_cfg = SartConfig(**sart_doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return train_cfg, sart_cfg, paths


def load_run_config(path) -> tuple[TrainConfig, SartConfig, dict]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing config file {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    return parse_run_config(doc, source=str(p))


# -------------------------------------------------------------- PGM slices

def write_pgm_slice(path, vol: Volume, axis: str, index: int) -> None:
    """8-bit binary PGM of one volume slice, min-max normalized."""
    ax = {"x": 0, "y": 1, "z": 2}.get(axis)
    if ax is None:
        raise ConfigError(f"axis must be x, y, or z, got {axis!r}")
    if not (0 <= index < vol.dims[ax]):
        raise ConfigError(f"slice index {index} out of range for axis {axis}")
    sl = np.take(vol.data, index, axis=ax)
    lo, hi = float(sl.min()), float(sl.max())
    norm = np.zeros_like(sl) if hi == lo else (sl - lo) / (hi - lo)
    img = np.round(norm * 255.0).astype(np.uint8)
    h, w = img.shape
    header = f"P5\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + img.tobytes())
