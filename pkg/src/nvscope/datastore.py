"""Content-addressed persistence for instrument artifacts.

Envelopes (calibrations, spectra, approach curves, field maps, reports)
are stored one directory per kind, one JSON file per envelope, named by
the sha256 of the envelope's canonical serialization.  The canonical
form embeds every array inline (so the id is independent of the on-disk
layout); at write time float64 arrays whose raw size exceeds 64 kB are
externalized to sidecar files holding the raw little-endian row-major
grid.  Writes are staged in a scratch directory and renamed into place,
so readers never observe a partial file.

On-disk layout (documented bit-exactly in docs/datastore_format.md):

    <root>/<kind>/<id>.json       envelope
    <root>/<kind>/<id>.<n>.f64    n-th externalized grid, raw <f8 bytes
    <root>/.tmp/                  staging area for atomic writes
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import time
import uuid
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
KINDS = ("calibration", "spectrum", "approach_curve", "field_map", "report")
SIDECAR_BYTES = 64 * 1024  # f64 arrays larger than this go to sidecars

_ARRAY_TAG = "__ndarray__"
_PROVENANCE_KEYS = ("config_hash", "seed", "software_version", "created_s")


class DataStoreError(RuntimeError):
    """Base class for datastore failures."""


class NotFoundError(DataStoreError):
    """No envelope stored under the requested id."""


class VersionError(DataStoreError):
    """Envelope written by a newer, unsupported schema version."""


class ValidationError(ValueError):
    """Envelope violates its schema."""


def make_provenance(*, config_hash: str, seed, software_version: str = __version__,
                    created_s: float | None = None) -> dict:
    """Provenance block recording where an artifact came from."""
    return {
        "config_hash": str(config_hash),
        "seed": seed,
        "software_version": str(software_version),
        "created_s": time.time() if created_s is None else float(created_s),
    }


@dataclass(frozen=True)
class Envelope:
    """One stored artifact: payload plus provenance under a versioned schema."""

    kind: str
    payload: dict
    provenance: dict
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(
                f"unknown kind {self.kind!r}; expected one of {KINDS}")
        if not isinstance(self.payload, dict) or not self.payload:
            raise ValidationError("payload must be a non-empty dict")
        if not isinstance(self.provenance, dict):
            raise ValidationError("provenance must be a dict")
        missing = [k for k in _PROVENANCE_KEYS if k not in self.provenance]
        if missing:
            raise ValidationError(f"provenance missing keys: {missing}")
        if self.schema_version != SCHEMA_VERSION:
            raise ValidationError(
                f"cannot create envelopes with schema_version "
                f"{self.schema_version}; this code writes {SCHEMA_VERSION}")


# ---------------------------------------------------------------------------
# canonical serialization
# ---------------------------------------------------------------------------

def _canonical_array(arr: np.ndarray) -> np.ndarray:
    """C-contiguous little-endian copy-if-needed view of the array."""
    le = arr.dtype.newbyteorder("<")
    return np.ascontiguousarray(arr.astype(le, copy=False))


def _encode(node, path: str):
    """JSON-ready tree with arrays replaced by tagged base64 nodes."""
    if isinstance(node, dict):
        if _ARRAY_TAG in node:
            raise ValidationError(
                f"{path}: key {_ARRAY_TAG!r} is reserved for array encoding")
        return {str(k): _encode(v, f"{path}.{k}") for k, v in node.items()}
    if isinstance(node, (list, tuple)):
        return [_encode(v, f"{path}[{i}]") for i, v in enumerate(node)]
    if isinstance(node, np.ndarray):
        if node.dtype.kind not in "fiub":
            raise ValidationError(
                f"{path}: unsupported array dtype {node.dtype}")
        arr = _canonical_array(node)
        return {_ARRAY_TAG: {
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "data": base64.b64encode(arr.tobytes()).decode("ascii"),
        }}
    if isinstance(node, (np.floating, np.integer, np.bool_)):
        node = node.item()
    if isinstance(node, float) and not np.isfinite(node):
        raise ValidationError(
            f"{path}: non-finite scalar {node!r}; store it inside an array")
    if node is None or isinstance(node, (bool, int, float, str)):
        return node
    raise ValidationError(f"{path}: unsupported value type {type(node).__name__}")


def _decode(node, sidecars):
    if isinstance(node, dict):
        if _ARRAY_TAG in node:
            meta = node[_ARRAY_TAG]
            dtype = np.dtype(meta["dtype"])
            if "data" in meta:
                raw = base64.b64decode(meta["data"])
            else:
                raw = sidecars(int(meta["sidecar"]))
            arr = np.frombuffer(raw, dtype=dtype).reshape(meta["shape"])
            return arr.copy()
        return {k: _decode(v, sidecars) for k, v in node.items()}
    if isinstance(node, list):
        return [_decode(v, sidecars) for v in node]
    return node


def canonical_bytes(env: Envelope) -> bytes:
    """Canonical serialization: sorted keys, shortest round-trip floats,
    every array embedded.  Semantically equal envelopes map to identical
    bytes, so the content id is independent of storage layout."""
    doc = {
        "schema_version": env.schema_version,
        "kind": env.kind,
        "payload": _encode(env.payload, "payload"),
        "provenance": _encode(env.provenance, "provenance"),
    }
    try:
        text = json.dumps(doc, sort_keys=True, separators=(",", ":"),
                          ensure_ascii=True, allow_nan=False)
    except ValueError as exc:
        raise ValidationError(f"payload not serializable: {exc}") from exc
    return text.encode("ascii")


def envelope_id(env: Envelope) -> str:
    return hashlib.sha256(canonical_bytes(env)).hexdigest()


def envelope_from_json(doc: dict) -> Envelope:
    """Rebuild an Envelope from a fully-inline canonical JSON document
    (the inverse of json.loads(canonical_bytes(env)))."""
    if not isinstance(doc, dict):
        raise ValidationError("envelope document must be an object")
    version = doc.get("schema_version")
    if not isinstance(version, int):
        raise ValidationError("missing schema_version")
    if version > SCHEMA_VERSION:
        raise VersionError(
            f"written with schema_version {version}, but this software "
            f"supports up to {SCHEMA_VERSION}; upgrade to read it")

    def no_sidecar(n: int) -> bytes:
        raise ValidationError("inline document references a sidecar")

    return Envelope(
        kind=doc.get("kind"),
        payload=_decode(doc.get("payload"), no_sidecar),
        provenance=_decode(doc.get("provenance"), no_sidecar),
        schema_version=version,
    )


def _externalize(node, out: list):
    """Replace large inline f64 arrays with sidecar references (DFS in
    sorted-key order, so sidecar numbering is deterministic)."""
    if isinstance(node, dict):
        if _ARRAY_TAG in node:
            meta = node[_ARRAY_TAG]
            raw = base64.b64decode(meta["data"])
            if meta["dtype"] == "<f8" and len(raw) > SIDECAR_BYTES:
                out.append(raw)
                return {_ARRAY_TAG: {"dtype": meta["dtype"],
                                     "shape": meta["shape"],
                                     "sidecar": len(out) - 1}}
            return node
        return {k: _externalize(node[k], out) for k in sorted(node)}
    if isinstance(node, list):
        return [_externalize(v, out) for v in node]
    return node


# ---------------------------------------------------------------------------
# the store
# ---------------------------------------------------------------------------

class DataStore:
    """Directory-backed envelope store with content-addressed ids."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._tmp = self.root / ".tmp"
        self._tmp.mkdir(exist_ok=True)

    # -- paths ---------------------------------------------------------------

    def _json_path(self, kind: str, env_id: str) -> Path:
        return self.root / kind / f"{env_id}.json"

    def _sidecar_path(self, kind: str, env_id: str, n: int) -> Path:
        return self.root / kind / f"{env_id}.{n}.f64"

    def _find(self, env_id: str, kind: str | None) -> tuple[str, Path]:
        kinds = (kind,) if kind is not None else KINDS
        for k in kinds:
            path = self._json_path(k, env_id)
            if path.exists():
                return k, path
        raise NotFoundError(f"no envelope {env_id!r}"
                            + (f" of kind {kind!r}" if kind else ""))

    def _write_atomic(self, target: Path, data: bytes):
        tmp = self._tmp / uuid.uuid4().hex
        tmp.write_bytes(data)
        os.replace(tmp, target)

    # -- operations ----------------------------------------------------------

    def save(self, env: Envelope) -> str:
        """Store the envelope; returns its content id.  Re-saving the
        same content is a no-op returning the same id."""
        blob = canonical_bytes(env)
        env_id = hashlib.sha256(blob).hexdigest()
        target = self._json_path(env.kind, env_id)
        if target.exists():
            return env_id
        target.parent.mkdir(exist_ok=True)

        doc = json.loads(blob)
        sidecars: list[bytes] = []
        doc = _externalize(doc, sidecars)
        # grids first, envelope last: a visible .json never has missing parts
        for n, raw in enumerate(sidecars):
            self._write_atomic(self._sidecar_path(env.kind, env_id, n), raw)
        text = json.dumps(doc, sort_keys=True, separators=(",", ":"),
                          ensure_ascii=True, allow_nan=False)
        self._write_atomic(target, text.encode("ascii"))
        log.debug("saved %s/%s (%d sidecars)", env.kind, env_id, len(sidecars))
        return env_id

    def load(self, env_id: str, kind: str | None = None) -> Envelope:
        if kind is not None and kind not in KINDS:
            raise ValidationError(f"unknown kind {kind!r}")
        found_kind, path = self._find(env_id, kind)
        doc = json.loads(path.read_text("ascii"))
        version = doc.get("schema_version")
        if not isinstance(version, int):
            raise ValidationError(f"{env_id}: missing schema_version")
        if version > SCHEMA_VERSION:
            raise VersionError(
                f"{env_id}: written with schema_version {version}, but this "
                f"software supports up to {SCHEMA_VERSION}; upgrade to read it")

        def sidecar(n: int) -> bytes:
            return self._sidecar_path(found_kind, env_id, n).read_bytes()

        return Envelope(
            kind=doc["kind"],
            payload=_decode(doc["payload"], sidecar),
            provenance=_decode(doc["provenance"], sidecar),
            schema_version=version,
        )

    def list(self, kind: str | None = None, where=None) -> list[str]:
        """Sorted ids of stored envelopes, optionally restricted to one
        kind and filtered by a predicate over the loaded envelope."""
        if kind is not None and kind not in KINDS:
            raise ValidationError(f"unknown kind {kind!r}")
        kinds = (kind,) if kind is not None else KINDS
        ids = []
        for k in kinds:
            directory = self.root / k
            if not directory.is_dir():
                continue
            for path in directory.glob("*.json"):
                ids.append((path.stem, k))
        ids.sort()
        if where is None:
            return [i for i, _ in ids]
        return [i for i, k in ids if where(self.load(i, kind=k))]


# ---------------------------------------------------------------------------
# field-map codec (the one domain type whose reconstruction must be exact)
# ---------------------------------------------------------------------------

_GRIDS = ("b", "sigma_b", "f_minus", "f_plus", "contrast", "chi2", "t_pixel")


def field_map_to_envelope(fmap, provenance: dict) -> Envelope:
    """Pack a scanengine FieldMap into a `field_map` envelope."""
    cfg = fmap.config
    grids = {name: getattr(fmap, name) for name in _GRIDS}
    grids["flags"] = fmap.flags
    payload = {
        "grids": grids,
        "config": {
            "extent": list(cfg.extent),
            "pixel_pitch": cfg.pixel_pitch,
            "origin": list(cfg.origin),
            "lift_height": cfg.lift_height,
            "mode": cfg.mode,
            "timeout_per_pixel": cfg.timeout_per_pixel,
            "bias_parallel": cfg.bias_parallel,
            "extraction": cfg.extraction,
            "serpentine": cfg.serpentine,
            "sweep": {
                "n_points": cfg.sweep.n_points,
                "t_per_point": cfg.sweep.t_per_point,
                "p_opt": cfg.sweep.p_opt,
                "stray_span": cfg.sweep.stray_span,
                "shot_noise": cfg.sweep.shot_noise,
            },
        },
        "temperature": fmap.temperature,
        "t_start": fmap.t_start,
        "t_end": fmap.t_end,
        "rows_completed": fmap.rows_completed,
        "aborted": fmap.aborted,
        "metadata": dict(fmap.metadata),
    }
    return Envelope(kind="field_map", payload=payload, provenance=provenance)


def field_map_from_envelope(env: Envelope):
    """Rebuild the FieldMap stored by field_map_to_envelope."""
    from .scanengine import FieldMap, ScanConfig, SweepSettings

    if env.kind != "field_map":
        raise ValidationError(f"expected a field_map envelope, got {env.kind!r}")
    p = env.payload
    cfg_dict = dict(p["config"])
    sweep = SweepSettings(**cfg_dict.pop("sweep"))
    cfg_dict["extent"] = tuple(cfg_dict["extent"])
    cfg_dict["origin"] = tuple(cfg_dict["origin"])
    cfg = ScanConfig(sweep=sweep, **cfg_dict)
    grids = dict(p["grids"])
    return FieldMap(
        config=cfg,
        temperature=p["temperature"],
        t_start=p["t_start"], t_end=p["t_end"],
        rows_completed=p["rows_completed"], aborted=p["aborted"],
        metadata=dict(p["metadata"]),
        **grids,
    )
