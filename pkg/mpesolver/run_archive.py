"""
Run archive: the files a command leaves behind.

A run lives under ``<run_name>/`` of a :class:`StorageBackend`. Every artifact
(CSV tables, JSON documents, checkpoints) is listed in the manifest
``__RUN__.json`` together with its SHA-256 digest and size, so a rerun with
the same configuration and seed can be compared byte for byte. The manifest
is rewritten through a temporary file and an atomic replace while holding
the run lock.

Table layouts (one row per grid node, state and population count vector,
ordered by ``t``, then ``x``, then the colexicographic rank of the counts):

``values.csv``
    ``t, x, n_1..n_d, v``
``control.csv``
    ``t, x, n_1..n_d, a_1..a_{d-1}``, the rate slots in destination order
    with ``x`` skipped.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from .game_model import GameModel
from .ode_backend import ControlField, TimeGrid, ValueField
from .storage_backends import StorageBackend

logger = logging.getLogger(__name__)

MANIFEST = "__RUN__.json"


def _json_dumps(data: Any) -> bytes:
    return json.dumps(
        data,
        ensure_ascii=False,
        separators=(",", ":"),
        sort_keys=True,
    ).encode("utf-8")


def _csv_bytes(frame: pd.DataFrame) -> bytes:
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, lineterminator="\n")
    return buffer.getvalue().encode("utf-8")


def parse_csv(raw: bytes) -> pd.DataFrame:
    return pd.read_csv(io.BytesIO(raw), dtype={"x": str}, float_precision="round_trip")


# ------------------------------------------------------------------ layouts
def count_columns(d: int) -> List[str]:
    return [f"n_{j + 1}" for j in range(d)]


def rate_columns(d: int) -> List[str]:
    return [f"a_{j + 1}" for j in range(d - 1)]


def _index_columns(model: GameModel, grid: TimeGrid) -> Dict[str, np.ndarray]:
    d, S = model.d, model.space.size
    K = grid.M + 1
    counts = np.asarray(model.space.simplex.counts, dtype=np.int64)
    columns: Dict[str, np.ndarray] = {
        "t": np.repeat(grid.nodes, d * S),
        "x": np.tile(np.repeat(np.asarray(model.state_labels, dtype=object), S), K),
    }
    for j, name in enumerate(count_columns(d)):
        columns[name] = np.tile(counts[:, j], K * d)
    return columns


def value_table(model: GameModel, value: ValueField) -> pd.DataFrame:
    columns = _index_columns(model, value.grid)
    columns["v"] = value.data.reshape(-1)
    return pd.DataFrame(columns)


def control_table(model: GameModel, control: ControlField) -> pd.DataFrame:
    columns = _index_columns(model, control.grid)
    flat = control.data.reshape(-1, model.d - 1)
    for j, name in enumerate(rate_columns(model.d)):
        columns[name] = flat[:, j]
    return pd.DataFrame(columns)


def control_from_table(frame: pd.DataFrame, model: GameModel) -> ControlField:
    """Rebuild a :class:`ControlField` from a ``control.csv`` table.

    The time grid is read off the distinct ``t`` values, which must be
    uniform on ``[0, model.T]``.
    """
    expected = ["t", "x", *count_columns(model.d), *rate_columns(model.d)]
    if list(frame.columns) != expected:
        raise ValueError(f"control table columns {list(frame.columns)} do not match {expected}")
    times = np.unique(frame["t"].to_numpy(dtype=float))
    M = times.size - 1
    if M < 1 or not np.isclose(times[0], 0.0) or not np.isclose(times[-1], model.T):
        raise ValueError(f"control table must span [0, {model.T}] with at least two nodes")
    grid = TimeGrid(model.T, M)
    if not np.allclose(times, grid.nodes, rtol=0.0, atol=1e-9 * max(1.0, model.T)):
        raise ValueError("control table times are not a uniform grid")
    d, S = model.d, model.space.size
    if len(frame) != (M + 1) * d * S:
        raise ValueError(
            f"control table has {len(frame)} rows, expected {(M + 1) * d * S} for d={d}, N={model.N}"
        )
    lookup = {label: x for x, label in enumerate(model.state_labels)}
    try:
        xs = np.array([lookup[str(label)] for label in frame["x"]], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"unknown state label {exc.args[0]!r}; expected {model.state_labels}") from None
    counts = frame[count_columns(d)].to_numpy(dtype=np.int64)
    if np.any(counts < 0) or np.any(counts.sum(axis=1) != model.N):
        raise ValueError(f"count vectors must be nonnegative and sum to N={model.N}")
    ks = np.searchsorted(grid.nodes, frame["t"].to_numpy(dtype=float) - 1e-9 * max(1.0, model.T))
    ranks = model.space.simplex.rank_many(counts)
    data = np.full((M + 1, d, S, d - 1), np.nan)
    data[ks, xs, ranks] = frame[rate_columns(d)].to_numpy(dtype=float)
    if np.isnan(data).any():
        raise ValueError("control table does not cover every (t, x, counts) exactly once")
    return ControlField(grid, data)


# ------------------------------------------------------------------ archive
class RunArchive:
    """Artifacts and manifest of one run.

    :param backend: Storage the run is written to.
    :param run_name: Directory of the run inside the backend.
    :param command: Command that produced the run, recorded in the manifest.
    :param config: Run configuration, recorded in the manifest.
    """

    def __init__(
        self,
        backend: StorageBackend,
        run_name: str,
        *,
        command: Optional[str] = None,
        config: Optional[Dict[str, Any]] = None,
    ) -> None:
        if not run_name or run_name.strip() == "":
            raise ValueError("run_name must be a non-empty string")
        self.backend = backend
        self.run_name = run_name.strip("/")
        self.command = command
        self.config = config
        self._manifest_path = f"{self.run_name}/{MANIFEST}"
        self._lock_key = f"{self.run_name}__run"

    def path(self, name: str) -> str:
        return f"{self.run_name}/{name}"

    async def manifest(self) -> Dict[str, Any]:
        if not await self.backend.exists(self._manifest_path):
            return {"run": self.run_name, "artifacts": {}}
        raw = await self.backend.read_bytes(self._manifest_path)
        try:
            data = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            logger.warning("manifest of run %s is unreadable; starting a new one", self.run_name)
            data = {}
        data.setdefault("run", self.run_name)
        data.setdefault("artifacts", {})
        return data

    async def _commit_manifest(self, manifest: Dict[str, Any]) -> None:
        tmp = f"{self._manifest_path}.tmp"
        await self.backend.write_bytes(tmp, _json_dumps(manifest))
        await self.backend.replace(tmp, self._manifest_path)

    async def _store(self, name: str, payload: bytes, kind: str) -> str:
        path = self.path(name)
        async with self.backend.acquire_lock(self._lock_key):
            await self.backend.write_bytes(path, payload)
            manifest = await self.manifest()
            if self.command is not None:
                manifest["command"] = self.command
            if self.config is not None:
                manifest["config"] = self.config
            manifest["updated"] = datetime.now(timezone.utc).isoformat()
            manifest["artifacts"][name] = {
                "kind": kind,
                "bytes": len(payload),
                "sha256": hashlib.sha256(payload).hexdigest(),
            }
            await self._commit_manifest(manifest)
        logger.info("wrote %s", path)
        return path

    async def write_table(self, name: str, frame: pd.DataFrame) -> str:
        return await self._store(name, _csv_bytes(frame), "table")

    async def write_json(self, name: str, data: Any) -> str:
        return await self._store(name, _json_dumps(data), "document")

    async def write_checkpoint(self, name: str, data: Dict[str, Any]) -> str:
        return await self._store(name, _json_dumps(data), "checkpoint")

    async def read_table(self, name: str) -> pd.DataFrame:
        return parse_csv(await self.backend.read_bytes(self.path(name)))

    async def read_json(self, name: str) -> Any:
        return json.loads((await self.backend.read_bytes(self.path(name))).decode("utf-8"))

    async def verify(self) -> Dict[str, bool]:
        """Recompute every recorded digest; ``{name: matches}``."""
        manifest = await self.manifest()
        result = {}
        for name, entry in sorted(manifest["artifacts"].items()):
            path = self.path(name)
            if not await self.backend.exists(path):
                result[name] = False
                continue
            digest = hashlib.sha256(await self.backend.read_bytes(path)).hexdigest()
            result[name] = digest == entry["sha256"]
        return result


__all__ = [
    "MANIFEST",
    "RunArchive",
    "control_from_table",
    "control_table",
    "count_columns",
    "parse_csv",
    "rate_columns",
    "value_table",
]
