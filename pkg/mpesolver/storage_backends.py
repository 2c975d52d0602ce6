"""
Storage backends for run artifacts.

:class:`StorageBackend` is the asynchronous interface the run archive writes
through; :class:`LocalStorageBackend` implements it on the local filesystem,
offloading blocking I/O with ``asyncio.to_thread``.

Locks are files under ``__locks__`` created with exclusive-creation
semantics. Each holds a JSON payload with its creation time and TTL; a lock
older than its TTL, or one whose payload cannot be read, is considered stale
and removed by the next contender. Two runs writing to the same directory
therefore serialize their manifest updates instead of interleaving them.
"""

from __future__ import annotations

import asyncio
import json
import logging
import os
from abc import ABC, abstractmethod
from contextlib import asynccontextmanager
from datetime import datetime, timedelta, timezone
from typing import AsyncIterator, List

logger = logging.getLogger(__name__)

LOCK_DIR = "__locks__"


class StorageBackend(ABC):
    """Asynchronous file primitives; paths are relative to the backend root."""

    @abstractmethod
    async def exists(self, path: str) -> bool:
        """Return ``True`` if *path* exists."""

    @abstractmethod
    async def read_bytes(self, path: str) -> bytes:
        """Contents of the file at *path*."""

    @abstractmethod
    async def write_bytes(self, path: str, data: bytes, *, exclusive: bool = False) -> None:
        """Write *data* to *path*, creating parent directories.

        With *exclusive* the write fails with :class:`FileExistsError` when
        *path* already exists.
        """

    @abstractmethod
    async def replace(self, source: str, target: str) -> None:
        """Atomically move *source* over *target*."""

    @abstractmethod
    async def delete(self, path: str) -> None:
        """Remove *path*; missing files are ignored."""

    @abstractmethod
    async def listdir(self, path: str) -> List[str]:
        """Entries of the directory at *path*; empty when it does not exist."""

    @abstractmethod
    async def makedirs(self, path: str, exist_ok: bool = True) -> None:
        """Create directories recursively."""

    @abstractmethod
    def acquire_lock(self, key: str, ttl: int = 300) -> "AsyncIterator[None]":
        """Async context manager holding the lock *key* until exit."""


class LocalStorageBackend(StorageBackend):
    """Filesystem backend rooted at *base_path*.

    :param base_path: Root directory; created if missing.
    :param poll_interval: Seconds between attempts on a held lock.
    """

    def __init__(self, base_path: str, *, poll_interval: float = 0.1) -> None:
        self.base_path = os.path.abspath(base_path)
        self.poll_interval = poll_interval
        os.makedirs(self.base_path, exist_ok=True)
        self._lock_dir = os.path.join(self.base_path, LOCK_DIR)
        os.makedirs(self._lock_dir, exist_ok=True)

    async def _run(self, func, *args, **kwargs):
        return await asyncio.to_thread(func, *args, **kwargs)

    def _abs(self, path: str) -> str:
        full = os.path.abspath(os.path.join(self.base_path, path))
        if os.path.commonpath([full, self.base_path]) != self.base_path:
            raise ValueError(f"path {path!r} escapes the storage root")
        return full

    async def exists(self, path: str) -> bool:
        return await self._run(os.path.exists, self._abs(path))

    async def read_bytes(self, path: str) -> bytes:
        abs_path = self._abs(path)

        def _read() -> bytes:
            with open(abs_path, "rb") as f:
                return f.read()

        return await self._run(_read)

    async def write_bytes(self, path: str, data: bytes, *, exclusive: bool = False) -> None:
        abs_path = self._abs(path)

        def _write() -> None:
            os.makedirs(os.path.dirname(abs_path), exist_ok=True)
            with open(abs_path, "xb" if exclusive else "wb") as f:
                f.write(data)

        await self._run(_write)

    async def replace(self, source: str, target: str) -> None:
        src, dst = self._abs(source), self._abs(target)

        def _replace() -> None:
            os.makedirs(os.path.dirname(dst), exist_ok=True)
            os.replace(src, dst)

        await self._run(_replace)

    async def delete(self, path: str) -> None:
        abs_path = self._abs(path)

        def _delete() -> None:
            try:
                os.remove(abs_path)
            except FileNotFoundError:
                pass

        await self._run(_delete)

    async def listdir(self, path: str) -> List[str]:
        abs_path = self._abs(path)

        def _list() -> List[str]:
            try:
                return sorted(os.listdir(abs_path))
            except FileNotFoundError:
                return []

        return await self._run(_list)

    async def makedirs(self, path: str, exist_ok: bool = True) -> None:
        await self._run(os.makedirs, self._abs(path), exist_ok=exist_ok)

    @asynccontextmanager
    async def acquire_lock(self, key: str, ttl: int = 300) -> AsyncIterator[None]:
        """File lock ``__locks__/<key>.lock``; stale holders are evicted."""
        lock_path = os.path.join(self._lock_dir, f"{key}.lock")
        os.makedirs(os.path.dirname(lock_path), exist_ok=True)

        def _try_acquire() -> bool:
            try:
                fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                return False
            payload = {"timestamp": datetime.now(timezone.utc).isoformat(), "ttl": ttl}
            try:
                os.write(fd, json.dumps(payload).encode("utf-8"))
            finally:
                os.close(fd)
            return True

        def _evict_stale() -> bool:
            try:
                with open(lock_path, "r", encoding="utf-8") as f:
                    data = json.load(f)
                stamp = datetime.fromisoformat(data["timestamp"])
                age = datetime.now(timezone.utc) - stamp
                if age <= timedelta(seconds=data.get("ttl", ttl)):
                    return False
                logger.warning("removing stale lock %s (age %s)", key, age)
            except FileNotFoundError:
                return True
            except (ValueError, KeyError, TypeError):
                logger.warning("removing unreadable lock %s", key)
            try:
                os.remove(lock_path)
            except FileNotFoundError:
                pass
            return True

        while not await self._run(_try_acquire):
            if not await self._run(_evict_stale):
                await asyncio.sleep(self.poll_interval)
        try:
            yield None
        finally:

            def _release() -> None:
                try:
                    os.remove(lock_path)
                except FileNotFoundError:
                    pass

            await self._run(_release)


__all__ = ["LOCK_DIR", "LocalStorageBackend", "StorageBackend"]
