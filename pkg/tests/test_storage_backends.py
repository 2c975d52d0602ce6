import asyncio
import json
import os
from pathlib import Path

import pytest

from mpesolver.storage_backends import LocalStorageBackend


@pytest.mark.asyncio
async def test_local_backend_basic_ops(tmp_path):
    backend = LocalStorageBackend(str(tmp_path / "base"))
    path = "run/values.csv"
    await backend.write_bytes(path, b"t,x\n")
    assert await backend.exists(path)
    assert await backend.read_bytes(path) == b"t,x\n"
    assert "values.csv" in await backend.listdir("run")
    await backend.delete(path)
    assert not await backend.exists(path)


@pytest.mark.asyncio
async def test_local_backend_exclusive_write(tmp_path):
    backend = LocalStorageBackend(str(tmp_path / "base"))
    await backend.write_bytes("file.txt", b"one")
    with pytest.raises(FileExistsError):
        await backend.write_bytes("file.txt", b"two", exclusive=True)
    assert await backend.read_bytes("file.txt") == b"one"


@pytest.mark.asyncio
async def test_local_backend_replace(tmp_path):
    backend = LocalStorageBackend(str(tmp_path / "base"))
    await backend.write_bytes("run/manifest.json", b"old")
    await backend.write_bytes("run/manifest.json.tmp", b"new")
    await backend.replace("run/manifest.json.tmp", "run/manifest.json")
    assert await backend.read_bytes("run/manifest.json") == b"new"
    assert not await backend.exists("run/manifest.json.tmp")


@pytest.mark.asyncio
async def test_local_backend_listdir_missing(tmp_path):
    backend = LocalStorageBackend(str(tmp_path / "base"))
    assert await backend.listdir("missing") == []


@pytest.mark.asyncio
async def test_local_backend_delete_missing_is_noop(tmp_path):
    backend = LocalStorageBackend(str(tmp_path / "base"))
    await backend.delete("nothing/here.csv")


@pytest.mark.asyncio
async def test_local_backend_rejects_escaping_paths(tmp_path):
    backend = LocalStorageBackend(str(tmp_path / "base"))
    with pytest.raises(ValueError):
        await backend.write_bytes("../outside.txt", b"x")


@pytest.mark.asyncio
async def test_local_backend_lock_serializes(tmp_path):
    backend = LocalStorageBackend(str(tmp_path / "base"), poll_interval=0.01)
    order = []
    acquired = asyncio.Event()

    async def holder():
        async with backend.acquire_lock("run"):
            acquired.set()
            order.append("holder-in")
            await asyncio.sleep(0.1)
            order.append("holder-out")

    task = asyncio.create_task(holder())
    await acquired.wait()
    async with backend.acquire_lock("run"):
        order.append("second")
    await task
    assert order == ["holder-in", "holder-out", "second"]


@pytest.mark.asyncio
async def test_local_backend_lock_stale(tmp_path):
    backend = LocalStorageBackend(str(tmp_path / "base"))
    stale_file = Path(backend._lock_dir) / "runs" / "a.lock"
    stale_file.parent.mkdir(parents=True, exist_ok=True)
    stale_file.write_text(
        json.dumps({"timestamp": "2000-01-01T00:00:00+00:00", "ttl": 1}), encoding="utf-8"
    )
    async with backend.acquire_lock("runs/a", ttl=1):
        assert stale_file.exists()
    assert not stale_file.exists()


@pytest.mark.asyncio
async def test_local_backend_lock_invalid_json(tmp_path):
    backend = LocalStorageBackend(str(tmp_path / "base"))
    lock_file = Path(backend._lock_dir) / "invalid.lock"
    lock_file.write_text("not-json", encoding="utf-8")
    async with backend.acquire_lock("invalid", ttl=1):
        pass
    assert not lock_file.exists()


@pytest.mark.asyncio
async def test_local_backend_lock_release_missing(tmp_path):
    backend = LocalStorageBackend(str(tmp_path / "base"))
    lock_file = Path(backend._lock_dir) / "release.lock"
    async with backend.acquire_lock("release"):
        os.remove(lock_file)
    assert not lock_file.exists()
