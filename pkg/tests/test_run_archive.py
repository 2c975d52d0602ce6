import hashlib

import numpy as np
import pandas as pd
import pytest

from mpesolver.ode_backend import ControlField, TimeGrid, ValueField
from mpesolver.presets import make_cyber, make_kuramoto1
from mpesolver.run_archive import (
    MANIFEST,
    RunArchive,
    control_from_table,
    control_table,
    parse_csv,
    value_table,
)
from mpesolver.storage_backends import LocalStorageBackend


def random_control(model, grid, seed=0):
    rng = np.random.default_rng(seed)
    shape = (grid.M + 1, model.d, model.space.size, model.d - 1)
    return ControlField(grid, rng.uniform(0, 2, size=shape))


def test_table_layouts():
    model = make_cyber(N=2, T=1.0)
    grid = TimeGrid(1.0, 3)
    values = value_table(model, ValueField(grid, np.arange(4 * 4 * 10, dtype=float).reshape(4, 4, 10)))
    assert list(values.columns) == ["t", "x", "n_1", "n_2", "n_3", "n_4", "v"]
    assert len(values) == 4 * 4 * 10
    first = values.iloc[0]
    assert (first["t"], first["x"], first["v"]) == (0.0, "DI", 0.0)
    assert values.iloc[10]["x"] == "DS"
    assert values.iloc[1][["n_1", "n_2", "n_3", "n_4"]].tolist() == list(model.space.counts(1))
    assert values.iloc[0][["n_1", "n_2", "n_3", "n_4"]].tolist() == [0, 0, 0, 2]
    controls = control_table(model, random_control(model, grid))
    assert list(controls.columns) == ["t", "x", "n_1", "n_2", "n_3", "n_4", "a_1", "a_2", "a_3"]


def test_control_table_round_trip():
    model = make_kuramoto1(N=4)
    grid = TimeGrid(1.0, 7)
    control = random_control(model, grid)
    raw = control_table(model, control).to_csv(index=False).encode()
    restored = control_from_table(parse_csv(raw), model)
    assert restored.grid == grid
    assert np.array_equal(restored.data, control.data)
    shuffled = control_table(model, control).sample(frac=1.0, random_state=0)
    assert np.array_equal(control_from_table(shuffled.reset_index(drop=True), model).data, control.data)


def test_control_table_mismatches(tmp_path):
    model = make_kuramoto1(N=4)
    grid = TimeGrid(1.0, 5)
    frame = control_table(model, random_control(model, grid))
    with pytest.raises(ValueError, match="columns"):
        control_from_table(frame.drop(columns=["a_1"]), model)
    with pytest.raises(ValueError, match="rows"):
        control_from_table(control_table(make_kuramoto1(N=3), random_control(make_kuramoto1(N=3), grid)), model)
    with pytest.raises(ValueError, match="span"):
        control_from_table(frame.assign(t=frame["t"] * 2), model)
    relabeled = frame.copy()
    relabeled["x"] = relabeled["x"].replace({"0": "A"})
    with pytest.raises(ValueError, match="state label"):
        control_from_table(relabeled, model)
    duplicated = frame.copy()
    duplicated.loc[1, ["n_1", "n_2"]] = duplicated.loc[0, ["n_1", "n_2"]].to_numpy()
    with pytest.raises(ValueError, match="exactly once"):
        control_from_table(duplicated, model)
    with pytest.raises(ValueError):
        RunArchive(LocalStorageBackend(str(tmp_path)), " ")


@pytest.mark.asyncio
async def test_archive_manifest_records_digests(tmp_path):
    backend = LocalStorageBackend(str(tmp_path))
    archive = RunArchive(backend, "picard-demo", command="picard", config={"seed": 1})
    frame = pd.DataFrame({"iter": [1, 2], "residual": [0.5, 0.25]})
    path = await archive.write_table("convergence.csv", frame)
    await archive.write_json("summary.json", {"b": 1, "a": [1.5]})
    assert path == "picard-demo/convergence.csv"
    raw = (tmp_path / "picard-demo" / "convergence.csv").read_bytes()
    assert raw == b"iter,residual\n1,0.5\n2,0.25\n"
    assert (tmp_path / "picard-demo" / "summary.json").read_bytes() == b'{"a":[1.5],"b":1}'
    manifest = await archive.manifest()
    entry = manifest["artifacts"]["convergence.csv"]
    assert entry == {"kind": "table", "bytes": len(raw), "sha256": hashlib.sha256(raw).hexdigest()}
    assert manifest["command"] == "picard"
    assert manifest["config"] == {"seed": 1}
    assert (tmp_path / "picard-demo" / MANIFEST).exists()
    assert not (tmp_path / "picard-demo" / f"{MANIFEST}.tmp").exists()
    assert not any((tmp_path / "__locks__").iterdir())
    assert (await archive.read_table("convergence.csv"))["residual"].tolist() == [0.5, 0.25]
    assert await archive.read_json("summary.json") == {"a": [1.5], "b": 1}


@pytest.mark.asyncio
async def test_archive_verify_detects_tampering(tmp_path):
    backend = LocalStorageBackend(str(tmp_path))
    archive = RunArchive(backend, "run")
    await archive.write_json("a.json", {"x": 1})
    await archive.write_checkpoint("control.json", {"format": "demo"})
    assert await archive.verify() == {"a.json": True, "control.json": True}
    (tmp_path / "run" / "a.json").write_bytes(b'{"x":2}')
    (tmp_path / "run" / "control.json").unlink()
    assert await archive.verify() == {"a.json": False, "control.json": False}
    assert (await archive.manifest())["artifacts"]["control.json"]["kind"] == "checkpoint"


@pytest.mark.asyncio
async def test_unreadable_manifest_is_replaced(tmp_path):
    backend = LocalStorageBackend(str(tmp_path))
    (tmp_path / "run").mkdir()
    (tmp_path / "run" / MANIFEST).write_bytes(b"\xff\xfe")
    archive = RunArchive(backend, "run")
    await archive.write_json("a.json", [1])
    assert list((await archive.manifest())["artifacts"]) == ["a.json"]
