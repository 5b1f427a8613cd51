"""On-disk scene records.

Layout of a dataset directory:

* ``index.jsonl`` - first line is a header object (format, version, sizes);
  each following line describes one record (id, scenario seed and kind,
  has_future, start offsets, byte offset into the blob).
* ``data.bin`` - per record, in order: current raster (H*W class bytes),
  future raster (only when has_future), expert trajectory (T*3 little-endian
  float32) and ego status (7 little-endian float32).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..geometry import EgoStatus
from .episode import initial_state, make_context
from .expert import SUBSTEP, simulate_expert
from .world import GridConfig, Kind, advance, generate_scenario, rasterize_bev

FORMAT = "foresight-scenes"
VERSION = 1
KINDS = list(Kind)


@dataclass(frozen=True)
class DataConfig:
    T: int = 8
    dt: float = 0.5
    t_f: float = 1.5
    no_future_fraction: float = 0.1
    max_lateral: float = 1.0
    max_heading: float = 0.1
    restart_fraction: float = 0.5
    grid: GridConfig = GridConfig()

    def __post_init__(self):
        if not 0.0 <= self.no_future_fraction <= 1.0:
            raise ValueError("no_future_fraction must lie in [0, 1]")
        if self.t_f <= 0 or abs(round(self.t_f / SUBSTEP) * SUBSTEP - self.t_f) > 1e-9:
            raise ValueError("t_f must be a positive multiple of the simulation substep")


@dataclass(frozen=True)
class SceneRecord:
    id: int
    seed: int
    kind: Kind
    status: EgoStatus
    raster: np.ndarray
    trajectory: np.ndarray
    future: np.ndarray | None
    offsets: dict

    @property
    def has_future(self) -> bool:
        return self.future is not None


def n_without_future(n: int, fraction: float) -> int:
    return int(round(n * fraction))


def make_record(i: int, seed: int, cfg: DataConfig, has_future: bool) -> SceneRecord:
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(i),)))
    kind = KINDS[int(rng.integers(len(KINDS)))]
    scn_seed = int(rng.integers(2 ** 31 - 1))
    lateral = float(rng.uniform(-cfg.max_lateral, cfg.max_lateral))
    heading = float(rng.uniform(-cfg.max_heading, cfg.max_heading))
    t0 = cfg.T * cfg.dt if rng.random() < cfg.restart_fraction else 0.0
    scn = generate_scenario(scn_seed, kind)
    if t0 > 0:
        roll = simulate_expert(scn, duration=t0)
        pose, v, a, k = roll.poses[-1], roll.speed[-1], roll.accel[-1], roll.kappa[-1]
    else:
        pose = np.zeros(3)
        v, a, k = initial_state(scn)
    start = pose + np.array([-np.sin(pose[2]) * lateral, np.cos(pose[2]) * lateral, heading])
    ctx = make_context(scn, start, v, a, k, t0, cfg.T, cfg.dt, cfg.grid)
    future = None
    if has_future:
        roll = simulate_expert(ctx.scenario, start, v0=v, a0=a, duration=cfg.t_f)
        future = rasterize_bev(advance(ctx.scenario, cfg.t_f), roll.poses[-1], cfg.grid)
    offsets = {"lateral": lateral, "heading": heading, "time": t0}
    return SceneRecord(int(i), scn_seed, kind, ctx.status, ctx.observation.raster,
                       ctx.human, future, offsets)


def build_dataset(n: int, seed: int, out, cfg: DataConfig = DataConfig()) -> Path:
    """Write ``n`` records; the trailing ``no_future_fraction`` of them has no future frame."""
    if n < 1:
        raise ValueError("dataset needs at least one record")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cut = n - n_without_future(n, cfg.no_future_fraction)
    header = {"format": FORMAT, "version": VERSION, "n": n, "seed": int(seed), "T": cfg.T,
              "dt": cfg.dt, "t_f": cfg.t_f, "grid": cfg.grid.size,
              "resolution": cfg.grid.resolution, "no_future_fraction": cfg.no_future_fraction}
    lines = [json.dumps(header, sort_keys=True)]
    tmp_blob, tmp_index = out / "data.bin.tmp", out / "index.jsonl.tmp"
    with open(tmp_blob, "wb") as blob:
        for i in range(n):
            rec = make_record(i, seed, cfg, has_future=i < cut)
            entry = {"id": rec.id, "seed": rec.seed, "kind": rec.kind.value,
                     "has_future": rec.has_future, "offsets": rec.offsets, "blob": blob.tell()}
            blob.write(rec.raster.astype(np.uint8).tobytes())
            if rec.has_future:
                blob.write(rec.future.astype(np.uint8).tobytes())
            blob.write(rec.trajectory.astype("<f4").tobytes())
            blob.write(rec.status.features().astype("<f4").tobytes())
            lines.append(json.dumps(entry, sort_keys=True))
    tmp_index.write_text("\n".join(lines) + "\n")
    os.replace(tmp_blob, out / "data.bin")
    os.replace(tmp_index, out / "index.jsonl")
    return out


@dataclass
class Dataset:
    """Columnar view of a dataset directory, ready for batching."""
    header: dict
    entries: list
    raster: np.ndarray      # (N, H, W) uint8
    future: np.ndarray      # (N, H, W) uint8, zeros where has_future is false
    has_future: np.ndarray  # (N,) bool
    trajectory: np.ndarray  # (N, T, 3) float64
    status: np.ndarray      # (N, 7) float64

    def __len__(self):
        return len(self.entries)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.header, [self.entries[i] for i in idx], self.raster[idx], self.future[idx],
                       self.has_future[idx], self.trajectory[idx], self.status[idx])


def load_dataset(path) -> Dataset:
    path = Path(path)
    lines = (path / "index.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("format") != FORMAT or header.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported dataset header {header}")
    entries = [json.loads(line) for line in lines[1:]]
    blob = (path / "data.bin").read_bytes()
    H, T = header["grid"], header["T"]
    n = len(entries)
    raster = np.zeros((n, H, H), np.uint8)
    future = np.zeros((n, H, H), np.uint8)
    traj = np.zeros((n, T, 3))
    status = np.zeros((n, 7))
    has = np.zeros(n, bool)
    for k, e in enumerate(entries):
        off = e["blob"]
        raster[k] = np.frombuffer(blob, np.uint8, H * H, off).reshape(H, H)
        off += H * H
        if e["has_future"]:
            has[k] = True
            future[k] = np.frombuffer(blob, np.uint8, H * H, off).reshape(H, H)
            off += H * H
        traj[k] = np.frombuffer(blob, "<f4", T * 3, off).reshape(T, 3)
        off += T * 3 * 4
        status[k] = np.frombuffer(blob, "<f4", 7, off)
    return Dataset(header, entries, raster, future, has, traj, status)
