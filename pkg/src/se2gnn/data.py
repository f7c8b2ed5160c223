"""Dataset builders and on-disk formats.

Two families: the seven 2D tetromino shapes with rotation augmentation, and
irregular-graph smoke trajectories sampled off the grid solver (random node
subset, Delaunay edges, per-node field values, boundary normals).

Formats. Trajectories are a small binary format, magic ``SE2DS\\x00\\x01``,
then little-endian: u32 N, T, E; f32 force[2]; f32 positions[N*2]; f32
normals[N*2]; u32 edges[E*2] (undirected pairs, i < j); per timestep f32 u[N]
then f32 v[N*2]. Tetris samples and manifests are JSON. Manifests carry
sha256 checksums of every file they list; generation is byte-deterministic
given (seed, config).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import multiprocessing
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geom, sim

TRAJECTORY_MAGIC = b"SE2DS\x00\x01"
MANIFEST_FORMAT = "se2gnn-manifest-v1"
TETRIS_FORMAT = "se2gnn-tetris-v1"


class DataError(ValueError):
    """Dataset request is inconsistent or unsatisfiable."""


class CorruptFileError(DataError):
    """File content does not match its format or checksum."""


class IntegrityError(DataError):
    """Manifest references a file that is missing."""


# --------------------------------------------------------------------------
# tetris shapes
# --------------------------------------------------------------------------

TETROMINO_NAMES = ("O", "I", "T", "S", "Z", "L", "J")

_BASE_CELLS = {
    "O": [(0, 0), (1, 0), (0, 1), (1, 1)],
    "I": [(0, 0), (1, 0), (2, 0), (3, 0)],
    "T": [(0, 0), (1, 0), (2, 0), (1, 1)],
    "S": [(0, 0), (1, 0), (1, 1), (2, 1)],
    "Z": [(0, 1), (1, 1), (1, 0), (2, 0)],
    "L": [(0, 0), (0, 1), (0, 2), (1, 0)],
    "J": [(0, 0), (1, 0), (1, 1), (1, 2)],
}

AUGMENTATION_ROWS = {
    "1x2pi": (1, 2.0 * np.pi),
    "2xpi": (2, np.pi),
    "4xpi2": (4, np.pi / 2.0),
    "8xpi4": (8, np.pi / 4.0),
}

TEST_ROW = "test"
TEST_COPIES_PER_SHAPE = 100


def tetris_shapes() -> np.ndarray:
    """The 7 canonical shapes, (7, 4, 2), each centered to zero mass."""
    out = np.zeros((7, 4, 2))
    for k, name in enumerate(TETROMINO_NAMES):
        pts = np.array(_BASE_CELLS[name], dtype=float)
        out[k] = pts - pts.mean(axis=0)
    return out


@dataclass(frozen=True, eq=False)
class TetrisSample:
    positions: np.ndarray   # (4, 2), zero mean
    label: int


def _rotated(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return points @ np.array([[c, -s], [s, c]]).T


def gen_tetris(row: str, seed: int = 0) -> list[TetrisSample]:
    """Augmentation rows produce deterministic multiples of the row angle;
    the ``test`` row produces 100 uniformly random rotations per shape."""
    shapes = tetris_shapes()
    samples: list[TetrisSample] = []
    if row == TEST_ROW:
        rng = np.random.default_rng(seed)
        for label in range(7):
            for _ in range(TEST_COPIES_PER_SHAPE):
                angle = rng.uniform(0.0, 2.0 * np.pi)
                samples.append(TetrisSample(_rotated(shapes[label], angle), label))
        return samples
    if row not in AUGMENTATION_ROWS:
        raise DataError(
            f"unknown row {row!r}; expected one of {sorted(AUGMENTATION_ROWS)} or {TEST_ROW!r}")
    copies, angle = AUGMENTATION_ROWS[row]
    for label in range(7):
        for k in range(copies):
            samples.append(TetrisSample(_rotated(shapes[label], k * angle), label))
    return samples


def save_tetris(samples: list[TetrisSample], path) -> None:
    doc = {
        "format": TETRIS_FORMAT,
        "samples": [
            {"label": int(s.label),
             "positions": [[float(x), float(y)] for x, y in s.positions]}
            for s in samples
        ],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_tetris(path) -> list[TetrisSample]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != TETRIS_FORMAT:
        raise CorruptFileError(f"{path}: not a tetris dataset")
    return [TetrisSample(np.array(s["positions"], dtype=float), int(s["label"]))
            for s in doc["samples"]]


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------

@dataclass
class Trajectory:
    node_positions: np.ndarray   # (N, 2)
    edges: np.ndarray            # (U, 2) undirected, i < j
    boundary_normals: np.ndarray  # (N, 2), unit or zero
    force: np.ndarray            # (2,)
    u: np.ndarray                # (T, N)
    v: np.ndarray                # (T, N, 2)

    def __post_init__(self):
        n = self.node_positions.shape[0]
        t = self.u.shape[0]
        if (self.node_positions.shape != (n, 2) or self.boundary_normals.shape != (n, 2)
                or self.u.shape != (t, n) or self.v.shape != (t, n, 2)
                or self.force.shape != (2,) or self.edges.ndim != 2
                or self.edges.shape[1] != 2):
            raise DataError("trajectory arrays have inconsistent shapes")

    @property
    def n_nodes(self) -> int:
        return self.node_positions.shape[0]

    @property
    def n_steps(self) -> int:
        return self.u.shape[0]

    def graph(self) -> geom.Graph2D:
        return geom.Graph2D.build(self.node_positions,
                                  geom.undirected_to_directed(self.edges),
                                  boundary_normals=self.boundary_normals)


def write_trajectory(traj: Trajectory, path) -> None:
    n, t, e = traj.n_nodes, traj.n_steps, len(traj.edges)
    with open(path, "wb") as fh:
        fh.write(TRAJECTORY_MAGIC)
        fh.write(np.array([n, t, e], dtype="<u4").tobytes())
        fh.write(np.asarray(traj.force, dtype="<f4").tobytes())
        fh.write(np.asarray(traj.node_positions, dtype="<f4").tobytes())
        fh.write(np.asarray(traj.boundary_normals, dtype="<f4").tobytes())
        fh.write(np.asarray(traj.edges, dtype="<u4").tobytes())
        for k in range(t):
            fh.write(np.asarray(traj.u[k], dtype="<f4").tobytes())
            fh.write(np.asarray(traj.v[k], dtype="<f4").tobytes())


def read_trajectory(path) -> Trajectory:
    def take(fh, count, dtype):
        itemsize = np.dtype(dtype).itemsize
        buf = fh.read(count * itemsize)
        if len(buf) != count * itemsize:
            raise CorruptFileError(f"{path}: truncated")
        return np.frombuffer(buf, dtype=dtype)

    with open(path, "rb") as fh:
        if fh.read(len(TRAJECTORY_MAGIC)) != TRAJECTORY_MAGIC:
            raise CorruptFileError(f"{path}: not a trajectory file (bad magic)")
        n, t, e = (int(x) for x in take(fh, 3, "<u4"))
        force = take(fh, 2, "<f4").astype(float)
        positions = take(fh, 2 * n, "<f4").astype(float).reshape(n, 2)
        normals = take(fh, 2 * n, "<f4").astype(float).reshape(n, 2)
        edges = take(fh, 2 * e, "<u4").astype(np.int64).reshape(e, 2)
        u = np.zeros((t, n))
        v = np.zeros((t, n, 2))
        for k in range(t):
            u[k] = take(fh, n, "<f4").astype(float)
            v[k] = take(fh, 2 * n, "<f4").astype(float).reshape(n, 2)
        if fh.read(1):
            raise CorruptFileError(f"{path}: trailing bytes")
    return Trajectory(node_positions=positions, edges=edges,
                      boundary_normals=normals, force=force, u=u, v=v)


# --------------------------------------------------------------------------
# node sampling and field interpolation
# --------------------------------------------------------------------------

def sample_nodes(cfg: sim.SimConfig, n_nodes: int, rng: np.random.Generator) -> np.ndarray:
    """Distinct cell-center positions, drawn uniformly over fluid cells."""
    solid = cfg.solid_mask()
    fluid_flat = np.flatnonzero(~solid.ravel())
    if n_nodes > fluid_flat.size:
        raise DataError(f"requested {n_nodes} nodes, grid has {fluid_flat.size} fluid cells")
    chosen = rng.choice(fluid_flat, size=n_nodes, replace=False)
    ii, jj = np.unravel_index(chosen, solid.shape)
    return np.stack([(ii + 0.5) * cfg.dx, (jj + 0.5) * cfg.dx], axis=-1)


def interpolate_to_nodes(field: np.ndarray, positions: np.ndarray,
                         cfg: sim.SimConfig) -> np.ndarray:
    """Bilinear sample of a grid field at physical positions."""
    xi = positions[:, 0] / cfg.dx - 0.5
    yi = positions[:, 1] / cfg.dx - 0.5
    vals, _, _ = sim.bilinear_sample(field, xi, yi)
    return vals


def boundary_normals(positions: np.ndarray, cfg: sim.SimConfig) -> np.ndarray:
    """Unit normals pointing into the fluid for nodes within one cell of a
    wall or of the obstacle surface; zero for interior nodes. A node adjacent
    to several boundaries gets the normalized sum."""
    n = np.zeros_like(positions)
    lx, ly = cfg.extent
    d = cfg.dx
    n[positions[:, 0] < d] += [1.0, 0.0]
    n[positions[:, 0] > lx - d] += [-1.0, 0.0]
    n[positions[:, 1] < d] += [0.0, 1.0]
    n[positions[:, 1] > ly - d] += [0.0, -1.0]
    if cfg.obstacle is not None:
        rel = positions - np.asarray(cfg.obstacle.center)
        dist = np.linalg.norm(rel, axis=1)
        near = dist < cfg.obstacle.radius + d
        n[near] += rel[near] / dist[near, None]
    norms = np.linalg.norm(n, axis=1)
    nz = norms > 0
    n[nz] /= norms[nz, None]
    return n


def build_trajectory(cfg: sim.SimConfig, n_nodes: int, rng: np.random.Generator,
                     triangulate=geom.delaunay, max_attempts: int = 5) -> Trajectory:
    """Simulate on the grid, then sample a node graph and per-node fields."""
    if cfg.n_steps < 4:
        raise DataError("trajectories need n_steps >= 4 (3 history steps + target)")
    states = sim.simulate_trajectory(cfg)
    positions = edges = None
    for _ in range(max_attempts):
        candidate = sample_nodes(cfg, n_nodes, rng)
        try:
            edges = triangulate(candidate)
        except geom.GeometryError:
            continue
        positions = candidate
        break
    if positions is None:
        raise DataError(f"triangulation failed {max_attempts} times")
    u = np.stack([interpolate_to_nodes(s.u, positions, cfg) for s in states])
    v = np.stack([
        np.stack([interpolate_to_nodes(s.v[..., 0], positions, cfg),
                  interpolate_to_nodes(s.v[..., 1], positions, cfg)], axis=-1)
        for s in states])
    return Trajectory(node_positions=positions, edges=edges,
                      boundary_normals=boundary_normals(positions, cfg),
                      force=np.asarray(cfg.force, dtype=float), u=u, v=v)


# --------------------------------------------------------------------------
# dataset assembly
# --------------------------------------------------------------------------

def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _trajectory_config(scenario: str, base: sim.SimConfig, force_mode: str,
                       force_range: float, rng: np.random.Generator) -> sim.SimConfig:
    if force_mode == "fixed":
        force = (0.0, 0.5)
    elif force_mode == "varying":
        force = tuple(float(f) for f in rng.uniform(-force_range, force_range, 2))
    else:
        raise DataError(f"force_mode must be fixed or varying, got {force_mode!r}")
    changes: dict = {"force": force, "seed": int(rng.integers(2 ** 31))}
    if scenario == "obstacle":
        # horizontal placement varies per trajectory; heights stay put
        lx, _ = base.extent
        ox = float(rng.uniform(0.35, 0.65) * lx)
        ix = float(rng.uniform(0.35, 0.65) * lx)
        changes["obstacle"] = dataclasses.replace(base.obstacle, center=(ox, base.obstacle.center[1]))
        changes["inlet"] = dataclasses.replace(base.inlet, center=(ix, base.inlet.center[1]))
    return dataclasses.replace(base, **changes)


def _build_one(args) -> Trajectory:
    cfg, n_nodes, node_seed = args
    return build_trajectory(cfg, n_nodes, np.random.default_rng(node_seed))


def build_ns_dataset(out_dir, scenario: str, n_traj: int, n_nodes: int,
                     seed: int = 0, force_mode: str = "varying",
                     base_cfg: sim.SimConfig | None = None,
                     force_range: float = 0.7, jobs: int = 1) -> dict:
    """Write ``n_traj`` trajectory files plus a checksummed manifest.

    Each trajectory draws its own force, solver seed, and node sample from an
    independent child of ``seed``, so outputs are byte-identical regardless
    of ``jobs``.
    """
    if scenario not in ("open", "obstacle"):
        raise DataError(f"scenario must be open or obstacle, got {scenario!r}")
    if n_traj < 1:
        raise DataError("n_traj must be >= 1")
    base = base_cfg if base_cfg is not None else (
        sim.open_box_config() if scenario == "open" else sim.obstacle_inlet_config())

    tasks = []
    for child in np.random.SeedSequence(seed).spawn(n_traj):
        rng = np.random.default_rng(child)
        cfg = _trajectory_config(scenario, base, force_mode, force_range, rng)
        tasks.append((cfg, n_nodes, int(rng.integers(2 ** 31))))

    if jobs > 1:
        with multiprocessing.Pool(jobs) as pool:
            trajectories = pool.map(_build_one, tasks)
    else:
        trajectories = [_build_one(t) for t in tasks]

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for k, traj in enumerate(trajectories):
        name = f"traj_{k:04d}.se2ds"
        write_trajectory(traj, out / name)
        files.append({
            "name": name,
            "sha256": _sha256(out / name),
            "n_nodes": traj.n_nodes,
            "n_steps": traj.n_steps,
            "force": [float(f) for f in traj.force],
        })
    manifest = {
        "format": MANIFEST_FORMAT,
        "kind": f"ns-{scenario}",
        "counts": {"trajectories": n_traj, "nodes": n_nodes},
        "seed": seed,
        "params": {
            "force_mode": force_mode,
            "force_range": force_range,
            "grid": [base.nx, base.ny],
            "dx": base.dx,
            "dt": base.dt,
            "n_steps": base.n_steps,
        },
        "files": files,
    }
    write_manifest(manifest, out / "manifest.json")
    return manifest


def build_tetris_dataset(out_dir, row: str, seed: int = 0) -> dict:
    samples = gen_tetris(row, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = f"tetris_{row}.json"
    save_tetris(samples, out / name)
    labels = [s.label for s in samples]
    manifest = {
        "format": MANIFEST_FORMAT,
        "kind": "tetris",
        "counts": {"samples": len(samples),
                   "per_label": [labels.count(k) for k in range(7)]},
        "seed": seed,
        "params": {"row": row},
        "files": [{"name": name, "sha256": _sha256(out / name)}],
    }
    write_manifest(manifest, out / "manifest.json")
    return manifest


def write_manifest(manifest: dict, path) -> None:
    Path(path).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def load_manifest(path, verify: bool = True) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != MANIFEST_FORMAT:
        raise CorruptFileError(f"{path}: not a dataset manifest")
    if verify:
        for entry in doc["files"]:
            target = path.parent / entry["name"]
            if not target.exists():
                raise IntegrityError(f"{path}: missing file {entry['name']!r}")
            digest = _sha256(target)
            if digest != entry["sha256"]:
                raise CorruptFileError(
                    f"{target}: checksum mismatch (expected {entry['sha256'][:12]}..., "
                    f"got {digest[:12]}...)")
    return doc


def load_ns_dataset(manifest_path, verify: bool = True) -> list[Trajectory]:
    doc = load_manifest(manifest_path, verify=verify)
    if not doc["kind"].startswith("ns-"):
        raise DataError(f"{manifest_path}: not a trajectory dataset ({doc['kind']})")
    root = Path(manifest_path).parent
    return [read_trajectory(root / entry["name"]) for entry in doc["files"]]
