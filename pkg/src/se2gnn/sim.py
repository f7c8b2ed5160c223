"""2D incompressible smoke solver on a collocated grid (ground-truth data).

One step = MacCormack advection of smoke and velocity, buoyancy forcing,
optional explicit viscosity, optional smoke inlet, then an exact discrete
Helmholtz projection. The projection solves the normal equations of the
masked divergence operator with conjugate gradients, so the post-projection
divergence equals the CG residual and can be driven as low as requested.

Everything here runs in float64 regardless of the network precision; the
solver produces reference data, not gradients. Fields are indexed u[i, j]
with i along x and j along y, values living at cell centers (i + 1/2) * dx.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class SolverFailure(RuntimeError):
    """Pressure solve failed to reach tolerance within the iteration cap."""


class SimError(ValueError):
    """Simulation configured or driven inconsistently."""


@dataclass(frozen=True)
class Disk:
    center: tuple[float, float]
    radius: float


@dataclass(frozen=True)
class Inlet:
    center: tuple[float, float]
    radius: float
    intensity: float


@dataclass
class SimConfig:
    nx: int = 64
    ny: int = 64
    dx: float = 1.0
    dt: float = 1.5
    viscosity: float = 0.0
    density: float = 1.0
    force: tuple[float, float] = (0.0, 0.5)
    obstacle: Disk | None = None
    inlet: Inlet | None = None
    n_steps: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.nx < 8 or self.ny < 8:
            raise SimError(f"grid must be at least 8x8, got {self.nx}x{self.ny}")
        if self.dx <= 0 or self.dt <= 0:
            raise SimError("dx and dt must be positive")
        if self.viscosity < 0 or self.density <= 0:
            raise SimError("viscosity must be >= 0 and density > 0")
        half = 0.5 * min(self.nx, self.ny) * self.dx
        for disk in (self.obstacle, self.inlet):
            if disk is not None and not 0 < disk.radius < half:
                raise SimError(f"radius {disk.radius} outside (0, {half})")
        if self.n_steps < 1:
            raise SimError("n_steps must be >= 1")

    @property
    def extent(self) -> tuple[float, float]:
        return self.nx * self.dx, self.ny * self.dx

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        xs = (np.arange(self.nx) + 0.5) * self.dx
        ys = (np.arange(self.ny) + 0.5) * self.dx
        return np.meshgrid(xs, ys, indexing="ij")

    def solid_mask(self) -> np.ndarray:
        """A cell is solid when its center lies inside the obstacle."""
        mask = np.zeros((self.nx, self.ny), dtype=bool)
        if self.obstacle is not None:
            gx, gy = self.cell_centers()
            cx, cy = self.obstacle.center
            mask = (gx - cx) ** 2 + (gy - cy) ** 2 < self.obstacle.radius ** 2
        return mask


@dataclass
class FluidState:
    u: np.ndarray                 # (nx, ny) smoke
    v: np.ndarray                 # (nx, ny, 2) velocity
    p: np.ndarray                 # (nx, ny) pressure
    solid_mask: np.ndarray        # (nx, ny) bool

    def copy(self) -> "FluidState":
        return FluidState(self.u.copy(), self.v.copy(), self.p.copy(),
                          self.solid_mask.copy())


# --------------------------------------------------------------------------
# interpolation and advection
# --------------------------------------------------------------------------

def bilinear_sample(f: np.ndarray, xi: np.ndarray, yi: np.ndarray):
    """Sample ``f`` at fractional index coordinates, clamped to the border.

    Returns (values, stencil_min, stencil_max); the extrema are those of the
    four surrounding cells and feed the advection limiter.
    """
    nx, ny = f.shape
    xi = np.clip(xi, 0.0, nx - 1.0)
    yi = np.clip(yi, 0.0, ny - 1.0)
    x0 = np.clip(np.floor(xi).astype(np.int64), 0, nx - 2)
    y0 = np.clip(np.floor(yi).astype(np.int64), 0, ny - 2)
    tx = xi - x0
    ty = yi - y0
    f00 = f[x0, y0]
    f10 = f[x0 + 1, y0]
    f01 = f[x0, y0 + 1]
    f11 = f[x0 + 1, y0 + 1]
    val = (f00 * (1 - tx) * (1 - ty) + f10 * tx * (1 - ty)
           + f01 * (1 - tx) * ty + f11 * tx * ty)
    corners = np.stack([f00, f10, f01, f11])
    return val, corners.min(axis=0), corners.max(axis=0)


def advect_maccormack(f: np.ndarray, v: np.ndarray, dt: float, dx: float) -> np.ndarray:
    """Predictor-corrector semi-Lagrangian advection with a min-max limiter.

    The correction estimates the scheme's dispersive error by advecting the
    predicted field forward again; the limiter clamps the result to the
    bilinear stencil extrema of the backtraced point, which keeps the scheme
    overshoot-free (and in particular keeps nonnegative fields nonnegative).
    """
    nx, ny = f.shape
    ix, iy = np.meshgrid(np.arange(nx, dtype=float), np.arange(ny, dtype=float),
                         indexing="ij")
    sx = v[..., 0] * (dt / dx)
    sy = v[..., 1] * (dt / dx)
    ahead, lo, hi = bilinear_sample(f, ix - sx, iy - sy)
    back, _, _ = bilinear_sample(ahead, ix + sx, iy + sy)
    return np.clip(ahead + 0.5 * (f - back), lo, hi)


def apply_buoyancy(v: np.ndarray, u: np.ndarray, force, dt: float) -> np.ndarray:
    """v += dt * f * u: smoke couples into velocity through the body force."""
    return v + dt * np.asarray(force, dtype=float) * u[..., None]


def _laplacian(f: np.ndarray, dx: float) -> np.ndarray:
    padded = np.pad(f, 1, mode="edge")
    return (padded[2:, 1:-1] + padded[:-2, 1:-1] + padded[1:-1, 2:]
            + padded[1:-1, :-2] - 4.0 * f) / dx ** 2


def apply_inlet(u: np.ndarray, cfg: SimConfig) -> np.ndarray:
    if cfg.inlet is None:
        return u
    gx, gy = cfg.cell_centers()
    cx, cy = cfg.inlet.center
    inside = (gx - cx) ** 2 + (gy - cy) ** 2 < cfg.inlet.radius ** 2
    out = u.copy()
    out[inside] = cfg.inlet.intensity
    return out


# --------------------------------------------------------------------------
# divergence and projection
# --------------------------------------------------------------------------

def _grad_matrix(n: int, dx: float) -> np.ndarray:
    """1D derivative matrix: central interior, one-sided at the two ends."""
    g = np.zeros((n, n))
    g[0, 0], g[0, 1] = -1.0 / dx, 1.0 / dx
    g[-1, -2], g[-1, -1] = -1.0 / dx, 1.0 / dx
    idx = np.arange(1, n - 1)
    g[idx, idx - 1] = -0.5 / dx
    g[idx, idx + 1] = 0.5 / dx
    return g


def divergence(v: np.ndarray, dx: float) -> np.ndarray:
    """Central-difference divergence (one-sided at the domain edges)."""
    gx = _grad_matrix(v.shape[0], dx)
    gy = _grad_matrix(v.shape[1], dx)
    return gx @ v[..., 0] + v[..., 1] @ gy.T


class Projector:
    """Exact discrete Helmholtz projection under wall and solid constraints.

    Let M zero the wall-normal components on the domain edges and all
    components inside solids, and D be the divergence above. We solve
    (D M D^T) q = D M v by CG and return v' = M (v - D^T q); then
    D v' = D M v - (D M D^T) q is exactly the CG residual, so the returned
    field is divergence-free to the solve tolerance and satisfies the
    constraints exactly.
    """

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.gx = _grad_matrix(cfg.nx, cfg.dx)
        self.gy = _grad_matrix(cfg.ny, cfg.dx)
        solid = cfg.solid_mask()
        self.mask_x = np.ones((cfg.nx, cfg.ny))
        self.mask_y = np.ones((cfg.nx, cfg.ny))
        self.mask_x[0, :] = self.mask_x[-1, :] = 0.0   # no flow through x-walls
        self.mask_y[:, 0] = self.mask_y[:, -1] = 0.0   # no flow through y-walls
        self.mask_x[solid] = self.mask_y[solid] = 0.0
        self.solid = solid

    def constrain(self, v: np.ndarray) -> np.ndarray:
        out = v.copy()
        out[..., 0] *= self.mask_x
        out[..., 1] *= self.mask_y
        return out

    def _div(self, v: np.ndarray) -> np.ndarray:
        return self.gx @ v[..., 0] + v[..., 1] @ self.gy.T

    def _div_adjoint(self, q: np.ndarray) -> np.ndarray:
        return np.stack([self.gx.T @ q, q @ self.gy], axis=-1)

    def _normal_op(self, q: np.ndarray) -> np.ndarray:
        return self._div(self.constrain(self._div_adjoint(q)))

    def __call__(self, v: np.ndarray, rel_tol: float = 1e-6,
                 abs_div_tol: float | None = None, max_iter: int | None = None):
        """Returns (projected v, pressure-like field, residual 2-norm)."""
        cfg = self.cfg
        mv = self.constrain(v)
        b = self._div(mv)
        b_norm = float(np.linalg.norm(b))
        vmax = float(np.abs(mv).max())
        # secondary absolute target keeps max|div| well under the velocity
        # scale; the floor stops CG from chasing pure float64 roundoff
        # (divergence carries units of velocity / dx)
        if abs_div_tol is None:
            abs_div_tol = 2e-6 * max(vmax, 1e-12)
        floor = 1e-12 * max(vmax / self.cfg.dx, 1e-30)
        target = max(min(rel_tol * b_norm, abs_div_tol), floor)
        if b_norm <= target:
            return mv, np.zeros_like(b), b_norm

        q = np.zeros_like(b)
        r = b.copy()
        p = r.copy()
        rs = float(np.vdot(r, r).real)
        if max_iter is None:
            max_iter = 10 * cfg.nx * cfg.ny
        for _ in range(max_iter):
            ap = self._normal_op(p)
            denom = float(np.vdot(p, ap).real)
            if denom <= 0.0:
                raise SolverFailure("projection CG breakdown (singular direction)")
            alpha = rs / denom
            q += alpha * p
            r -= alpha * ap
            rs_new = float(np.vdot(r, r).real)
            if np.sqrt(rs_new) <= target:
                break
            p = r + (rs_new / rs) * p
            rs = rs_new
        else:
            raise SolverFailure(
                f"projection CG did not reach {target:.3e} in {max_iter} iterations "
                f"(residual {np.sqrt(rs):.3e})")
        projected = self.constrain(v - self._div_adjoint(q))
        pressure = (cfg.density / cfg.dt) * q
        return projected, pressure, float(np.sqrt(float(np.vdot(r, r).real)))


# --------------------------------------------------------------------------
# stepping
# --------------------------------------------------------------------------

def initial_state(cfg: SimConfig, u0: np.ndarray | None = None) -> FluidState:
    """Fluid at rest. Smoke is ``u0`` if given, else seeded Gaussian blobs
    (only when there is no inlet; inlet scenarios start empty)."""
    solid = cfg.solid_mask()
    if u0 is not None:
        u = np.array(u0, dtype=float)
        if u.shape != (cfg.nx, cfg.ny):
            raise SimError(f"u0 must be ({cfg.nx}, {cfg.ny}), got {u.shape}")
    elif cfg.inlet is None:
        u = _gaussian_blobs(cfg)
    else:
        u = np.zeros((cfg.nx, cfg.ny))
    u = np.clip(u, 0.0, None)
    u[solid] = 0.0
    return FluidState(u=u, v=np.zeros((cfg.nx, cfg.ny, 2)),
                      p=np.zeros((cfg.nx, cfg.ny)), solid_mask=solid)


def _gaussian_blobs(cfg: SimConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    gx, gy = cfg.cell_centers()
    lx, ly = cfg.extent
    u = np.zeros((cfg.nx, cfg.ny))
    for _ in range(int(rng.integers(3, 7))):
        cx = rng.uniform(0.2 * lx, 0.8 * lx)
        cy = rng.uniform(0.2 * ly, 0.8 * ly)
        sigma = rng.uniform(0.06, 0.12) * min(lx, ly)
        amp = rng.uniform(0.5, 1.0)
        u += amp * np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2.0 * sigma ** 2))
    return u


def step(state: FluidState, cfg: SimConfig, projector: Projector | None = None) -> FluidState:
    if state.u.shape != (cfg.nx, cfg.ny):
        raise SimError(f"state is {state.u.shape}, config wants ({cfg.nx}, {cfg.ny})")
    if projector is None:
        projector = Projector(cfg)

    u = advect_maccormack(state.u, state.v, cfg.dt, cfg.dx)
    v = np.stack([advect_maccormack(state.v[..., 0], state.v, cfg.dt, cfg.dx),
                  advect_maccormack(state.v[..., 1], state.v, cfg.dt, cfg.dx)], axis=-1)
    v = apply_buoyancy(v, u, cfg.force, cfg.dt)
    if cfg.viscosity > 0.0:
        v = v + cfg.dt * cfg.viscosity * np.stack(
            [_laplacian(v[..., 0], cfg.dx), _laplacian(v[..., 1], cfg.dx)], axis=-1)
    u = apply_inlet(u, cfg)
    v, p, _ = projector(v)
    u = np.clip(u, 0.0, None)
    u[state.solid_mask] = 0.0
    return FluidState(u=u, v=v, p=p, solid_mask=state.solid_mask)


def simulate_trajectory(cfg: SimConfig, initial: FluidState | None = None,
                        stride: int = 1) -> list[FluidState]:
    """States after steps 1..n_steps (subsampled by ``stride`` if given)."""
    if stride < 1:
        raise SimError("stride must be >= 1")
    state = initial.copy() if initial is not None else initial_state(cfg)
    projector = Projector(cfg)
    out = []
    for k in range(cfg.n_steps):
        state = step(state, cfg, projector)
        if (k + 1) % stride == 0:
            out.append(state)
    return out


# --------------------------------------------------------------------------
# scenario presets
# --------------------------------------------------------------------------

def open_box_config(nx: int = 64, ny: int = 64, dx: float = 1.0, dt: float = 1.5,
                    force=(0.0, 0.5), n_steps: int = 30, seed: int = 0) -> SimConfig:
    """Free box, smoke blobs rising under buoyancy."""
    return SimConfig(nx=nx, ny=ny, dx=dx, dt=dt, force=tuple(force),
                     n_steps=n_steps, seed=seed)


def obstacle_inlet_config(nx: int = 100, ny: int = 100, dx: float = 0.5,
                          dt: float = 1.5, intensity: float = 0.5,
                          n_steps: int = 60, seed: int = 0) -> SimConfig:
    """Inlet near the bottom feeding a plume that rises past a disk."""
    lx, ly = nx * dx, ny * dx
    return SimConfig(
        nx=nx, ny=ny, dx=dx, dt=dt, force=(0.0, 0.5), n_steps=n_steps, seed=seed,
        obstacle=Disk(center=(0.5 * lx, 0.5 * ly), radius=0.15 * min(lx, ly) / 2),
        inlet=Inlet(center=(0.5 * lx, 0.15 * ly), radius=0.07 * min(lx, ly) / 2,
                    intensity=intensity))
