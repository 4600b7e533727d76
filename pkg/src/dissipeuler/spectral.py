"""Fourier representation of periodic vector fields on the torus.

Velocity fields live on ``[0, 2*pi)^dim`` (dim 2 or 3) and are stored as
full complex FFT coefficient arrays, one block per velocity component, in
numpy ``fftn`` layout (unnormalized forward transform).  Everything here is
a pure function: divergence-free (Leray) projection, spectral derivatives,
the dealiased convective term, Parseval inner products, and a small binary
snapshot format.

Conventions
-----------
* Coefficients ``c[i, k1, .., kd]`` satisfy
  ``u_i(x) = n^{-dim} * sum_k c[i, k] exp(i k.x)``.
* Real-valued fields have Hermitian-symmetric coefficients; constructors
  enforce this.
* The quadratic nonlinearity is dealiased by the 2/3 rule with strict
  cutoff ``|k_j| <= n//3 - (1 if 3 | n else 0)`` chosen so that aliased
  images of products of retained modes never fold back onto retained modes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi

_SNAPSHOT_MAGIC = b"DEFLD\x00"
_SNAPSHOT_VERSION = 1


class SpectralError(ValueError):
    pass


@dataclass(frozen=True)
class TorusGrid:
    """Uniform grid on the periodic torus, side length 2*pi per axis."""

    dim: int
    n: int

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise SpectralError(f"dim must be 2 or 3, got {self.dim}")
        if self.n < 8:
            raise SpectralError(f"n must be >= 8, got {self.n}")
        if self.n & (self.n - 1) != 0:
            raise SpectralError(f"n must be a power of two, got {self.n}")

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dim

    @property
    def volume(self) -> float:
        return TWO_PI ** self.dim

    @property
    def dx(self) -> float:
        return TWO_PI / self.n

    @property
    def dof(self) -> int:
        return self.dim * self.n ** self.dim

    def wavenumbers(self) -> tuple:
        """Integer wavenumber array per axis, fftn layout, shape broadcastable."""
        k1 = np.fft.fftfreq(self.n, d=1.0 / self.n)
        out = []
        for axis in range(self.dim):
            shape = [1] * self.dim
            shape[axis] = self.n
            out.append(k1.reshape(shape))
        return tuple(out)

    def k_squared(self) -> np.ndarray:
        ks = self.wavenumbers()
        return sum(k ** 2 for k in ks)

    def dealias_cutoff(self) -> int:
        # strict 2/3 rule: with cutoff K, alias images of quadratic products
        # land at |k| >= n - 2K > K
        return (self.n - 1) // 3

    def dealias_mask(self) -> np.ndarray:
        cut = self.dealias_cutoff()
        mask = np.ones(self.shape, dtype=bool)
        for k in self.wavenumbers():
            mask &= np.abs(k) <= cut
        return mask

    def points(self) -> tuple:
        """Physical grid coordinates, one broadcastable array per axis."""
        x1 = np.arange(self.n) * self.dx
        out = []
        for axis in range(self.dim):
            shape = [1] * self.dim
            shape[axis] = self.n
            out.append(x1.reshape(shape))
        return tuple(out)


@dataclass(frozen=True)
class SpectralField:
    """Divergence-free-capable vector field as complex Fourier coefficients.

    ``coeffs`` has shape ``(dim,) + (n,)*dim``.  Instances are immutable;
    all operations return new fields.
    """

    grid: TorusGrid
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        expect = (self.grid.dim,) + self.grid.shape
        if self.coeffs.shape != expect:
            raise SpectralError(
                f"coefficient shape {self.coeffs.shape} does not match grid {expect}"
            )
        if self.coeffs.dtype != np.complex128:
            object.__setattr__(self, "coeffs", self.coeffs.astype(np.complex128))
        self.coeffs.setflags(write=False)

    # -- constructors -------------------------------------------------

    @staticmethod
    def from_physical(grid: TorusGrid, values: np.ndarray) -> "SpectralField":
        """Build from real point values of shape (dim,) + grid.shape."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (grid.dim,) + grid.shape:
            raise SpectralError(
                f"value shape {values.shape} does not match grid"
            )
        axes = tuple(range(1, grid.dim + 1))
        return SpectralField(grid, np.fft.fftn(values, axes=axes))

    @staticmethod
    def zero(grid: TorusGrid) -> "SpectralField":
        return SpectralField(grid, np.zeros((grid.dim,) + grid.shape, dtype=np.complex128))

    @staticmethod
    def from_modes(grid: TorusGrid, modes) -> "SpectralField":
        """Build a real field from ``{wavevector: complex amplitude vector}``.

        Each entry contributes ``a * exp(i k.x) + conj(a) * exp(-i k.x)``
        so the result is real by construction.
        """
        c = np.zeros((grid.dim,) + grid.shape, dtype=np.complex128)
        scale = grid.n ** grid.dim
        for k, amp in modes.items():
            k = tuple(int(x) for x in k)
            amp = np.asarray(amp, dtype=np.complex128)
            if amp.shape != (grid.dim,):
                raise SpectralError("mode amplitude must be a dim-vector")
            if any(abs(x) > grid.n // 2 - 1 for x in k):
                raise SpectralError(f"mode {k} not representable on n={grid.n}")
            idx = tuple(x % grid.n for x in k)
            cidx = tuple((-x) % grid.n for x in k)
            for i in range(grid.dim):
                c[(i,) + idx] += amp[i] * scale
                c[(i,) + cidx] += np.conj(amp[i]) * scale
        return SpectralField(grid, c)

    # -- views ---------------------------------------------------------

    def to_physical(self) -> np.ndarray:
        axes = tuple(range(1, self.grid.dim + 1))
        return np.real(np.fft.ifftn(self.coeffs, axes=axes))

    def hermitian_defect(self) -> float:
        """Max |imag| of the point values; 0 for genuinely real fields."""
        axes = tuple(range(1, self.grid.dim + 1))
        return float(np.max(np.abs(np.imag(np.fft.ifftn(self.coeffs, axes=axes)))))

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other: "SpectralField") -> "SpectralField":
        return SpectralField(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        return SpectralField(self.grid, self.coeffs - other.coeffs)

    def __mul__(self, a: float) -> "SpectralField":
        return SpectralField(self.grid, self.coeffs * a)

    __rmul__ = __mul__

    def max_abs(self) -> float:
        """Pointwise sup norm max_x |u(x)| (euclidean over components)."""
        phys = self.to_physical()
        return float(np.sqrt((phys ** 2).sum(axis=0).max()))


# -- core operations ----------------------------------------------------


def leray_project(f: SpectralField) -> SpectralField:
    """Remove the gradient part: u_hat -> u_hat - k (k.u_hat) / |k|^2.

    The k = 0 mode (mean flow) passes through unchanged.
    """
    grid = f.grid
    ks = grid.wavenumbers()
    k2 = grid.k_squared()
    k2safe = np.where(k2 == 0, 1.0, k2)
    kdotu = sum(ks[j] * f.coeffs[j] for j in range(grid.dim))
    factor = kdotu / k2safe
    out = np.empty_like(f.coeffs)
    for j in range(grid.dim):
        out[j] = f.coeffs[j] - ks[j] * factor
    return SpectralField(grid, out)


def divergence_defect(f: SpectralField) -> float:
    """Relative size of k.u_hat over nonzero modes (0 when solenoidal)."""
    grid = f.grid
    ks = grid.wavenumbers()
    kdotu = sum(ks[j] * f.coeffs[j] for j in range(grid.dim))
    norm = float(np.sqrt(np.sum(np.abs(f.coeffs) ** 2)))
    if norm == 0.0:
        return 0.0
    return float(np.sqrt(np.sum(np.abs(kdotu) ** 2))) / norm


def gradient(f: SpectralField) -> np.ndarray:
    """Spectral derivative tensor, coefficients of d u_i / d x_j.

    Returns a complex array of shape (dim, dim) + grid.shape indexed
    [i, j]; exact for the trigonometric interpolant.
    """
    grid = f.grid
    ks = grid.wavenumbers()
    out = np.empty((grid.dim, grid.dim) + grid.shape, dtype=np.complex128)
    for i in range(grid.dim):
        for j in range(grid.dim):
            out[i, j] = 1j * ks[j] * f.coeffs[i]
    return out


def gradient_physical(f: SpectralField) -> np.ndarray:
    """Point values of the derivative tensor, shape (dim, dim) + grid.shape."""
    grid = f.grid
    axes = tuple(range(2, grid.dim + 2))
    return np.real(np.fft.ifftn(gradient(f), axes=axes))


def grad_norm_sq(f: SpectralField) -> float:
    """||grad u||_{L^2}^2 via Parseval (sum over components and derivatives)."""
    grid = f.grid
    k2 = grid.k_squared()
    total = float(np.sum(k2 * (np.abs(f.coeffs) ** 2).sum(axis=0)))
    return total * grid.volume / grid.n ** (2 * grid.dim)


def inner_product(f: SpectralField, g: SpectralField) -> float:
    """L^2(T^dim) inner product, Parseval-exact."""
    grid = f.grid
    if g.grid != grid:
        raise SpectralError("fields live on different grids")
    s = float(np.real(np.sum(f.coeffs * np.conj(g.coeffs))))
    return s * grid.volume / grid.n ** (2 * grid.dim)


def l2_norm_sq(f: SpectralField) -> float:
    return inner_product(f, f)


def kinetic_energy(f: SpectralField) -> float:
    return 0.5 * l2_norm_sq(f)


def dealias(f: SpectralField) -> SpectralField:
    return SpectralField(f.grid, f.coeffs * f.grid.dealias_mask())


def convective_term(u: SpectralField) -> SpectralField:
    """Leray-projected, dealiased divergence-form transport -P div(u x u).

    For divergence-free u this equals the projection of -(grad u) u and is
    L^2-orthogonal to u (energy-neutral transport).
    """
    conv, _ = _convective_with_sup(u)
    return conv


def _convective_with_sup(u: SpectralField):
    """Convective term plus max_x |u| (reuses the inverse transforms)."""
    grid = u.grid
    mask = grid.dealias_mask()
    axes = tuple(range(1, grid.dim + 1))
    phys = np.real(np.fft.ifftn(u.coeffs * mask, axes=axes))
    sup = float(np.sqrt((phys ** 2).sum(axis=0).max()))

    ks = grid.wavenumbers()
    out = np.zeros((grid.dim,) + grid.shape, dtype=np.complex128)
    # -d_j (u_i u_j); the product is formed pointwise, truncated back to the
    # dealias band, then differentiated spectrally
    for i in range(grid.dim):
        for j in range(i, grid.dim):
            prod_hat = np.fft.fftn(phys[i] * phys[j], axes=tuple(range(grid.dim)))
            prod_hat *= mask
            out[i] -= 1j * ks[j] * prod_hat
            if i != j:
                out[j] -= 1j * ks[i] * prod_hat
    return leray_project(SpectralField(grid, out)), sup


def laplacian_decay_factor(grid: TorusGrid, eps: float, dt: float) -> np.ndarray:
    """Exact integrating factor exp(-eps |k|^2 dt) for the Stokes part."""
    return np.exp(-eps * grid.k_squared() * dt)


def resample(f: SpectralField, grid_new: TorusGrid) -> SpectralField:
    """Re-express a field on a finer or coarser grid by mode transfer.

    Exact when the field is band-limited to the smaller Nyquist range;
    modes outside the target range are dropped.
    """
    grid = f.grid
    if grid_new.dim != grid.dim:
        raise SpectralError("resample cannot change the dimension")
    span = min(grid.n, grid_new.n) // 2 - 1
    out = np.zeros((grid.dim,) + grid_new.shape, dtype=np.complex128)
    scale = (grid_new.n / grid.n) ** grid.dim
    idx_old, idx_new = [], []
    for axis in range(grid.dim):
        ks = np.concatenate([np.arange(0, span + 1), np.arange(-span, 0)])
        idx_old.append(ks % grid.n)
        idx_new.append(ks % grid_new.n)
    mesh_old = np.ix_(range(grid.dim), *idx_old)
    mesh_new = np.ix_(range(grid.dim), *idx_new)
    out[mesh_new] = f.coeffs[mesh_old] * scale
    return SpectralField(grid_new, out)


def tail_energy_fraction(f: SpectralField) -> float:
    """Energy fraction above the dealias cutoff; resolution diagnostic."""
    grid = f.grid
    mask = grid.dealias_mask()
    e2 = (np.abs(f.coeffs) ** 2).sum(axis=0)
    total = float(e2.sum())
    if total == 0.0:
        return 0.0
    return float(e2[~mask].sum()) / total


# -- named fields --------------------------------------------------------


def taylor_green(grid: TorusGrid, amplitude: float = 1.0) -> SpectralField:
    """Classical Taylor-Green vortex; steady-state Euler solution in 2D mean."""
    x = grid.points()
    shape = (grid.dim,) + grid.shape
    vals = np.zeros(shape)
    if grid.dim == 2:
        vals[0] = np.sin(x[0]) * np.cos(x[1])
        vals[1] = -np.cos(x[0]) * np.sin(x[1])
    else:
        vals[0] = np.sin(x[0]) * np.cos(x[1]) * np.cos(x[2])
        vals[1] = -np.cos(x[0]) * np.sin(x[1]) * np.cos(x[2])
        # third component identically zero
    vals = np.broadcast_to(vals, shape).copy() * amplitude
    return SpectralField.from_physical(grid, vals)


def single_mode(grid: TorusGrid, amplitude: float = 1.0) -> SpectralField:
    """u = amplitude * (sin x_2, 0, ..): divergence-free, steady for Euler."""
    x = grid.points()
    vals = np.zeros((grid.dim,) + grid.shape)
    vals[0] = np.broadcast_to(amplitude * np.sin(x[1]), grid.shape)
    return SpectralField.from_physical(grid, vals)


# -- snapshot file format -------------------------------------------------
#
# Version 1 layout, little endian throughout:
#   magic   6 bytes  b"DEFLD\x00"
#   version u16
#   dim     u8
#   n       u32
#   time    f64
#   data    dim * n^dim complex coefficients as (re, im) f64 pairs in
#           row-major (C) wavevector order, component-major.


def write_field(path, f: SpectralField, time: float) -> None:
    grid = f.grid
    with open(path, "wb") as fh:
        fh.write(_SNAPSHOT_MAGIC)
        fh.write(struct.pack("<HBId", _SNAPSHOT_VERSION, grid.dim, grid.n, float(time)))
        flat = np.ascontiguousarray(f.coeffs).view(np.float64)
        fh.write(flat.astype("<f8", copy=False).tobytes())


def read_field(path):
    """Read a snapshot; returns (SpectralField, time)."""
    with open(path, "rb") as fh:
        magic = fh.read(6)
        if magic != _SNAPSHOT_MAGIC:
            raise SpectralError(f"not a field snapshot: bad magic {magic!r}")
        version, dim, n, time = struct.unpack("<HBId", fh.read(15))
        if version != _SNAPSHOT_VERSION:
            raise SpectralError(f"unsupported snapshot version {version}")
        grid = TorusGrid(dim, n)
        count = 2 * dim * n ** dim
        raw = np.frombuffer(fh.read(count * 8), dtype="<f8", count=count)
        coeffs = raw.astype(np.float64).view(np.complex128).reshape((dim,) + grid.shape)
        return SpectralField(grid, coeffs.copy()), time
