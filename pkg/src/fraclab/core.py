"""Shared geometry, fields, materials, and deterministic randomness.

Conventions used everywhere downstream:

* the physical domain is the square ``[0, side_length]^2``, origin bottom-left
* cell (i, j) spans ``[i*dx, (i+1)*dx] x [j*dy, (j+1)*dy]`` and flattens to
  index ``j*nx + i`` (row-major)
* node (i, j) sits at ``(i*dx, j*dy)`` and flattens to ``j*(nx+1) + i``
* vector fields interleave components: dof ``2*node + component``
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class RasterSkipWarning(UserWarning):
    """Segments that vanish after domain clipping are skipped, not fatal."""


# --------------------------------------------------------------------------- #
# Grid and fields
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class CartesianGrid:
    """Uniform cell grid over a square domain of physical size ``side_length``."""

    nx: int
    ny: int
    side_length: float

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.nx}x{self.ny}")
        if not (self.side_length > 0):
            raise ValueError(f"side_length must be positive, got {self.side_length}")

    @property
    def dx(self) -> float:
        return self.side_length / self.nx

    @property
    def dy(self) -> float:
        return self.side_length / self.ny

    @property
    def cell_size(self) -> float:
        """Edge length of a (square) cell; grids with nx != ny have no single size."""
        if self.nx != self.ny:
            raise ValueError("cell_size is only defined for square-cell grids (nx == ny)")
        return self.dx

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    def cell_index(self, i: int, j: int) -> int:
        return j * self.nx + i

    def node_index(self, i: int, j: int) -> int:
        return j * (self.nx + 1) + i

    def cell_centers(self) -> np.ndarray:
        """(n_cells, 2) physical coordinates of cell centers, row-major."""
        xs = (np.arange(self.nx) + 0.5) * self.dx
        ys = (np.arange(self.ny) + 0.5) * self.dy
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def node_coords(self) -> np.ndarray:
        """(n_nodes, 2) physical coordinates of nodes, row-major."""
        xs = np.arange(self.nx + 1) * self.dx
        ys = np.arange(self.ny + 1) * self.dy
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])


@dataclass
class ScalarField:
    """Scalar values attached to either cells or nodes of a grid."""

    grid: CartesianGrid
    values: np.ndarray
    kind: str  # "nodal" | "cell"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = {"nodal": self.grid.n_nodes, "cell": self.grid.n_cells}
        if self.kind not in expected:
            raise ValueError(f"kind must be 'nodal' or 'cell', got {self.kind!r}")
        if self.values.shape != (expected[self.kind],):
            raise ValueError(
                f"{self.kind} field needs {expected[self.kind]} values, "
                f"got shape {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite entries")

    def as_matrix(self) -> np.ndarray:
        """Reshape to (ny, nx) for cell fields, (ny+1, nx+1) for nodal fields."""
        if self.kind == "cell":
            return self.values.reshape(self.grid.ny, self.grid.nx)
        return self.values.reshape(self.grid.ny + 1, self.grid.nx + 1)


@dataclass
class VectorField2:
    """Two components per node, interleaved: value[2*node + comp]."""

    grid: CartesianGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (2 * self.grid.n_nodes,):
            raise ValueError(
                f"vector field needs {2 * self.grid.n_nodes} values, "
                f"got shape {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite entries")

    def component(self, c: int) -> np.ndarray:
        return self.values[c::2]


def zeros_scalar(grid: CartesianGrid, kind: str) -> ScalarField:
    n = grid.n_nodes if kind == "nodal" else grid.n_cells
    return ScalarField(grid, np.zeros(n), kind)


def zeros_vector(grid: CartesianGrid) -> VectorField2:
    return VectorField2(grid, np.zeros(2 * grid.n_nodes))


# --------------------------------------------------------------------------- #
# Fracture segments and configurations
# --------------------------------------------------------------------------- #

HORIZONTAL = 0.0
VERTICAL = math.pi / 2.0


@dataclass(frozen=True)
class FractureSegment:
    """A straight seeded fracture: center line of given length plus an aperture.

    ``angle`` is measured from the +x axis in radians; exactly 0 is horizontal
    and exactly pi/2 is vertical, anything else counts as oblique.
    """

    center: tuple[float, float]
    length: float
    aperture: float
    angle: float = HORIZONTAL

    def __post_init__(self):
        if not (self.length > 0):
            raise ValueError(f"segment length must be positive, got {self.length}")
        if not (self.aperture > 0):
            raise ValueError(f"segment aperture must be positive, got {self.aperture}")

    @property
    def orientation(self) -> str:
        if self.angle == HORIZONTAL:
            return "horizontal"
        if self.angle == VERTICAL:
            return "vertical"
        return "oblique"

    def endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        u = np.array([math.cos(self.angle), math.sin(self.angle)])
        c = np.array(self.center)
        return c - 0.5 * self.length * u, c + 0.5 * self.length * u


@dataclass(frozen=True)
class FractureConfig:
    """List of seeded fracture segments in a square domain of given side."""

    segments: tuple[FractureSegment, ...]
    side_length: float

    def __post_init__(self):
        if not (self.side_length > 0):
            raise ValueError("side_length must be positive")


def clip_segment(seg: FractureSegment, side_length: float) -> FractureSegment | None:
    """Clip a segment's center line to the domain box; None if nothing remains.

    Liang-Barsky on the parametric line p(t) = a + t*(b-a), t in [0, 1].
    """
    a, b = seg.endpoints()
    d = b - a
    t0, t1 = 0.0, 1.0
    for axis in (0, 1):
        if d[axis] == 0.0:
            if a[axis] < 0.0 or a[axis] > side_length:
                return None
            continue
        ta = (0.0 - a[axis]) / d[axis]
        tb = (side_length - a[axis]) / d[axis]
        lo, hi = min(ta, tb), max(ta, tb)
        t0, t1 = max(t0, lo), min(t1, hi)
    if t0 >= t1:
        return None
    if t0 == 0.0 and t1 == 1.0:
        return seg  # fully interior, nothing to clip
    pa, pb = a + t0 * d, a + t1 * d
    new_len = float(np.linalg.norm(pb - pa))
    if new_len <= 0.0:
        return None
    mid = 0.5 * (pa + pb)
    return FractureSegment(
        center=(float(mid[0]), float(mid[1])),
        length=new_len,
        aperture=seg.aperture,
        angle=seg.angle,
    )


def _segment_cell_mask(seg: FractureSegment, grid: CartesianGrid) -> np.ndarray:
    """Boolean (ny, nx) mask of cells whose centers lie in the segment rectangle.

    The rectangle is length x aperture, centered on the segment; the same
    axial/perpendicular half-width test covers axis-aligned and oblique cases.
    Only the bounding-box window of candidate cells is evaluated.
    """
    c = np.array(seg.center)
    u = np.array([math.cos(seg.angle), math.sin(seg.angle)])
    n = np.array([-u[1], u[0]])
    half = 0.5 * seg.length * np.abs(u) + 0.5 * seg.aperture * np.abs(n)

    i_lo = max(int(np.floor((c[0] - half[0]) / grid.dx - 0.5)), 0)
    i_hi = min(int(np.ceil((c[0] + half[0]) / grid.dx - 0.5)) + 1, grid.nx)
    j_lo = max(int(np.floor((c[1] - half[1]) / grid.dy - 0.5)), 0)
    j_hi = min(int(np.ceil((c[1] + half[1]) / grid.dy - 0.5)) + 1, grid.ny)

    mask = np.zeros((grid.ny, grid.nx), dtype=bool)
    if i_lo >= i_hi or j_lo >= j_hi:
        return mask

    xs = (np.arange(i_lo, i_hi) + 0.5) * grid.dx - c[0]
    ys = (np.arange(j_lo, j_hi) + 0.5) * grid.dy - c[1]
    gx, gy = np.meshgrid(xs, ys)
    s = gx * u[0] + gy * u[1]
    t = gx * n[0] + gy * n[1]
    mask[j_lo:j_hi, i_lo:i_hi] = (np.abs(s) <= 0.5 * seg.length) & (
        np.abs(t) <= 0.5 * seg.aperture
    )
    return mask


def rasterize_config(config: FractureConfig, grid: CartesianGrid) -> ScalarField:
    """Binary cell occupancy of all segments; boundary clipping applied first.

    Segments that fall entirely outside the domain after clipping are skipped
    and reported once through a RasterSkipWarning.
    """
    occ = np.zeros((grid.ny, grid.nx), dtype=bool)
    skipped = 0
    for seg in config.segments:
        clipped = clip_segment(seg, config.side_length)
        if clipped is None:
            skipped += 1
            continue
        occ |= _segment_cell_mask(clipped, grid)
    if skipped:
        warnings.warn(
            f"skipped {skipped} segment(s) entirely outside the domain",
            RasterSkipWarning,
            stacklevel=2,
        )
    return ScalarField(grid, occ.astype(np.float64).ravel(), "cell")


# --------------------------------------------------------------------------- #
# Materials
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class Isotropic:
    E: float
    nu: float


@dataclass(frozen=True)
class TransverselyIsotropic:
    """Stiffness components (Pa) of the 2D x-z reduction: C11, C13, C33, C55."""

    C11: float
    C13: float
    C33: float
    C55: float


@dataclass(frozen=True)
class Elastoplastic:
    """Isotropic elasticity + von Mises yield with linear isotropic hardening."""

    E: float
    nu: float
    sigma_y: float
    H_mod: float


ElasticLaw = Isotropic | TransverselyIsotropic | Elastoplastic


@dataclass(frozen=True)
class MaterialSpec:
    name: str
    density: float
    elastic: ElasticLaw
    G_c: float

    def __post_init__(self):
        if not (self.density > 0):
            raise ValueError(f"{self.name}: density must be positive")
        if not (self.G_c > 0):
            raise ValueError(f"{self.name}: G_c must be positive")
        el = self.elastic
        if isinstance(el, (Isotropic, Elastoplastic)):
            if not (el.E > 0):
                raise ValueError(f"{self.name}: E must be positive")
            if not (-1.0 < el.nu < 0.5):
                raise ValueError(f"{self.name}: nu must lie in (-1, 0.5)")
        if isinstance(el, Elastoplastic):
            if not (el.sigma_y > 0):
                raise ValueError(f"{self.name}: sigma_y must be positive")
            if el.H_mod < 0:
                raise ValueError(f"{self.name}: H_mod must be nonnegative")
        # positive definiteness of the plane-strain stiffness, by eigenvalue sign
        eig = np.linalg.eigvalsh(plane_strain_stiffness(el))
        if not np.all(eig > 0):
            raise ValueError(f"{self.name}: stiffness matrix is not positive definite")

    @property
    def is_elastoplastic(self) -> bool:
        return isinstance(self.elastic, Elastoplastic)


def lame_parameters(E: float, nu: float) -> tuple[float, float]:
    """(lambda, mu) from Young's modulus and Poisson's ratio."""
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = E / (2.0 * (1.0 + nu))
    return lam, mu


def plane_strain_stiffness(elastic: ElasticLaw) -> np.ndarray:
    """3x3 Voigt stiffness for [eps_xx, eps_yy, gamma_xy] under plane strain.

    The transversely isotropic case maps the material's x-z plane onto the
    grid's x-y plane (loading direction z -> y).
    """
    if isinstance(elastic, TransverselyIsotropic):
        return np.array(
            [
                [elastic.C11, elastic.C13, 0.0],
                [elastic.C13, elastic.C33, 0.0],
                [0.0, 0.0, elastic.C55],
            ]
        )
    lam, mu = lame_parameters(elastic.E, elastic.nu)
    return np.array(
        [
            [lam + 2.0 * mu, lam, 0.0],
            [lam, lam + 2.0 * mu, 0.0],
            [0.0, 0.0, mu],
        ]
    )


GPA = 1.0e9

_DEFAULT_MATERIALS = (
    MaterialSpec("pbx", 1.82e3, Isotropic(E=10.0 * GPA, nu=0.36), G_c=641.0),
    MaterialSpec(
        "shale",
        2.075e3,
        TransverselyIsotropic(C11=31.3 * GPA, C13=3.40 * GPA, C33=22.5 * GPA, C55=6.49 * GPA),
        G_c=50.0,
    ),
    MaterialSpec(
        "tungsten",
        19.25e3,
        Elastoplastic(E=400.0 * GPA, nu=0.28, sigma_y=0.75 * GPA, H_mod=5.0 * GPA),
        G_c=500.0,
    ),
    MaterialSpec(
        "aluminum",
        2.7e3,
        Elastoplastic(E=64.9 * GPA, nu=0.25, sigma_y=0.25 * GPA, H_mod=0.25 * GPA),
        G_c=1.0e4,
    ),
    MaterialSpec(
        "steel",
        7.85e3,
        Elastoplastic(E=200.0 * GPA, nu=0.30, sigma_y=0.6 * GPA, H_mod=2.5 * GPA),
        G_c=2.5e5,
    ),
    MaterialSpec(
        "titanium",
        4.43e3,
        Elastoplastic(E=115.0 * GPA, nu=0.33, sigma_y=1.0 * GPA, H_mod=2.0 * GPA),
        G_c=2.4e4,
    ),
    MaterialSpec("concrete", 2.4e3, Isotropic(E=30.0 * GPA, nu=0.15), G_c=150.0),
)


def material_registry() -> dict[str, MaterialSpec]:
    """Built-in materials, keyed by lowercase name."""
    return {m.name: m for m in _DEFAULT_MATERIALS}


def _material_from_dict(obj: dict) -> MaterialSpec:
    kinds = {
        "isotropic": (Isotropic, ("E", "nu")),
        "transversely_isotropic": (TransverselyIsotropic, ("C11", "C13", "C33", "C55")),
        "elastoplastic": (Elastoplastic, ("E", "nu", "sigma_y", "H_mod")),
    }
    el = obj["elastic"]
    try:
        cls, fields = kinds[el["kind"]]
    except KeyError:
        raise ValueError(f"unknown elastic kind {el.get('kind')!r}") from None
    law = cls(**{f: float(el[f]) for f in fields})
    return MaterialSpec(
        name=str(obj["name"]).lower(),
        density=float(obj["density"]),
        elastic=law,
        G_c=float(obj["G_c"]),
    )


def _material_to_dict(m: MaterialSpec) -> dict:
    kind = {
        Isotropic: "isotropic",
        TransverselyIsotropic: "transversely_isotropic",
        Elastoplastic: "elastoplastic",
    }[type(m.elastic)]
    el = {"kind": kind}
    el.update({k: getattr(m.elastic, k) for k in type(m.elastic).__dataclass_fields__})
    return {"name": m.name, "density": m.density, "elastic": el, "G_c": m.G_c}


def load_materials(path: str | Path, registry: dict[str, MaterialSpec] | None = None) -> dict[str, MaterialSpec]:
    """Merge user materials from a JSON file into a copy of the registry.

    The file holds a list of objects mirroring MaterialSpec in SI units.
    Duplicate names (within the file or against the registry) are rejected.
    """
    merged = dict(material_registry() if registry is None else registry)
    with open(path, "r", encoding="utf-8") as fh:
        entries = json.load(fh)
    for obj in entries:
        mat = _material_from_dict(obj)
        if mat.name in merged:
            raise ValueError(f"duplicate material name {mat.name!r}")
        merged[mat.name] = mat
    return merged


def save_materials(materials: list[MaterialSpec], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([_material_to_dict(m) for m in materials], fh, indent=2)


# --------------------------------------------------------------------------- #
# Deterministic randomness
# --------------------------------------------------------------------------- #

@dataclass
class SeededRng:
    """Reproducible RNG: identical (seed, stream) gives identical draws.

    Thin wrapper over numpy's PCG64 keyed by SeedSequence(seed, spawn_key=
    (stream,)); distinct streams are statistically independent, so batch
    campaigns shard by stream id.
    """

    seed: int
    stream: int = 0
    gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def substream(self, stream: int) -> "SeededRng":
        """Independent stream derived from the same seed."""
        return SeededRng(self.seed, stream)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        """Inclusive-exclusive like numpy: draws from [low, high)."""
        return self.gen.integers(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)
