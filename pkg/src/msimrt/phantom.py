"""Synthetic patient cases: voxel grid, tissues, beamlets and dose influence.

Geometry is deterministic for a given :class:`CaseSpec`.  The tumour is the
set of voxels closest to the isocentre (a lattice sphere of the requested
volume), organs at risk are lattice spheres placed just outside the PTV, and
beams are coplanar and equiangular, each a grid of parallel pencil beamlets.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage


class InfeasibleSpecError(ValueError):
    pass


@dataclass(frozen=True)
class VoxelGrid:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or len(spacing) != 3:
            raise ValueError("grid needs three dims and three spacings")
        if min(dims) < 1:
            raise ValueError(f"grid dims must be >= 1, got {dims}")
        if min(spacing) <= 0:
            raise ValueError(f"grid spacing must be > 0, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def voxel_volume(self) -> float:
        """mm^3"""
        return float(np.prod(self.spacing))

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(self.dims) - 1) / 2.0 * np.asarray(self.spacing)

    def ijk(self, flat) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(flat, dtype=np.int64), self.dims), axis=-1)

    def flat(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=np.int64)
        return np.ravel_multi_index(tuple(ijk.T), self.dims)

    def centers(self, flat=None) -> np.ndarray:
        """World coordinates (mm) of voxel centres, all voxels when ``flat`` is None."""
        if flat is None:
            flat = np.arange(self.n_voxels)
        return np.asarray(self.origin) + self.ijk(flat) * np.asarray(self.spacing)

    def index_of(self, points) -> np.ndarray:
        """Flat index of the voxel whose centre coincides with each point; -1 when outside."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rel = (pts - np.asarray(self.origin)) / np.asarray(self.spacing)
        ijk = np.rint(rel).astype(np.int64)
        inside = ((ijk >= 0) & (ijk < np.asarray(self.dims))).all(axis=1)
        out = np.full(len(pts), -1, dtype=np.int64)
        if inside.any():
            out[inside] = self.flat(ijk[inside])
        return out

    def mask(self, voxels) -> np.ndarray:
        m = np.zeros(self.n_voxels, dtype=bool)
        m[np.asarray(voxels, dtype=np.int64)] = True
        return m.reshape(self.dims)


def dilate(ctv, margin_mm: float, grid: VoxelGrid) -> np.ndarray:
    """Voxels whose centre lies within ``margin_mm`` of some voxel centre of ``ctv``."""
    if margin_mm < 0:
        raise ValueError("margin must be nonnegative")
    ctv = np.unique(np.asarray(ctv, dtype=np.int64))
    if margin_mm == 0 or ctv.size == 0:
        return ctv
    dist = ndimage.distance_transform_edt(~grid.mask(ctv), sampling=grid.spacing)
    return np.flatnonzero(dist.ravel() <= margin_mm * (1 + 1e-12) + 1e-9)


HEALTHY_ZONE_MARGIN_MM = 50.0


def healthy_zone(ctv, grid: VoxelGrid, margin_mm: float = HEALTHY_ZONE_MARGIN_MM) -> np.ndarray:
    """The 50 mm neighbourhood of the CTV with the CTV itself removed."""
    ctv = np.unique(np.asarray(ctv, dtype=np.int64))
    if ctv.size == 0:
        raise ValueError("healthy zone needs a nonempty CTV")
    return np.setdiff1d(dilate(ctv, margin_mm, grid), ctv, assume_unique=True)


class TargetKind(str, enum.Enum):
    CTV = "ctv"
    CTV_PLUS = "ctv+"
    PTV = "ptv"


@dataclass(frozen=True)
class TargetVolumeSpec:
    ctv: np.ndarray
    margin_mm: float
    kind: TargetKind

    def voxels(self, grid: VoxelGrid) -> np.ndarray:
        return dilate(self.ctv, self.margin_mm, grid)


@dataclass
class Tissue:
    """One structure with voxel-uniform prescriptions and objective weights.

    ``t_max``/``t_min`` are whole-course limits in Gy (``t_min`` is only
    used for tumours).  Per-fraction thresholds follow from equal
    fractionation, see :meth:`fraction_limits`.
    """

    name: str
    kind: str  # "tumor" or "oar"
    voxels: np.ndarray
    t_max: float
    t_min: float = 0.0
    alpha_over: float = 10.0
    alpha_under: float = 10.0
    beta_over: float = 1.0
    beta_under: float = 1.0

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.int64)
        if self.kind not in ("tumor", "oar"):
            raise ValueError(f"tissue kind must be 'tumor' or 'oar', got {self.kind!r}")
        if self.kind == "tumor" and self.t_min > self.t_max:
            raise ValueError(f"{self.name}: minimum dose exceeds maximum dose")
        for w in (self.alpha_over, self.alpha_under, self.beta_over, self.beta_under):
            if w < 0:
                raise ValueError(f"{self.name}: weights must be nonnegative")

    @property
    def is_tumor(self) -> bool:
        return self.kind == "tumor"

    def fraction_limits(self, n_fractions: int) -> tuple[float, float]:
        """(R-, R+) per fraction under equal fractionation."""
        return self.t_min / n_fractions, self.t_max / n_fractions


@dataclass
class TissueSet:
    tissues: list[Tissue]

    def __post_init__(self):
        seen = np.concatenate([t.voxels for t in self.tissues]) if self.tissues else np.array([], dtype=np.int64)
        if np.unique(seen).size != seen.size:
            raise ValueError("tissue voxel sets must be disjoint")

    def __iter__(self):
        return iter(self.tissues)

    def __len__(self):
        return len(self.tissues)

    def __getitem__(self, name: str) -> Tissue:
        for t in self.tissues:
            if t.name == name:
                return t
        raise KeyError(name)

    @property
    def tumors(self) -> list[Tissue]:
        return [t for t in self.tissues if t.is_tumor]

    @property
    def oars(self) -> list[Tissue]:
        return [t for t in self.tissues if not t.is_tumor]

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tissues]

    def with_target(self, name: str, voxels, drop_overlap: bool = True) -> "TissueSet":
        """Copy with tumour ``name`` replaced by ``voxels``; other tissues lose any overlap."""
        voxels = np.unique(np.asarray(voxels, dtype=np.int64))
        out = []
        for t in self.tissues:
            if t.name == name:
                out.append(replace(t, voxels=voxels))
            elif drop_overlap:
                out.append(replace(t, voxels=np.setdiff1d(t.voxels, voxels)))
            else:
                out.append(t)
        return TissueSet(out)


@dataclass(frozen=True)
class KernelParams:
    peak: float = 1.0
    attenuation_mm: float = 60.0
    sigma_mm: float = 3.0
    cutoff: float = 1e-3  # entries below cutoff * peak are dropped


@dataclass
class BeamletLayout:
    entry: np.ndarray  # (n, 3) entry point of each beamlet axis, mm
    direction: np.ndarray  # (n, 3) unit propagation vectors
    resolution_mm: float
    beam_index: np.ndarray | None = None

    def __post_init__(self):
        self.entry = np.atleast_2d(np.asarray(self.entry, dtype=float))
        self.direction = np.atleast_2d(np.asarray(self.direction, dtype=float))
        if self.entry.shape != self.direction.shape or self.entry.shape[1:] != (3,):
            raise ValueError("entry and direction must both be (n, 3)")
        if len(self.entry) < 1:
            raise ValueError("a layout needs at least one beamlet")
        if np.abs(np.linalg.norm(self.direction, axis=1) - 1.0).max() > 1e-9:
            raise ValueError("beamlet directions must be unit vectors")
        if self.beam_index is None:
            self.beam_index = np.zeros(len(self.entry), dtype=np.int64)

    def __len__(self):
        return len(self.entry)


def kernel_dose(points, beamlets: BeamletLayout, kernel: KernelParams) -> np.ndarray:
    """Dose per unit intensity at ``points`` (k, 3) from each beamlet: (k, n_beamlets).

    Exponential attenuation with depth along the beamlet axis times a
    Gaussian in the lateral distance; zero upstream of the entry plane.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    rel = pts[:, None, :] - beamlets.entry[None, :, :]
    depth = np.einsum("kbi,bi->kb", rel, beamlets.direction)
    lateral2 = np.maximum(np.einsum("kbi,kbi->kb", rel, rel) - depth**2, 0.0)
    with np.errstate(over="ignore", under="ignore"):
        if kernel.attenuation_mm > 0:
            atten = np.exp(-np.maximum(depth, 0.0) / kernel.attenuation_mm)
        else:
            atten = (depth <= 0.0).astype(float)
        dose = kernel.peak * atten * np.exp(-lateral2 / (2.0 * kernel.sigma_mm**2))
    dose[depth < 0.0] = 0.0
    if kernel.cutoff > 0:
        dose[dose < kernel.cutoff * kernel.peak] = 0.0
    return dose


@dataclass
class DoseInfluence:
    """Dose per unit beamlet intensity for a fixed list of voxels."""

    voxels: np.ndarray
    points: np.ndarray
    matrix: np.ndarray
    beamlets: BeamletLayout
    kernel: KernelParams

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def shifted(self, displacement) -> np.ndarray:
        """The matrix re-evaluated with every voxel centre translated by ``displacement``."""
        d = np.asarray(displacement, dtype=float)
        if not d.any():
            return self.matrix.copy()
        return kernel_dose(self.points + d, self.beamlets, self.kernel)


def dose_influence(grid: VoxelGrid, voxels, beamlets: BeamletLayout, kernel: KernelParams) -> DoseInfluence:
    voxels = np.asarray(voxels, dtype=np.int64)
    pts = grid.centers(voxels)
    return DoseInfluence(voxels, pts, kernel_dose(pts, beamlets, kernel), beamlets, kernel)


def nominal_dose_matrix(grid: VoxelGrid, tissues: TissueSet, beamlets: BeamletLayout,
                        kernel: KernelParams) -> DoseInfluence:
    """Dose influence for every tissue voxel, rows in tissue order."""
    if len(beamlets) < 1:
        raise ValueError("need at least one beamlet")
    voxels = np.concatenate([t.voxels for t in tissues])
    return dose_influence(grid, voxels, beamlets, kernel)


@dataclass
class CaseSpec:
    name: str = "case"
    volume_cm3: float = 2.60
    n_oars: int = 2
    ctv_plus_margin_mm: float = 2.0
    ptv_margin_mm: float = 4.0
    shift_std_mm: float = 3.0
    dims: tuple[int, int, int] = (32, 32, 32)
    spacing_mm: tuple[float, float, float] = (2.0, 2.0, 2.0)
    oar_volume_cm3: list[float] = field(default_factory=lambda: [1.5, 1.5])
    oar_gap_mm: float = 0.0
    oar_directions: list[list[float]] = field(default_factory=lambda: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    include_ring: bool = False
    ring_width_mm: float = 6.0
    ring_max_gy: float = 70.0
    kernel: KernelParams = field(default_factory=KernelParams)
    n_beams: int = 5
    beamlet_spacing_mm: float = 5.0
    aperture_mm: float | None = None
    source_distance_mm: float = 100.0
    tumor_min_gy: float = 60.0
    tumor_max_gy: float = 80.0
    oar_max_gy: list[float] = field(default_factory=lambda: [50.0, 35.0])
    ring_weight: float = 0.2
    alpha_over: float = 10.0
    alpha_under: float = 10.0
    beta_over: float = 1.0
    beta_under: float = 1.0

    def __post_init__(self):
        if isinstance(self.kernel, dict):
            self.kernel = KernelParams(**self.kernel)
        self.dims = tuple(int(d) for d in self.dims)
        if np.isscalar(self.spacing_mm):
            self.spacing_mm = (float(self.spacing_mm),) * 3
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if self.n_oars < 0:
            raise ValueError("n_oars must be >= 0")
        if self.n_oars > min(len(self.oar_volume_cm3), len(self.oar_directions), len(self.oar_max_gy)):
            raise ValueError("need an OAR volume, direction and dose limit for every OAR")
        if self.ctv_plus_margin_mm < 0 or self.ptv_margin_mm < 0:
            raise ValueError("margins must be nonnegative")
        if self.shift_std_mm < 0:
            raise ValueError("shift_std_mm must be nonnegative")

    @property
    def grid(self) -> VoxelGrid:
        return VoxelGrid(self.dims, self.spacing_mm)


def _closest(grid: VoxelGrid, center, count: int, exclude=None) -> np.ndarray:
    d2 = ((grid.centers() - np.asarray(center)) ** 2).sum(axis=1)
    if exclude is not None and len(exclude):
        d2[np.asarray(exclude, dtype=np.int64)] = np.inf
    order = np.argsort(d2, kind="stable")[:count]
    if not np.isfinite(d2[order]).all():
        raise InfeasibleSpecError("grid too small for the requested structure")
    return np.sort(order)


def _voxel_count(volume_cm3: float, grid: VoxelGrid, what: str) -> int:
    vv = grid.voxel_volume
    vol = volume_cm3 * 1000.0
    if vol < vv * (1 - 1e-9):
        raise InfeasibleSpecError(f"{what} volume {volume_cm3} cm^3 is below one voxel ({vv / 1000.0} cm^3)")
    count = max(1, int(round(vol / vv)))
    if count > grid.n_voxels:
        raise InfeasibleSpecError(f"{what} does not fit in the grid")
    return count


def beam_layout(spec: CaseSpec, center) -> BeamletLayout:
    r_ptv = (3 * spec.volume_cm3 * 1000.0 / (4 * math.pi)) ** (1 / 3) + spec.ptv_margin_mm
    aperture = spec.aperture_mm if spec.aperture_mm is not None else 2.0 * (r_ptv + spec.shift_std_mm)
    s = spec.beamlet_spacing_mm
    k = max(1, int(math.ceil(aperture / s)))
    offs = (np.arange(k) - (k - 1) / 2.0) * s
    uu, vv = np.meshgrid(offs, offs, indexing="ij")
    keep = uu**2 + vv**2 <= (aperture / 2.0 + 1e-9) ** 2
    if not keep.any():
        keep[k // 2, k // 2] = True
    uu, vv = uu[keep], vv[keep]
    entries, dirs, beam = [], [], []
    for b in range(spec.n_beams):
        ang = 2.0 * math.pi * b / spec.n_beams
        d = np.array([math.cos(ang), math.sin(ang), 0.0])
        u = np.array([-math.sin(ang), math.cos(ang), 0.0])
        v = np.array([0.0, 0.0, 1.0])
        base = np.asarray(center) - spec.source_distance_mm * d
        entries.append(base + uu[:, None] * u + vv[:, None] * v)
        dirs.append(np.tile(d, (uu.size, 1)))
        beam.append(np.full(uu.size, b))
    return BeamletLayout(np.vstack(entries), np.vstack(dirs), s, np.concatenate(beam))


def generate_case(spec: CaseSpec) -> tuple[VoxelGrid, TissueSet, BeamletLayout]:
    """Build the CTV-based case: tumour ``Tumor_0``, organs ``OAR_0..``, optional ``Ring``."""
    grid = spec.grid
    iso = grid.center
    n_tumor = _voxel_count(spec.volume_cm3, grid, "tumour")
    ctv = _closest(grid, iso, n_tumor)
    ptv = dilate(ctv, spec.ptv_margin_mm, grid)
    r_ptv = np.sqrt(((grid.centers(ptv) - iso) ** 2).sum(axis=1).max())
    weights = dict(alpha_over=spec.alpha_over, alpha_under=spec.alpha_under,
                   beta_over=spec.beta_over, beta_under=spec.beta_under)
    tissues = [Tissue("Tumor_0", "tumor", ctv, spec.tumor_max_gy, spec.tumor_min_gy, **weights)]
    taken = ptv
    for k in range(spec.n_oars):
        n_oar = _voxel_count(spec.oar_volume_cm3[k], grid, f"OAR_{k}")
        r_oar = (3 * n_oar * grid.voxel_volume / (4 * math.pi)) ** (1 / 3)
        direction = np.asarray(spec.oar_directions[k], dtype=float)
        direction = direction / np.linalg.norm(direction)
        center = iso + direction * (r_ptv + spec.oar_gap_mm + r_oar)
        vox = _closest(grid, center, n_oar, exclude=taken)
        taken = np.union1d(taken, vox)
        tissues.append(Tissue(f"OAR_{k}", "oar", vox, spec.oar_max_gy[k], **weights))
    if spec.include_ring:
        shell = np.setdiff1d(dilate(ctv, spec.ptv_margin_mm + spec.ring_width_mm, grid), taken)
        if shell.size:
            tissues.append(Tissue("Ring", "oar", shell, spec.ring_max_gy,
                                  alpha_over=spec.ring_weight * spec.alpha_over, alpha_under=0.0,
                                  beta_over=spec.ring_weight * spec.beta_over, beta_under=0.0))
    return grid, TissueSet(tissues), beam_layout(spec, iso)
