"""Spatial multiscale fields c(x), nonlinear models k(s) and their sums.

The diffusion coefficient is ``alpha(x, s) = sum_i c_i(x) k_i(s)`` with each
``c_i`` piecewise constant on the fine elements.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import mesh_for

FIELD_MAGIC = b"LODF"
FIELD_VERSION = 1

# exp(709) is the largest finite double
_EXP_LIMIT = 700.0


@dataclass(frozen=True)
class SpatialField:
    """Per-fine-element positive values on an ``n x n`` mesh."""

    n: int
    values: np.ndarray = field(repr=False)
    descriptor: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.shape != (self.n * self.n,):
            raise ValueError(f"expected {self.n * self.n} values, got shape {values.shape}")
        if not np.all(values > 0):
            raise ValueError("spatial field values must be strictly positive")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def min(self) -> float:
        return float(self.values.min())

    @property
    def max(self) -> float:
        return float(self.values.max())

    @property
    def contrast(self) -> float:
        return self.max / self.min

    def to_bytes(self) -> bytes:
        header = FIELD_MAGIC + struct.pack("<II", FIELD_VERSION, self.n)
        return header + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> SpatialField:
        if data[:4] != FIELD_MAGIC:
            raise ValueError("not a spatial field file (bad magic)")
        version, n = struct.unpack("<II", data[4:12])
        if version != FIELD_VERSION:
            raise ValueError(f"unsupported field file version {version}")
        values = np.frombuffer(data[12:], dtype="<f8")
        if values.size != n * n:
            raise ValueError(f"truncated field file: {values.size} of {n * n} values")
        return cls(n, values.astype(np.float64))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> SpatialField:
        return cls.from_bytes(Path(path).read_bytes())


def generate_spatial_field(
    n_fine: int,
    seed: int,
    eps_cells: int,
    base_range: tuple[float, float],
    channel: tuple[tuple[float, float, float, float], float] | None = None,
) -> SpatialField:
    """Random field that is constant on each of ``eps_cells**2`` square cells.

    Cell values are drawn log-uniformly from ``base_range``. ``channel`` is
    ``((x0, x1, y0, y1), value)``; every cell overlapping that box with
    positive area takes ``value``.
    """
    if eps_cells < 1 or n_fine % eps_cells:
        raise ValueError(f"eps_cells={eps_cells} must divide the fine resolution {n_fine}")
    lo, hi = base_range
    if not 0 < lo <= hi:
        raise ValueError(f"base_range must be positive and ordered, got {base_range}")

    rng = np.random.default_rng(seed)
    cells = np.exp(rng.uniform(np.log(lo), np.log(hi), size=(eps_cells, eps_cells)))
    if channel is not None:
        (x0, x1, y0, y1), value = channel
        edges = np.arange(eps_cells + 1) / eps_cells
        in_x = (edges[:-1] < x1) & (edges[1:] > x0)
        in_y = (edges[:-1] < y1) & (edges[1:] > y0)
        cells[np.ix_(in_y, in_x)] = value

    block = n_fine // eps_cells
    # rows are y, columns x, matching the x-fastest element numbering
    values = np.repeat(np.repeat(cells, block, axis=0), block, axis=1).ravel()
    descriptor = {
        "seed": seed,
        "eps_cells": eps_cells,
        "base_range": [float(lo), float(hi)],
        "channel": None if channel is None else [list(channel[0]), float(channel[1])],
    }
    return SpatialField(n_fine, values, descriptor)


DEFAULT_CHANNEL = ((0.5, 1.0, 0.05, 0.15), 50.0)


def default_field(n_fine: int = 128, seed: int = 42) -> SpatialField:
    """High-contrast experiment field: eps = 1/64, contrast about 1000."""
    return generate_spatial_field(n_fine, seed, 64, (0.05, 1.0), DEFAULT_CHANNEL)


def secondary_field(n_fine: int = 128, seed: int = 42) -> SpatialField:
    """Lower-contrast companion field used by the combined models."""
    return generate_spatial_field(n_fine, seed + 1, 64, (0.2, 1.0), ((0.5, 1.0, 0.05, 0.15), 5.0))


def _check_exp(arg):
    if np.any(arg > _EXP_LIMIT):
        raise OverflowError(
            f"exponential model saturated: exponent {float(np.max(arg)):.4g} exceeds {_EXP_LIMIT}"
        )


def _vg_parts(s, a):
    # t = a|s|, r = sqrt(1 + t^2), w = t + r; k = (w / r)^2 / r^2
    t = a * np.abs(s)
    r = np.sqrt(1.0 + t * t)
    return t, r, t + r


@dataclass(frozen=True)
class NonlinearModel:
    """Scalar nonlinearity k(s) with analytic first and second derivatives.

    kinds: ``exp`` (k = exp(param * s)), ``van_genuchten`` (param = a),
    ``constant`` (k = param) and ``quadratic`` (k = 1 + s^2).
    """

    kind: str
    param: float = 1.0

    def __post_init__(self):
        if self.kind not in ("exp", "van_genuchten", "constant", "quadratic"):
            raise ValueError(f"unknown model kind {self.kind!r}")

    @property
    def name(self) -> str:
        return f"{self.kind}({self.param:g})"

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    def k(self, s):
        s = np.asarray(s, dtype=np.float64)
        if self.kind == "exp":
            _check_exp(self.param * s)
            return np.exp(self.param * s)
        if self.kind == "van_genuchten":
            t, r, w = _vg_parts(s, self.param)
            return (w / r**2) ** 2
        if self.kind == "constant":
            return np.full_like(s, self.param)
        return 1.0 + s * s

    def dk(self, s):
        s = np.asarray(s, dtype=np.float64)
        if self.kind == "exp":
            _check_exp(self.param * s)
            return self.param * np.exp(self.param * s)
        if self.kind == "van_genuchten":
            a = self.param
            t, r, w = _vg_parts(s, a)
            dk_dt = 2.0 * w * (1.0 - t * w) / r**6
            # |s| kink: the sign factor is taken as 0 at s = 0
            return a * np.sign(s) * dk_dt
        if self.kind == "constant":
            return np.zeros_like(s)
        return 2.0 * s

    def d2k(self, s):
        s = np.asarray(s, dtype=np.float64)
        if self.kind == "exp":
            _check_exp(self.param * s)
            return self.param**2 * np.exp(self.param * s)
        if self.kind == "van_genuchten":
            a = self.param
            t, r, w = _vg_parts(s, a)
            d2k_dt2 = 2.0 * (1.0 - 7.0 * t * w + w * w * (3.0 * t * t - 1.0)) / r**8
            return a * a * d2k_dt2
        if self.kind == "constant":
            return np.zeros_like(s)
        return np.full_like(s, 2.0)

    def sample_bounds(self, s_grid) -> dict:
        """Ellipticity/boundedness/Lipschitz constants observed on ``s_grid``."""
        s_grid = np.asarray(s_grid, dtype=np.float64)
        values = self.k(s_grid)
        return {
            "lambda": float(values.min()),
            "Lambda1": float(values.max()),
            "Lambda0": float(np.abs(self.dk(s_grid)).max()),
        }


MODELS = {
    "exp4": NonlinearModel("exp", 4.0),
    "exp2": NonlinearModel("exp", 2.0),
    "vg": NonlinearModel("van_genuchten", 0.005),
    "vg5": NonlinearModel("van_genuchten", 5.0),
    "linear": NonlinearModel("constant", 1.0),
    "quadratic": NonlinearModel("quadratic"),
}


@dataclass(frozen=True)
class CombinedCoefficient:
    """``alpha(x, s) = sum_i c_i(x) k_i(s)`` over fine elements."""

    terms: tuple[tuple[SpatialField, NonlinearModel], ...]

    def __post_init__(self):
        terms = tuple(self.terms)
        if not terms:
            raise ValueError("a coefficient needs at least one term")
        sizes = {c.n for c, _ in terms}
        if len(sizes) != 1:
            raise ValueError(f"all spatial fields must share one fine mesh, got sizes {sizes}")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def single(cls, c: SpatialField, model: NonlinearModel) -> CombinedCoefficient:
        return cls(((c, model),))

    @property
    def n(self) -> int:
        return self.terms[0][0].n

    @property
    def is_linear(self) -> bool:
        return all(model.is_constant for _, model in self.terms)

    @property
    def descriptor(self) -> str:
        return " + ".join(f"c{i}*{m.name}" for i, (_, m) in enumerate(self.terms))

    def alpha(self, s):
        return sum(c.values * m.k(s) for c, m in self.terms)

    def alpha_s(self, s):
        return sum(c.values * m.dk(s) for c, m in self.terms)

    def alpha_ss(self, s):
        return sum(c.values * m.d2k(s) for c, m in self.terms)

    def fingerprint(self) -> bytes:
        h = hashlib.sha256()
        for c, m in self.terms:
            h.update(c.to_bytes())
            h.update(m.name.encode())
        return h.digest()


def build_coefficient(model_id: str, n_fine: int = 128, seed: int = 42) -> CombinedCoefficient:
    """Experiment coefficients by name: the single models in ``MODELS`` on the
    default field, plus ``combined_vg`` and ``combined_exp_vg``."""
    c2 = default_field(n_fine, seed)
    if model_id in MODELS:
        return CombinedCoefficient.single(c2, MODELS[model_id])
    c1 = secondary_field(n_fine, seed)
    if model_id == "combined_vg":
        return CombinedCoefficient(((c1, MODELS["vg5"]), (c2, MODELS["vg"])))
    if model_id == "combined_exp_vg":
        return CombinedCoefficient(((c1, MODELS["vg5"]), (c2, MODELS["exp2"])))
    raise ValueError(f"unknown model id {model_id!r}")


def element_midpoint_values(corners: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Mean of the four corner values, i.e. a bilinear function at the midpoint."""
    return v[corners].mean(axis=1)


def elementwise_alpha(coeff: CombinedCoefficient, v: np.ndarray) -> np.ndarray:
    """alpha frozen per fine element at the midpoint value of ``v``."""
    corners = mesh_for(coeff.n).element_corners
    return coeff.alpha(element_midpoint_values(corners, v))
