"""Landmark types, spherical coordinates and the 19-D pairwise descriptor.

Feature layout of one ordered pair (A, B)::

    [A_x, A_y, A_z,  r, theta, phi (Me->A),
     B_x, B_y, B_z,  r, theta, phi (Me->B),
     Me_x, Me_y, Me_z,  r, theta, phi (A->B),
     d1]

All positions are in pixel space. ``d1`` is the diagonal of the bounding box
around the mandibular landmarks of the input configuration.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError, DatasetError, InvalidInputError, InvalidPairError

FEATURE_DIM = 19


class LandmarkName(str, enum.Enum):
    Me = "Me"
    Gn = "Gn"
    Pg = "Pg"
    B = "B"
    Id = "Id"
    CorL = "CorL"
    CorR = "CorR"
    CdL = "CdL"
    CdR = "CdR"
    Ans = "Ans"
    A = "A"
    Pr = "Pr"
    Pns = "Pns"
    Na = "Na"

    def __str__(self) -> str:
        return self.value

    @property
    def index(self) -> int:
        return _INDEX[self]

    @classmethod
    def parse(cls, name: "str | LandmarkName") -> "LandmarkName":
        if isinstance(name, cls):
            return name
        try:
            return cls(name)
        except ValueError:
            pass
        # tolerate the upper-case spellings used in figures (ANS, PNS, CD_L, ...)
        key = str(name).replace("_", "").lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise InvalidInputError(f"unknown landmark name {name!r}")


ALL_LANDMARKS: tuple[LandmarkName, ...] = tuple(LandmarkName)
_INDEX = {name: i for i, name in enumerate(ALL_LANDMARKS)}

MANDIBULAR = frozenset(
    {
        LandmarkName.Me,
        LandmarkName.Gn,
        LandmarkName.Pg,
        LandmarkName.B,
        LandmarkName.Id,
        LandmarkName.CorL,
        LandmarkName.CorR,
        LandmarkName.CdL,
        LandmarkName.CdR,
    }
)
MAXILLARY = frozenset({LandmarkName.Ans, LandmarkName.A, LandmarkName.Pr, LandmarkName.Pns})
NASAL = frozenset({LandmarkName.Na})
GROUPS = {"L1": MANDIBULAR, "L2": MAXILLARY, "L3": NASAL}


def canonical_order(names: Iterable["str | LandmarkName"]) -> list[LandmarkName]:
    """Sort landmark names by their enumeration order."""
    return sorted((LandmarkName.parse(n) for n in names), key=lambda n: n.index)


@dataclass(frozen=True)
class LandmarkSet:
    """One subject's landmarks in pixel space plus the voxel spacing in mm.

    Construction checks finiteness and spacing only; completeness (all 14
    landmarks) is checked by :meth:`require_complete`, which dataset loading
    always calls.
    """

    subject_id: str
    spacing_mm: tuple[float, float, float]
    coords: Mapping[LandmarkName, np.ndarray] = field(repr=False)

    def __post_init__(self):
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3:
            raise InvalidInputError(f"{self.subject_id}: spacing_mm must have 3 components")
        if not all(math.isfinite(s) and s > 0 for s in spacing):
            raise InvalidInputError(f"{self.subject_id}: spacing_mm must be positive, got {spacing}")
        keys = [LandmarkName.parse(name) for name in self.coords]
        try:
            block = np.array(list(self.coords.values()), dtype=np.float64)
        except (TypeError, ValueError):
            block = None
        if block is None or block.shape != (len(keys), 3) or not np.isfinite(block).all():
            # slow path: reshape each value and report the first offending landmark
            block = np.array([self._checked(k, v) for k, v in zip(keys, self.coords.values())]).reshape(-1, 3)
        order = sorted(range(len(keys)), key=lambda i: keys[i].index)
        block = block[order]
        block.setflags(write=False)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "coords", {keys[i]: block[j] for j, i in enumerate(order)})

    def _checked(self, key: LandmarkName, value) -> np.ndarray:
        try:
            arr = np.asarray(value, dtype=np.float64).reshape(-1)
        except (TypeError, ValueError):
            raise InvalidInputError(f"{self.subject_id}: landmark {key} is not numeric") from None
        if arr.shape != (3,):
            raise InvalidInputError(f"{self.subject_id}: landmark {key} must be a 3-vector")
        if not np.isfinite(arr).all():
            raise InvalidInputError(f"{self.subject_id}: landmark {key} has non-finite coordinates")
        return arr

    def __getitem__(self, name: "str | LandmarkName") -> np.ndarray:
        key = LandmarkName.parse(name)
        try:
            return self.coords[key]
        except KeyError:
            raise DatasetError(f"subject {self.subject_id!r} has no landmark {key}") from None

    def __contains__(self, name) -> bool:
        return LandmarkName.parse(name) in self.coords

    def missing(self, names: Iterable["str | LandmarkName"] = ALL_LANDMARKS) -> list[LandmarkName]:
        keys = [LandmarkName.parse(n) for n in names]
        return [k for k in keys if k not in self.coords]

    def require_complete(self) -> "LandmarkSet":
        missing = self.missing()
        if missing:
            raise DatasetError(
                f"subject {self.subject_id!r} is missing landmarks: {', '.join(map(str, missing))}"
            )
        return self

    def as_array(self, names: Sequence["str | LandmarkName"] = ALL_LANDMARKS) -> np.ndarray:
        """Stack the requested landmarks into a ``(len(names), 3)`` array."""
        if tuple(names) == tuple(self.coords):
            return np.array(list(self.coords.values()))
        keys = [LandmarkName.parse(n) for n in names]
        missing = [k for k in keys if k not in self.coords]
        if missing:
            raise DatasetError(f"subject {self.subject_id!r} has no landmark {missing[0]}")
        return np.array([self.coords[k] for k in keys])

    def to_mm(self, pixel: np.ndarray) -> np.ndarray:
        return np.asarray(pixel, dtype=np.float64) * np.asarray(self.spacing_mm)

    @classmethod
    def from_array(cls, subject_id, spacing_mm, array, names=ALL_LANDMARKS) -> "LandmarkSet":
        return cls(subject_id, tuple(spacing_mm), {n: array[i] for i, n in enumerate(names)})


class SphericalVec(NamedTuple):
    r: float
    theta: float
    phi: float


def to_spherical(v) -> SphericalVec:
    """Physics convention: polar angle from +z, azimuth from +x via atan2.

    The zero vector maps to (0, 0, 0) so no NaN leaks into features.
    """
    x, y, z = _as_vec3(v)
    r = math.sqrt(x * x + y * y + z * z)
    if r == 0.0:
        return SphericalVec(0.0, 0.0, 0.0)
    theta = math.acos(max(-1.0, min(1.0, z / r)))
    phi = math.atan2(y, x)
    # atan2 returns -pi for y = -0.0 or a tiny negative y; keep phi in (-pi, pi]
    return SphericalVec(r, theta, math.pi if phi <= -math.pi else phi)


def from_spherical(s) -> np.ndarray:
    r, theta, phi = s
    return r * np.array(
        [math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)]
    )


def spherical_array(v: np.ndarray) -> np.ndarray:
    """Vectorised :func:`to_spherical` over the last axis of ``v``."""
    v = np.asarray(v, dtype=np.float64)
    r = np.sqrt(np.sum(v * v, axis=-1))
    safe = np.where(r > 0, r, 1.0)
    theta = np.where(r > 0, np.arccos(np.clip(v[..., 2] / safe, -1.0, 1.0)), 0.0)
    phi = np.arctan2(v[..., 1], v[..., 0])
    phi = np.where(r > 0, np.where(phi <= -np.pi, np.pi, phi), 0.0)
    return np.stack([r, theta, phi], axis=-1)


def _as_vec3(v) -> tuple[float, float, float]:
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise InvalidInputError(f"expected a 3-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"non-finite vector {arr.tolist()}")
    return float(arr[0]), float(arr[1]), float(arr[2])


def mandibular_inputs(names: Iterable["str | LandmarkName"]) -> list[LandmarkName]:
    return [n for n in canonical_order(names) if n in MANDIBULAR]


def mandible_diagonal(lset: LandmarkSet, input_mandibular: Sequence["str | LandmarkName"]) -> float:
    names = [LandmarkName.parse(n) for n in input_mandibular]
    if not names:
        raise ConfigurationError("mandible diagonal needs at least one mandibular landmark")
    foreign = [str(n) for n in names if n not in MANDIBULAR]
    if foreign:
        raise ConfigurationError(f"not mandibular landmarks: {', '.join(foreign)}")
    pts = lset.as_array(names)
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def pairwise_features(
    lset: LandmarkSet, a: "str | LandmarkName", b: "str | LandmarkName", d1: float
) -> np.ndarray:
    a, b = LandmarkName.parse(a), LandmarkName.parse(b)
    if a == b:
        raise InvalidPairError(f"pair needs two distinct landmarks, got {a} twice")
    if LandmarkName.Me not in lset:
        raise DatasetError(f"subject {lset.subject_id!r} has no Menton reference landmark")
    pa, pb, me = lset[a], lset[b], lset[LandmarkName.Me]
    out = np.empty(FEATURE_DIM)
    out[0:3] = pa
    out[3:6] = to_spherical(pa - me)
    out[6:9] = pb
    out[9:12] = to_spherical(pb - me)
    out[12:15] = me
    out[15:18] = to_spherical(pb - pa)
    out[18] = d1
    return out


def ordered_pairs(names: Sequence[LandmarkName]) -> list[tuple[LandmarkName, LandmarkName]]:
    """All (i, j), i != j, grouped by i in the given order."""
    return [(a, b) for a in names for b in names if a != b]


def pair_feature_tensor(coords: np.ndarray, input_names: Sequence["str | LandmarkName"]) -> np.ndarray:
    """Features for a batch of subjects.

    ``coords`` has shape ``(N, 14, 3)`` in :data:`ALL_LANDMARKS` order. Pairs
    follow :func:`ordered_pairs` over the canonically ordered inputs. Returns
    an array of shape ``(P, N, 19)`` with ``P = n(n-1)``.
    """
    names = canonical_order(input_names)
    if LandmarkName.Me not in names:
        raise ConfigurationError("Me must be among the input landmarks")
    coords = np.asarray(coords, dtype=np.float64)
    idx = np.array([n.index for n in names])
    pts = coords[:, idx, :]
    mand = [k for k, n in enumerate(names) if n in MANDIBULAR]
    box = pts[:, mand, :]
    d1 = np.linalg.norm(box.max(axis=1) - box.min(axis=1), axis=-1)
    me = coords[:, LandmarkName.Me.index, :]
    rel_me = spherical_array(pts - me[:, None, :])

    n = len(names)
    ia = np.array([i for i in range(n) for j in range(n) if i != j])
    ib = np.array([j for i in range(n) for j in range(n) if i != j])
    feats = np.empty((len(ia), coords.shape[0], FEATURE_DIM))
    feats[:, :, 0:3] = pts[:, ia, :].transpose(1, 0, 2)
    feats[:, :, 3:6] = rel_me[:, ia, :].transpose(1, 0, 2)
    feats[:, :, 6:9] = pts[:, ib, :].transpose(1, 0, 2)
    feats[:, :, 9:12] = rel_me[:, ib, :].transpose(1, 0, 2)
    feats[:, :, 12:15] = me[None, :, :]
    feats[:, :, 15:18] = spherical_array(pts[:, ib, :] - pts[:, ia, :]).transpose(1, 0, 2)
    feats[:, :, 18] = d1[None, :]
    return feats


@dataclass
class FeatureNormalizer:
    """Per-component standardisation fit on training data only.

    Statistics are taken over the leading axis, so a ``(N, 19)`` collection
    gives one shift/scale per component and a ``(N, P, 19)`` tensor gives one
    per pair and component.
    """

    shift: np.ndarray
    scale: np.ndarray

    STD_FLOOR = 1e-8

    @classmethod
    def fit(cls, features) -> "FeatureNormalizer":
        x = np.asarray(features, dtype=np.float64)
        if x.ndim < 2 or x.shape[0] == 0:
            raise InvalidInputError("cannot fit a normaliser on an empty collection")
        shift = x.mean(axis=0)
        std = x.std(axis=0)
        scale = np.where(std < cls.STD_FLOOR, 1.0, std)
        return cls(shift, scale)

    @classmethod
    def identity(cls, shape) -> "FeatureNormalizer":
        return cls(np.zeros(shape), np.ones(shape))

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.shift) / self.scale

    def inverse(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.scale + self.shift
