"""Dataset I/O, interpolation augmentation, synthetic cohorts and CV folds."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ConfigurationError, InvalidInputError, InvalidWeightsError, LoadError
from .landmarks import ALL_LANDMARKS, LandmarkName, LandmarkSet

PROVENANCES = ("real", "augmented", "synthetic")


@dataclass
class Dataset:
    subjects: list[LandmarkSet]
    provenance: dict[str, str] = field(default_factory=dict)
    # augmented subject id -> id of its max-weight source
    parents: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self._index = {}
        for s in self.subjects:
            if s.subject_id in self._index:
                raise LoadError(f"duplicate subject id {s.subject_id!r}")
            self._index[s.subject_id] = s
            s.require_complete()
            self.provenance.setdefault(s.subject_id, "real")
        for sid, prov in self.provenance.items():
            if prov not in PROVENANCES:
                raise LoadError(f"subject {sid!r}: unknown provenance {prov!r}")

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    def __getitem__(self, subject_id: str) -> LandmarkSet:
        return self._index[subject_id]

    @property
    def ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]

    def originals(self) -> list[LandmarkSet]:
        """Subjects that were not produced by augmentation."""
        return [s for s in self.subjects if self.provenance[s.subject_id] != "augmented"]

    def subset(self, ids: Iterable[str]) -> "Dataset":
        keep = set(ids)
        subjects = [s for s in self.subjects if s.subject_id in keep]
        return Dataset(
            subjects,
            {s.subject_id: self.provenance[s.subject_id] for s in subjects},
            {k: v for k, v in self.parents.items() if k in keep},
        )

    def extended(self, other: "Dataset") -> "Dataset":
        return Dataset(
            self.subjects + other.subjects,
            {**self.provenance, **other.provenance},
            {**self.parents, **other.parents},
        )

    def coords(self) -> np.ndarray:
        """All landmarks as an ``(N, 14, 3)`` array in canonical order."""
        if not self.subjects:
            return np.zeros((0, len(ALL_LANDMARKS), 3))
        return np.stack([s.as_array() for s in self.subjects])

    def spacings(self) -> np.ndarray:
        return np.array([s.spacing_mm for s in self.subjects], dtype=np.float64).reshape(-1, 3)

    def to_json(self) -> dict:
        entries = []
        for s in self.subjects:
            entry = {
                "id": s.subject_id,
                "spacing_mm": list(s.spacing_mm),
                "landmarks": {str(k): v.tolist() for k, v in s.coords.items()},
                "provenance": self.provenance[s.subject_id],
            }
            if s.subject_id in self.parents:
                entry["parent"] = self.parents[s.subject_id]
            entries.append(entry)
        return {"subjects": entries}


def _parse_entry(k: int, entry, complete: bool) -> LandmarkSet:
    sid = entry.get("id") if isinstance(entry, Mapping) else None
    if not isinstance(sid, str) or not sid:
        raise LoadError(f"subject #{k}: missing or invalid field 'id'")
    spacing = entry.get("spacing_mm")
    if not isinstance(spacing, list) or len(spacing) != 3:
        raise LoadError(f"subject {sid!r}: field 'spacing_mm' must be a list of 3 numbers")
    try:
        spacing = [float(v) for v in spacing]
    except (TypeError, ValueError):
        raise LoadError(f"subject {sid!r}: field 'spacing_mm' must be numeric") from None
    if not all(math.isfinite(v) and v > 0 for v in spacing):
        raise LoadError(f"subject {sid!r}: field 'spacing_mm' must be positive, got {spacing}")
    marks = entry.get("landmarks")
    if not isinstance(marks, Mapping):
        raise LoadError(f"subject {sid!r}: missing field 'landmarks'")
    coords = {}
    for name, value in marks.items():
        try:
            key = LandmarkName.parse(name)
        except InvalidInputError:
            raise LoadError(f"subject {sid!r}: unknown landmark {name!r} in field 'landmarks'") from None
        coords[key] = value
    missing = [str(n) for n in ALL_LANDMARKS if n not in coords]
    if complete and missing:
        raise LoadError(f"subject {sid!r}: field 'landmarks' is missing {', '.join(missing)}")
    try:
        return LandmarkSet(sid, tuple(spacing), coords)
    except InvalidInputError as exc:
        raise LoadError(f"subject {sid!r}: {exc}") from None


def _subject_entries(doc) -> list:
    if not isinstance(doc, Mapping) or not isinstance(doc.get("subjects"), list):
        raise LoadError("dataset must be a JSON object with a 'subjects' array")
    return doc["subjects"]


def parse_dataset(doc: Mapping) -> Dataset:
    subjects, provenance, parents = [], {}, {}
    for k, entry in enumerate(_subject_entries(doc)):
        lset = _parse_entry(k, entry, complete=True)
        sid = lset.subject_id
        if sid in provenance:
            raise LoadError(f"subject {sid!r}: duplicate id")
        prov = entry.get("provenance", "real")
        if prov not in PROVENANCES:
            raise LoadError(f"subject {sid!r}: field 'provenance' must be one of {PROVENANCES}")
        subjects.append(lset)
        provenance[sid] = prov
        if "parent" in entry:
            parents[sid] = str(entry["parent"])
    return Dataset(subjects, provenance, parents)


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise LoadError(f"dataset file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: invalid JSON ({exc})") from None


def load_subjects(path) -> list[LandmarkSet]:
    """Lenient loader for inference and evaluation: subjects may lack landmarks."""
    entries = _subject_entries(_read_json(Path(path)))
    return [_parse_entry(k, e, complete=False) for k, e in enumerate(entries)]


def load_dataset(path) -> Dataset:
    return parse_dataset(_read_json(Path(path)))


def save_dataset(dataset: Dataset, path) -> None:
    Path(path).write_text(json.dumps(dataset.to_json(), indent=1) + "\n")


# ------------------------------------------------------------------ augmentation


def augment(sets: Sequence[LandmarkSet], weights, noise_bound=5.0, rng=None, subject_id="augmented"):
    """Convex combination of 2 or 3 subjects plus uniform per-component noise.

    ``noise_bound=0`` disables the noise. Spacing is copied from the
    highest-weight source.
    """
    if len(sets) not in (2, 3):
        raise InvalidInputError(f"augmentation mixes 2 or 3 subjects, got {len(sets)}")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(sets),):
        raise InvalidWeightsError(f"need one weight per source subject, got {w.shape}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise InvalidWeightsError(f"weights must be non-negative and sum to 1, got {w.tolist()}")
    names = list(sets[0].coords)
    for s in sets[1:]:
        if list(s.coords) != names:
            raise InvalidInputError("all source subjects must share the same landmark names")
    stacked = np.stack([s.as_array(names) for s in sets])
    mixed = (w[:, None, None] * stacked).sum(axis=0)
    if noise_bound > 0:
        if rng is None:
            raise InvalidInputError("noise needs an rng")
        mixed = mixed + rng.uniform(-noise_bound, noise_bound, size=mixed.shape)
    spacing = sets[int(np.argmax(w))].spacing_mm
    return LandmarkSet.from_array(subject_id, spacing, mixed, names)


def generate_augmented(dataset: Dataset, count: int, rng, noise_bound=5.0, prefix="aug") -> Dataset:
    """Return ``dataset`` extended by ``count`` interpolated subjects.

    Sources are drawn uniformly from the non-augmented subjects, 2 or 3 at a
    time, with Dirichlet(1, ..., 1) weights. Each child records its
    max-weight parent so it can inherit that parent's fold.
    """
    if count <= 0:
        return dataset
    pool = dataset.originals()
    if len(pool) < 2:
        raise ConfigurationError("augmentation needs at least two non-augmented subjects")
    existing = set(dataset.ids)
    children, provenance, parents = [], {}, {}
    serial = 0
    for _ in range(count):
        k = 3 if len(pool) >= 3 and rng.random() < 0.5 else 2
        picks = rng.choice(len(pool), size=k, replace=False)
        weights = rng.dirichlet(np.ones(k))
        while f"{prefix}{serial:06d}" in existing:
            serial += 1
        sid = f"{prefix}{serial:06d}"
        serial += 1
        sources = [pool[i] for i in picks]
        children.append(augment(sources, weights, noise_bound, rng, sid))
        provenance[sid] = "augmented"
        parents[sid] = sources[int(np.argmax(weights))].subject_id
    return dataset.extended(Dataset(children, provenance, parents))


# ------------------------------------------------------------ synthetic cohort

# Hand-placed layout in pixels at 0.5 mm spacing, Menton at (128, 60, 60):
# x runs right, y posterior, z superior. Condyles sit ~95 mm above and
# ~85 mm behind Menton, coronoids slightly lower and further forward; the
# maxillary points and nasion stack above the chin.
TEMPLATE_COORDS = {
    LandmarkName.Me: (128.0, 60.0, 60.0),
    LandmarkName.Gn: (128.0, 52.0, 68.0),
    LandmarkName.Pg: (128.0, 48.0, 82.0),
    LandmarkName.B: (128.0, 54.0, 102.0),
    LandmarkName.Id: (128.0, 56.0, 124.0),
    LandmarkName.CorL: (33.0, 180.0, 222.0),
    LandmarkName.CorR: (223.0, 180.0, 222.0),
    LandmarkName.CdL: (18.0, 230.0, 250.0),
    LandmarkName.CdR: (238.0, 230.0, 250.0),
    LandmarkName.Ans: (128.0, 44.0, 192.0),
    LandmarkName.A: (128.0, 50.0, 176.0),
    LandmarkName.Pr: (128.0, 52.0, 154.0),
    LandmarkName.Pns: (128.0, 150.0, 186.0),
    LandmarkName.Na: (128.0, 40.0, 300.0),
}


@dataclass(frozen=True)
class SynthTemplate:
    coords: Mapping[LandmarkName, tuple] = field(default_factory=lambda: dict(TEMPLATE_COORDS))
    scale_range: tuple[float, float] = (0.9, 1.1)
    max_rotation_deg: float = 10.0
    max_translation: float = 20.0
    jitter_sigma: float = 2.0
    spacing_mm: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        missing = [str(n) for n in ALL_LANDMARKS if n not in self.coords]
        if missing:
            raise ConfigurationError(f"template lacks landmarks: {', '.join(missing)}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigurationError(f"invalid scale range {self.scale_range}")
        if self.max_rotation_deg < 0 or self.max_translation < 0 or self.jitter_sigma < 0:
            raise ConfigurationError("template ranges must be non-negative")

    def base_array(self) -> np.ndarray:
        return np.array([self.coords[n] for n in ALL_LANDMARKS], dtype=np.float64)


def generate_synthetic(template: SynthTemplate, count: int, rng, prefix="syn") -> Dataset:
    """Template under a random similarity transform plus Gaussian jitter.

    Scale and rotation act about the template centroid; the rotation axis is
    uniform on the sphere with angle uniform in [0, max_rotation_deg];
    translation is uniform per axis in [-max_translation, max_translation].
    """
    base = template.base_array()
    centroid = base.mean(axis=0)
    subjects = []
    for k in range(count):
        scale = rng.uniform(*template.scale_range)
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        angle = math.radians(rng.uniform(0.0, template.max_rotation_deg))
        rot = Rotation.from_rotvec(axis * angle).as_matrix()
        shift = rng.uniform(-template.max_translation, template.max_translation, size=3)
        pts = scale * (base - centroid) @ rot.T + centroid + shift
        pts = pts + rng.normal(0.0, template.jitter_sigma, size=pts.shape) if template.jitter_sigma > 0 else pts
        subjects.append(LandmarkSet.from_array(f"{prefix}{k:05d}", template.spacing_mm, pts))
    return Dataset(subjects, {s.subject_id: "synthetic" for s in subjects})


# ------------------------------------------------------------------------ folds


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: Mapping[str, int]

    def fold_of(self, subject_id: str) -> int:
        return self.assignments[subject_id]

    def members(self, fold: int) -> list[str]:
        return [sid for sid, f in self.assignments.items() if f == fold]

    def assign_children(self, dataset: Dataset) -> "FoldPlan":
        """Extend the plan so augmented subjects follow their parent's fold."""
        assignments = dict(self.assignments)
        for sid, parent in dataset.parents.items():
            assignments[sid] = assignments[parent]
        return FoldPlan(self.k, assignments)

    def split(self, dataset: Dataset, fold: int) -> tuple[Dataset, Dataset]:
        """Train on the other folds (children included); test on this fold's originals."""
        plan = self.assign_children(dataset)
        train = [s.subject_id for s in dataset if plan.assignments[s.subject_id] != fold]
        test = [s.subject_id for s in dataset.originals() if plan.assignments[s.subject_id] == fold]
        return dataset.subset(train), dataset.subset(test)


def make_folds(dataset: Dataset, k: int = 4, rng_seed: int = 0) -> FoldPlan:
    """Balanced random partition of the non-augmented subjects into ``k`` folds."""
    if k < 2:
        raise ConfigurationError(f"need at least 2 folds, got {k}")
    originals = [s.subject_id for s in dataset.originals()]
    if len(originals) < k:
        raise ConfigurationError(f"{len(originals)} subjects cannot fill {k} folds")
    order = np.random.default_rng(rng_seed).permutation(len(originals))
    assignments = {originals[i]: int(pos % k) for pos, i in enumerate(order)}
    return FoldPlan(k, assignments).assign_children(dataset)
