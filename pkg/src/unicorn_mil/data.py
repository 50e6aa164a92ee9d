"""Feature-bag persistence, dataset manifests, grouped splits, and the
synthetic multi-stain generator.

A dataset on disk is a manifest (line-delimited text) plus one UNIBAG1
binary file per (sample, modality) pair. Bags hold float32 on disk and
float64 in memory. Cross-validation splits group by individual: all
segments of one individual stay inside a single split part.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ManifestError, ShapeError, VersionError
from .ioutil import atomic_write_bytes, atomic_write_text
from .rng import Rng

MODALITY_NAMES = ("HE", "EvG", "vK", "Movat")
CLASS_NAMES = ("AIT", "PIT", "EFA", "LFA", "CFA")
CLASS_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}
MODALITY_INDEX = {name: i for i, name in enumerate(MODALITY_NAMES)}

BAG_MAGIC = b"UNIBAG1\0"
BAG_VERSION = 1


@dataclass
class FeatureBag:
    """One staining's patch embeddings for one slide: an N x D matrix."""

    modality_id: int
    slide_id: str
    matrix: np.ndarray  # (N, D) float64

    @property
    def n_patches(self) -> int:
        return self.matrix.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.matrix.shape[1]


@dataclass
class SampleRecord:
    """One segment: up to one bag per modality, plus a 5-way label."""

    sample_id: str
    individual_id: str
    segment_id: str
    label: int
    bags: dict[int, FeatureBag]

    @property
    def present_modalities(self) -> list[int]:
        return sorted(self.bags)


@dataclass
class SampleStub:
    """Manifest row: identifiers plus bag paths, matrices not yet loaded."""

    sample_id: str
    individual_id: str
    segment_id: str
    label: int
    bag_paths: dict[int, Path]


@dataclass
class SplitPlan:
    fold_id: int
    train: list[str]
    val: list[str]
    test: list[str]


# -- UNIBAG1 binary format -----------------------------------------------------


def write_bag(bag: FeatureBag, path) -> None:
    """magic, version u32, modality u32, rows u32, cols u32, f32 LE payload."""
    rows, cols = bag.matrix.shape
    header = BAG_MAGIC + struct.pack("<IIII", BAG_VERSION, bag.modality_id, rows, cols)
    payload = np.ascontiguousarray(bag.matrix, dtype="<f4").tobytes()
    atomic_write_bytes(path, header + payload)


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: expected {n} bytes for {what}, got {len(buf)}")
    return buf


def read_bag(path) -> FeatureBag:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(BAG_MAGIC), "magic")
        if magic != BAG_MAGIC:
            raise FormatError(f"bad magic in {path.name}: {magic!r}")
        version, modality_id, rows, cols = struct.unpack("<IIII", _read_exact(fh, 16, "header"))
        if version != BAG_VERSION:
            raise VersionError(f"unsupported bag version {version}")
        if rows < 1 or cols < 1 or rows * cols > 2**28:
            raise FormatError(f"bad extents {rows}x{cols} in {path.name}")
        raw = _read_exact(fh, 4 * rows * cols, "payload")
        if fh.read(1):
            raise FormatError(f"trailing bytes after payload in {path.name}")
    matrix = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(rows, cols)
    return FeatureBag(modality_id=modality_id, slide_id=path.stem, matrix=matrix)


# -- manifest -----------------------------------------------------------------

_MANIFEST_HEADER = "# sample_id\tindividual_id\tsegment_id\tlabel\t" + "\t".join(MODALITY_NAMES)


def write_manifest(stubs: list[SampleStub], path, base_dir=None) -> None:
    """Bag paths are written relative to the manifest's directory."""
    base = Path(base_dir) if base_dir is not None else Path(path).parent
    lines = [_MANIFEST_HEADER]
    for s in stubs:
        cells = [s.sample_id, s.individual_id, s.segment_id, CLASS_NAMES[s.label]]
        for m in range(len(MODALITY_NAMES)):
            p = s.bag_paths.get(m)
            cells.append("" if p is None else str(Path(p).relative_to(base)))
        lines.append("\t".join(cells))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_manifest(path) -> list[SampleStub]:
    """Parse and validate a manifest; referenced bag files must exist."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    stubs: list[SampleStub] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        cells = line.split("\t")
        if len(cells) != 4 + len(MODALITY_NAMES):
            raise ManifestError(f"line {lineno}: expected {4 + len(MODALITY_NAMES)} fields, got {len(cells)}")
        sample_id, individual_id, segment_id, label_name = cells[:4]
        if label_name not in CLASS_INDEX:
            raise ManifestError(f"line {lineno}: unknown label {label_name!r}")
        if sample_id in seen:
            raise ManifestError(f"duplicate sample_id {sample_id!r}")
        seen.add(sample_id)
        bag_paths: dict[int, Path] = {}
        for m, cell in enumerate(cells[4:]):
            if not cell:
                continue
            bag_path = base / cell
            if not bag_path.exists():
                raise ManifestError(f"line {lineno}: missing bag file {bag_path}")
            bag_paths[m] = bag_path
        if not bag_paths:
            raise ManifestError(f"line {lineno}: sample {sample_id!r} has no bags")
        stubs.append(SampleStub(sample_id, individual_id, segment_id, CLASS_INDEX[label_name], bag_paths))
    return stubs


def load_sample(stub: SampleStub, feat_dim: int | None = None) -> SampleRecord:
    bags: dict[int, FeatureBag] = {}
    for m, p in sorted(stub.bag_paths.items()):
        bag = read_bag(p)
        bag.modality_id = m
        if feat_dim is not None and bag.feat_dim != feat_dim:
            raise ShapeError(
                f"bag {p} has feature width {bag.feat_dim}, manifest declares {feat_dim}"
            )
        bags[m] = bag
    return SampleRecord(stub.sample_id, stub.individual_id, stub.segment_id, stub.label, bags)


def load_samples(stubs: list[SampleStub], feat_dim: int | None = None) -> list[SampleRecord]:
    widths = set()
    records = []
    for stub in stubs:
        rec = load_sample(stub, feat_dim)
        widths.update(b.feat_dim for b in rec.bags.values())
        records.append(rec)
    if len(widths) > 1:
        raise ShapeError(f"inconsistent feature widths across bags: {sorted(widths)}")
    return records


# -- grouped cross-validation splits -------------------------------------------


def make_splits(stubs: list[SampleStub], seed: int, n_folds: int = 5) -> list[SplitPlan]:
    """Shuffle individuals, cut into n_folds groups; fold k tests on group k,
    validates on group (k+1) mod n_folds, trains on the rest. Proportions are
    roughly 60/20/20 by individual count for 5 folds.
    """
    individuals = sorted({s.individual_id for s in stubs})
    if len(individuals) < n_folds:
        raise ManifestError(f"need at least {n_folds} individuals, got {len(individuals)}")
    order = Rng(seed).permutation(len(individuals))
    shuffled = [individuals[i] for i in order]
    groups = [list(g) for g in np.array_split(shuffled, n_folds)]

    by_individual: dict[str, list[str]] = {}
    for s in stubs:
        by_individual.setdefault(s.individual_id, []).append(s.sample_id)

    def gather(group):
        return [sid for ind in sorted(group) for sid in by_individual[ind]]

    plans = []
    for k in range(n_folds):
        test = groups[k]
        val = groups[(k + 1) % n_folds]
        train = [ind for j, g in enumerate(groups) if j not in (k, (k + 1) % n_folds) for ind in g]
        plans.append(SplitPlan(fold_id=k, train=gather(train), val=gather(val), test=gather(test)))
    return plans


def write_splits(plans: list[SplitPlan], path) -> None:
    lines = ["# fold\tpart\tsample_id"]
    for plan in plans:
        for part, ids in (("train", plan.train), ("val", plan.val), ("test", plan.test)):
            lines.extend(f"{plan.fold_id}\t{part}\t{sid}" for sid in ids)
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_splits(path) -> list[SplitPlan]:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"splits file not found: {path}")
    folds: dict[int, dict[str, list[str]]] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        cells = line.split("\t")
        if len(cells) != 3 or cells[1] not in ("train", "val", "test"):
            raise ManifestError(f"splits line {lineno}: malformed")
        folds.setdefault(int(cells[0]), {"train": [], "val": [], "test": []})[cells[1]].append(cells[2])
    return [
        SplitPlan(fold_id=k, train=parts["train"], val=parts["val"], test=parts["test"])
        for k, parts in sorted(folds.items())
    ]


# -- synthetic multi-stain dataset ----------------------------------------------


@dataclass
class SyntheticSpec:
    """Planted-signal generator standing in for real multi-stain data.

    In ``planted`` mode each class owns a unit direction per carrying
    modality; a random fraction of the patches in that modality's bag get
    ``strength`` times the direction added on top of Gaussian noise, all
    other patches are pure noise. In ``xor`` mode there are two classes:
    two designated modalities independently carry a signal with
    probability 1/2 and the label is the XOR of the two presence bits, so
    the classes are defined purely by cross-modality interaction.
    """

    n_individuals: int = 100
    segments_per_individual: int = 2
    n_modalities: int = 4
    feat_dim: int = 64
    n_classes: int = 5
    patches_min: int = 16
    patches_max: int = 32
    strength: float = 2.0
    noise_sigma: float = 1.0
    signal_fraction_min: float = 0.3
    signal_fraction_max: float = 0.7
    missing_prob: float = 0.0
    seed: int = 7
    mode: str = "planted"
    # class index -> modalities carrying that class's direction
    signal_modalities: dict[int, tuple[int, ...]] = field(
        default_factory=lambda: {0: (0,), 1: (1,), 2: (0, 1), 3: (2,), 4: (2,)}
    )
    # optional per-class strength override (e.g. heavier signal for later stages)
    per_class_strength: dict[int, float] = field(default_factory=dict)
    xor_modality_a: int = 0
    xor_modality_b: int = 2

    def validate(self) -> None:
        if self.n_individuals < 1 or self.segments_per_individual < 1:
            raise ManifestError("synthetic spec: counts must be >= 1")
        if not 1 <= self.patches_min <= self.patches_max:
            raise ManifestError("synthetic spec: bad patch count range")
        if not 0.0 <= self.missing_prob < 1.0:
            raise ManifestError("synthetic spec: missing_prob outside [0, 1)")
        if self.mode not in ("planted", "xor"):
            raise ManifestError(f"synthetic spec: unknown mode {self.mode!r}")
        if self.mode == "planted":
            if self.n_classes < 1 or self.n_classes > len(CLASS_NAMES):
                raise ManifestError("synthetic spec: n_classes outside 1..5")
            for c in range(self.n_classes):
                mods = self.signal_modalities.get(c, ())
                if self.per_class_strength.get(c, self.strength) > 0 and not mods:
                    raise ManifestError(f"synthetic spec: class {c} carried by no modality")
                if any(m >= self.n_modalities for m in mods):
                    raise ManifestError(f"synthetic spec: class {c} mapped to unknown modality")
        else:
            if self.n_classes != 2:
                raise ManifestError("xor mode requires n_classes=2")
            if self.xor_modality_a == self.xor_modality_b:
                raise ManifestError("xor mode needs two distinct modalities")


def _unit_directions(spec: SyntheticSpec, rng: Rng) -> dict[tuple[int, int], np.ndarray]:
    """One fixed unit direction per (class, modality) carrying pair."""
    out = {}
    if spec.mode == "planted":
        pairs = [(c, m) for c in range(spec.n_classes) for m in spec.signal_modalities.get(c, ())]
    else:
        pairs = [(1, spec.xor_modality_a), (1, spec.xor_modality_b)]
    for c, m in pairs:
        v = rng.normal(spec.feat_dim)
        out[(c, m)] = v / np.linalg.norm(v)
    return out


def generate_synthetic(spec: SyntheticSpec, out_dir) -> list[SampleStub]:
    """Write bags plus a manifest under out_dir; bit-reproducible from the spec."""
    spec.validate()
    out_dir = Path(out_dir)
    bag_dir = out_dir / "bags"
    bag_dir.mkdir(parents=True, exist_ok=True)

    root = Rng(spec.seed)
    dir_rng = root.derive(0)
    sample_rng = root.derive(1)
    directions = _unit_directions(spec, dir_rng)

    stubs: list[SampleStub] = []
    for ind in range(spec.n_individuals):
        individual_id = f"ind{ind:04d}"
        for seg in range(spec.segments_per_individual):
            sample_id = f"{individual_id}_seg{seg}"
            if spec.mode == "planted":
                label = sample_rng.integers(spec.n_classes)
                carrying = {m: (label, m) for m in spec.signal_modalities.get(label, ())}
            else:
                a = sample_rng.integers(2)
                b = sample_rng.integers(2)
                label = a ^ b
                carrying = {}
                if a:
                    carrying[spec.xor_modality_a] = (1, spec.xor_modality_a)
                if b:
                    carrying[spec.xor_modality_b] = (1, spec.xor_modality_b)

            present = [
                m for m in range(spec.n_modalities) if sample_rng.random() >= spec.missing_prob
            ]
            if not present:
                present = [sample_rng.integers(spec.n_modalities)]

            strength = spec.per_class_strength.get(label, spec.strength)
            bag_paths: dict[int, Path] = {}
            for m in range(spec.n_modalities):
                n = spec.patches_min + sample_rng.integers(spec.patches_max - spec.patches_min + 1)
                matrix = sample_rng.normal((n, spec.feat_dim), spec.noise_sigma)
                if m in carrying and strength > 0:
                    frac = spec.signal_fraction_min + sample_rng.random() * (
                        spec.signal_fraction_max - spec.signal_fraction_min
                    )
                    k = max(1, int(round(frac * n)))
                    rows = sample_rng.permutation(n)[:k]
                    matrix[rows] += strength * directions[carrying[m]]
                # draws above happen for every modality so that presence or
                # absence of one bag never shifts another bag's content
                if m not in present:
                    continue
                path = bag_dir / f"{sample_id}_{MODALITY_NAMES[m]}.bag"
                write_bag(FeatureBag(modality_id=m, slide_id=sample_id, matrix=matrix), path)
                bag_paths[m] = path
            stubs.append(
                SampleStub(sample_id, individual_id, f"seg{seg}", label, bag_paths)
            )

    write_manifest(stubs, out_dir / "manifest.tsv", base_dir=out_dir)
    return stubs
