"""Synthetic "lungscape" referring-segmentation dataset.

Each sample is a 224x224 grayscale image with two elliptical lung fields and
1-2 soft-edged bright lesions, each placed fully inside one cell of the 2x3
position grid. Captions are templated from the lesion cells so the positional
parser recovers the ground-truth label exactly.

On-disk layout: ``manifest.jsonl`` (one meta record, then one record per
sample), ``images/<id>.pgm``, ``masks/<id>.pgm`` (binary 8-bit P5 graymaps).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .postext import ROWS, COLS, parse_positions

SIZE = 224
LABEL_RATIOS = (0.01, 0.02, 0.05, 0.15, 1.0)
SEVERITIES = ("mild", "moderate", "severe", "extensive")


@dataclass
class Sample:
    id: str
    image: np.ndarray  # 224x224 float in [0,1]
    mask: np.ndarray  # 224x224 float in {0,1}
    text: str
    q: np.ndarray  # 6-bit position label


@dataclass
class DatasetManifest:
    records: list[dict]
    splits: dict[str, list[str]]
    labeled_ids: dict[str, list[str]]  # ratio (as str) -> nested id lists


@dataclass(frozen=True)
class SampleSpec:
    lesion_count_range: tuple = (1, 2)
    lesion_radius_range: tuple = (8.0, 24.0)
    noise_level: float = 0.05


def _cell_bounds(row: int, col: int, size: int = SIZE):
    row_edges = [0, size // 3, (2 * size) // 3, size]
    y0, y1 = row_edges[row], row_edges[row + 1]
    x0, x1 = (0, size // 2) if col == 0 else (size // 2, size)
    return y0, y1, x0, x1


def _caption(cells: list[tuple[int, int]], severity: str) -> str:
    if not cells:
        return "no infection"
    rows = {r for r, _ in cells}
    cols = {c for _, c in cells}
    if len(cells) == 2 and len(rows) == 1 and cols == {0, 1}:
        phrase = f"{ROWS[next(iter(rows))]} bilateral lung"
    else:
        parts = [f"{ROWS[r]} {COLS[c]}" for r, c in cells]
        phrase = " and ".join(parts) + " lung"
    return f"{severity} infection, {phrase}"


def generate_sample(rng: np.random.Generator, sample_id: str,
                    spec: SampleSpec = SampleSpec()) -> Sample:
    """Render one synthetic image/mask/caption triple."""
    size = SIZE
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")

    image = np.full((size, size), 0.05)
    # two elliptical lung fields
    for cx in (size * 0.3, size * 0.7):
        d = ((yy - size * 0.52) / (size * 0.38)) ** 2 + ((xx - cx) / (size * 0.17)) ** 2
        image += 0.35 * np.exp(-np.maximum(d - 1.0, 0.0) * 30.0) * (d < 1.5)

    n_lesions = int(rng.integers(spec.lesion_count_range[0], spec.lesion_count_range[1] + 1))
    cells = []
    mask = np.zeros((size, size))
    all_cells = [(r, c) for r in range(3) for c in range(2)]
    for k in rng.permutation(len(all_cells))[:n_lesions]:
        cells.append(all_cells[k])
    cells.sort()
    for r, c in cells:
        y0, y1, x0, x1 = _cell_bounds(r, c)
        radius = rng.uniform(*spec.lesion_radius_range)
        # keep the half-peak disk strictly inside the cell
        margin = radius + 2.0
        cy = rng.uniform(y0 + margin, y1 - margin)
        cx = rng.uniform(x0 + margin, x1 - margin)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        blob = np.exp(-np.log(2.0) * d2 / radius**2)
        amp = rng.uniform(0.35, 0.55)
        image += amp * blob
        mask = np.maximum(mask, (blob >= 0.5).astype(np.float64))
    severity = SEVERITIES[int(rng.integers(len(SEVERITIES)))]
    image += rng.normal(0.0, spec.noise_level, size=(size, size))
    image = np.clip(image, 0.0, 1.0)
    text = _caption(cells, severity)
    q = np.zeros(6, dtype=np.int64)
    for r, c in cells:
        q[r * 2 + c] = 1
    return Sample(id=sample_id, image=image, mask=mask, text=text, q=q)


# ---------------------------------------------------------------------------
# P5 graymap I/O


def write_pgm(path: Path, grid: np.ndarray) -> None:
    data = np.clip(np.rint(grid * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    try:
        magic, dims, maxval, payload = raw.split(b"\n", 3)
        if magic != b"P5":
            raise ValueError
        w, h = (int(t) for t in dims.split())
        if int(maxval) != 255:
            raise ValueError
    except ValueError:
        raise ValueError(f"malformed graymap header in {path}") from None
    if len(payload) != h * w:
        raise ValueError(f"truncated graymap payload in {path}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w) / 255.0


# ---------------------------------------------------------------------------
# dataset generation / loading


def generate_dataset(seed: int, n_train: int, n_val: int, n_test: int,
                     out_dir: Path, spec: SampleSpec = SampleSpec()) -> DatasetManifest:
    """Write a full dataset directory; deterministic in (seed, sizes, spec)."""
    if n_train <= 0:
        raise ValueError("n_train must be positive")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    splits = {"train": [], "val": [], "test": []}
    records = []
    total = n_train + n_val + n_test
    for i in range(total):
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        sample_id = f"{split}_{i:05d}"
        rng = np.random.default_rng([seed, i])
        sample = generate_sample(rng, sample_id, spec)
        write_pgm(out_dir / "images" / f"{sample_id}.pgm", sample.image)
        write_pgm(out_dir / "masks" / f"{sample_id}.pgm", sample.mask)
        splits[split].append(sample_id)
        records.append({
            "id": sample_id,
            "image_path": f"images/{sample_id}.pgm",
            "mask_path": f"masks/{sample_id}.pgm",
            "text": sample.text,
            "q": sample.q.tolist(),
        })

    # nested labeled subsets: prefixes of one seeded shuffle of the train ids
    order = np.random.default_rng([seed, total, 7]).permutation(n_train)
    labeled_ids = {}
    for ratio in LABEL_RATIOS:
        k = min(n_train, max(1, round(ratio * n_train)))
        labeled_ids[str(ratio)] = sorted(splits["train"][j] for j in order[:k])

    manifest = DatasetManifest(records=records, splits=splits, labeled_ids=labeled_ids)
    with open(out_dir / "manifest.jsonl", "w", encoding="utf-8") as f:
        f.write(json.dumps({"splits": manifest.splits, "labeled_ids": manifest.labeled_ids},
                           sort_keys=True) + "\n")
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


@dataclass
class Dataset:
    root: Path
    manifest: DatasetManifest
    samples: dict[str, Sample] = field(default_factory=dict)

    def split(self, name: str) -> list[Sample]:
        return [self.samples[i] for i in self.manifest.splits[name]]

    def labeled_train_ids(self, ratio: float) -> list[str]:
        key = str(ratio)
        if key not in self.manifest.labeled_ids:
            raise ValueError(f"label ratio {ratio} not in manifest "
                             f"(have {sorted(self.manifest.labeled_ids)})")
        return self.manifest.labeled_ids[key]


def _check_sample(sample: Sample) -> None:
    parsed = parse_positions(sample.text).label
    if not np.array_equal(parsed, sample.q):
        raise ValueError(f"sample {sample.id}: caption parses to {parsed.tolist()} "
                         f"but manifest label is {sample.q.tolist()}")
    active = np.zeros_like(sample.mask, dtype=bool)
    for r in range(3):
        for c in range(2):
            if sample.q[r * 2 + c]:
                y0, y1, x0, x1 = _cell_bounds(r, c)
                active[y0:y1, x0:x1] = True
    if np.any((sample.mask > 0) & ~active):
        raise ValueError(f"sample {sample.id}: mask pixels outside label-active cells")


def load_dataset(root: Path) -> Dataset:
    """Load and validate a dataset directory written by generate_dataset."""
    root = Path(root)
    manifest_path = root / "manifest.jsonl"
    with open(manifest_path, encoding="utf-8") as f:
        lines = [json.loads(line) for line in f if line.strip()]
    meta, records = lines[0], lines[1:]
    manifest = DatasetManifest(records=records, splits=meta["splits"],
                               labeled_ids=meta["labeled_ids"])
    ds = Dataset(root=root, manifest=manifest)
    for rec in records:
        image = read_pgm(root / rec["image_path"])
        mask = (read_pgm(root / rec["mask_path"]) * 255.0 >= 128).astype(np.float64)
        sample = Sample(id=rec["id"], image=image, mask=mask, text=rec["text"],
                        q=np.asarray(rec["q"], dtype=np.int64))
        _check_sample(sample)
        ds.samples[rec["id"]] = sample
    return ds
