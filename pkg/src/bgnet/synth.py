"""Synthetic relational scenes and 1-3 hop questions, plus the dataset file format.

Scenes are lists of attributed objects on a unit grid. Questions come from a
closed template set whose answers are computed geometrically:

* 1 hop: ``what color is the [size] <shape> ?``
* 2 hop: ``what shape is left of the <color> <shape> ?``
* 3 hop: ``what color is the object nearest to the thing left of the <color> <shape> ?``

"Left of" means strictly smaller x with ``|dy| < left_band``; "nearest to the
thing" never picks the thing itself or the named anchor. A template is only
emitted when its referent is unique and its answer unambiguous.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")
PAD = "<pad>"
VOCABULARY = (
    PAD, "what", "color", "shape", "is", "the", "left", "of", "object",
    "nearest", "to", "thing", "?",
) + SHAPES + COLORS + SIZES
ANSWERS = COLORS + SHAPES
D_RAW = len(SHAPES) + len(COLORS) + len(SIZES) + 2 + 1
FORMAT_VERSION = 1
TIE_EPS = 1e-9


class DataError(ValueError):
    """Malformed or incompatible dataset content."""


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    position: tuple[float, float]


@dataclass
class SceneSpec:
    objects: list[SceneObject]

    @property
    def count(self) -> int:
        return len(self.objects)


@dataclass
class SynthConfig:
    n_max: int = 16
    min_objects: int = 3
    max_objects: int = 16
    grid: int = 5
    m: int = 15
    left_band: float = 0.3
    hop_shares: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    max_attempts: int = 200

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects <= self.n_max:
            raise ValueError("need 1 <= min_objects <= max_objects <= n_max")
        if self.max_objects > self.grid * self.grid:
            raise ValueError("grid has fewer cells than max_objects")
        if len(self.hop_shares) != 3 or abs(sum(self.hop_shares) - 1.0) > 1e-9:
            raise ValueError("hop_shares must be three fractions summing to 1")


@dataclass
class SceneRecord:
    features: list[list[float]]
    v_mask: list[bool]
    token_ids: list[int]
    q_mask: list[bool]
    answer_counts: dict[str, int]
    hops: int
    template_id: str = field(default="")

    @property
    def answer(self) -> str:
        return max(self.answer_counts, key=self.answer_counts.get)

    @property
    def length(self) -> int:
        return int(sum(self.q_mask))

    def key(self) -> str:
        """Identity of the (scene, question) pair, used for split hygiene."""
        return json.dumps([self.features, self.token_ids])


# ---------------------------------------------------------------------------
# scenes


def generate_scene(rng_seed, cfg: SynthConfig | None = None) -> SceneSpec:
    """Uniform attributes; grid cells drawn uniformly, rejecting repeats."""
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(rng_seed)
    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    taken: set[tuple[int, int]] = set()
    objects = []
    while len(objects) < count:
        cell = (int(rng.integers(cfg.grid)), int(rng.integers(cfg.grid)))
        if cell in taken:
            continue
        taken.add(cell)
        objects.append(
            SceneObject(
                SHAPES[int(rng.integers(len(SHAPES)))],
                COLORS[int(rng.integers(len(COLORS)))],
                SIZES[int(rng.integers(len(SIZES)))],
                ((cell[0] + 0.5) / cfg.grid, (cell[1] + 0.5) / cfg.grid),
            )
        )
    return SceneSpec(objects)


def left_of(a: SceneObject, b: SceneObject, band: float) -> bool:
    """True when ``a`` is left of ``b``."""
    return a.position[0] < b.position[0] and abs(a.position[1] - b.position[1]) < band


def _distance(a: SceneObject, b: SceneObject) -> float:
    return math.hypot(a.position[0] - b.position[0], a.position[1] - b.position[1])


def _nearest(scene: SceneSpec, target: int, exclude: int) -> int | None:
    """Unique nearest neighbour of ``target`` other than itself and ``exclude``."""
    others = [
        (i, _distance(scene.objects[target], o))
        for i, o in enumerate(scene.objects)
        if i not in (target, exclude)
    ]
    if not others:
        return None
    others.sort(key=lambda t: t[1])
    if len(others) > 1 and others[1][1] - others[0][1] < TIE_EPS:
        return None
    return others[0][0]


def _unique(scene: SceneSpec, **attrs) -> int | None:
    hits = [i for i, o in enumerate(scene.objects) if all(getattr(o, k) == v for k, v in attrs.items())]
    return hits[0] if len(hits) == 1 else None


def _sole_left(scene: SceneSpec, anchor: int, band: float) -> int | None:
    hits = [i for i, o in enumerate(scene.objects) if i != anchor and left_of(o, scene.objects[anchor], band)]
    return hits[0] if len(hits) == 1 else None


# ---------------------------------------------------------------------------
# questions


def encode_tokens(words: Sequence[str], m: int) -> tuple[list[int], list[bool]]:
    if len(words) > m:
        raise DataError(f"question of {len(words)} words does not fit m={m}")
    index = {w: i for i, w in enumerate(VOCABULARY)}
    ids = [index[w] for w in words] + [0] * (m - len(words))
    return ids, [True] * len(words) + [False] * (m - len(words))


def decode_tokens(token_ids: Iterable[int]) -> list[str]:
    return [VOCABULARY[i] for i in token_ids if i != 0]


def _one_hop(scene: SceneSpec, anchor: int, band: float):
    obj = scene.objects[anchor]
    if _unique(scene, shape=obj.shape) == anchor:
        return ["what", "color", "is", "the", obj.shape, "?"], obj.color, "color_of_shape"
    if _unique(scene, shape=obj.shape, size=obj.size) == anchor:
        return ["what", "color", "is", "the", obj.size, obj.shape, "?"], obj.color, "color_of_sized_shape"
    return None


def _two_hop(scene: SceneSpec, anchor: int, band: float):
    obj = scene.objects[anchor]
    if _unique(scene, color=obj.color, shape=obj.shape) != anchor:
        return None
    left = _sole_left(scene, anchor, band)
    if left is None:
        return None
    words = ["what", "shape", "is", "left", "of", "the", obj.color, obj.shape, "?"]
    return words, scene.objects[left].shape, "shape_left_of"


def _three_hop(scene: SceneSpec, anchor: int, band: float):
    obj = scene.objects[anchor]
    if _unique(scene, color=obj.color, shape=obj.shape) != anchor:
        return None
    left = _sole_left(scene, anchor, band)
    if left is None:
        return None
    near = _nearest(scene, left, anchor)
    if near is None:
        return None
    words = ["what", "color", "is", "the", "object", "nearest", "to", "the", "thing",
             "left", "of", "the", obj.color, obj.shape, "?"]
    return words, scene.objects[near].color, "color_nearest_left_of"


_TEMPLATES = {1: _one_hop, 2: _two_hop, 3: _three_hop}


def generate_question(scene: SceneSpec, hops: int, rng_seed, cfg: SynthConfig | None = None):
    """Return (token_ids, q_mask, answer, template_id), or None if no anchor works."""
    cfg = cfg or SynthConfig()
    if hops not in _TEMPLATES:
        raise ValueError(f"hops must be 1, 2 or 3, got {hops}")
    rng = np.random.default_rng(rng_seed)
    for anchor in rng.permutation(scene.count):
        made = _TEMPLATES[hops](scene, int(anchor), cfg.left_band)
        if made is not None:
            words, answer, template = made
            ids, mask = encode_tokens(words, cfg.m)
            return ids, mask, answer, template
    return None


def scene_features(scene: SceneSpec, n_max: int) -> tuple[list[list[float]], list[bool]]:
    """Per object: attribute one-hots, then (x, y) and a validity flag; padded slots zero."""
    if scene.count > n_max:
        raise DataError(f"scene has {scene.count} objects, more than n_max={n_max}")
    rows = []
    for o in scene.objects:
        row = [0.0] * D_RAW
        row[SHAPES.index(o.shape)] = 1.0
        row[3 + COLORS.index(o.color)] = 1.0
        row[7 + SIZES.index(o.size)] = 1.0
        row[9], row[10] = o.position
        row[11] = 1.0
        rows.append(row)
    rows += [[0.0] * D_RAW for _ in range(n_max - scene.count)]
    return rows, [True] * scene.count + [False] * (n_max - scene.count)


def scene_from_features(features: Sequence[Sequence[float]], v_mask: Sequence[bool]) -> SceneSpec:
    """Inverse of :func:`scene_features` for valid slots."""
    objects = []
    for row, valid in zip(features, v_mask):
        if not valid:
            continue
        objects.append(
            SceneObject(
                SHAPES[int(np.argmax(row[0:3]))],
                COLORS[int(np.argmax(row[3:7]))],
                SIZES[int(np.argmax(row[7:9]))],
                (float(row[9]), float(row[10])),
            )
        )
    return SceneSpec(objects)


def object_label(obj: SceneObject) -> str:
    return f"{obj.size} {obj.color} {obj.shape} @({obj.position[0]:.2f},{obj.position[1]:.2f})"


# ---------------------------------------------------------------------------
# corpus


SPLIT_IDS = {"train": 0, "val": 1}


def hop_schedule(count: int, shares: Sequence[float], seed: int) -> list[int]:
    """Exact largest-remainder quotas per hop class, in a seeded order."""
    raw = [s * count for s in shares]
    quota = [int(math.floor(r)) for r in raw]
    for i in sorted(range(3), key=lambda i: raw[i] - quota[i], reverse=True)[: count - sum(quota)]:
        quota[i] += 1
    hops = [h + 1 for h in range(3) for _ in range(quota[h])]
    order = np.random.default_rng([seed, 99]).permutation(count)
    return [hops[i] for i in order]


def make_record(hops: int, seed_key: Sequence[int], cfg: SynthConfig) -> SceneRecord | None:
    for attempt in range(cfg.max_attempts):
        scene = generate_scene([*seed_key, attempt, 0], cfg)
        made = generate_question(scene, hops, [*seed_key, attempt, 1], cfg)
        if made is None:
            continue
        ids, mask, answer, template = made
        features, v_mask = scene_features(scene, cfg.n_max)
        return SceneRecord(features, v_mask, ids, mask, {answer: 10}, hops, template)
    return None


def generate_split(
    count: int,
    split: str,
    seed: int,
    cfg: SynthConfig | None = None,
    exclude: set[str] | None = None,
) -> list[SceneRecord]:
    """Records for one split; seeds are keyed by (seed, split id, index), so splits never share a seed."""
    cfg = cfg or SynthConfig()
    if split not in SPLIT_IDS:
        raise ValueError(f"unknown split {split!r}")
    exclude = exclude or set()
    records = []
    for i, hops in enumerate(hop_schedule(count, cfg.hop_shares, seed + SPLIT_IDS[split])):
        record, bump = None, 0
        while record is None:
            record = make_record(hops, [seed, SPLIT_IDS[split], i, bump], cfg)
            if record is not None and record.key() in exclude:
                record = None
            bump += 1
            if bump > 100:
                raise DataError(f"could not generate a {hops}-hop record for {split}[{i}]")
        records.append(record)
    return records


# ---------------------------------------------------------------------------
# file format


def make_header(split: str, count: int, cfg: SynthConfig, seed: int) -> dict:
    return {
        "format": "bgn-synth",
        "version": FORMAT_VERSION,
        "split": split,
        "count": count,
        "seed": seed,
        "D_raw": D_RAW,
        "n_max": cfg.n_max,
        "m": cfg.m,
        "vocabulary": list(VOCABULARY),
        "answers": list(ANSWERS),
    }


def write_dataset(records: Sequence[SceneRecord], path, header: dict) -> None:
    header = dict(header, count=len(records))
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header) + "\n")
        for r in records:
            f.write(json.dumps(asdict(r)) + "\n")


_RECORD_FIELDS = {"features", "v_mask", "token_ids", "q_mask", "answer_counts", "hops", "template_id"}


def load_dataset(path) -> tuple[dict, list[SceneRecord]]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").split("\n")
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from exc
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DataError(f"{path}:1: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:1: malformed header ({exc.msg})") from exc
    if header.get("version") != FORMAT_VERSION:
        raise DataError(f"{path}:1: unsupported format version {header.get('version')!r}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: malformed record ({exc.msg})") from exc
        if not isinstance(raw, dict) or set(raw) != _RECORD_FIELDS:
            raise DataError(f"{path}:{lineno}: record fields do not match the schema")
        record = SceneRecord(**raw)
        if len(record.features) != header["n_max"] or len(record.token_ids) != header["m"]:
            raise DataError(f"{path}:{lineno}: record dimensions disagree with header")
        records.append(record)
    if len(records) != header.get("count"):
        raise DataError(f"{path}:{len(lines) + 1}: expected {header.get('count')} records, found {len(records)}")
    return header, records


def answer_histogram(records: Iterable[SceneRecord]) -> Counter:
    return Counter(r.answer for r in records)


def to_batch(records: Sequence[SceneRecord], answers: Sequence[str]) -> dict[str, np.ndarray]:
    """Stack records into the arrays the model consumes."""
    from .model import soft_targets

    return {
        "features": np.array([r.features for r in records], dtype=float),
        "v_mask": np.array([r.v_mask for r in records], dtype=bool),
        "token_ids": np.array([r.token_ids for r in records], dtype=np.int64),
        "q_mask": np.array([r.q_mask for r in records], dtype=bool),
        "targets": np.array([soft_targets(r.answer_counts, answers) for r in records]),
        "hops": np.array([r.hops for r in records], dtype=np.int64),
        "lengths": np.array([r.length for r in records], dtype=np.int64),
    }
