"""Dataset generation, manifests, and the on-disk layout.

A generated dataset directory contains:

    config.txt      the resolved key=value generator config
    meta.txt        generation record (config hash, seed, counts)
    manifest.tsv    one row per (question, image) pair
    images/q###/i##.ppm

Every pair's answer comes from the symbolic oracle, and scenes are
rejection-sampled per question toward a 50/50 yes/no balance so no
question can be answered by mode guessing. Scenes are globally unique
across the dataset, which keeps the train/test image sets disjoint. The
test split is a seeded sample stratified by layout size.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .imageio import read_ppm, write_ppm
from .params import named_seed
from .questions import QuestionSet, enumerate_questions
from .scenes import IMAGE_PX, GRID, Scene, oracle_answer, render, sample_scene

__all__ = [
    "GenConfig",
    "Record",
    "DatasetManifest",
    "DatasetError",
    "generate_dataset",
    "load_manifest",
    "load_config",
    "FAST_OVERRIDES",
    "MICRO_OVERRIDES",
]

# Test pairs are apportioned by layout size: 31% / 56% / 13% for
# sizes 4 / 5 / 6, so every depth class keeps a fixed evaluation share.
TEST_SHARE_BY_SIZE = {4: 31, 5: 56, 6: 13}

ATTEMPTS_PER_IMAGE = 400

FAST_OVERRIDES = {"questions": 61, "images_per_question": 16, "test_pairs": 128}
MICRO_OVERRIDES = {"questions": 10, "images_per_question": 8, "test_pairs": 16}


class DatasetError(ValueError):
    """Malformed dataset files or an unsatisfiable generation config."""


@dataclass(frozen=True)
class GenConfig:
    grid: int = 3
    image_px: int = 30
    min_shapes: int = 2
    max_shapes: int = 6
    questions: int = 244
    images_per_question: int = 64
    test_pairs: int = 1024
    seed: int = 0
    max_layout_size: int = 6

    KEYS = ("grid", "image_px", "min_shapes", "max_shapes", "questions",
            "images_per_question", "test_pairs", "seed", "max_layout_size")

    def __post_init__(self):
        if self.grid != GRID or self.image_px != IMAGE_PX:
            raise DatasetError(
                f"renderer supports grid={GRID} and image_px={IMAGE_PX} only")
        if not 1 <= self.min_shapes <= self.max_shapes <= self.grid ** 2:
            raise DatasetError("need 1 <= min_shapes <= max_shapes <= 9")
        if self.questions <= 0 or self.images_per_question <= 0:
            raise DatasetError("questions and images_per_question must be positive")
        total = self.questions * self.images_per_question
        if not 0 < self.test_pairs < total:
            raise DatasetError(
                f"test_pairs must lie strictly between 0 and {total}")
        if not 4 <= self.max_layout_size <= 6:
            raise DatasetError("max_layout_size must be 4, 5 or 6")

    def to_text(self) -> str:
        return "".join(f"{key}={getattr(self, key)}\n" for key in self.KEYS)

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    @classmethod
    def from_text(cls, text: str, overrides: dict | None = None) -> "GenConfig":
        values: dict = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DatasetError(f"config line {lineno}: expected key=value")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in cls.KEYS:
                raise DatasetError(f"config line {lineno}: unknown key {key!r}")
            try:
                values[key] = int(value.strip())
            except ValueError:
                raise DatasetError(
                    f"config line {lineno}: {key} wants an integer") from None
        if overrides:
            values.update(overrides)
        return cls(**values)


@dataclass(frozen=True)
class Record:
    split: str
    image_path: str
    question: str
    query: str
    answer: str
    layout_size: int


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[Record, ...]
    config_hash: str
    seed: int
    meta: dict = field(default_factory=dict)

    TSV_HEADER = "split\timage_path\tquestion\tquery\tanswer\tlayout_size"

    def split_records(self, split: str) -> list[Record]:
        return [r for r in self.records if r.split == split]

    def to_tsv(self) -> str:
        lines = [self.TSV_HEADER]
        for r in self.records:
            lines.append("\t".join([r.split, r.image_path, r.question, r.query,
                                    r.answer, str(r.layout_size)]))
        return "\n".join(lines) + "\n"


def _select_test(records: list[Record], test_pairs: int,
                 seed: int) -> set[int]:
    """Seeded, size-stratified choice of test record indices."""
    by_size: dict[int, list[int]] = {}
    for idx, record in enumerate(records):
        by_size.setdefault(record.layout_size, []).append(idx)
    sizes = sorted(by_size)
    weights = {s: TEST_SHARE_BY_SIZE.get(s, 0) for s in sizes}
    if sum(weights.values()) == 0:
        weights = {s: 1 for s in sizes}
    total_weight = sum(weights.values())
    raw = {s: test_pairs * weights[s] / total_weight for s in sizes}
    targets = {s: min(int(raw[s]), len(by_size[s])) for s in sizes}
    order = sorted(sizes, key=lambda s: raw[s] - int(raw[s]), reverse=True)
    while sum(targets.values()) < test_pairs:
        progressed = False
        for s in order:
            if sum(targets.values()) == test_pairs:
                break
            if targets[s] < len(by_size[s]):
                targets[s] += 1
                progressed = True
        if not progressed:
            raise DatasetError("not enough pairs to fill the test split")
    rng = np.random.default_rng(named_seed(seed, "split"))
    chosen: set[int] = set()
    for s in sizes:
        pool = by_size[s]
        want = targets[s]
        if want == 0:
            continue
        picks = rng.choice(len(pool), size=want, replace=False)
        chosen.update(pool[i] for i in picks)
    return chosen


def _balanced_scenes(question, config: GenConfig, rng: np.random.Generator,
                     used: set[str]) -> tuple[list[tuple[Scene, str]], bool]:
    """Rejection-sample globally unique scenes toward a yes/no balance."""
    per_question = config.images_per_question
    want = {"yes": per_question // 2, "no": per_question - per_question // 2}
    got: dict[str, list[tuple[Scene, str]]] = {"yes": [], "no": []}
    budget = per_question * ATTEMPTS_PER_IMAGE
    for _ in range(budget):
        if all(len(got[a]) >= want[a] for a in want):
            break
        scene = sample_scene(rng, config.min_shapes, config.max_shapes)
        key = scene.serialize()
        if key in used:
            continue
        answer = oracle_answer(scene, question.query)
        if len(got[answer]) < want[answer]:
            used.add(key)
            got[answer].append((scene, answer))
    balanced = all(len(got[a]) == want[a] for a in want)
    scenes = got["yes"] + got["no"]
    while len(scenes) < per_question:
        scene = sample_scene(rng, config.min_shapes, config.max_shapes)
        key = scene.serialize()
        if key in used:
            continue
        used.add(key)
        scenes.append((scene, oracle_answer(scene, question.query)))
    # Deterministic shuffle so answers are not grouped within a question.
    perm = rng.permutation(len(scenes))
    return [scenes[i] for i in perm], balanced


def generate_dataset(config: GenConfig, out_dir: str | Path) -> DatasetManifest:
    """Generate questions, scenes, images and the manifest under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    question_set: QuestionSet = enumerate_questions(
        config.questions, config.seed, max_size=config.max_layout_size)
    rng = np.random.default_rng(named_seed(config.seed, "scenes"))
    used_scenes: set[str] = set()
    records: list[Record] = []
    images: list[tuple[str, Scene]] = []
    imbalanced: list[int] = []
    for qid, question in enumerate(question_set.questions):
        scenes, balanced = _balanced_scenes(question, config, rng, used_scenes)
        if not balanced:
            imbalanced.append(qid)
        for iid, (scene, answer) in enumerate(scenes):
            rel_path = f"images/q{qid:03d}/i{iid:02d}.ppm"
            images.append((rel_path, scene))
            records.append(Record(
                split="train",
                image_path=rel_path,
                question=question.text,
                query=question.query.serialize(),
                answer=answer,
                layout_size=question.layout_size,
            ))

    test_indices = _select_test(records, config.test_pairs, config.seed)
    records = [replace(r, split="test") if i in test_indices else r
               for i, r in enumerate(records)]

    for rel_path, scene in images:
        path = out / rel_path
        path.parent.mkdir(parents=True, exist_ok=True)
        write_ppm(path, render(scene))

    meta = {
        "config_hash": config.hash(),
        "seed": str(config.seed),
        "question_count": str(len(question_set.questions)),
        "pair_count": str(len(records)),
        "train_pairs": str(sum(1 for r in records if r.split == "train")),
        "test_pairs": str(sum(1 for r in records if r.split == "test")),
        "imbalanced_questions": str(len(imbalanced)),
    }
    for name, size in sorted(question_set.pool_counts.items()):
        meta[f"pool_{name}"] = str(size)
    for name, size in sorted(question_set.selected_counts.items()):
        meta[f"selected_{name}"] = str(size)

    manifest = DatasetManifest(records=tuple(records),
                               config_hash=config.hash(),
                               seed=config.seed, meta=meta)
    (out / "config.txt").write_text(config.to_text(), encoding="utf-8")
    (out / "meta.txt").write_text(
        "".join(f"{k}={v}\n" for k, v in meta.items()), encoding="utf-8")
    (out / "manifest.tsv").write_text(manifest.to_tsv(), encoding="utf-8")
    return manifest


def load_config(data_dir: str | Path) -> GenConfig:
    path = Path(data_dir) / "config.txt"
    if not path.exists():
        raise DatasetError(f"missing {path}")
    return GenConfig.from_text(path.read_text(encoding="utf-8"))


def _load_meta(data_dir: Path) -> dict:
    path = data_dir / "meta.txt"
    if not path.exists():
        raise DatasetError(f"missing {path}")
    meta = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            meta[key] = value
    return meta


def load_manifest(data_dir: str | Path, verify_hash: bool = True) -> DatasetManifest:
    """Read a dataset directory back; checks the config/manifest hash pairing."""
    base = Path(data_dir)
    tsv = base / "manifest.tsv"
    if not tsv.exists():
        raise DatasetError(f"missing {tsv}")
    meta = _load_meta(base)
    config_hash = meta.get("config_hash", "")
    if verify_hash:
        config = load_config(base)
        if config.hash() != config_hash:
            raise DatasetError(
                f"config.txt hash {config.hash()[:12]} does not match "
                f"meta.txt config_hash {config_hash[:12]}")
    lines = tsv.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != DatasetManifest.TSV_HEADER:
        raise DatasetError(f"{tsv}: bad or missing header row")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != 6:
            raise DatasetError(f"{tsv} line {lineno}: expected 6 columns")
        split, image_path, question, query, answer, size = fields
        if split not in ("train", "test"):
            raise DatasetError(f"{tsv} line {lineno}: bad split {split!r}")
        records.append(Record(split, image_path, question, query, answer,
                              int(size)))
    return DatasetManifest(records=tuple(records), config_hash=config_hash,
                           seed=int(meta.get("seed", "0")), meta=meta)


def load_image(data_dir: str | Path, record: Record) -> np.ndarray:
    return read_ppm(Path(data_dir) / record.image_path)
