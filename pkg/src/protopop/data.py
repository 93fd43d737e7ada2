"""Dataset schema, JSONL manifest ingestion, synthetic data, user statistics.

A dataset is a JSONL manifest (one post per line) plus a companion
``classes.json``. Posts carry a three-level category path; the class of a
post is the fine-grained subcategory identified by the first two path
levels, while the third level is a free subtopic axis used only for
diversity-aware sampling.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pemb

SOURCE_TITLE = "title"
SOURCE_ALLTAGS = "alltags"

MANIFEST_FILE = "manifest.jsonl"
CLASSES_FILE = "classes.json"
EMBED_DIR = "embeddings"


class DataError(ValueError):
    """Invalid manifest, class table, or embedding table."""


@dataclass(frozen=True)
class PostRecord:
    post_id: str
    user_id: str
    title_tokens: tuple[str, ...]
    tag_tokens: tuple[str, ...]
    category_path: tuple[str, str, str]
    class_index: int
    timestamp: int
    popularity: float
    image_ref: str


@dataclass(frozen=True)
class ClassEntry:
    index: int
    name: str
    parent2: str  # level-2 path component of the class's posts
    parent1: str  # level-1 path component


@dataclass
class ClassTable:
    entries: list[ClassEntry]

    def __post_init__(self):
        if [e.index for e in self.entries] != list(range(len(self.entries))):
            raise DataError("class indices must be dense 0..K-1")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise DataError("class names must be unique")

    @property
    def k(self) -> int:
        return len(self.entries)

    def name(self, index: int) -> str:
        return self.entries[index].name

    def check_record(self, rec: PostRecord) -> None:
        if not 0 <= rec.class_index < self.k:
            raise DataError(f"post '{rec.post_id}': unknown class index {rec.class_index}")
        entry = self.entries[rec.class_index]
        if rec.category_path[0] != entry.parent1 or rec.category_path[1] != entry.parent2:
            raise DataError(
                f"post '{rec.post_id}': category path {rec.category_path} inconsistent "
                f"with class '{entry.name}'"
            )

    def to_json(self) -> list[dict]:
        return [
            {"index": e.index, "name": e.name, "parent2": e.parent2, "parent1": e.parent1}
            for e in self.entries
        ]

    @classmethod
    def from_json(cls, rows: list[dict]) -> "ClassTable":
        rows = sorted(rows, key=lambda r: r["index"])
        return cls([ClassEntry(r["index"], r["name"], r["parent2"], r["parent1"]) for r in rows])


@dataclass
class Dataset:
    records: list[PostRecord]
    classes: ClassTable
    _by_id: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id = {r.post_id: r for r in self.records}

    def __len__(self):
        return len(self.records)

    def get(self, post_id: str) -> PostRecord:
        try:
            return self._by_id[post_id]
        except KeyError:
            raise DataError(f"unknown post id '{post_id}'") from None

    def of_class(self, index: int) -> list[PostRecord]:
        return [r for r in self.records if r.class_index == index]


@dataclass
class EmbeddingRecord:
    image_vec: np.ndarray   # [dim]
    text_global: np.ndarray  # [dim]
    text_tokens: np.ndarray  # [tokens, dim], tokens >= 1


@dataclass
class EmbeddingTable:
    dim: int
    records: dict[str, EmbeddingRecord]

    def get(self, post_id: str) -> EmbeddingRecord:
        try:
            return self.records[post_id]
        except KeyError:
            raise DataError(f"no embeddings for post id '{post_id}'") from None

    def validate(self) -> None:
        for rid, rec in self.records.items():
            if rec.image_vec.shape != (self.dim,) or rec.text_global.shape != (self.dim,):
                raise DataError(f"record '{rid}': vector dim != {self.dim}")
            if rec.text_tokens.ndim != 2 or rec.text_tokens.shape[1] != self.dim:
                raise DataError(f"record '{rid}': token matrix dim != {self.dim}")
            if rec.text_tokens.shape[0] < 1:
                raise DataError(f"record '{rid}': empty token sequence")


# ---------------------------------------------------------------------------
# manifest I/O

_MANIFEST_FIELDS = {
    "post_id", "user_id", "title", "tags", "category",
    "class_index", "timestamp", "popularity", "image_ref",
}


def _record_from_json(obj: dict, lineno: int) -> PostRecord:
    if set(obj) != _MANIFEST_FIELDS:
        missing = _MANIFEST_FIELDS - set(obj)
        extra = set(obj) - _MANIFEST_FIELDS
        raise DataError(f"manifest line {lineno}: missing={sorted(missing)} extra={sorted(extra)}")
    cat = obj["category"]
    if not isinstance(cat, list) or len(cat) != 3:
        raise DataError(f"manifest line {lineno}: category must be a 3-element array")
    ts = int(obj["timestamp"])
    if ts <= 0:
        raise DataError(f"manifest line {lineno}: timestamp must be positive")
    return PostRecord(
        post_id=str(obj["post_id"]),
        user_id=str(obj["user_id"]),
        title_tokens=tuple(str(obj["title"]).split()),
        tag_tokens=tuple(str(t) for t in obj["tags"]),
        category_path=(str(cat[0]), str(cat[1]), str(cat[2])),
        class_index=int(obj["class_index"]),
        timestamp=ts,
        popularity=float(obj["popularity"]),
        image_ref=str(obj["image_ref"]),
    )


def load_manifest(path) -> tuple[list[PostRecord], ClassTable]:
    """Read a JSONL manifest plus its companion classes.json.

    The class table is read from ``classes.json`` next to the manifest when
    present, otherwise built from the records themselves.
    """
    path = Path(path)
    records: list[PostRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"manifest line {lineno}: malformed JSON ({e.msg})") from None
            rec = _record_from_json(obj, lineno)
            if rec.post_id in seen:
                raise DataError(f"duplicate post_id '{rec.post_id}'")
            seen.add(rec.post_id)
            records.append(rec)

    classes_path = path.parent / CLASSES_FILE
    if classes_path.exists():
        classes = ClassTable.from_json(json.loads(classes_path.read_text(encoding="utf-8")))
    else:
        classes = _classes_from_records(records)
    for rec in records:
        classes.check_record(rec)
    return records, classes


def _classes_from_records(records: list[PostRecord]) -> ClassTable:
    by_index: dict[int, ClassEntry] = {}
    for rec in records:
        e = ClassEntry(rec.class_index, rec.category_path[1], rec.category_path[1], rec.category_path[0])
        prev = by_index.setdefault(rec.class_index, e)
        if (prev.parent1, prev.parent2) != (e.parent1, e.parent2):
            raise DataError(f"class index {rec.class_index} maps to conflicting category paths")
    if by_index and sorted(by_index) != list(range(len(by_index))):
        raise DataError("class indices in manifest are not dense")
    return ClassTable([by_index[i] for i in sorted(by_index)])


def save_manifest(path, records: list[PostRecord], classes: ClassTable) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            obj = {
                "post_id": rec.post_id,
                "user_id": rec.user_id,
                "title": " ".join(rec.title_tokens),
                "tags": list(rec.tag_tokens),
                "category": list(rec.category_path),
                "class_index": rec.class_index,
                "timestamp": rec.timestamp,
                "popularity": rec.popularity,
                "image_ref": rec.image_ref,
            }
            f.write(json.dumps(obj, sort_keys=True) + "\n")
    (path.parent / CLASSES_FILE).write_text(
        json.dumps(classes.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# embedding table I/O (three PEMB files per table)


def write_embeddings(dirpath, table: EmbeddingTable) -> None:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    ids = sorted(table.records)
    pemb.write_pemb(dirpath / pemb.IMAGE_FILE, pemb.KIND_IMAGE_GLOBAL, table.dim,
                    {i: table.records[i].image_vec for i in ids})
    pemb.write_pemb(dirpath / pemb.TEXT_FILE, pemb.KIND_TEXT_GLOBAL, table.dim,
                    {i: table.records[i].text_global for i in ids})
    pemb.write_pemb(dirpath / pemb.TOKENS_FILE, pemb.KIND_TEXT_TOKENS, table.dim,
                    {i: table.records[i].text_tokens for i in ids})


def read_embeddings(dirpath) -> EmbeddingTable:
    dirpath = Path(dirpath)
    kind_i, dim_i, imgs = pemb.read_pemb(dirpath / pemb.IMAGE_FILE)
    kind_t, dim_t, texts = pemb.read_pemb(dirpath / pemb.TEXT_FILE)
    kind_k, dim_k, tokens = pemb.read_pemb(dirpath / pemb.TOKENS_FILE)
    if (kind_i, kind_t, kind_k) != (pemb.KIND_IMAGE_GLOBAL, pemb.KIND_TEXT_GLOBAL, pemb.KIND_TEXT_TOKENS):
        raise pemb.PembError("embedding files have unexpected kinds")
    if not dim_i == dim_t == dim_k:
        raise pemb.PembError(f"dim disagreement across embedding files: {dim_i}/{dim_t}/{dim_k}")
    if not set(imgs) == set(texts) == set(tokens):
        raise pemb.PembError("embedding files cover different id sets")
    table = EmbeddingTable(dim_i, {
        rid: EmbeddingRecord(imgs[rid], texts[rid], tokens[rid]) for rid in imgs
    })
    table.validate()
    return table


# ---------------------------------------------------------------------------
# synthetic dataset

_LEVEL1 = ["animal", "food", "electronic", "travel", "fashion", "weather", "season", "art"]

_POP_BASE = 4.5
_POP_CLASS_STD = 1.5
_POP_USER_WEIGHT = 1.0
_POP_ALIGN_WEIGHT = 2.0
_POP_NOISE_STD = 0.2
_POP_NOISE_MISALIGN = 1.5  # misaligned posts get noisier labels
_POP_TAIL_SCALE = 0.7
_POP_VIRAL_RATE = 0.03
_POP_VIRAL_SCALE = 2.5
_POP_VIRAL_LIFT = 1.5
_TIME_BASE = 1_500_000_000
_TIME_SPAN = 2 * 365 * 24 * 3600
_WORDS_PER_CLASS = 12
_NOISE_WORDS = 120


@dataclass(frozen=True)
class SyntheticConfig:
    classes: int = 8
    posts_per_class: int = 250
    dim: int = 32
    seed: int = 0
    # anchor mixing weight: noisy enough that raw per-sample embeddings are
    # weakly separable while 256-shot prototype averages stay clean
    alpha: float = 0.45
    noise_tokens_frac: float = 0.3
    subtopics_per_class: int = 4
    empty_title_rate: float = 0.05

    def validate(self) -> None:
        if self.classes < 2:
            raise DataError("need at least 2 classes")
        if self.dim < 4:
            raise DataError("need dim >= 4")
        if self.posts_per_class < 1:
            raise DataError("need at least 1 post per class")
        if not 0.0 <= self.alpha <= 1.0:
            raise DataError("alpha must be in [0, 1]")
        if not 0.0 <= self.noise_tokens_frac <= 1.0:
            raise DataError("noise_tokens_frac must be in [0, 1]")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


@dataclass
class SyntheticWorld:
    """Everything the generator knows: dataset, anchors, word vectors and
    per-source embedding tables. The encoder provider is a view over this."""

    config: SyntheticConfig
    dataset: Dataset
    image_anchors: np.ndarray  # [K, dim]
    text_anchors: np.ndarray   # [K, dim]
    word_vectors: dict[str, np.ndarray]
    pad_vector: np.ndarray
    tables: dict[str, EmbeddingTable]  # keyed by source


def build_world(config: SyntheticConfig) -> SyntheticWorld:
    config.validate()
    rng = np.random.default_rng(config.seed)
    k, d, a = config.classes, config.dim, config.alpha

    image_anchors = _unit_rows(rng.standard_normal((k, d)))
    text_anchors = _unit_rows(rng.standard_normal((k, d)))

    entries = []
    class_words: list[list[str]] = []
    word_vectors: dict[str, np.ndarray] = {}
    for i in range(k):
        l1 = _LEVEL1[i % len(_LEVEL1)]
        name = f"{l1}_{i:02d}"
        entries.append(ClassEntry(i, name, name, l1))
        words = [f"{name}_w{j:02d}" for j in range(_WORDS_PER_CLASS)]
        class_words.append(words)
        for w in words:
            word_vectors[w] = _unit(a * text_anchors[i] + (1 - a) * _unit(rng.standard_normal(d)))
    noise_words = [f"noise_{j:03d}" for j in range(_NOISE_WORDS)]
    for w in noise_words:
        word_vectors[w] = _unit(rng.standard_normal(d))
    pad_vector = _unit(rng.standard_normal(d))
    classes = ClassTable(entries)

    n_users = max(4, k * config.posts_per_class // 12)
    user_effects = rng.normal(0.0, 1.0, n_users)
    user_weights = 1.0 / (np.arange(1, n_users + 1) ** 0.8)
    user_weights /= user_weights.sum()
    class_effects = rng.normal(0.0, _POP_CLASS_STD, k)

    def pick_tokens(n: int, words: list[str]) -> list[str]:
        toks = []
        for _ in range(n):
            if rng.random() < config.noise_tokens_frac:
                toks.append(noise_words[rng.integers(_NOISE_WORDS)])
            else:
                toks.append(words[rng.integers(len(words))])
        return toks

    records: list[PostRecord] = []
    title_recs: dict[str, EmbeddingRecord] = {}
    tags_recs: dict[str, EmbeddingRecord] = {}
    for i in range(k):
        entry = entries[i]
        for n in range(config.posts_per_class):
            pid = f"p{i:02d}_{n:04d}"
            user = int(rng.choice(n_users, p=user_weights))
            ts = int(_TIME_BASE + rng.integers(_TIME_SPAN))
            subtopic = f"{entry.name}_s{rng.integers(config.subtopics_per_class)}"

            if rng.random() < config.empty_title_rate:
                title = []
            else:
                title = pick_tokens(int(rng.integers(2, 9)), class_words[i])
            tags = pick_tokens(int(rng.integers(3, 13)), class_words[i])

            image_vec = _unit(a * image_anchors[i] + (1 - a) * _unit(rng.standard_normal(d)))
            title_global = (
                _unit(a * text_anchors[i] + (1 - a) * _unit(rng.standard_normal(d)))
                if title else pad_vector.copy()
            )
            tags_global = _unit(a * text_anchors[i] + (1 - a) * _unit(rng.standard_normal(d)))

            align = float(image_vec @ image_anchors[i])
            noise_std = _POP_NOISE_STD + _POP_NOISE_MISALIGN * max(0.0, 1.0 - align)
            pop = (
                _POP_BASE
                + class_effects[i]
                + _POP_USER_WEIGHT * user_effects[user]
                + _POP_ALIGN_WEIGHT * align
                + rng.normal(0.0, noise_std)
                + rng.exponential(_POP_TAIL_SCALE)
            )
            # rare viral posts give the label distribution its heavy right tail
            viral_bump = _POP_VIRAL_LIFT + rng.exponential(_POP_VIRAL_SCALE)
            if rng.random() < _POP_VIRAL_RATE:
                pop += viral_bump

            records.append(PostRecord(
                post_id=pid,
                user_id=f"u{user:04d}",
                title_tokens=tuple(title),
                tag_tokens=tuple(tags),
                category_path=(entry.parent1, entry.parent2, subtopic),
                class_index=i,
                timestamp=ts,
                popularity=float(pop),
                image_ref=f"images/{pid}.png",
            ))
            title_mat = (
                np.stack([word_vectors[w] for w in title]) if title else pad_vector[None, :].copy()
            )
            tags_mat = np.stack([word_vectors[w] for w in tags])
            title_recs[pid] = EmbeddingRecord(image_vec, title_global, title_mat)
            tags_recs[pid] = EmbeddingRecord(image_vec.copy(), tags_global, tags_mat)

    dataset = Dataset(records, classes)
    return SyntheticWorld(
        config=config,
        dataset=dataset,
        image_anchors=image_anchors,
        text_anchors=text_anchors,
        word_vectors=word_vectors,
        pad_vector=pad_vector,
        tables={
            SOURCE_TITLE: EmbeddingTable(d, title_recs),
            SOURCE_ALLTAGS: EmbeddingTable(d, tags_recs),
        },
    )


def generate_synthetic(config: SyntheticConfig) -> tuple[Dataset, EmbeddingTable]:
    """Deterministic synthetic dataset plus its title-source embedding table."""
    world = build_world(config)
    return world.dataset, world.tables[SOURCE_TITLE]


# ---------------------------------------------------------------------------
# splits and user statistics

USER_STAT_NAMES = (
    "log1p_user_post_count",
    "user_mean_popularity",
    "user_std_popularity",
    "tag_count",
    "title_token_count",
    "log1p_mean_tag_frequency",
    "hour_sin",
    "hour_cos",
)


def split_ids(dataset: Dataset, fractions=(0.7, 0.15, 0.15), seed: int = 0) -> dict[str, list[str]]:
    """Deterministic train/val/test split over sorted post ids."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError("split fractions must sum to 1")
    ids = sorted(r.post_id for r in dataset.records)
    perm = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    n = len(ids)
    n_train = int(fractions[0] * n)
    n_val = int(fractions[1] * n)
    return {
        "train": shuffled[:n_train],
        "val": shuffled[n_train:n_train + n_val],
        "test": shuffled[n_train + n_val:],
    }


def compute_user_stats(dataset: Dataset, train_split_ids) -> dict[str, np.ndarray]:
    """Eight hand-crafted behavior features per post.

    All user and tag aggregates come from the training split only; users
    unseen in training fall back to the global training means. Standard
    deviation is the population form (single-post users get 0).
    """
    train_ids = set(train_split_ids)
    if not train_ids:
        raise DataError("empty training split")
    unknown = train_ids - {r.post_id for r in dataset.records}
    if unknown:
        raise DataError(f"training split ids not in dataset: {sorted(unknown)[:3]}")

    train_recs = [r for r in dataset.records if r.post_id in train_ids]
    user_pops: dict[str, list[float]] = {}
    tag_freq: dict[str, int] = {}
    for r in train_recs:
        user_pops.setdefault(r.user_id, []).append(r.popularity)
        for t in r.tag_tokens:
            tag_freq[t] = tag_freq.get(t, 0) + 1

    all_train_pops = np.array([r.popularity for r in train_recs])
    global_mean = float(all_train_pops.mean())
    global_std = float(all_train_pops.std())
    global_count = len(train_recs) / max(1, len(user_pops))

    user_agg = {
        u: (len(pops), float(np.mean(pops)), float(np.std(pops)))
        for u, pops in user_pops.items()
    }

    out: dict[str, np.ndarray] = {}
    for r in dataset.records:
        count, mean, std = user_agg.get(r.user_id, (global_count, global_mean, global_std))
        mean_tag_freq = (
            float(np.mean([tag_freq.get(t, 0) for t in r.tag_tokens])) if r.tag_tokens else 0.0
        )
        hour = (r.timestamp % 86400) / 3600.0
        out[r.post_id] = np.array([
            math.log1p(count),
            mean,
            std,
            float(len(r.tag_tokens)),
            float(len(r.title_tokens)),
            math.log1p(mean_tag_freq),
            math.sin(2 * math.pi * hour / 24.0),
            math.cos(2 * math.pi * hour / 24.0),
        ])
    return out
