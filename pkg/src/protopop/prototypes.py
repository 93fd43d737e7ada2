"""Diversity-aware shot sampling and per-class multimodal prototypes.

Shots for a class are drawn with three stacked filters: proportional
quotas over equal-width temporal bins, round-robin over level-3 subtopics
within each bin, and a per-user cap. The cap is the only soft constraint;
when it makes a quota unreachable it is relaxed last and the relaxation is
recorded in the selection provenance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pemb
from .data import DataError, Dataset, PostRecord, SOURCE_ALLTAGS, SOURCE_TITLE
from .encoders import EncoderProvider

VISUAL_FILE = "visual_prototypes.pemb"
TEXTUAL_FILE = "textual_prototypes.pemb"
PROVENANCE_FILE = "provenance.json"


@dataclass(frozen=True)
class SamplingPlan:
    shots: int = 256
    temporal_bins: int = 8
    user_cap: int | None = None  # None: ceil(shots / 16)

    def __post_init__(self):
        if self.shots < 1 or self.temporal_bins < 1:
            raise DataError("shots and temporal_bins must be >= 1")
        if self.user_cap is not None and self.user_cap < 1:
            raise DataError("user_cap must be >= 1")

    @property
    def effective_user_cap(self) -> int:
        return self.user_cap if self.user_cap is not None else math.ceil(self.shots / 16)


@dataclass
class Selection:
    ids: list[str]
    relaxations: list[dict] = field(default_factory=list)


@dataclass
class PrototypeSet:
    visual: np.ndarray   # [K, d_enc]
    textual: np.ndarray  # [K, d_enc]
    provenance: dict[int, list[str]]
    relaxations: list[dict] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.visual.shape[0]


def largest_remainder_quotas(sizes: list[int], total: int) -> list[int]:
    """Integer quotas proportional to sizes summing to total; remainders
    favor the largest fraction, ties favor the earlier entry."""
    pool = sum(sizes)
    exact = [total * s / pool for s in sizes]
    base = [int(math.floor(e)) for e in exact]
    leftover = total - sum(base)
    order = sorted(range(len(sizes)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:leftover]:
        base[i] += 1
    return base


def _temporal_bins(posts: list[PostRecord], n_bins: int) -> list[list[PostRecord]]:
    times = [p.timestamp for p in posts]
    tmin, tmax = min(times), max(times)
    bins: list[list[PostRecord]] = [[] for _ in range(n_bins)]
    if tmax == tmin:
        bins[0] = list(posts)
        return bins
    width = (tmax - tmin) / n_bins
    for p in posts:
        idx = min(int((p.timestamp - tmin) / width), n_bins - 1)
        bins[idx].append(p)
    return bins


def stratified_select(posts_of_class: list[PostRecord], plan: SamplingPlan, seed: int) -> Selection:
    """Pick up to ``plan.shots`` posts of one class, deterministically."""
    if not posts_of_class:
        raise DataError("cannot sample an empty class")
    cap = plan.effective_user_cap
    rng = np.random.default_rng(seed)
    posts = sorted(posts_of_class, key=lambda p: p.post_id)

    if len(posts) <= plan.shots:
        # everything is selected; cap violations are only logged
        counts: dict[str, int] = {}
        for p in posts:
            counts[p.user_id] = counts.get(p.user_id, 0) + 1
        over = sum(c - cap for c in counts.values() if c > cap)
        relax = [{"bin": None, "extra": over}] if over else []
        return Selection([p.post_id for p in posts], relax)

    bins = _temporal_bins(posts, plan.temporal_bins)
    nonempty = [i for i, b in enumerate(bins) if b]
    quotas = largest_remainder_quotas([len(bins[i]) for i in nonempty], plan.shots)

    chosen: list[str] = []
    relaxations: list[dict] = []
    user_counts: dict[str, int] = {}
    for bin_idx, quota in zip(nonempty, quotas):
        groups: dict[str, list[PostRecord]] = {}
        for p in bins[bin_idx]:
            groups.setdefault(p.category_path[2], []).append(p)
        for g in groups.values():
            rng.shuffle(g)
        order = sorted(groups)

        picked = 0
        # pass 1: round-robin across subtopics, honoring the user cap
        progress = True
        while picked < quota and progress:
            progress = False
            for st in order:
                if picked >= quota:
                    break
                g = groups[st]
                for i, cand in enumerate(g):
                    if user_counts.get(cand.user_id, 0) < cap:
                        g.pop(i)
                        user_counts[cand.user_id] = user_counts.get(cand.user_id, 0) + 1
                        chosen.append(cand.post_id)
                        picked += 1
                        progress = True
                        break
        # pass 2: quota unreachable under the cap; relax it last
        if picked < quota:
            extra = 0
            while picked < quota:
                advanced = False
                for st in order:
                    if picked >= quota:
                        break
                    g = groups[st]
                    if g:
                        cand = g.pop(0)
                        user_counts[cand.user_id] = user_counts.get(cand.user_id, 0) + 1
                        chosen.append(cand.post_id)
                        picked += 1
                        extra += 1
                        advanced = True
                if not advanced:
                    break
            if extra:
                relaxations.append({"bin": bin_idx, "extra": extra})
    return Selection(chosen, relaxations)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms < 1e-150):
        raise DataError("cannot normalize a zero embedding")
    return m / norms


def build_prototypes(dataset: Dataset, provider: EncoderProvider,
                     plan: SamplingPlan, seed: int) -> PrototypeSet:
    """Mean of L2-normalized shot embeddings per class.

    Textual prototypes use each shot's title embedding, falling back to the
    all-tags embedding when the title is empty (and that source exists).
    """
    k = dataset.classes.k
    class_seeds = np.random.SeedSequence(seed).generate_state(k)
    visual = np.zeros((k, provider.dim))
    textual = np.zeros((k, provider.dim))
    provenance: dict[int, list[str]] = {}
    relaxations: list[dict] = []
    for i in range(k):
        posts = dataset.of_class(i)
        if not posts:
            raise DataError(f"class {i} ('{dataset.classes.name(i)}') has no posts")
        sel = stratified_select(posts, plan, int(class_seeds[i]))
        provenance[i] = sel.ids
        for r in sel.relaxations:
            relaxations.append({"class_index": i, **r})
        imgs = np.stack([provider.encode_image(pid) for pid in sel.ids])
        texts = []
        for pid in sel.ids:
            rec = dataset.get(pid)
            source = SOURCE_TITLE
            if not rec.title_tokens and provider.has_source(SOURCE_ALLTAGS):
                source = SOURCE_ALLTAGS
            texts.append(provider.encode_text(pid, source)[0])
        visual[i] = _unit_rows(imgs).mean(axis=0)
        textual[i] = _unit_rows(np.stack(texts)).mean(axis=0)
    return PrototypeSet(visual, textual, provenance, relaxations)


def save_prototypes(dirpath, protos: PrototypeSet, dataset: Dataset) -> None:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    names = [dataset.classes.name(i) for i in range(protos.k)]
    dim = protos.visual.shape[1]
    pemb.write_pemb(dirpath / VISUAL_FILE, pemb.KIND_IMAGE_GLOBAL, dim,
                    {n: protos.visual[i] for i, n in enumerate(names)})
    pemb.write_pemb(dirpath / TEXTUAL_FILE, pemb.KIND_TEXT_GLOBAL, dim,
                    {n: protos.textual[i] for i, n in enumerate(names)})
    doc = {
        "provenance": {str(i): ids for i, ids in sorted(protos.provenance.items())},
        "relaxations": protos.relaxations,
    }
    (dirpath / PROVENANCE_FILE).write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_prototypes(dirpath, dataset: Dataset) -> PrototypeSet:
    dirpath = Path(dirpath)
    _, dim_v, vis = pemb.read_pemb(dirpath / VISUAL_FILE)
    _, dim_t, txt = pemb.read_pemb(dirpath / TEXTUAL_FILE)
    if dim_v != dim_t:
        raise pemb.PembError("prototype files disagree on dim")
    k = dataset.classes.k
    visual = np.zeros((k, dim_v))
    textual = np.zeros((k, dim_v))
    for i in range(k):
        name = dataset.classes.name(i)
        if name not in vis or name not in txt:
            raise DataError(f"prototype files missing class '{name}'")
        visual[i] = vis[name]
        textual[i] = txt[name]
    doc = json.loads((dirpath / PROVENANCE_FILE).read_text(encoding="utf-8"))
    provenance = {int(i): ids for i, ids in doc["provenance"].items()}
    return PrototypeSet(visual, textual, provenance, doc["relaxations"])
