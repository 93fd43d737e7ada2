"""Alignment training loop, loss-ranked sample selection, feature extraction.

One training step minimizes L = L_global + L_local + L_cross, averaged over
a minibatch: the two prompt-alignment cross-entropies plus the fused
prototype classification loss. Prototypes and encoder outputs are frozen
throughout; only prompt contexts, projections, attention parameters (and
optionally the modality temperatures) receive gradients.
"""

from __future__ import annotations

import json
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import fusion as fu
from . import prompts as pr
from .autodiff import Tensor
from .data import DataError, PostRecord, SOURCE_ALLTAGS, SOURCE_TITLE
from .encoders import EncoderProvider
from .prototypes import PrototypeSet


def thread_count() -> int:
    """Worker cap from PROTOPOP_THREADS; 1 means fully sequential."""
    try:
        return max(1, int(os.environ.get("PROTOPOP_THREADS", "1")))
    except ValueError:
        return 1


def _map_ordered(fn, items):
    n = thread_count()
    if n <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 4
    batch_size: int = 128
    seed: int = 0
    selection_ratio: float = 0.77
    tau_g: float = 0.07
    tau_s: float = 0.1
    tau_v: float = 0.07
    tau_t: float = 0.07
    learnable_temps: bool = False
    fusion_dim: int = 64
    heads: int = 4
    prompt_len: int = 8
    source: str = SOURCE_TITLE

    def validate(self) -> None:
        if not 0.0 < self.selection_ratio <= 1.0:
            raise DataError("selection_ratio must be in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise DataError("epochs and batch_size must be >= 1")
        if self.source not in (SOURCE_TITLE, SOURCE_ALLTAGS):
            raise DataError(f"unknown source '{self.source}'")
        if min(self.tau_g, self.tau_s, self.tau_v, self.tau_t) <= 0:
            raise DataError("temperatures must be positive")


@dataclass
class AlignmentModel:
    bank: pr.PromptBank
    fusion: fu.FusionParams
    prototypes: PrototypeSet  # frozen; never mutated by training
    comp_map: np.ndarray
    config: TrainConfig

    def parameters(self) -> list[Tensor]:
        return self.bank.parameters() + self.fusion.parameters()


def init_model(provider: EncoderProvider, class_names: list[str],
               prototypes: PrototypeSet, config: TrainConfig) -> AlignmentModel:
    config.validate()
    bank = pr.bank_from_provider(provider, class_names,
                                 prompt_len=config.prompt_len, seed=config.seed)
    fusion = fu.init_fusion_params(
        provider.dim, d=config.fusion_dim, heads=config.heads,
        tau_v=config.tau_v, tau_t=config.tau_t,
        learnable_temps=config.learnable_temps, seed=config.seed)
    return AlignmentModel(bank, fusion, prototypes, provider.composition_map(), config)


@dataclass
class _StepContext:
    embeds: pr.ClassEmbeds
    projected: tuple[Tensor, Tensor]


def _context(model: AlignmentModel) -> _StepContext:
    embeds = pr.class_embeddings(model.bank, model.comp_map)
    projected = fu.project_prototypes(model.prototypes.visual, model.prototypes.textual,
                                      model.fusion)
    return _StepContext(embeds, projected)


def _sample_terms(model: AlignmentModel, ctx: _StepContext, rec: PostRecord,
                  provider: EncoderProvider):
    cfg = model.config
    x = provider.encode_image(rec.post_id)
    h, H = provider.encode_text(rec.post_id, cfg.source)
    p = pr.global_score(h, ctx.embeds)
    p_local = pr.local_score(H, ctx.embeds, tau_s=cfg.tau_s)
    loss_g, loss_o = pr.prompt_losses(p, p_local, rec.class_index, tau_g=cfg.tau_g)
    triple = fu.fuse_projected(x, ctx.projected, model.fusion)
    loss_c = fu.cross_loss(triple, rec.class_index, model.fusion)
    return loss_g, loss_o, loss_c, p, p_local, triple


def train_alignment(records: list[PostRecord], provider: EncoderProvider,
                    prototypes: PrototypeSet, config: TrainConfig,
                    class_names: list[str] | None = None,
                    model: AlignmentModel | None = None):
    """Minibatch AdamW over the combined alignment loss.

    Returns (model, history) where history carries one entry per batch and
    per-epoch mean losses. Deterministic for a fixed config and seed.
    """
    if not records:
        raise DataError("cannot train on an empty dataset")
    if model is None:
        if class_names is None:
            raise DataError("need class names to initialize a model")
        model = init_model(provider, class_names, prototypes, config)
    opt = ad.AdamW(model.parameters(), lr=config.lr,
                   weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    history = {"batches": [], "epoch_means": []}
    n = len(records)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            batch = [records[i] for i in order[start:start + config.batch_size]]
            opt.zero_grad()
            ctx = _context(model)
            total = None
            parts = np.zeros(3)
            for rec in batch:
                lg, lo, lc, *_ = _sample_terms(model, ctx, rec, provider)
                contrib = ad.add(ad.add(lg, lo), lc)
                total = contrib if total is None else ad.add(total, contrib)
                parts += [lg.item(), lo.item(), lc.item()]
            total = ad.mul(total, Tensor(1.0 / len(batch)))
            total.backward()
            opt.step()
            parts /= len(batch)
            entry = {
                "epoch": epoch,
                "loss": total.item(),
                "loss_global": parts[0],
                "loss_local": parts[1],
                "loss_cross": parts[2],
            }
            history["batches"].append(entry)
            epoch_losses.append(entry["loss"])
        history["epoch_means"].append(float(np.mean(epoch_losses)))
    return model, history


def per_sample_losses(model: AlignmentModel, records: list[PostRecord],
                      provider: EncoderProvider) -> dict[str, float]:
    """Total alignment loss per post; pure evaluation, no mutation."""
    ctx = _context(model)

    def one(rec):
        lg, lo, lc, *_ = _sample_terms(model, ctx, rec, provider)
        return rec.post_id, lg.item() + lo.item() + lc.item()

    return dict(_map_ordered(one, records))


def select_samples(losses: dict[str, float], ratio: float) -> list[str]:
    """Keep the floor(ratio * n) lowest-loss ids (at least one); ties break
    toward the lexicographically smaller post id. Returned sorted by id."""
    if not losses:
        raise DataError("empty loss table")
    if not 0.0 < ratio <= 1.0:
        raise DataError("ratio must be in (0, 1]")
    k = max(1, math.floor(ratio * len(losses)))
    ranked = sorted(losses.items(), key=lambda kv: (kv[1], kv[0]))
    return sorted(pid for pid, _ in ranked[:k])


# ---------------------------------------------------------------------------
# feature extraction

FEATURE_BLOCKS = (
    "image", "text_global", "global_sims", "local_sims",
    "fused_image", "prob_visual", "prob_textual", "user_stats",
)

FROZEN_BLOCKS = ("image", "text_global", "user_stats")


@dataclass
class FeatureTable:
    ids: list[str]
    matrix: np.ndarray  # [n, width] float64
    blocks: dict[str, tuple[int, int]]
    _row_of: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._row_of = {pid: i for i, pid in enumerate(self.ids)}

    @property
    def width(self) -> int:
        return self.matrix.shape[1]

    def rows(self, ids) -> np.ndarray:
        try:
            idx = [self._row_of[i] for i in ids]
        except KeyError as e:
            raise DataError(f"no feature row for post id {e.args[0]!r}") from None
        return self.matrix[idx]

    def columns(self, block_names) -> np.ndarray:
        cols = []
        for name in block_names:
            lo, hi = self.blocks[name]
            cols.append(self.matrix[:, lo:hi])
        return np.concatenate(cols, axis=1)

    def subset(self, ids, block_names=None) -> np.ndarray:
        rows = self.rows(ids)
        if block_names is None:
            return rows
        return np.concatenate(
            [rows[:, lo:hi] for lo, hi in (self.blocks[b] for b in block_names)], axis=1)


def feature_width(d_enc: int, k: int, d: int) -> int:
    return 2 * d_enc + 2 * k + d + 2 * k + 8


def extract_features(model: AlignmentModel, records: list[PostRecord],
                     provider: EncoderProvider,
                     user_stats: dict[str, np.ndarray]) -> FeatureTable:
    """Per-post feature assembly: raw embeddings, prompt similarities,
    fused image representation, modality probabilities, user statistics."""
    ctx = _context(model)

    def one(rec):
        if rec.post_id not in user_stats:
            raise DataError(f"missing user stats for '{rec.post_id}'")
        x = provider.encode_image(rec.post_id)
        h, _ = provider.encode_text(rec.post_id, model.config.source)
        _, _, _, p, p_local, triple = _sample_terms(model, ctx, rec, provider)
        pv, pt = fu.modality_probs(triple, model.fusion)
        return np.concatenate([
            x, h, p.data, p_local.data, triple.image.data,
            pv.data, pt.data, user_stats[rec.post_id],
        ])

    rows = _map_ordered(one, records)
    d_enc, k = provider.dim, model.prototypes.k
    d = model.config.fusion_dim
    spans = {}
    lo = 0
    for name, width in zip(FEATURE_BLOCKS, (d_enc, d_enc, k, k, d, k, k, 8)):
        spans[name] = (lo, lo + width)
        lo += width
    matrix = np.stack(rows)
    if matrix.shape[1] != feature_width(d_enc, k, d):
        raise DataError("feature width mismatch")
    return FeatureTable([r.post_id for r in records], matrix, spans)


# ---------------------------------------------------------------------------
# serialization

_CKPT_MAGIC = b"PPCK"
_CKPT_VERSION = 1
_FEAT_MAGIC = "PPFT"


def _write_sections(f, arrays: dict[str, np.ndarray]) -> None:
    f.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        f.write(struct.pack("<H", len(nb)))
        f.write(nb)
        f.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            f.write(struct.pack("<I", dim))
        f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_sections(raw: bytes, off: int) -> dict[str, np.ndarray]:
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = []
        for _ in range(ndim):
            (dim,) = struct.unpack_from("<I", raw, off)
            shape.append(dim)
            off += 4
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape)
        out[name] = arr.copy()
        off += 8 * size
    if off != len(raw):
        raise DataError("trailing bytes in checkpoint")
    return out


def save_model(path, model: AlignmentModel) -> None:
    cfg_json = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    arrays = {
        "theta_global": model.bank.theta_global.data,
        "theta_local": model.bank.theta_local.data,
        "class_tokens": model.bank.class_tokens,
        "comp_map": model.comp_map,
        "image_proj_w": model.fusion.image_proj_w.data,
        "image_proj_b": model.fusion.image_proj_b.data,
        "text_proj_w": model.fusion.text_proj_w.data,
        "text_proj_b": model.fusion.text_proj_b.data,
        "attn_wq": model.fusion.attn.wq.data,
        "attn_wk": model.fusion.attn.wk.data,
        "attn_wv": model.fusion.attn.wv.data,
        "attn_wo": model.fusion.attn.wo.data,
        "attn_bq": model.fusion.attn.bq.data,
        "attn_bk": model.fusion.attn.bk.data,
        "attn_bv": model.fusion.attn.bv.data,
        "attn_bo": model.fusion.attn.bo.data,
        "log_tau_v": model.fusion.log_tau_v.data,
        "log_tau_t": model.fusion.log_tau_t.data,
        "proto_visual": model.prototypes.visual,
        "proto_textual": model.prototypes.textual,
    }
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<H", _CKPT_VERSION))
        f.write(struct.pack("<I", len(cfg_json)))
        f.write(cfg_json)
        _write_sections(f, arrays)


def load_model(path) -> AlignmentModel:
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise DataError("bad checkpoint magic")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != _CKPT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", raw, 6)
    config = TrainConfig(**json.loads(raw[10:10 + cfg_len].decode("utf-8")))
    a = _read_sections(raw, 10 + cfg_len)
    t = lambda key, grad=True: Tensor(a[key], requires_grad=grad)
    bank = pr.PromptBank(t("theta_global"), t("theta_local"), a["class_tokens"],
                         prompt_len=config.prompt_len)
    fusion = fu.FusionParams(
        image_proj_w=t("image_proj_w"), image_proj_b=t("image_proj_b"),
        text_proj_w=t("text_proj_w"), text_proj_b=t("text_proj_b"),
        attn=ad.AttentionParams(
            wq=t("attn_wq"), wk=t("attn_wk"), wv=t("attn_wv"), wo=t("attn_wo"),
            bq=t("attn_bq"), bk=t("attn_bk"), bv=t("attn_bv"), bo=t("attn_bo")),
        heads=config.heads,
        log_tau_v=t("log_tau_v", grad=config.learnable_temps),
        log_tau_t=t("log_tau_t", grad=config.learnable_temps),
    )
    protos = PrototypeSet(a["proto_visual"], a["proto_textual"], provenance={})
    return AlignmentModel(bank, fusion, protos, a["comp_map"], config)


def save_features(dirpath, table: FeatureTable) -> None:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    blocks = ",".join(f"{n}:{lo}:{hi}" for n, (lo, hi) in table.blocks.items())
    header = f"{_FEAT_MAGIC} 1 {len(table.ids)} {table.width} {blocks}\n"
    with open(dirpath / "features.bin", "wb") as f:
        f.write(header.encode("ascii"))
        f.write(table.matrix.astype("<f4").tobytes())
    (dirpath / "features.ids").write_text("\n".join(table.ids) + "\n", encoding="utf-8")


def load_features(dirpath) -> FeatureTable:
    dirpath = Path(dirpath)
    raw = (dirpath / "features.bin").read_bytes()
    nl = raw.index(b"\n")
    parts = raw[:nl].decode("ascii").split(" ")
    if parts[0] != _FEAT_MAGIC or parts[1] != "1":
        raise DataError("bad feature file header")
    n, width = int(parts[2]), int(parts[3])
    blocks = {}
    for item in parts[4].split(","):
        name, lo, hi = item.split(":")
        blocks[name] = (int(lo), int(hi))
    matrix = np.frombuffer(raw, dtype="<f4", count=n * width, offset=nl + 1)
    matrix = matrix.reshape(n, width).astype(np.float64)
    ids = (dirpath / "features.ids").read_text(encoding="utf-8").splitlines()
    if len(ids) != n:
        raise DataError("feature ids sidecar does not match matrix rows")
    return FeatureTable(ids, matrix, blocks)
