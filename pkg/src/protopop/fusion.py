"""Cross-modal projection, attention interaction, and prototype classification.

An image vector and both prototype matrices are projected into a shared
space (image projection for image + visual prototypes, text projection for
textual prototypes), concatenated into one token sequence, and passed
through a single residual multi-head self-attention block. Slicing the
output recovers context-updated representations, which are classified by
temperature-scaled cosine similarity against each prototype family.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import AttentionParams, Tensor


@dataclass
class FusionParams:
    image_proj_w: Tensor
    image_proj_b: Tensor
    text_proj_w: Tensor
    text_proj_b: Tensor
    attn: AttentionParams
    heads: int
    log_tau_v: Tensor  # log-parameterized so learnable temperatures stay positive
    log_tau_t: Tensor

    def parameters(self) -> list[Tensor]:
        ps = [self.image_proj_w, self.image_proj_b, self.text_proj_w, self.text_proj_b]
        ps += self.attn.tensors()
        if self.log_tau_v.requires_grad:
            ps += [self.log_tau_v, self.log_tau_t]
        return ps

    def tau_v(self) -> Tensor:
        return ad.exp(self.log_tau_v)

    def tau_t(self) -> Tensor:
        return ad.exp(self.log_tau_t)


@dataclass
class FusedTriple:
    image: Tensor           # [d]
    visual_protos: Tensor   # [K, d]
    textual_protos: Tensor  # [K, d]


def init_fusion_params(d_enc: int, d: int = 64, heads: int = 4,
                       tau_v: float = 0.07, tau_t: float = 0.07,
                       learnable_temps: bool = False, seed: int = 0) -> FusionParams:
    if d % heads != 0:
        raise ValueError(f"fusion dim {d} not divisible by {heads} heads")
    if tau_v <= 0 or tau_t <= 0:
        raise ValueError("temperatures must be positive")
    rng = np.random.default_rng(seed)
    proj_std = 1.0 / math.sqrt(d_enc)

    def proj():
        return (Tensor(rng.normal(0.0, proj_std, (d_enc, d)), requires_grad=True),
                Tensor(np.zeros(d), requires_grad=True))

    iw, ib = proj()
    tw, tb = proj()
    return FusionParams(
        image_proj_w=iw, image_proj_b=ib,
        text_proj_w=tw, text_proj_b=tb,
        attn=ad.attention_params(d, rng, std=0.02),
        heads=heads,
        log_tau_v=Tensor(math.log(tau_v), requires_grad=learnable_temps),
        log_tau_t=Tensor(math.log(tau_t), requires_grad=learnable_temps),
    )


def project_prototypes(visual: np.ndarray, textual: np.ndarray,
                       params: FusionParams) -> tuple[Tensor, Tensor]:
    """Projected prototype rows; shared across every sample in a batch."""
    pv = ad.add_bias(ad.matmul(Tensor(visual), params.image_proj_w), params.image_proj_b)
    pt = ad.add_bias(ad.matmul(Tensor(textual), params.text_proj_w), params.text_proj_b)
    return pv, pt


def fuse_projected(x: np.ndarray, projected: tuple[Tensor, Tensor],
                   params: FusionParams) -> FusedTriple:
    pv, pt = projected
    k = pv.shape[0]
    xi = ad.add_bias(ad.matmul(Tensor(x[None, :]), params.image_proj_w), params.image_proj_b)
    seq = ad.concat_rows([xi, pv, pt])  # 1 + 2K tokens
    out = ad.multi_head_self_attention(seq, params.attn, params.heads)
    d = out.shape[1]
    return FusedTriple(
        image=ad.reshape(ad.slice_rows(out, 0, 1), (d,)),
        visual_protos=ad.slice_rows(out, 1, k + 1),
        textual_protos=ad.slice_rows(out, k + 1, 2 * k + 1),
    )


def fuse(x: np.ndarray, visual: np.ndarray, textual: np.ndarray,
         params: FusionParams) -> FusedTriple:
    if visual.shape != textual.shape:
        raise ValueError("prototype matrices must share a shape")
    if x.shape != (visual.shape[1],):
        raise ValueError(f"image dim {x.shape} does not match prototypes {visual.shape}")
    return fuse_projected(x, project_prototypes(visual, textual, params), params)


def _sims(t: FusedTriple) -> tuple[Tensor, Tensor]:
    d = t.image.shape[0]
    k = t.visual_protos.shape[0]
    row = ad.reshape(t.image, (1, d))
    sims_v = ad.reshape(ad.cosine_rows(row, t.visual_protos), (k,))
    sims_t = ad.reshape(ad.cosine_rows(row, t.textual_protos), (k,))
    return sims_v, sims_t


def modality_probs(t: FusedTriple, params: FusionParams) -> tuple[Tensor, Tensor]:
    """Per-modality class probabilities: softmax of cosine similarities at
    each modality's temperature."""
    sims_v, sims_t = _sims(t)
    return ad.softmax(sims_v, tau=params.tau_v()), ad.softmax(sims_t, tau=params.tau_t())


def cross_loss(t: FusedTriple, label: int, params: FusionParams) -> Tensor:
    """Cross-entropy on the average of the two modality logit vectors."""
    sims_v, sims_t = _sims(t)
    inv_v = ad.pow_const(params.tau_v(), -1.0)
    inv_t = ad.pow_const(params.tau_t(), -1.0)
    logits = ad.mul(ad.add(ad.mul(sims_v, inv_v), ad.mul(sims_t, inv_t)), Tensor(0.5))
    return ad.cross_entropy(logits, label, tau=1.0)


def combined_prediction(t: FusedTriple, params: FusionParams) -> Tensor:
    """Mean of the visual and textual probability vectors."""
    pv, pt = modality_probs(t, params)
    return ad.mul(ad.add(pv, pt), Tensor(0.5))
