"""Dual-grained learnable prompts and textual alignment scoring.

Two shared context matrices (global and local), each concatenated with a
frozen class-name token embedding, are pooled and linearly composed into
the encoder space to produce per-class embeddings. The global branch
scores whole-text similarity; the local branch aggregates per-token
similarities with a sharpness-controlled softmax weighting.

The text composition here is mean-pool + fixed linear map rather than a
transformer pass: the learnable-context mechanism and its gradients are
preserved exactly, at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import EncoderProvider


@dataclass
class PromptBank:
    theta_global: Tensor      # [s, d_tok] learnable
    theta_local: Tensor       # [s, d_tok] learnable
    class_tokens: np.ndarray  # [K, d_tok] frozen
    prompt_len: int

    def parameters(self) -> list[Tensor]:
        return [self.theta_global, self.theta_local]


@dataclass
class ClassEmbeds:
    global_embeds: Tensor  # [K, d_enc]
    local_embeds: Tensor   # [K, d_enc]


def init_prompt_bank(class_tokens: np.ndarray, prompt_len: int = 8,
                     seed: int = 0, std: float = 0.02) -> PromptBank:
    rng = np.random.default_rng(seed)
    d_tok = class_tokens.shape[1]
    return PromptBank(
        theta_global=Tensor(rng.normal(0.0, std, (prompt_len, d_tok)), requires_grad=True),
        theta_local=Tensor(rng.normal(0.0, std, (prompt_len, d_tok)), requires_grad=True),
        class_tokens=np.asarray(class_tokens, dtype=np.float64),
        prompt_len=prompt_len,
    )


def bank_from_provider(provider: EncoderProvider, class_names: list[str],
                       prompt_len: int = 8, seed: int = 0, std: float = 0.02) -> PromptBank:
    tokens = np.stack([provider.embed_class_token(n) for n in class_names])
    return init_prompt_bank(tokens, prompt_len=prompt_len, seed=seed, std=std)


def class_embeddings(bank: PromptBank, encoder) -> ClassEmbeds:
    """Pool [theta, e_i] and compose into the encoder space.

    ``encoder`` is an EncoderProvider or the bare composition matrix.
    Gradients flow into the context matrices only; class tokens and the
    composition map are frozen."""
    comp = encoder.composition_map() if hasattr(encoder, "composition_map") else np.asarray(encoder)
    k, d_tok = bank.class_tokens.shape
    if comp.shape[0] != d_tok:
        raise ValueError(f"composition map rows {comp.shape[0]} != token dim {d_tok}")
    s = bank.prompt_len
    ones_pool = np.ones((1, s))
    tile = np.ones((k, 1))
    e = Tensor(bank.class_tokens)
    scale = 1.0 / (s + 1)

    def compose(theta: Tensor) -> Tensor:
        ctx = ad.matmul(Tensor(ones_pool), theta)          # [1, d_tok] summed context
        pooled = ad.mul(ad.add(ad.matmul(Tensor(tile), ctx), e), Tensor(scale))
        return ad.matmul(pooled, Tensor(comp))             # [K, d_enc]

    return ClassEmbeds(compose(bank.theta_global), compose(bank.theta_local))


def global_score(h: np.ndarray, embeds: ClassEmbeds) -> Tensor:
    """p_i = cos(h, G_i) over all classes; h is data, not a parameter."""
    k = embeds.global_embeds.shape[0]
    sims = ad.cosine_rows(embeds.global_embeds, Tensor(h[None, :]))
    return ad.reshape(sims, (k,))


def local_score(H: np.ndarray, embeds: ClassEmbeds, tau_s: float = 0.1) -> Tensor:
    """Softmax-weighted aggregation of token similarities.

    p'_i = sum_j softmax_j(P_ij / tau_s) * P_ij with P_ij = cos(H_j, L_i).
    Small tau_s approaches the max over tokens, large tau_s the mean."""
    if tau_s <= 0:
        raise ValueError("tau_s must be positive")
    if H.ndim != 2 or H.shape[0] < 1:
        raise ValueError("H must be a nonempty [tokens, dim] matrix")
    k = embeds.local_embeds.shape[0]
    p = ad.cosine_rows(embeds.local_embeds, Tensor(H))  # [K, l]
    weights = ad.softmax(p, tau=tau_s)
    agg = ad.matmul(ad.mul(weights, p), Tensor(np.ones((H.shape[0], 1))))
    return ad.reshape(agg, (k,))


def prompt_losses(p: Tensor, p_local: Tensor, label: int, tau_g: float = 0.07) -> tuple[Tensor, Tensor]:
    """Temperature-scaled cross-entropy on the global and local scores."""
    return (
        ad.cross_entropy(p, label, tau=tau_g),
        ad.cross_entropy(p_local, label, tau=tau_g),
    )
