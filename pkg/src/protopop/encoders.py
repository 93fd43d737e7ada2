"""Pluggable frozen encoders.

A provider is a pure lookup: same post id, same vectors, every time. Two
backends exist — one over the synthetic world (which can serve both text
sources and knows its class anchors), one over embedding tables read from
PEMB interchange files exported by an external encoder.
"""

from __future__ import annotations

import abc

import numpy as np

from .data import (
    DataError,
    EmbeddingTable,
    SOURCE_ALLTAGS,
    SOURCE_TITLE,
    SyntheticConfig,
    SyntheticWorld,
    build_world,
)


class EncoderProvider(abc.ABC):
    """Frozen encoder interface: image vectors, text global + token
    sequences, and class-token embeddings for prompt assembly."""

    dim: int
    token_dim: int

    @abc.abstractmethod
    def encode_image(self, post_id: str) -> np.ndarray:
        """Image embedding [dim]; raw, not normalized."""

    @abc.abstractmethod
    def encode_text(self, post_id: str, source: str = SOURCE_TITLE) -> tuple[np.ndarray, np.ndarray]:
        """(global [dim], tokens [l, dim]) for the given text source.

        An empty source text yields a single pad token rather than failing;
        whether a post was padded is visible from its record's empty token
        list."""

    @abc.abstractmethod
    def embed_class_token(self, class_name: str) -> np.ndarray:
        """Class-name token embedding [token_dim] for prompt concatenation."""

    def has_source(self, source: str) -> bool:
        _check_source(source)
        return True

    def composition_map(self) -> np.ndarray:
        """Fixed linear map [token_dim, dim] composing pooled prompt tokens
        into the encoder embedding space."""
        if self.token_dim != self.dim:
            raise DataError("non-square composition requires an explicit map")
        return np.eye(self.dim)


def _check_source(source: str) -> None:
    if source not in (SOURCE_TITLE, SOURCE_ALLTAGS):
        raise DataError(f"unknown text source '{source}'")


class SyntheticEncoderProvider(EncoderProvider):
    """Serves the synthetic world's embeddings; class tokens are the
    generator's textual anchors."""

    def __init__(self, world_or_config):
        if isinstance(world_or_config, SyntheticConfig):
            world_or_config = build_world(world_or_config)
        self.world: SyntheticWorld = world_or_config
        self.dim = self.world.config.dim
        self.token_dim = self.world.config.dim
        self._names = {e.name: e.index for e in self.world.dataset.classes.entries}

    def encode_image(self, post_id):
        return self.world.tables[SOURCE_TITLE].get(post_id).image_vec

    def encode_text(self, post_id, source=SOURCE_TITLE):
        _check_source(source)
        rec = self.world.tables[source].get(post_id)
        return rec.text_global, rec.text_tokens

    def embed_class_token(self, class_name):
        try:
            return self.world.text_anchors[self._names[class_name]]
        except KeyError:
            raise DataError(f"unknown class name '{class_name}'") from None


class TableEncoderProvider(EncoderProvider):
    """Serves embedding tables loaded from interchange files.

    ``tables`` maps text source name to an EmbeddingTable; a single-source
    pipeline may supply just one. ``class_tokens`` maps class name to a
    token embedding (typically the textual prototypes, or a dedicated
    class-embedding PEMB file when the exporter provides one).
    """

    def __init__(self, tables: dict[str, EmbeddingTable],
                 class_tokens: dict[str, np.ndarray] | None = None):
        if not tables:
            raise DataError("need at least one embedding table")
        dims = {t.dim for t in tables.values()}
        if len(dims) != 1:
            raise DataError(f"tables disagree on dim: {sorted(dims)}")
        for source in tables:
            _check_source(source)
        self.tables = tables
        self.dim = dims.pop()
        self.token_dim = self.dim
        self.class_tokens = dict(class_tokens or {})

    def has_source(self, source: str) -> bool:
        _check_source(source)
        return source in self.tables

    def _table(self, source: str) -> EmbeddingTable:
        _check_source(source)
        try:
            return self.tables[source]
        except KeyError:
            raise DataError(f"no embedding table loaded for source '{source}'") from None

    def encode_image(self, post_id):
        return next(iter(self.tables.values())).get(post_id).image_vec

    def encode_text(self, post_id, source=SOURCE_TITLE):
        rec = self._table(source).get(post_id)
        return rec.text_global, rec.text_tokens

    def embed_class_token(self, class_name):
        try:
            return self.class_tokens[class_name]
        except KeyError:
            raise DataError(f"no class token embedding for '{class_name}'") from None
