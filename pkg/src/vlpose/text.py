"""Category prompt registry and pluggable text embedding providers.

The registry maps the 19 scene categories to their tailored prompt strings.
Embeddings come from either a deterministic pseudo-embedder (seeded per
token and position) or a table of externally computed vectors loaded from a
text file, so a real pretrained text encoder can be dropped in without code
changes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

__all__ = [
    "CATEGORY_PROMPTS",
    "PromptRegistry",
    "TextFeatures",
    "PseudoEmbedder",
    "TableEmbedder",
    "embed_text",
    "save_embedding_table",
    "load_embedding_table",
    "FIXED_PROMPT",
]

# (id, category name, prompt) for every scene category, in id order.
CATEGORY_PROMPTS = (
    (1, "cartoon", "a cartoon human"),
    (2, "digital art", "a digital art human"),
    (3, "ink painting", "a ink-painting human"),
    (4, "kids drawing", "a kids-drawing human"),
    (5, "mural", "a mural human"),
    (6, "oil painting", "a oil-painting human"),
    (7, "shadow play", "a shadow-play human"),
    (8, "sketch", "a sketch human"),
    (9, "stained glass", "a stained glass human"),
    (10, "ukiyoe", "a ukiyoe human"),
    (11, "watercolor", "a watercolor human"),
    (12, "garage kits", "a garage-kits human"),
    (13, "relief", "a relief human"),
    (14, "sculpture", "a sculpture human"),
    (15, "acrobatics", "a acrobaticsing human photo"),
    (16, "cosplay", "a cosplaying human photo"),
    (17, "dance", "a dancing human photo"),
    (18, "drama", "a photo of a human in a drama"),
    (19, "movie", "a photo of a human in a movie"),
)

# Neutral prompt used by the fixed-prompt comparison mode.
FIXED_PROMPT = "a human"


class PromptLookupError(KeyError):
    pass


class PromptRegistry:
    """Immutable id -> (name, prompt) registry; iteration follows id order."""

    def __init__(self, entries=CATEGORY_PROMPTS):
        entries = tuple(entries)
        ids = [e[0] for e in entries]
        if ids != list(range(1, len(entries) + 1)):
            raise ValueError(f"category ids must be contiguous from 1, got {ids}")
        self._entries = entries
        self._by_id = {cid: (name, prompt) for cid, name, prompt in entries}

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def ids(self):
        return [cid for cid, _, _ in self._entries]

    def name_for_category(self, category_id: int) -> str:
        return self._lookup(category_id)[0]

    def prompt_for_category(self, category_id: int) -> str:
        return self._lookup(category_id)[1]

    def _lookup(self, category_id: int):
        try:
            return self._by_id[category_id]
        except KeyError:
            raise PromptLookupError(
                f"unknown category id {category_id}; valid ids are 1..{len(self._entries)}"
            ) from None


@dataclass(frozen=True)
class TextFeatures:
    """L x D token embedding of one prompt, tagged with its provider."""

    tokens: Tensor
    prompt: str
    provider: str

    def __post_init__(self):
        if self.tokens.data.ndim != 2 or self.tokens.data.shape[0] < 1:
            raise ValueError(f"text features must be LxD with L >= 1, got {self.tokens.data.shape}")
        if not np.isfinite(self.tokens.data).all():
            raise ValueError("text features contain non-finite values")


def _tokenize(prompt: str) -> list[str]:
    return prompt.lower().split()


def _token_vector(token: str, position: int, dim: int, seed: int) -> np.ndarray:
    key = f"{seed}|{position}|{token}|{dim}".encode("utf-8")
    digest = hashlib.sha256(key).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    vec = rng.standard_normal(dim)
    return (vec / np.linalg.norm(vec)).astype(np.float32)


class PseudoEmbedder:
    """Deterministic stand-in for a pretrained text encoder.

    Each token row is a unit-norm vector keyed only by (token text, position,
    seed); positions past the last token are zero rows.  Output therefore
    depends only on (prompt text, L, D, seed), never on call order.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)

    @property
    def provider_id(self) -> str:
        return f"pseudo(seed={self.seed})"

    def embed(self, prompt: str, length: int, dim: int) -> np.ndarray:
        tokens = _tokenize(prompt)[:length]
        out = np.zeros((length, dim), dtype=np.float32)
        for pos, tok in enumerate(tokens):
            out[pos] = _token_vector(tok, pos, dim, self.seed)
        return out


class MissingTableEntry(KeyError):
    pass


class TableEmbedder:
    """Embeddings looked up verbatim from a loaded table."""

    def __init__(self, table: dict):
        self.table = dict(table)

    @property
    def provider_id(self) -> str:
        return f"table({len(self.table)} entries)"

    def embed(self, prompt: str, length: int, dim: int) -> np.ndarray:
        if prompt not in self.table:
            raise MissingTableEntry(f"prompt {prompt!r} not present in embedding table")
        arr = self.table[prompt]
        if arr.shape != (length, dim):
            raise ValueError(f"table entry for {prompt!r} is {arr.shape}, requested ({length}, {dim})")
        return arr


def embed_text(prompt: str, length: int, dim: int, provider) -> TextFeatures:
    if length < 1 or dim < 1:
        raise ValueError(f"token count and channels must be >= 1, got L={length}, D={dim}")
    rows = provider.embed(prompt, length, dim)
    return TextFeatures(tokens=Tensor(rows), prompt=prompt, provider=provider.provider_id)


class TableParseError(ValueError):
    pass


def save_embedding_table(path, table: dict) -> None:
    """One line per entry: prompt<TAB>L<TAB>D<TAB>floats (space separated)."""
    with open(path, "w", encoding="utf-8") as fh:
        for prompt, arr in table.items():
            if "\t" in prompt or "\n" in prompt:
                raise ValueError(f"prompt {prompt!r} may not contain tabs or newlines")
            arr = np.asarray(arr, dtype=np.float32)
            if arr.ndim != 2:
                raise ValueError(f"table entry for {prompt!r} must be LxD, got shape {arr.shape}")
            values = " ".join(repr(float(v)) for v in arr.reshape(-1))
            fh.write(f"{prompt}\t{arr.shape[0]}\t{arr.shape[1]}\t{values}\n")


def load_embedding_table(path) -> dict:
    table: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise TableParseError(f"{path}:{lineno}: expected 4 tab fields, found {len(parts)}")
            prompt, l_text, d_text, payload = parts
            try:
                length, dim = int(l_text), int(d_text)
            except ValueError:
                raise TableParseError(f"{path}:{lineno}: non-integer dims {l_text!r} x {d_text!r}") from None
            fields = payload.split()
            if len(fields) != length * dim:
                raise TableParseError(
                    f"{path}:{lineno}: expected {length * dim} floats, found {len(fields)} (offset {len(prompt) + len(l_text) + len(d_text) + 3})"
                )
            try:
                flat = np.array([float(v) for v in fields], dtype=np.float32)
            except ValueError:
                raise TableParseError(f"{path}:{lineno}: malformed float payload") from None
            table[prompt] = flat.reshape(length, dim)
    return table
