"""Cross-attention relation matcher fusing image tokens with text tokens.

Text features are projected to the image width, optionally concatenated
with the image tokens, and attended by the image queries; the attended
output is re-projected, residually added to the image features and layer
normalized, producing the P x C relation matrix consumed by the decoders.

Two operating modes exist: the default multi-head mode with learned
query/key/value/output projections, and a projection-free literal mode
(single head, scale 1/sqrt(C)) used to pin the algebra in unit tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

VARIANTS = ("none", "T", "E_dot_T", "E_T")

_NORM_EPS = 1e-6


@dataclass
class MatcherConfig:
    channels: int
    text_dim: int
    heads: int = 4
    literal: bool = False
    literal_scale: bool = False

    def __post_init__(self):
        if self.channels % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide channels ({self.channels})")


@dataclass
class RelationMatrix:
    """P x C relation output; variant 'none' carries an all-zero tensor."""

    tensor: Tensor
    variant: str

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant == "none" and np.any(self.tensor.data):
            raise ValueError("variant 'none' requires an all-zero relation matrix")


class RelationMatcher:
    def __init__(self, config: MatcherConfig, rng: np.random.Generator):
        self.config = config
        c, d = config.channels, config.text_dim
        scale = 0.02
        self.phi_t_w = Tensor((rng.standard_normal((d, c)) * scale).astype(np.float32))
        self.phi_t_b = Tensor(np.zeros(c, dtype=np.float32))
        if not config.literal:
            for name in ("q", "k", "v", "o"):
                setattr(self, f"{name}_w", Tensor((rng.standard_normal((c, c)) * scale).astype(np.float32)))
                setattr(self, f"{name}_b", Tensor(np.zeros(c, dtype=np.float32)))
        self.phi_r_w = Tensor((rng.standard_normal((c, c)) * scale).astype(np.float32))
        self.phi_r_b = Tensor(np.zeros(c, dtype=np.float32))
        self.norm_g = Tensor(np.ones(c, dtype=np.float32))
        self.norm_b = Tensor(np.zeros(c, dtype=np.float32))

    def params(self) -> dict:
        out = {
            "phi_t.w": self.phi_t_w,
            "phi_t.b": self.phi_t_b,
            "phi_r.w": self.phi_r_w,
            "phi_r.b": self.phi_r_b,
            "norm.g": self.norm_g,
            "norm.b": self.norm_b,
        }
        if not self.config.literal:
            for name in ("q", "k", "v", "o"):
                out[f"attn.{name}w"] = getattr(self, f"{name}_w")
                out[f"attn.{name}b"] = getattr(self, f"{name}_b")
        return out

    # -- pieces ------------------------------------------------------------------

    def project_text(self, text_tokens: Tensor) -> Tensor:
        if text_tokens.data.shape[-1] != self.config.text_dim:
            raise T.ShapeError(
                f"text width {text_tokens.data.shape[-1]} does not match projection input {self.config.text_dim}"
            )
        return T.linear(text_tokens, self.phi_t_w, self.phi_t_b)

    def build_key_value(self, variant: str, image_tokens: Tensor, text_proj: Tensor) -> Tensor:
        """Assemble the attention key/value rows for the requested variant.

        T: the projected text alone.  E_T: image rows then text rows.
        E_dot_T: image rows then, per image token, the cosine-softmax mixture
        of text rows (a typed reading of fusing the features' similarity).
        """
        if variant == "T":
            return text_proj
        if variant == "E_T":
            return T.concat([image_tokens, text_proj], axis=0)
        if variant == "E_dot_T":
            dots = T.matmul(image_tokens, T.permute(text_proj, (1, 0)))
            e_norm = T.power(T.add(T.sum_axis(T.mul(image_tokens, image_tokens), 1, keepdims=True), _NORM_EPS), 0.5)
            t_norm = T.power(T.add(T.sum_axis(T.mul(text_proj, text_proj), 1, keepdims=True), _NORM_EPS), 0.5)
            cosine = T.mul(T.mul(dots, T.power(e_norm, -1.0)), T.power(T.permute(t_norm, (1, 0)), -1.0))
            weights = T.softmax_lastdim(cosine)
            mixed = T.matmul(weights, text_proj)
            return T.concat([image_tokens, mixed], axis=0)
        raise ValueError(f"unknown key/value variant {variant!r}; expected one of {VARIANTS[1:]}")

    def _attend(self, image_tokens: Tensor, kv: Tensor) -> Tensor:
        cfg = self.config
        c = cfg.channels
        if cfg.literal:
            att = T.softmax_lastdim(T.mul(T.matmul(image_tokens, T.permute(kv, (1, 0))), 1.0 / math.sqrt(c)))
            return T.matmul(att, kv)
        q = T.linear(image_tokens, self.q_w, self.q_b)
        k = T.linear(kv, self.k_w, self.k_b)
        v = T.linear(kv, self.v_w, self.v_b)
        dh = c // cfg.heads
        scale = 1.0 / math.sqrt(c if cfg.literal_scale else dh)
        heads = []
        for h in range(cfg.heads):
            qi = T.narrow(q, 1, h * dh, dh)
            ki = T.narrow(k, 1, h * dh, dh)
            vi = T.narrow(v, 1, h * dh, dh)
            att = T.softmax_lastdim(T.mul(T.matmul(qi, T.permute(ki, (1, 0))), scale))
            heads.append(T.matmul(att, vi))
        merged = heads[0] if len(heads) == 1 else T.concat(heads, axis=1)
        return T.linear(merged, self.o_w, self.o_b)

    # -- full forward ----------------------------------------------------------------

    def forward(self, image_tokens: Tensor, text_tokens: Tensor, variant: str) -> RelationMatrix:
        if variant == "none":
            zero = Tensor(np.zeros_like(image_tokens.data))
            return RelationMatrix(tensor=zero, variant="none")
        text_proj = self.project_text(text_tokens)
        kv = self.build_key_value(variant, image_tokens, text_proj)
        attended = self._attend(image_tokens, kv)
        residual = T.add(T.linear(attended, self.phi_r_w, self.phi_r_b), image_tokens)
        out = T.layer_norm(residual, self.norm_g, self.norm_b)
        return RelationMatrix(tensor=out, variant=variant)


def bypass_tokens(image_tokens: Tensor, text_proj: Tensor, mix_w: Tensor, mix_b: Tensor) -> Tensor:
    """Matcher-free fusion: token-mixing projection of [image; text] back to P rows."""
    stacked = T.concat([image_tokens, text_proj], axis=0)
    return T.add(T.matmul(mix_w, stacked), mix_b)
