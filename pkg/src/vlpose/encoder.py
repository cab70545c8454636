"""Patch-embedding transformer encoder with learnable visual prompt tokens.

The encoder turns a 3xHxW crop into P = (H/d)(W/d) tokens of width C and
runs pre-norm transformer layers over them.  Prompt tokens, when enabled,
are prepended (shallow: once at the input; deep: refreshed at every layer)
and stripped before returning, so the output is always P x C and a forward
with prompts disabled is bit-identical to the plain backbone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class EncoderConfig:
    height: int = 256
    width: int = 192
    patch: int = 16
    channels: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    n_prompt_tokens: int = 0
    prompt_mode: str = "shallow"
    drop_path_rate: float = 0.1

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(f"input {self.height}x{self.width} not divisible by patch size {self.patch}")
        if self.channels % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide channels ({self.channels})")
        if self.n_prompt_tokens < 0:
            raise ValueError("n_prompt_tokens must be >= 0")
        if self.prompt_mode not in ("shallow", "deep"):
            raise ValueError(f"unknown prompt_mode {self.prompt_mode!r}")

    @property
    def grid_h(self) -> int:
        return self.height // self.patch

    @property
    def grid_w(self) -> int:
        return self.width // self.patch

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w


def _normal(rng: np.random.Generator, shape, scale: float = 0.02) -> Tensor:
    return Tensor((rng.standard_normal(shape) * scale).astype(np.float32))


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32))


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32))


class VisionEncoder:
    """Toy-scale image backbone producing P x C features."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        c = config.channels
        patch_dim = 3 * config.patch * config.patch
        self.patch_w = _normal(rng, (patch_dim, c), scale=1.0 / math.sqrt(patch_dim))
        self.patch_b = _zeros((c,))
        # zero-init so a depth-0 stack is the identity over patch tokens
        self.pos_emb = _zeros((config.n_patches, c))
        self.layers = []
        for _ in range(config.depth):
            self.layers.append(
                {
                    "ln1.g": _ones((c,)),
                    "ln1.b": _zeros((c,)),
                    "attn.qw": _normal(rng, (c, c)),
                    "attn.qb": _zeros((c,)),
                    "attn.kw": _normal(rng, (c, c)),
                    "attn.kb": _zeros((c,)),
                    "attn.vw": _normal(rng, (c, c)),
                    "attn.vb": _zeros((c,)),
                    "attn.ow": _normal(rng, (c, c)),
                    "attn.ob": _zeros((c,)),
                    "ln2.g": _ones((c,)),
                    "ln2.b": _zeros((c,)),
                    "mlp.w1": _normal(rng, (c, c * config.mlp_ratio)),
                    "mlp.b1": _zeros((c * config.mlp_ratio,)),
                    "mlp.w2": _normal(rng, (c * config.mlp_ratio, c)),
                    "mlp.b2": _zeros((c,)),
                }
            )
        self.prompts: list[Tensor] = []
        if config.n_prompt_tokens > 0:
            n_stacks = config.depth if config.prompt_mode == "deep" else 1
            self.prompts = [_normal(rng, (config.n_prompt_tokens, c)) for _ in range(n_stacks)]

    # -- parameters -----------------------------------------------------------

    def params(self) -> dict:
        out = {"patch.w": self.patch_w, "patch.b": self.patch_b, "pos.emb": self.pos_emb}
        for i, layer in enumerate(self.layers):
            for key, value in layer.items():
                out[f"layer{i}.{key}"] = value
        for i, p in enumerate(self.prompts):
            out[f"prompt.{i}"] = p
        return out

    def backbone_param_names(self) -> list:
        return [n for n in self.params() if not n.startswith("prompt.")]

    # -- forward ---------------------------------------------------------------

    def patch_embed(self, image: Tensor) -> Tensor:
        cfg = self.config
        if image.data.shape != (3, cfg.height, cfg.width):
            raise T.ShapeError(f"expected image 3x{cfg.height}x{cfg.width}, got {image.data.shape}")
        x = T.reshape(image, (3, cfg.grid_h, cfg.patch, cfg.grid_w, cfg.patch))
        x = T.permute(x, (1, 3, 0, 2, 4))
        x = T.reshape(x, (cfg.n_patches, 3 * cfg.patch * cfg.patch))
        return T.linear(x, self.patch_w, self.patch_b)

    def _attention(self, x: Tensor, layer: dict) -> Tensor:
        cfg = self.config
        dh = cfg.channels // cfg.heads
        scale = 1.0 / math.sqrt(dh)
        q = T.linear(x, layer["attn.qw"], layer["attn.qb"])
        k = T.linear(x, layer["attn.kw"], layer["attn.kb"])
        v = T.linear(x, layer["attn.vw"], layer["attn.vb"])
        heads = []
        for h in range(cfg.heads):
            qi = T.narrow(q, 1, h * dh, dh)
            ki = T.narrow(k, 1, h * dh, dh)
            vi = T.narrow(v, 1, h * dh, dh)
            att = T.softmax_lastdim(T.mul(T.matmul(qi, T.permute(ki, (1, 0))), scale))
            heads.append(T.matmul(att, vi))
        merged = heads[0] if len(heads) == 1 else T.concat(heads, axis=1)
        return T.linear(merged, layer["attn.ow"], layer["attn.ob"])

    def _mlp(self, x: Tensor, layer: dict) -> Tensor:
        h = T.relu(T.linear(x, layer["mlp.w1"], layer["mlp.b1"]))
        return T.linear(h, layer["mlp.w2"], layer["mlp.b2"])

    def forward(
        self,
        tokens: Tensor,
        use_prompts: bool = True,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Run the transformer stack; returns P x C features.

        With prompts disabled (or none configured) the prompt parameters are
        never touched, which is what makes prompt tuning reversible.
        """
        cfg = self.config
        n_prompt = cfg.n_prompt_tokens if (use_prompts and self.prompts) else 0
        x = T.add(tokens, self.pos_emb)
        if n_prompt:
            x = T.concat([self.prompts[0], x], axis=0)
        for i, layer in enumerate(self.layers):
            if n_prompt and cfg.prompt_mode == "deep" and i > 0:
                x = T.concat([self.prompts[i], T.narrow(x, 0, n_prompt, cfg.n_patches)], axis=0)
            attn = self._attention(T.layer_norm(x, layer["ln1.g"], layer["ln1.b"]), layer)
            x = T.add(x, T.drop_path(attn, cfg.drop_path_rate, training, rng))
            mlp = self._mlp(T.layer_norm(x, layer["ln2.g"], layer["ln2.b"]), layer)
            x = T.add(x, T.drop_path(mlp, cfg.drop_path_rate, training, rng))
        if n_prompt:
            x = T.narrow(x, 0, n_prompt, cfg.n_patches)
        return x

    def forward_image(
        self,
        image: Tensor,
        use_prompts: bool = True,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        return self.forward(self.patch_embed(image), use_prompts, training, rng)
