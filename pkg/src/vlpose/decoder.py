"""Pose decoder family: deconvolution blocks, 1x1 predictor and wirings.

Every decoder is two upsampling blocks (transposed conv 4/2/1, batch norm,
relu) followed by a pointwise predictor, so a C x (H/16) x (W/16) grid maps
to N_k x (H/4) x (W/4) heatmaps.  An optional auxiliary branch mirrors the
main one; the named wirings in ``data/decoder_wirings.txt`` describe where
the two branches exchange information.  With a zero relation grid and
all-zero auxiliary parameters every wiring collapses to the baseline
decoder, which is the property that makes tuning reversible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "DecoderWiring",
    "DecoderBlock",
    "Heatmaps",
    "PoseDecoder",
    "wiring_from_name",
    "wiring_names",
    "tokens_to_grid",
    "grid_to_tokens",
]


@dataclass(frozen=True)
class DecoderWiring:
    name: str
    first: str  # "-", "main" or "aux"
    middle: str  # "-", "main" or "aux"
    final: bool
    anchor: str

    @property
    def has_aux(self) -> bool:
        return self.final or self.middle != "-"


def _load_wirings() -> dict:
    text = resources.files("vlpose").joinpath("data/decoder_wirings.txt").read_text(encoding="utf-8")
    table: dict = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        name, first, middle, final, anchor = (field.strip() for field in line.split("|"))
        table[name] = DecoderWiring(name=name, first=first, middle=middle, final=final == "yes", anchor=anchor)
    return table


WIRINGS = _load_wirings()


def wiring_names() -> list:
    return list(WIRINGS)


def wiring_from_name(name: str) -> DecoderWiring:
    try:
        return WIRINGS[name]
    except KeyError:
        valid = ", ".join(WIRINGS)
        raise ValueError(f"unknown decoder wiring {name!r}; valid names: {valid}") from None


@dataclass
class Heatmaps:
    """One localization map per keypoint at quarter input resolution."""

    maps: Tensor

    def __post_init__(self):
        if self.maps.data.ndim != 3:
            raise ValueError(f"heatmaps must be N_k x h x w, got shape {self.maps.data.shape}")

    @property
    def n_keypoints(self) -> int:
        return self.maps.data.shape[0]

    @property
    def array(self) -> np.ndarray:
        return self.maps.data


def tokens_to_grid(tokens: Tensor, grid_h: int, grid_w: int) -> Tensor:
    """Row-major reshape of P x C tokens into a C x gh x gw grid."""
    p, c = tokens.data.shape
    if p != grid_h * grid_w:
        raise T.ShapeError(f"{p} tokens do not tile a {grid_h}x{grid_w} grid")
    return T.reshape(T.permute(tokens, (1, 0)), (c, grid_h, grid_w))


def grid_to_tokens(grid: Tensor) -> Tensor:
    c, gh, gw = grid.data.shape
    return T.permute(T.reshape(grid, (c, gh * gw)), (1, 0))


class DecoderBlock:
    """Deconv (4/2/1, no bias) + batch norm + relu; doubles spatial dims."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        std = math.sqrt(2.0 / (c_in * 16))
        self.deconv_w = Tensor((rng.standard_normal((c_in, c_out, 4, 4)) * std).astype(np.float32))
        self.bn_g = Tensor(np.ones(c_out, dtype=np.float32))
        self.bn_b = Tensor(np.zeros(c_out, dtype=np.float32))
        self.bn_mean = np.zeros(c_out, dtype=np.float32)
        self.bn_var = np.ones(c_out, dtype=np.float32)
        self.stats_frozen = False  # frozen branches keep eval statistics while training

    def forward(self, x: Tensor, training: bool) -> Tensor:
        y = T.deconv2d(x, self.deconv_w)
        y = T.batch_norm2d(y, self.bn_g, self.bn_b, self.bn_mean, self.bn_var,
                           training=training and not self.stats_frozen)
        return T.relu(y)

    def params(self) -> dict:
        return {"deconv.w": self.deconv_w, "bn.g": self.bn_g, "bn.b": self.bn_b}

    def buffers(self) -> dict:
        return {"bn.mean": self.bn_mean, "bn.var": self.bn_var}


class PoseDecoder:
    """Shared main branch plus optional auxiliary branch and predictor."""

    def __init__(self, channels: int, n_keypoints: int, rng: np.random.Generator, with_aux: bool = True):
        if channels % 4:
            raise ValueError(f"decoder channel plan needs channels divisible by 4, got {channels}")
        self.channels = channels
        self.n_keypoints = n_keypoints
        c1, c2 = channels // 2, channels // 4
        self.main1 = DecoderBlock(channels, c1, rng)
        self.main2 = DecoderBlock(c1, c2, rng)
        self.aux1 = DecoderBlock(channels, c1, rng) if with_aux else None
        self.aux2 = DecoderBlock(c1, c2, rng) if with_aux else None
        self.pred_w = Tensor((rng.standard_normal((n_keypoints, c2)) * 0.01).astype(np.float32))
        self.pred_b = Tensor(np.zeros(n_keypoints, dtype=np.float32))

    @property
    def has_aux(self) -> bool:
        return self.aux1 is not None

    def params(self) -> dict:
        out = {}
        for prefix, block in (("main1", self.main1), ("main2", self.main2), ("aux1", self.aux1), ("aux2", self.aux2)):
            if block is None:
                continue
            for key, value in block.params().items():
                out[f"{prefix}.{key}"] = value
        out["pred.w"] = self.pred_w
        out["pred.b"] = self.pred_b
        return out

    def buffers(self) -> dict:
        out = {}
        for prefix, block in (("main1", self.main1), ("main2", self.main2), ("aux1", self.aux1), ("aux2", self.aux2)):
            if block is None:
                continue
            for key, value in block.buffers().items():
                out[f"{prefix}.{key}"] = value
        return out

    def predictor(self, x: Tensor) -> Heatmaps:
        return Heatmaps(T.conv2d_1x1(x, self.pred_w, self.pred_b))

    # -- wiring engine -----------------------------------------------------------

    def forward(
        self,
        image_tokens: Tensor,
        relation_tokens: Tensor | None,
        wiring: DecoderWiring,
        grid_hw: tuple,
        training: bool = False,
    ) -> Heatmaps:
        gh, gw = grid_hw
        e = tokens_to_grid(image_tokens, gh, gw)
        needs_r = wiring.first != "-" or wiring.has_aux
        r = None
        if needs_r:
            if relation_tokens is None:
                relation_tokens = Tensor(np.zeros_like(image_tokens.data))
            r = tokens_to_grid(relation_tokens, gh, gw)
        if wiring.has_aux and not self.has_aux:
            raise ValueError(f"wiring {wiring.name!r} needs an auxiliary branch, but none was built")

        main_in = T.add(e, r) if wiring.first == "main" else e
        m1o = self.main1.forward(main_in, training)
        a1o = None
        if wiring.has_aux:
            aux_in = T.add(r, e) if wiring.first == "aux" else r
            a1o = self.aux1.forward(aux_in, training)
        main2_in = T.add(m1o, a1o) if wiring.middle == "main" else m1o
        m2o = self.main2.forward(main2_in, training)
        if wiring.final:
            aux2_in = T.add(a1o, m1o) if wiring.middle == "aux" else a1o
            a2o = self.aux2.forward(aux2_in, training)
            return self.predictor(T.add(m2o, a2o))
        return self.predictor(m2o)

    # -- canonical decoders --------------------------------------------------------

    def decode_baseline(self, image_tokens: Tensor, grid_hw: tuple, training: bool = False) -> Heatmaps:
        return self.forward(image_tokens, None, WIRINGS["Baseline"], grid_hw, training)

    def decode_injector(self, image_tokens, relation_tokens, grid_hw, training: bool = False) -> Heatmaps:
        return self.forward(image_tokens, relation_tokens, WIRINGS["First"], grid_hw, training)

    def decode_extractor_injector(self, image_tokens, relation_tokens, grid_hw, training: bool = False) -> Heatmaps:
        return self.forward(image_tokens, relation_tokens, WIRINGS["First-Final"], grid_hw, training)

    def decode_dual(self, image_tokens, relation_tokens, grid_hw, training: bool = False) -> Heatmaps:
        return self.forward(image_tokens, relation_tokens, WIRINGS["First-AMiddle-Final"], grid_hw, training)

    # -- reversibility helper ---------------------------------------------------------

    def zero_aux(self) -> None:
        """Zero every auxiliary parameter, collapsing aux contributions."""
        for block in (self.aux1, self.aux2):
            if block is None:
                continue
            block.deconv_w.data[...] = 0.0
            block.bn_g.data[...] = 0.0
            block.bn_b.data[...] = 0.0
