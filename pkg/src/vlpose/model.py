"""Full pose model: encoder, optional relation matcher, decoder wiring.

Also home of the whole-model contracts: named parameter sets, finetune
masks, layer-depth assignment for the layer-wise schedule, checkpointing
and the prompt-stripping reversal that restores the plain backbone.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, replace

import numpy as np

from . import codec
from .decoder import Heatmaps, PoseDecoder, wiring_from_name
from .encoder import EncoderConfig, VisionEncoder
from .evaluate import Prediction
from .matcher import MatcherConfig, RelationMatcher, bypass_tokens
from .serialize import load_checkpoint, save_checkpoint
from .tensor import ParamSet, Tensor, count_params, linear
from .text import FIXED_PROMPT, PromptRegistry, PseudoEmbedder, TableEmbedder, embed_text

__all__ = ["ModelConfig", "PoseModel", "FINETUNE_MODES"]

FINETUNE_MODES = ("full", "visual_prompt", "last_layer")
MATCHER_CHOICES = ("none", "T", "E_dot_T", "E_T", "bypass")
PROMPT_POLICIES = ("style", "fixed", "random")


@dataclass
class ModelConfig:
    encoder: EncoderConfig
    n_keypoints: int = codec.N_KEYPOINTS
    decoder: str = "Baseline"
    matcher_variant: str = "none"
    matcher_heads: int = 4
    matcher_literal: bool = False
    text_tokens: int = 8
    text_dim: int = 64
    prompt_policy: str = "style"
    embed_seed: int = 0
    init_seed: int = 0

    def __post_init__(self):
        wiring_from_name(self.decoder)
        if self.matcher_variant not in MATCHER_CHOICES:
            raise ValueError(f"unknown matcher variant {self.matcher_variant!r}; choose from {MATCHER_CHOICES}")
        if self.prompt_policy not in PROMPT_POLICIES:
            raise ValueError(f"unknown prompt policy {self.prompt_policy!r}; choose from {PROMPT_POLICIES}")

    def to_meta(self) -> dict:
        enc = self.encoder
        return {
            "enc.height": enc.height, "enc.width": enc.width, "enc.patch": enc.patch,
            "enc.channels": enc.channels, "enc.depth": enc.depth, "enc.heads": enc.heads,
            "enc.mlp_ratio": enc.mlp_ratio, "enc.prompt_tokens": enc.n_prompt_tokens,
            "enc.prompt_mode": enc.prompt_mode, "enc.drop_path": enc.drop_path_rate,
            "n_keypoints": self.n_keypoints, "decoder": self.decoder,
            "matcher_variant": self.matcher_variant, "matcher_heads": self.matcher_heads,
            "matcher_literal": int(self.matcher_literal), "text_tokens": self.text_tokens,
            "text_dim": self.text_dim, "prompt_policy": self.prompt_policy,
            "embed_seed": self.embed_seed, "init_seed": self.init_seed,
        }

    @staticmethod
    def from_meta(meta: dict) -> "ModelConfig":
        enc = EncoderConfig(
            height=int(meta["enc.height"]), width=int(meta["enc.width"]), patch=int(meta["enc.patch"]),
            channels=int(meta["enc.channels"]), depth=int(meta["enc.depth"]), heads=int(meta["enc.heads"]),
            mlp_ratio=int(meta["enc.mlp_ratio"]), n_prompt_tokens=int(meta["enc.prompt_tokens"]),
            prompt_mode=meta["enc.prompt_mode"], drop_path_rate=float(meta["enc.drop_path"]),
        )
        return ModelConfig(
            encoder=enc, n_keypoints=int(meta["n_keypoints"]), decoder=meta["decoder"],
            matcher_variant=meta["matcher_variant"], matcher_heads=int(meta["matcher_heads"]),
            matcher_literal=bool(int(meta["matcher_literal"])), text_tokens=int(meta["text_tokens"]),
            text_dim=int(meta["text_dim"]), prompt_policy=meta["prompt_policy"],
            embed_seed=int(meta["embed_seed"]), init_seed=int(meta["init_seed"]),
        )


def _random_prompt(rng: np.random.Generator, n_words: int) -> str:
    letters = np.array(list(string.ascii_lowercase))
    words = ["".join(rng.choice(letters, size=5)) for _ in range(n_words)]
    return " ".join(words)


class PoseModel:
    def __init__(self, config: ModelConfig, provider=None):
        self.config = config
        rng = np.random.default_rng(config.init_seed)
        self.encoder = VisionEncoder(config.encoder, rng)
        self.wiring = wiring_from_name(config.decoder)
        self.decoder = PoseDecoder(config.encoder.channels, config.n_keypoints, rng, with_aux=self.wiring.has_aux)
        self.registry = PromptRegistry()
        self.matcher = None
        self.bypass = None
        c = config.encoder.channels
        if config.matcher_variant in ("T", "E_dot_T", "E_T"):
            self.matcher = RelationMatcher(
                MatcherConfig(channels=c, text_dim=config.text_dim, heads=config.matcher_heads,
                              literal=config.matcher_literal),
                rng,
            )
        elif config.matcher_variant == "bypass":
            p, l = config.encoder.n_patches, config.text_tokens
            mix = np.concatenate([np.eye(p), np.zeros((p, l))], axis=1)
            mix += rng.standard_normal(mix.shape) * 0.01
            self.bypass = {
                "phi.w": Tensor((rng.standard_normal((config.text_dim, c)) * 0.02).astype(np.float32)),
                "phi.b": Tensor(np.zeros(c, dtype=np.float32)),
                "mix.w": Tensor(mix.astype(np.float32)),
                "mix.b": Tensor(np.zeros(c, dtype=np.float32)),
            }
        self.random_prompt = _random_prompt(rng, config.text_tokens)
        self.provider = provider if provider is not None else PseudoEmbedder(config.embed_seed)
        if isinstance(self.provider, TableEmbedder):
            want = (config.text_tokens, config.text_dim)
            for prompt, arr in self.provider.table.items():
                if arr.shape != want:
                    raise ValueError(
                        f"embedding table entry {prompt!r} has shape {arr.shape}, model expects {want}"
                    )
        self._text_cache: dict = {}
        self.finetune_mode = "full"

    # -- text ----------------------------------------------------------------

    def prompt_text_for(self, category_id: int) -> str:
        policy = self.config.prompt_policy
        if policy == "fixed":
            return FIXED_PROMPT
        if policy == "random":
            return self.random_prompt
        return self.registry.prompt_for_category(category_id)

    def text_features(self, category_id: int):
        prompt = self.prompt_text_for(category_id)
        if prompt not in self._text_cache:
            self._text_cache[prompt] = embed_text(
                prompt, self.config.text_tokens, self.config.text_dim, self.provider
            )
        return self._text_cache[prompt]

    # -- forward --------------------------------------------------------------

    @property
    def grid_hw(self) -> tuple:
        enc = self.config.encoder
        return (enc.height // enc.patch, enc.width // enc.patch)

    def forward(self, image: Tensor, category_id: int, training: bool = False,
                rng: np.random.Generator | None = None, use_prompts: bool = True) -> Heatmaps:
        features = self.encoder.forward_image(image, use_prompts=use_prompts, training=training, rng=rng)
        variant = self.config.matcher_variant
        relation = None
        if variant in ("T", "E_dot_T", "E_T"):
            text = self.text_features(category_id)
            relation = self.matcher.forward(features, text.tokens, variant).tensor
        elif variant == "bypass":
            text = self.text_features(category_id)
            text_proj = linear(text.tokens, self.bypass["phi.w"], self.bypass["phi.b"])
            features = bypass_tokens(features, text_proj, self.bypass["mix.w"], self.bypass["mix.b"])
        return self.decoder.forward(features, relation, self.wiring, self.grid_hw, training)

    def predict_instance(self, image: np.ndarray, instance: codec.PersonInstance) -> np.ndarray:
        """Keypoints (x, y, score) in source coordinates for one person box."""
        enc = self.config.encoder
        inputs, transform = codec.affine_crop(image, instance.bbox, out_hw=(enc.height, enc.width))
        heatmaps = self.forward(inputs, instance.category_id, training=False)
        return codec.heatmaps_to_keypoints(heatmaps, transform)

    def predict_dataset(self, images: dict, instances, threads: int = 1) -> list:
        def run(instance):
            kp = self.predict_instance(images[instance.image_id], instance)
            return Prediction(
                image_id=instance.image_id,
                category_id=instance.category_id,
                keypoints=kp,
                score=float(np.mean(kp[:, 2])),
            )

        if threads > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=threads) as pool:
                return list(pool.map(run, instances))
        return [run(inst) for inst in instances]

    # -- parameters --------------------------------------------------------------

    def named_params(self) -> dict:
        out = {}
        for name, p in self.encoder.params().items():
            out[f"encoder.{name}"] = p
        if self.matcher is not None:
            for name, p in self.matcher.params().items():
                out[f"matcher.{name}"] = p
        if self.bypass is not None:
            for name, p in self.bypass.items():
                out[f"bypass.{name}"] = p
        for name, p in self.decoder.params().items():
            out[f"decoder.{name}"] = p
        return out

    def buffers(self) -> dict:
        return {f"decoder.{name}": arr for name, arr in self.decoder.buffers().items()}

    def param_set(self) -> ParamSet:
        params = self.named_params()
        mask = self.trainable_mask(self.finetune_mode)
        ps = ParamSet(params=params, trainable={n: mask[n] for n in params})
        return ps

    def trainable_mask(self, mode: str) -> dict:
        if mode not in FINETUNE_MODES:
            raise ValueError(f"unknown finetune mode {mode!r}; choose from {FINETUNE_MODES}")
        names = self.named_params().keys()
        if mode == "full":
            return {n: True for n in names}
        if mode == "visual_prompt":
            prefixes = ("encoder.prompt.", "matcher.", "bypass.", "decoder.aux1.", "decoder.aux2.")
        else:  # last_layer: final encoder layer plus the whole head
            prefixes = (f"encoder.layer{self.config.encoder.depth - 1}.", "decoder.")
        return {n: n.startswith(prefixes) for n in names}

    def set_finetune_mode(self, mode: str) -> None:
        mask = self.trainable_mask(mode)
        self.finetune_mode = mode
        for name, p in self.named_params().items():
            p.requires_grad = mask[name]
        for prefix, block in (("decoder.main1", self.decoder.main1), ("decoder.main2", self.decoder.main2),
                              ("decoder.aux1", self.decoder.aux1), ("decoder.aux2", self.decoder.aux2)):
            if block is not None:
                block.stats_frozen = not mask[f"{prefix}.bn.g"]

    def layer_depths(self) -> dict:
        depth = self.config.encoder.depth
        out = {}
        for name in self.named_params():
            if name.startswith("encoder.layer"):
                layer = int(name.split(".")[1][len("layer"):])
                out[name] = depth - layer
            elif name.startswith(("encoder.patch.", "encoder.pos.")):
                out[name] = depth + 1
            else:
                out[name] = 0
        return out

    def count_params(self, mask_filter: str = "all") -> dict:
        return count_params(self.param_set(), mask_filter)

    # -- persistence --------------------------------------------------------------

    def save(self, directory) -> None:
        tensors = {name: p.data for name, p in self.named_params().items()}
        for name, arr in self.buffers().items():
            tensors[f"buffer.{name}"] = arr
        save_checkpoint(directory, tensors, meta=self.config.to_meta())

    @classmethod
    def load(cls, directory, provider=None) -> "PoseModel":
        tensors, meta = load_checkpoint(directory)
        model = cls(ModelConfig.from_meta(meta), provider=provider)
        params = model.named_params()
        buffers = model.buffers()
        for name, arr in tensors.items():
            if name.startswith("buffer."):
                target = buffers[name[len("buffer."):]]
                target[...] = arr
            else:
                p = params[name]
                if p.data.shape != arr.shape:
                    raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, model expects {p.data.shape}")
                p.data = arr.astype(p.data.dtype)
        return model

    def zero_new_branch_scales(self) -> None:
        """Zero the output scales of the added branches.

        Called when a pretrained baseline is adopted for prompt tuning: the
        matcher's norm affine and the batch-norm affine of every auxiliary
        block that feeds the main stream start at zero, so the tuned model
        initially reproduces the adopted behavior (prompt tokens aside) and
        learns to deviate from it.
        """
        if self.matcher is not None:
            self.matcher.norm_g.data[...] = 0.0
            self.matcher.norm_b.data[...] = 0.0
        if self.decoder.has_aux:
            crossing = []
            if self.wiring.middle == "main":
                crossing.append(self.decoder.aux1)
            if self.wiring.final:
                crossing.append(self.decoder.aux2)
            for block in crossing:
                block.bn_g.data[...] = 0.0
                block.bn_b.data[...] = 0.0

    # -- reversal -----------------------------------------------------------------

    def strip_prompts(self) -> "PoseModel":
        """Reverted model: no prompts, no matcher, baseline decoder, shared backbone."""
        cfg = self.config
        stripped = ModelConfig(
            encoder=replace(cfg.encoder, n_prompt_tokens=0),
            n_keypoints=cfg.n_keypoints,
            decoder="Baseline",
            matcher_variant="none",
            matcher_heads=cfg.matcher_heads,
            matcher_literal=cfg.matcher_literal,
            text_tokens=cfg.text_tokens,
            text_dim=cfg.text_dim,
            prompt_policy=cfg.prompt_policy,
            embed_seed=cfg.embed_seed,
            init_seed=cfg.init_seed,
        )
        out = PoseModel(stripped, provider=self.provider)
        ours = self.named_params()
        for name, p in out.named_params().items():
            p.data = ours[name].data.copy()
        our_buffers = self.buffers()
        for name, arr in out.buffers().items():
            arr[...] = our_buffers[name]
        return out
