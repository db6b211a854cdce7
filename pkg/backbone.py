"""Frozen toy vision transformer with token prompts (VPT, VPnT, deep) and two heads."""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange
from einops.layers.torch import Rearrange

import storage
from diversity import MixedTargets, mixed_cross_entropy
from errors import ConfigError, IntegrityError, NumericError, ShapeError
from schemas import BackboneSpec, HeadKind, PositionMode, TokenPromptConfig, TokenPromptMode

logger = logging.getLogger(__name__)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden_dim: int):
        super().__init__()
        self.layer_norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.gelu = nn.GELU()
        self.fc2 = nn.Linear(hidden_dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.gelu(self.fc1(self.layer_norm(x))))


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError("embed_dim must be divisible by heads", {"embed_dim": dim, "heads": heads})
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.norm = nn.LayerNorm(dim)
        self.to_qkv = nn.Linear(dim, dim * 3, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.norm(x)
        q, k, v = map(
            lambda t: rearrange(t, "b n (h d) -> b h n d", h=self.heads),
            self.to_qkv(x).chunk(3, dim=-1),
        )
        attn = torch.softmax(torch.matmul(q, k.transpose(-1, -2)) * self.scale, dim=-1)
        out = rearrange(torch.matmul(attn, v), "b h n d -> b n (h d)")
        return self.to_out(out)


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.attention = Attention(dim, heads)
        self.mlp = FeedForward(dim, mlp_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.attention(x) + x
        x = self.mlp(x) + x
        return x


class TokenPrompts(nn.Module):
    """Learnable prompt tokens; one set per layer in DEEP mode."""

    def __init__(self, config: TokenPromptConfig, embed_dim: int, depth: int):
        super().__init__()
        self.config = config
        self.depth = depth
        generator = torch.Generator().manual_seed(config.seed)
        if config.mode == TokenPromptMode.DEEP:
            shape = (depth, config.num_prompts, embed_dim)
        else:
            shape = (config.num_prompts, embed_dim)
        self.tokens = nn.Parameter(torch.randn(*shape, generator=generator) * config.init_std)

    @property
    def mode(self) -> TokenPromptMode:
        return self.config.mode

    @property
    def num_prompts(self) -> int:
        return self.config.num_prompts

    def layer_tokens(self, layer: int) -> torch.Tensor:
        if self.mode == TokenPromptMode.DEEP:
            return self.tokens[layer]
        return self.tokens

    def parameter_count(self) -> int:
        return self.tokens.numel()


def _active(prompts: Optional[TokenPrompts]) -> bool:
    return prompts is not None and prompts.mode != TokenPromptMode.NONE


def interpolate_positional_embeddings(table: torch.Tensor, new_grid: int) -> torch.Tensor:
    """Bilinearly resample the spatial rows of a `(1 + g², D)` table; the CLS row is kept."""
    grid = math.isqrt(table.shape[0] - 1)
    if grid * grid != table.shape[0] - 1:
        raise ShapeError("positional table is not a square grid", {"rows": table.shape[0]})
    if new_grid < grid:
        raise ShapeError("positional grid can only grow", {"grid": grid, "new_grid": new_grid})
    if new_grid == grid:
        return table.clone()

    spatial = rearrange(table[1:], "(h w) d -> 1 d h w", h=grid)
    spatial = F.interpolate(spatial, size=(new_grid, new_grid), mode="bilinear", align_corners=False)
    return torch.cat([table[:1], rearrange(spatial, "1 d h w -> (h w) d")], dim=0)


def assemble_sequence(
    patches: torch.Tensor,
    cls_token: torch.Tensor,
    table: torch.Tensor,
    prompts: Optional[TokenPrompts] = None,
) -> torch.Tensor:
    """[CLS + PE0, prompts, E + PE1..]; VP_N_T adds PE_n to every prompt token."""
    batch = patches.shape[0]
    cls = (cls_token.reshape(1, 1, -1) + table[:1]).expand(batch, -1, -1)
    body = patches + table[1:]
    if not _active(prompts):
        return torch.cat([cls, body], dim=1)

    tokens = prompts.layer_tokens(0)
    if prompts.mode == TokenPromptMode.VP_N_T:
        n = prompts.config.position_index
        if n is None or not 0 <= n < table.shape[0]:
            raise ConfigError("prompt position index outside the positional table", {"n": n, "rows": table.shape[0]})
        tokens = tokens + table[n]
    tokens = tokens.to(patches.dtype).unsqueeze(0).expand(batch, -1, -1)
    return torch.cat([cls, tokens, body], dim=1)


@dataclass
class GradientResult:
    loss: float
    input_grad: torch.Tensor
    logits: torch.Tensor
    token_grad: Optional[torch.Tensor] = None


class FrozenBackbone(nn.Module):
    def __init__(self, spec: BackboneSpec, class_embeddings: Optional[torch.Tensor] = None, freeze: bool = True):
        super().__init__()
        if spec.native_size % spec.patch_size != 0:
            raise ShapeError("native size must be divisible by patch size", {"native_size": spec.native_size, "patch_size": spec.patch_size})
        self.spec = spec
        self.patch_size = spec.patch_size
        self.grid = spec.native_size // spec.patch_size
        patch_dim = spec.channels * spec.patch_size ** 2

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(spec.seed)
            self.to_patches = Rearrange("b c (h p1) (w p2) -> b (h w) (p1 p2 c)", p1=spec.patch_size, p2=spec.patch_size)
            self.patch_projection = nn.Linear(patch_dim, spec.embed_dim)
            self.cls_token = nn.Parameter(torch.zeros(1, 1, spec.embed_dim))
            self.pos_embedding = nn.Parameter(torch.zeros(1 + self.grid ** 2, spec.embed_dim))
            self.blocks = nn.ModuleList(
                [EncoderBlock(spec.embed_dim, spec.heads, spec.embed_dim * spec.mlp_ratio) for _ in range(spec.depth)]
            )
            self.norm = nn.LayerNorm(spec.embed_dim)
            if spec.head == HeadKind.LINEAR:
                self.head = nn.Linear(spec.embed_dim, spec.num_classes)
            else:
                self.head = None
            self._init_parameters()

            if spec.head == HeadKind.COSINE and class_embeddings is None:
                class_embeddings = torch.randn(spec.num_classes, spec.embed_dim)
        if class_embeddings is not None:
            class_embeddings = F.normalize(class_embeddings.float(), dim=-1)
        self.register_buffer("class_embeddings", class_embeddings)

        if freeze:
            self.freeze()

    @staticmethod
    def _init_module(module: nn.Module) -> None:
        if isinstance(module, nn.Linear):
            nn.init.trunc_normal_(module.weight, mean=0.0, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)

    def _init_parameters(self) -> None:
        self.apply(self._init_module)
        nn.init.trunc_normal_(self.cls_token, mean=0.0, std=0.02)
        nn.init.trunc_normal_(self.pos_embedding, mean=0.0, std=0.02)

    def freeze(self) -> "FrozenBackbone":
        for parameter in self.parameters():
            parameter.requires_grad_(False)
        self.eval()
        return self

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def checksum(self) -> str:
        return storage.checksum(self.to_arrays())

    def to_arrays(self):
        return {name: tensor.detach().cpu().numpy() for name, tensor in self.state_dict().items()}

    def patch_embed(self, images: torch.Tensor) -> torch.Tensor:
        height, width = images.shape[-2:]
        if height != width or height % self.patch_size != 0:
            raise ShapeError("image size must be square and divisible by the patch size", {"size": (height, width), "patch_size": self.patch_size})
        return self.patch_projection(self.to_patches(images))

    def positional_table(self, grid: int, mode: PositionMode = PositionMode.NATIVE) -> torch.Tensor:
        table = self.pos_embedding
        if mode == PositionMode.NATIVE:
            if grid != self.grid:
                raise ShapeError("input grid differs from the native grid", {"grid": grid, "native_grid": self.grid})
            return table
        if mode == PositionMode.INTERPOLATE:
            return interpolate_positional_embeddings(table, grid)

        # IMAGE_ONLY: native embeddings on the central image patches, none on the prompt border
        offset = grid - self.grid
        if offset < 0 or offset % 2 != 0:
            raise ShapeError("prompt border must be whole patches on each side", {"grid": grid, "native_grid": self.grid})
        offset //= 2
        spatial = torch.zeros(grid, grid, table.shape[-1], dtype=table.dtype)
        spatial[offset:offset + self.grid, offset:offset + self.grid] = rearrange(table[1:], "(h w) d -> h w d", h=self.grid)
        return torch.cat([table[:1], rearrange(spatial, "h w d -> (h w) d")], dim=0)

    def build_input_sequence(
        self,
        patches: torch.Tensor,
        table: torch.Tensor,
        prompts: Optional[TokenPrompts] = None,
    ) -> torch.Tensor:
        return assemble_sequence(patches, self.cls_token, table, prompts)

    def forward_features(
        self,
        images: torch.Tensor,
        prompts: Optional[TokenPrompts] = None,
        position_mode: PositionMode = PositionMode.NATIVE,
    ) -> torch.Tensor:
        patches = self.patch_embed(images)
        table = self.positional_table(images.shape[-1] // self.patch_size, position_mode)
        x = self.build_input_sequence(patches, table, prompts)

        deep = _active(prompts) and prompts.mode == TokenPromptMode.DEEP and prompts.num_prompts > 0
        for layer, block in enumerate(self.blocks):
            if deep and layer > 0:
                tokens = prompts.layer_tokens(layer).to(x.dtype).unsqueeze(0).expand(x.shape[0], -1, -1)
                x = torch.cat([x[:, :1], tokens, x[:, 1 + prompts.num_prompts:]], dim=1)
            x = block(x)
        return self.norm(x[:, 0])

    def classify(self, features: torch.Tensor) -> torch.Tensor:
        if self.spec.head == HeadKind.LINEAR:
            return self.head(features)
        if self.class_embeddings is None:
            raise ConfigError("cosine head needs a class-embedding table")
        embeddings = self.class_embeddings.to(features.dtype)
        return self.spec.logit_scale * F.normalize(features, dim=-1) @ embeddings.t()

    def forward(
        self,
        images: torch.Tensor,
        prompts: Optional[TokenPrompts] = None,
        position_mode: PositionMode = PositionMode.NATIVE,
    ) -> torch.Tensor:
        return self.classify(self.forward_features(images, prompts, position_mode))

    def input_gradient(
        self,
        images: torch.Tensor,
        labels: Union[torch.Tensor, MixedTargets],
        prompts: Optional[TokenPrompts] = None,
        position_mode: PositionMode = PositionMode.NATIVE,
        head_index: Optional[torch.Tensor] = None,
    ) -> GradientResult:
        """Batch-mean cross-entropy and its gradient w.r.t. every input pixel (and the prompt tokens)."""
        num_outputs = self.num_classes if head_index is None else head_index.numel()
        label_tensors = [labels] if isinstance(labels, torch.Tensor) else [labels.labels_a, labels.labels_b]
        for tensor in label_tensors:
            if tensor.numel() and (tensor.min() < 0 or tensor.max() >= num_outputs):
                raise ConfigError("label outside the class range", {"num_classes": num_outputs})

        inputs = images.detach().clone().requires_grad_(True)
        wrt = [inputs]
        trainable_tokens = _active(prompts) and prompts.num_prompts > 0
        if trainable_tokens:
            wrt.append(prompts.tokens)

        with torch.enable_grad():
            logits = self.forward(inputs, prompts, position_mode)
            if head_index is not None:
                logits = logits.index_select(-1, head_index)
            loss = mixed_cross_entropy(logits, labels)
            if not torch.isfinite(loss):
                raise NumericError(
                    "non-finite loss",
                    {
                        "loss": loss.item(),
                        "logits_finite": bool(torch.isfinite(logits).all()),
                        "input_max_abs": float(images.abs().max()),
                    },
                )
            grads = torch.autograd.grad(loss, wrt)

        return GradientResult(
            loss=loss.item(),
            input_grad=grads[0],
            logits=logits.detach(),
            token_grad=grads[1] if trainable_tokens else None,
        )


def save_backbone(backbone: FrozenBackbone, path: Union[str, Path]) -> Path:
    metadata = {"architecture": backbone.spec.model_dump(mode="json"), "checksum": backbone.checksum()}
    return storage.save_arrays(path, backbone.to_arrays(), metadata)


def load_backbone(path: Union[str, Path]) -> FrozenBackbone:
    arrays, metadata = storage.load_arrays(path)
    if "architecture" not in metadata:
        raise ConfigError(f"{path} has no backbone manifest")
    spec = BackboneSpec.model_validate({**metadata["architecture"], "checkpoint": None})
    embeddings = arrays.get("class_embeddings")
    if spec.head == HeadKind.COSINE and embeddings is None:
        raise ConfigError("cosine head needs a class-embedding table", {"path": str(path)})

    backbone = FrozenBackbone(spec, class_embeddings=torch.from_numpy(embeddings) if embeddings is not None else None)
    state = {name: torch.from_numpy(np.array(array)) for name, array in arrays.items()}
    backbone.load_state_dict(state)
    backbone.freeze()
    if backbone.checksum() != metadata.get("checksum"):
        raise IntegrityError("backbone weights do not match their manifest checksum", {"path": str(path)})
    logger.info("Loaded backbone from %s", path)
    return backbone


def build_backbone(spec: BackboneSpec) -> FrozenBackbone:
    if spec.checkpoint:
        backbone = load_backbone(spec.checkpoint)
        if backbone.spec.model_dump(exclude={"checkpoint"}) != spec.model_dump(exclude={"checkpoint"}):
            logger.warning("Backbone file %s overrides the configured architecture", spec.checkpoint)
        return backbone
    return FrozenBackbone(spec)
