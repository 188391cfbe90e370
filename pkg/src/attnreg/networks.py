"""Trainable registration model.

The composed forward pass predicts an affine transform from the raw pair,
warps the moving volume, encodes both volumes with a shared CNN, runs two
attention branches over the token sequences (per-image self-attention and
joint cross-attention), decodes each branch into a velocity field, fuses the
two fields with learned gates, exponentiates the result, and applies the
final warp.  Ablation flags drop any subset of the attention/fusion modules
down to a plain encoder-decoder baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from attnreg.fieldops import (
    AffineParams,
    VectorField,
    affine_displacement_tensor,
    exponentiate_tensor,
    warp_tensor,
)
from attnreg.volume import Volume

IDENTITY_AFFINE = (1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0)


@dataclass(frozen=True)
class AblationFlags:
    """Which optional modules to build; all false is the plain baseline."""

    use_sam: bool = True
    use_cam: bool = True
    use_gfm: bool = True


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture sizes.

    The defaults describe the full-size model; desk() returns a slimmed
    profile that trains in minutes on a CPU.
    """

    affine_stages: int = 5
    affine_base_channels: int = 16
    affine_max_channels: int = 256
    encoder_levels: int = 3
    encoder_base_channels: int = 16
    token_dim: int = 252
    tem_layers: int = 12
    attention_heads: int = 12
    mlp_ratio: int = 4
    leaky_slope: float = 0.2
    integration_steps: int = 7

    @classmethod
    def desk(cls) -> "NetworkConfig":
        return cls(
            affine_base_channels=8,
            affine_max_channels=64,
            encoder_base_channels=8,
            token_dim=48,
            tem_layers=3,
            attention_heads=6,
        )

    def validate(self) -> None:
        if self.token_dim < 1 or self.token_dim % self.attention_heads != 0:
            raise ValueError(
                f"token_dim {self.token_dim} must be a positive multiple of "
                f"attention_heads {self.attention_heads}"
            )
        for name in ("affine_stages", "affine_base_channels", "affine_max_channels",
                     "encoder_levels", "encoder_base_channels", "tem_layers",
                     "attention_heads", "mlp_ratio", "integration_steps"):
            if getattr(self, name) < 1 and name != "integration_steps":
                raise ValueError(f"{name} must be >= 1")
        if self.integration_steps < 0:
            raise ValueError("integration_steps must be >= 0")


@dataclass(frozen=True)
class TokenSequence:
    """A linearly projected deep feature grid flattened to L tokens of dim k."""

    tokens: torch.Tensor
    grid: tuple[int, int, int]

    def __post_init__(self):
        if self.tokens.dim() != 2:
            raise ValueError(f"tokens must be (L, k), got {tuple(self.tokens.shape)}")
        gx, gy, gz = self.grid
        if gx * gy * gz != self.tokens.shape[0]:
            raise ValueError(f"grid {self.grid} does not match token count {self.tokens.shape[0]}")

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


class ConvBlock(nn.Module):
    """3x3x3 convolution, batch normalization, leaky ReLU."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1, slope: float = 0.2):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        self.conv = nn.Conv3d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.norm = nn.BatchNorm3d(out_channels)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.conv(x)
        if self.training and x.shape[0] == 1:
            # Batch statistics are degenerate for a single sample; use the
            # running estimates without updating them.
            x = F.batch_norm(
                x,
                self.norm.running_mean,
                self.norm.running_var,
                self.norm.weight,
                self.norm.bias,
                False,
                0.0,
                self.norm.eps,
            )
        else:
            x = self.norm(x)
        return self.act(x)


class AffineNet(nn.Module):
    """Affine regression head: five downsampling stages, pooling, one linear layer.

    Each stage is a stride-2 ConvBlock followed by two stride-1 ConvBlocks;
    channels double per stage from a configured base up to a cap.  The final
    linear layer starts at zero weights with the identity transform as bias,
    so a fresh model predicts exactly the identity parameters.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        blocks = []
        in_ch = 2
        for stage in range(config.affine_stages):
            out_ch = min(config.affine_base_channels * 2**stage, config.affine_max_channels)
            blocks.append(ConvBlock(in_ch, out_ch, stride=2, slope=config.leaky_slope))
            blocks.append(ConvBlock(out_ch, out_ch, stride=1, slope=config.leaky_slope))
            blocks.append(ConvBlock(out_ch, out_ch, stride=1, slope=config.leaky_slope))
            in_ch = out_ch
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Linear(in_ch, 12)
        nn.init.zeros_(self.head.weight)
        with torch.no_grad():
            self.head.bias.copy_(torch.tensor(IDENTITY_AFFINE))

    def forward(self, f: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        if min(f.shape[2:]) < 4:
            raise ValueError(f"dims {tuple(f.shape[2:])} too small; every axis needs >= 4 voxels")
        x = torch.cat([f, m], dim=1)
        x = self.blocks(x)
        pooled = x.mean(dim=(2, 3, 4))
        return self.head(pooled)


class Encoder(nn.Module):
    """Shared CNN encoder; each level halves the grid and doubles the channels."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        levels = []
        in_ch = 1
        self.out_channels: list[int] = []
        for lvl in range(config.encoder_levels):
            out_ch = config.encoder_base_channels * 2**lvl
            levels.append(
                nn.Sequential(
                    ConvBlock(in_ch, out_ch, stride=2, slope=config.leaky_slope),
                    ConvBlock(out_ch, out_ch, stride=1, slope=config.leaky_slope),
                )
            )
            self.out_channels.append(out_ch)
            in_ch = out_ch
        self.levels = nn.ModuleList(levels)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for level in self.levels:
            x = level(x)
            feats.append(x)
        return feats


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with per-head projection matrices.

    Logits scale by the inverse square root of the head dimension; with a
    single head that is the full token dimension.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.wq = nn.Linear(dim, dim, bias=False)
        self.wk = nn.Linear(dim, dim, bias=False)
        self.wv = nn.Linear(dim, dim, bias=False)
        self.wo = nn.Linear(dim, dim, bias=False)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        n, l, k = x.shape
        return x.view(n, l, self.heads, k // self.heads).transpose(1, 2)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Softmax attention matrix, shape (N, heads, L, L); rows sum to 1."""
        q = self._split(self.wq(x))
        key = self._split(self.wk(x))
        return ((q @ key.transpose(-2, -1)) * self.scale).softmax(dim=-1)

    def attend(self, x: torch.Tensor) -> torch.Tensor:
        """Concatenated per-head attention outputs, before the output projection."""
        n, l, k = x.shape
        v = self._split(self.wv(x))
        out = self.attention_weights(x) @ v
        return out.transpose(1, 2).reshape(n, l, k)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.wo(self.attend(x))


class EncoderLayer(nn.Module):
    """One post-norm transformer layer: attention and MLP, each with a residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(),
            nn.Linear(mlp_ratio * dim, dim),
        )
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.attn(x))
        x = self.norm2(x + self.mlp(x))
        return x


class TransformerEncoder(nn.Module):
    """Learnable position embeddings plus a stack of post-norm encoder layers."""

    def __init__(self, dim: int, depth: int, heads: int, max_tokens: int, mlp_ratio: int = 4):
        super().__init__()
        self.pos_embedding = nn.Parameter(torch.randn(max_tokens, dim) * 0.02)
        self.layers = nn.ModuleList(EncoderLayer(dim, heads, mlp_ratio) for _ in range(depth))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        length = tokens.shape[1]
        if length > self.pos_embedding.shape[0]:
            raise ValueError(
                f"sequence length {length} exceeds position table {self.pos_embedding.shape[0]}"
            )
        x = tokens + self.pos_embedding[:length]
        for layer in self.layers:
            x = layer(x)
        return x


class Decoder(nn.Module):
    """Mirror of the encoder with skip connections, ending in a velocity head.

    At each level the input is concatenated with the encoder features of both
    volumes; the final 3-channel convolution has no activation and starts at
    zero so the initial velocity field is exactly zero.
    """

    def __init__(self, token_dim: int, enc_channels: list[int], slope: float):
        super().__init__()
        deep = enc_channels[-1]
        self.proj = nn.Linear(token_dim, deep)
        blocks = []
        cur = deep
        for lvl in reversed(range(len(enc_channels))):
            blocks.append(ConvBlock(cur + 2 * enc_channels[lvl], enc_channels[lvl], slope=slope))
            cur = enc_channels[lvl]
        self.blocks = nn.ModuleList(blocks)
        self.flow = nn.Conv3d(enc_channels[0], 3, 3, padding=1)
        nn.init.zeros_(self.flow.weight)
        nn.init.zeros_(self.flow.bias)

    def forward(
        self,
        tokens: torch.Tensor,
        grid: tuple[int, int, int],
        skips_f: list[torch.Tensor],
        skips_m: list[torch.Tensor],
    ) -> torch.Tensor:
        n = tokens.shape[0]
        x = self.proj(tokens).transpose(1, 2).reshape(n, -1, *grid)
        top = len(self.blocks) - 1
        for i, block in enumerate(self.blocks):
            lvl = top - i
            if x.shape[2:] != skips_f[lvl].shape[2:]:
                raise ValueError(
                    f"decoder level {lvl}: grid {tuple(x.shape[2:])} does not match "
                    f"skip {tuple(skips_f[lvl].shape[2:])}"
                )
            x = block(torch.cat([x, skips_f[lvl], skips_m[lvl]], dim=1))
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        return self.flow(x)


class GatedFusion(nn.Module):
    """Blend two velocity fields with learned per-voxel gates.

    gate = sigmoid(conv1(cat(v_c, v_s))) yields 6 channels split into w_c and
    w_s; the gated fields are concatenated again and reduced to 3 channels by
    conv2.  Both convolutions are 3x3x3 stride 1.  conv2 keeps its default
    weight init with a zero bias: zero inputs still map to an exactly zero
    fused field (the branch flow heads start at zero), while nonzero conv2
    weights let gradients reach the branches.  Zeroing the conv2 weights as
    well would leave only its bias trainable, since both the weight gradient
    (zero inputs) and the upstream gradient (zero weights) vanish and neither
    can recover.
    """

    def __init__(self):
        super().__init__()
        self.gate_conv = nn.Conv3d(6, 6, 3, padding=1)
        self.fuse_conv = nn.Conv3d(6, 3, 3, padding=1)
        nn.init.zeros_(self.fuse_conv.bias)

    def forward(self, v_c: torch.Tensor, v_s: torch.Tensor) -> torch.Tensor:
        if v_c.shape != v_s.shape:
            raise ValueError(f"field shapes differ: {tuple(v_c.shape)} vs {tuple(v_s.shape)}")
        gates = torch.sigmoid(self.gate_conv(torch.cat([v_c, v_s], dim=1)))
        w_c, w_s = gates[:, :3], gates[:, 3:]
        return self.fuse_conv(torch.cat([w_c * v_c, w_s * v_s], dim=1))


class ForwardResult(NamedTuple):
    """Batched tensors produced by one forward pass."""

    params: torch.Tensor
    u_affine: torch.Tensor
    m_a: torch.Tensor
    velocity: torch.Tensor
    phi: torch.Tensor
    m_d: torch.Tensor


class RegistrationNetwork(nn.Module):
    """The composed affine + deformable registration model."""

    def __init__(self, dims, config: NetworkConfig | None = None, flags: AblationFlags | None = None):
        super().__init__()
        self.config = config or NetworkConfig()
        self.flags = flags or AblationFlags()
        self.config.validate()
        self.dims = tuple(int(n) for n in dims)
        factor = 2**self.config.encoder_levels
        if any(n % factor != 0 or n < factor for n in self.dims):
            raise ValueError(
                f"dims {self.dims} must be positive multiples of {factor} "
                f"for {self.config.encoder_levels} encoder levels"
            )
        self.token_grid = tuple(n // factor for n in self.dims)
        self.token_count = int(np.prod(self.token_grid))
        cfg, flags_ = self.config, self.flags

        self.affine_net = AffineNet(cfg)
        self.encoder = Encoder(cfg)
        self.to_tokens = nn.Linear(self.encoder.out_channels[-1], cfg.token_dim)

        k, L = cfg.token_dim, self.token_count
        channels = self.encoder.out_channels
        if flags_.use_sam:
            self.sam_fixed = TransformerEncoder(k, cfg.tem_layers, cfg.attention_heads, L, cfg.mlp_ratio)
            self.sam_moving = TransformerEncoder(k, cfg.tem_layers, cfg.attention_heads, L, cfg.mlp_ratio)
            self.decoder_s = Decoder(2 * k, channels, cfg.leaky_slope)
        if flags_.use_cam:
            self.cam = TransformerEncoder(k, cfg.tem_layers, cfg.attention_heads, 2 * L, cfg.mlp_ratio)
            self.decoder_c = Decoder(2 * k, channels, cfg.leaky_slope)
        if not flags_.use_sam and not flags_.use_cam:
            # Plain baseline: raw token pairs feed a single decoder.
            self.decoder_s = Decoder(2 * k, channels, cfg.leaky_slope)
        if flags_.use_sam and flags_.use_cam and flags_.use_gfm:
            self.gfm = GatedFusion()

    def _check_input(self, x: torch.Tensor, name: str) -> None:
        if x.dim() != 5 or x.shape[1] != 1:
            raise ValueError(f"{name} must be (N, 1, X, Y, Z), got {tuple(x.shape)}")
        if tuple(x.shape[2:]) != self.dims:
            raise ValueError(f"{name} dims {tuple(x.shape[2:])} do not match model dims {self.dims}")

    def affine_forward(self, f: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        """Predict 12 affine parameters for each batch element."""
        return self.affine_net(f, m)

    def encode(self, x: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Shared encoder: per-level features plus projected tokens (N, L, k)."""
        feats = self.encoder(x)
        deep = feats[-1]
        tokens = self.to_tokens(deep.flatten(2).transpose(1, 2))
        return feats, tokens

    def sam_branch(self, tok_f: torch.Tensor, tok_m: torch.Tensor) -> torch.Tensor:
        """Independent self-attention per image, channel-concatenated to 2k."""
        if tok_f.shape != tok_m.shape:
            raise ValueError(f"token shapes differ: {tuple(tok_f.shape)} vs {tuple(tok_m.shape)}")
        return torch.cat([self.sam_fixed(tok_f), self.sam_moving(tok_m)], dim=-1)

    def cam_branch(self, tok_f: torch.Tensor, tok_m: torch.Tensor) -> torch.Tensor:
        """Joint attention over the stacked 2L sequence, split back to 2k tokens."""
        if tok_f.shape != tok_m.shape:
            raise ValueError(f"token shapes differ: {tuple(tok_f.shape)} vs {tuple(tok_m.shape)}")
        length = tok_f.shape[1]
        joint = self.cam(torch.cat([tok_f, tok_m], dim=1))
        return torch.cat([joint[:, :length], joint[:, length:]], dim=-1)

    def gfm_fuse(self, v_c: torch.Tensor, v_s: torch.Tensor) -> torch.Tensor:
        """Gated fusion of the two branch velocity fields."""
        return self.gfm(v_c, v_s)

    def forward(self, f: torch.Tensor, m: torch.Tensor) -> ForwardResult:
        self._check_input(f, "fixed")
        self._check_input(m, "moving")
        params = self.affine_forward(f, m)
        u_affine = affine_displacement_tensor(params, self.dims)
        m_a = warp_tensor(m, u_affine, mode="linear")

        feats_f, tok_f = self.encode(f)
        feats_m, tok_m = self.encode(m_a)

        v_s = v_c = None
        if self.flags.use_sam:
            v_s = self.decoder_s(self.sam_branch(tok_f, tok_m), self.token_grid, feats_f, feats_m)
        if self.flags.use_cam:
            v_c = self.decoder_c(self.cam_branch(tok_f, tok_m), self.token_grid, feats_f, feats_m)
        if v_s is not None and v_c is not None:
            if self.flags.use_gfm:
                v = self.gfm_fuse(v_c, v_s)
            else:
                v = 0.5 * (v_s + v_c)
        elif v_s is not None:
            v = v_s
        elif v_c is not None:
            v = v_c
        else:
            tokens = torch.cat([tok_f, tok_m], dim=-1)
            v = self.decoder_s(tokens, self.token_grid, feats_f, feats_m)

        phi = exponentiate_tensor(v, self.config.integration_steps)
        m_d = warp_tensor(m_a, phi, mode="linear")
        return ForwardResult(params=params, u_affine=u_affine, m_a=m_a, velocity=v, phi=phi, m_d=m_d)

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """Trainable parameters grouped by top-level submodule."""
        groups: dict[str, list[tuple[str, nn.Parameter]]] = {}
        for name, p in self.named_parameters():
            groups.setdefault(name.split(".")[0], []).append((name, p))
        return groups


@dataclass(frozen=True)
class FullForwardOutputs:
    """Object-level results of registering one pair."""

    params: AffineParams
    u_affine: VectorField
    m_a: Volume
    velocity: VectorField
    phi: VectorField
    m_d: Volume


def full_forward(model: RegistrationNetwork, f: Volume, m: Volume) -> FullForwardOutputs:
    """Run the model on a single pair of volumes, without gradients."""
    if f.dims != m.dims:
        raise ValueError(f"fixed dims {f.dims} do not match moving dims {m.dims}")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            ft = torch.from_numpy(f.data).reshape(1, 1, *f.dims)
            mt = torch.from_numpy(m.data).reshape(1, 1, *m.dims)
            out = model(ft, mt)
    finally:
        model.train(was_training)
    return FullForwardOutputs(
        params=AffineParams(out.params[0].numpy().astype(np.float64)),
        u_affine=VectorField(out.u_affine[0].numpy(), kind="displacement"),
        m_a=Volume(out.m_a[0, 0].numpy(), f.spacing),
        velocity=VectorField(out.velocity[0].numpy(), kind="velocity"),
        phi=VectorField(out.phi[0].numpy(), kind="displacement"),
        m_d=Volume(out.m_d[0, 0].numpy(), f.spacing),
    )
