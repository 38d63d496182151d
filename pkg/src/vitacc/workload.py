"""Matrix-multiplication workloads of DeiT encoders.

Each :class:`LayerDims` is one matmul of ``M`` output channels, ``N`` input
channels and ``F`` tokens. ``N`` is split evenly over ``n_heads`` heads. For
fully connected layers the per-head partial sums are added; for attention
matmuls (``is_attention_multi_out``) every head keeps its own ``M x F``
output, so ``M`` counts per-head outputs and the MAC count is still
``M * N * F``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

VARIANTS = {
    # embed dim, heads, depth
    "deit-tiny": (192, 3, 12),
    "deit-small": (384, 6, 12),
    "deit-base": (768, 12, 12),
}

IMAGE_SIZE = 224
PATCH = 16
IN_CHANS = 3
MLP_RATIO = 4
NUM_CLASSES = 1000
NUM_PATCHES = (IMAGE_SIZE // PATCH) ** 2
TOKENS = NUM_PATCHES + 1  # class token


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class LayerDims:
    name: str
    M: int
    N: int
    F: int
    n_heads: int = 1
    is_attention_multi_out: bool = False

    def __post_init__(self):
        for fld in ("M", "N", "F", "n_heads"):
            v = getattr(self, fld)
            if isinstance(v, bool) or not isinstance(v, int):
                raise WorkloadError(f"{fld} must be an integer, got {v!r}")
            if v < 1:
                raise WorkloadError(f"{fld} must be ≥ 1, got {v}")
        if self.N % self.n_heads:
            raise WorkloadError(f"N={self.N} is not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.N // self.n_heads

    @property
    def gamma(self) -> int:
        return self.n_heads - 1 if self.is_attention_multi_out else 0

    @property
    def macs(self) -> int:
        return self.M * self.N * self.F


@dataclass(frozen=True)
class Workload:
    variant: str
    layers: tuple[LayerDims, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise WorkloadError("a workload needs at least one layer")

    @property
    def macs(self) -> int:
        return sum(layer.macs for layer in self.layers)

    @property
    def max_F(self) -> int:
        return max(layer.F for layer in self.layers)

    @property
    def head_counts(self) -> set[int]:
        return {layer.n_heads for layer in self.layers}

    def to_dict(self) -> dict:
        return {"variant": self.variant, "layers": [asdict(layer) for layer in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "Workload":
        if not isinstance(d, dict) or "layers" not in d:
            raise WorkloadError("workload must be an object with a 'layers' list")
        layers = []
        for i, raw in enumerate(d["layers"]):
            try:
                layers.append(LayerDims(
                    name=str(raw["name"]),
                    M=raw["M"],
                    N=raw["N"],
                    F=raw["F"],
                    n_heads=raw.get("n_heads", 1),
                    is_attention_multi_out=bool(raw.get("is_attention_multi_out", False)),
                ))
            except KeyError as exc:
                raise WorkloadError(f"layer {i}: missing field {exc.args[0]!r}") from None
            except WorkloadError as exc:
                raise WorkloadError(f"layer {i}: {exc}") from None
        return cls(str(d.get("variant", "custom")), tuple(layers))


def build_workload(variant: str) -> Workload:
    """Ordered matmul schedule of a DeiT model at 224x224 input."""
    if variant not in VARIANTS:
        raise WorkloadError(f"unknown variant {variant!r}; valid: {', '.join(VARIANTS)}")
    dim, heads, depth = VARIANTS[variant]
    F = TOKENS
    # 16x16/stride-16 patch conv as an FC over flattened patches (no class token yet)
    layers = [LayerDims("patch_embed", dim, IN_CHANS * PATCH * PATCH, NUM_PATCHES, heads)]
    for i in range(depth):
        p = f"blocks.{i}."
        layers += [
            LayerDims(p + "attn.qkv", 3 * dim, dim, F, heads),
            # per head: scores[k, q] = sum_d K[k, d] Q[d, q]
            LayerDims(p + "attn.scores", F, dim, F, heads, True),
            # per head: ctx[d, q] = sum_k V[d, k] P[k, q]
            LayerDims(p + "attn.context", dim // heads, heads * F, F, heads, True),
            LayerDims(p + "attn.proj", dim, dim, F, heads),
            LayerDims(p + "mlp.fc1", MLP_RATIO * dim, dim, F, heads),
            LayerDims(p + "mlp.fc2", dim, MLP_RATIO * dim, F, heads),
        ]
    # classifier reads only the class token
    layers.append(LayerDims("head", NUM_CLASSES, dim, 1, heads))
    return Workload(variant, tuple(layers))


def save_workload(workload: Workload, path) -> None:
    Path(path).write_text(json.dumps(workload.to_dict(), indent=2) + "\n")


def load_workload(path) -> Workload:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise WorkloadError(f"{path}: invalid JSON ({exc})") from None
    return Workload.from_dict(data)
