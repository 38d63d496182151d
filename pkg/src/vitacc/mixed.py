"""Row-wise mixed-scheme weight quantization and toy quantization-aware training.

Rows of a weight matrix (output channels) with the smallest variance are
quantized to PoT, the rest to fixed-point. The split is done per head group
so that every head sees the same PoT ratio.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .quant import (
    BitWidths,
    FixedQuantizedRow,
    FixedQuantizedTensor,
    PotQuantizedRow,
    QuantizedRow,
    calibrate_scale,
    fixed_quantize,
    pot_quantize,
    quantize_activations,
)

FIXED = "fixed"
POT = "pot"

# guards floor(k * rows) against k*rows landing a hair below an integer
_COUNT_EPS = 1e-9


def row_variance(row) -> float:
    """Population variance (divides by N)."""
    arr = np.asarray(row, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("variance of an empty row is undefined")
    return float(np.var(arr))


def pot_rows_per_head(k_pot: float, rows_per_head: int) -> int:
    return int(math.floor(k_pot * rows_per_head + _COUNT_EPS))


def assign_schemes(W, k_pot: float, n_heads: int = 1) -> list[str]:
    """Tag each row ``"pot"`` or ``"fixed"``.

    Rows are split into ``n_heads`` contiguous groups; in each group the
    ``floor(k_pot * rows_per_group)`` lowest-variance rows become PoT.
    Equal variances are broken by lower row index.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] == 0 or W.shape[1] == 0:
        raise ValueError(f"expected a non-empty 2-D weight matrix, got shape {W.shape}")
    if not 0.0 <= k_pot <= 1.0:
        raise ValueError(f"k_pot must lie in [0, 1], got {k_pot}")
    M = W.shape[0]
    if n_heads < 1 or M % n_heads:
        raise ValueError(f"{M} rows cannot be split into {n_heads} equal head groups")
    group = M // n_heads
    n_pot = pot_rows_per_head(k_pot, group)
    var = np.var(W, axis=1)
    mask = [FIXED] * M
    for h in range(n_heads):
        lo = h * group
        order = np.argsort(var[lo:lo + group], kind="stable")
        for r in order[:n_pot]:
            mask[lo + int(r)] = POT
    return mask


@dataclass
class QuantizedRowMatrix:
    rows: list[QuantizedRow]
    shape: tuple[int, int]
    scheme_mask: list[str]
    bits: BitWidths
    k_pot_actual: float

    def dequantize(self) -> np.ndarray:
        return np.stack([r.dequantize() for r in self.rows])

    @property
    def scales(self) -> list[float]:
        return [r.scale for r in self.rows]

    def to_dict(self) -> dict:
        rows = []
        for r in self.rows:
            if isinstance(r, PotQuantizedRow):
                rows.append({"codes": [[int(s), int(e)] for s, e in zip(r.signs, r.exps)]})
            else:
                rows.append({"q": [int(v) for v in r.q]})
        return {
            "shape": list(self.shape),
            "bits": {"b": self.bits.b, "b_prime": self.bits.b_prime},
            "scheme_mask": list(self.scheme_mask),
            "scales": [float(s) for s in self.scales],
            "k_pot_actual": self.k_pot_actual,
            "rows": rows,
        }

    @classmethod
    def from_dict(cls, d: dict, validate: bool = True) -> "QuantizedRowMatrix":
        """Rebuild from :meth:`to_dict` output.

        ``validate=False`` skips the code-range checks, which lets fault
        injection feed out-of-range codes to the engine simulator.
        """
        try:
            M, N = (int(x) for x in d["shape"])
            bits = BitWidths(int(d["bits"]["b"]), int(d["bits"]["b_prime"]))
            mask = list(d["scheme_mask"])
            scales = [float(s) for s in d["scales"]]
            raw_rows = d["rows"]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed quantized matrix: missing or bad field {exc}") from exc
        if not (len(mask) == len(scales) == len(raw_rows) == M):
            raise ValueError("scheme_mask, scales and rows must each have one entry per row")
        lim = (1 << (bits.b - 1)) - 1
        rows: list[QuantizedRow] = []
        for i, (tag, scale, raw) in enumerate(zip(mask, scales, raw_rows)):
            if not scale > 0:
                raise ValueError(f"row {i}: scale must be positive")
            if tag == POT:
                codes = np.asarray(raw["codes"], dtype=np.int64).reshape(-1, 2)
                if codes.shape[0] != N:
                    raise ValueError(f"row {i}: expected {N} codes, got {codes.shape[0]}")
                signs, exps = codes[:, 0].copy(), codes[:, 1].copy()
                if validate and (np.any(np.abs(signs) > 1) or np.any(exps < 0)
                                 or np.any(exps > bits.max_shift)):
                    raise ValueError(f"row {i}: PoT code out of range")
                rows.append(PotQuantizedRow(signs, exps, scale, bits.b_prime))
            elif tag == FIXED:
                q = np.asarray(raw["q"], dtype=np.int64)
                if q.shape != (N,):
                    raise ValueError(f"row {i}: expected {N} values, got {q.shape}")
                if validate and np.any(np.abs(q) > lim):
                    raise ValueError(f"row {i}: fixed code out of range for b={bits.b}")
                rows.append(FixedQuantizedRow(q, scale, bits.b))
            else:
                raise ValueError(f"row {i}: unknown scheme {tag!r}")
        return cls(rows, (M, N), mask, bits, float(d.get("k_pot_actual", mask.count(POT) / M)))

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text: str, validate: bool = True) -> "QuantizedRowMatrix":
        return cls.from_dict(json.loads(text), validate=validate)


def quantize_matrix(W, bits: BitWidths, k_pot: float, n_heads: int = 1) -> QuantizedRowMatrix:
    """Assign schemes per row, then quantize each row with its own max-abs scale."""
    W = np.asarray(W, dtype=np.float64)
    mask = assign_schemes(W, k_pot, n_heads)
    rows: list[QuantizedRow] = []
    for w, tag in zip(W, mask):
        scale = calibrate_scale(w)
        if tag == POT:
            rows.append(pot_quantize(w, bits.b_prime, scale))
        else:
            rows.append(fixed_quantize(w, bits.b, scale))
    M = W.shape[0]
    return QuantizedRowMatrix(rows, (M, W.shape[1]), mask, bits, mask.count(POT) / M)


# -- toy quantization-aware training ---------------------------------------


@dataclass
class ToyModel:
    """Stack of bias-free linear layers ``y = W_L ... W_1 x``.

    ``shadow_weights`` is the full-precision master copy updated by SGD.
    """

    shadow_weights: list[np.ndarray]
    n_heads: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.shadow_weights = [np.array(w, dtype=np.float64) for w in self.shadow_weights]
        if not self.n_heads:
            self.n_heads = [1] * len(self.shadow_weights)
        if len(self.n_heads) != len(self.shadow_weights):
            raise ValueError("one n_heads entry per layer is required")
        for a, b in zip(self.shadow_weights, self.shadow_weights[1:]):
            if a.shape[0] != b.shape[1]:
                raise ValueError(f"layer shapes {a.shape} and {b.shape} do not chain")

    @classmethod
    def random(cls, dims: Sequence[int], seed: int, n_heads: Optional[Sequence[int]] = None) -> "ToyModel":
        """Layers mapping ``dims[0] -> dims[1] -> ... -> dims[-1]``."""
        rng = np.random.default_rng(seed)
        ws = [rng.normal(0.0, 1.0 / math.sqrt(n), size=(m, n)) for n, m in zip(dims, dims[1:])]
        return cls(ws, list(n_heads) if n_heads else [])

    @property
    def dims(self) -> list[int]:
        return [self.shadow_weights[0].shape[1]] + [w.shape[0] for w in self.shadow_weights]

    def quantize(self, bits: BitWidths, k_pot: float) -> list[QuantizedRowMatrix]:
        return [quantize_matrix(w, bits, k_pot, h) for w, h in zip(self.shadow_weights, self.n_heads)]


def make_regression_data(dims: Sequence[int], n_samples: int, seed: int):
    """Synthetic ``(X, Y)`` from a random linear teacher; columns are samples."""
    # separate stream from ToyModel.random so a shared seed does not yield the teacher
    rng = np.random.default_rng([seed, 1])
    teacher = np.eye(dims[0])
    for n, m in zip(dims, dims[1:]):
        teacher = rng.normal(0.0, 1.0 / math.sqrt(n), size=(m, n)) @ teacher
    X = rng.uniform(-1.0, 1.0, size=(dims[0], n_samples))
    return X, teacher @ X


@dataclass
class QatResult:
    model: ToyModel
    losses: list[float]
    quantized: list[QuantizedRowMatrix]


def _forward(qlayers: list[QuantizedRowMatrix], x: np.ndarray, b: int):
    a_hat = quantize_activations(x, b).dequantize()
    inputs = []
    for q in qlayers:
        inputs.append(a_hat)
        a_hat = quantize_activations(q.dequantize() @ a_hat, b).dequantize()
    return inputs, a_hat


def qat_train_toy(
    model: ToyModel,
    X,
    Y,
    bits: BitWidths,
    k_pot: float,
    epochs: int,
    learning_rate: float,
    batch_size: Optional[int] = None,
    seed: int = 0,
    callback: Optional[Callable[[int, list[QuantizedRowMatrix]], None]] = None,
) -> QatResult:
    """Mixed-scheme QAT with straight-through gradients and plain SGD.

    Every batch re-runs scheme assignment and row calibration on the shadow
    weights, forwards through quantized weights and activations, and applies
    the gradient taken w.r.t. the quantized weights directly to the shadow
    weights. Loss is the mean squared error over outputs and samples.
    ``model`` is updated in place.
    """
    if not learning_rate >= 0:
        raise ValueError(f"learning_rate must be non-negative, got {learning_rate}")
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] == 0:
        raise ValueError("dataset is empty")
    if Y.shape != (model.dims[-1], X.shape[1]) or X.shape[0] != model.dims[0]:
        raise ValueError(f"dataset shapes {X.shape}, {Y.shape} do not fit model dims {model.dims}")
    n = X.shape[1]
    bs = n if batch_size is None else int(batch_size)
    if bs < 1:
        raise ValueError("batch_size must be positive")
    rng = np.random.default_rng(seed)

    losses: list[float] = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            x, y = X[:, idx], Y[:, idx]
            qlayers = model.quantize(bits, k_pot)
            if callback is not None:
                callback(step, qlayers)
            inputs, out = _forward(qlayers, x, bits.b)
            err = out - y
            losses.append(float(np.mean(err ** 2)))
            # STE: the activation quantizer passes gradients through unchanged
            grad = 2.0 * err / err.size
            w_hats = [q.dequantize() for q in qlayers]
            for i in reversed(range(len(qlayers))):
                g_w = grad @ inputs[i].T
                grad = w_hats[i].T @ grad
                model.shadow_weights[i] -= learning_rate * g_w
            step += 1
    return QatResult(model, losses, model.quantize(bits, k_pot))


__all__ = [
    "FIXED",
    "POT",
    "FixedQuantizedTensor",
    "QatResult",
    "QuantizedRowMatrix",
    "ToyModel",
    "assign_schemes",
    "make_regression_data",
    "qat_train_toy",
    "quantize_activations",
    "quantize_matrix",
    "row_variance",
]
