"""Bit-exact functional and phase-level cycle simulation of the MAC engine.

Fixed-point lanes run on emulated DSP48E2 slices computing ``P = (A + D) * B``
(27-bit A/D, 18-bit B, 45-bit P) with several low-bit products packed into
one multiplication. PoT lanes replace the multiplication with a left shift.

Packing layouts (bit offsets)::

    int8_pair  A+D = a0 + a1<<18      B = w           P fields at 0, 18
    int4_quad  A+D = w0 + w1<<22      B = a0 + a1<<11  P fields at 0, 11, 22, 33

int8_pair carries the two activations on the 27-bit pre-adder side since an
18-bit B port cannot hold two 8-bit operands with 16-bit product spacing.
int4_quad returns ``(w0*a0, w0*a1, w1*a0, w1*a1)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .mixed import POT, QuantizedRowMatrix
from .perf import TilingConfig, cdiv
from .quant import BitWidths, FixedQuantizedTensor, PotQuantizedRow, fixed_levels
from .workload import LayerDims

A_BITS = 27
B_BITS = 18
P_BITS = 45
ACC_BITS = 32


def _signed_range(bits: int) -> tuple[int, int]:
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def wrap_signed(x, bits: int):
    """Two's-complement truncation to ``bits`` bits (works on ints and int arrays)."""
    half = 1 << (bits - 1)
    return ((x + half) & ((1 << bits) - 1)) - half


def dsp48(a: int, d: int, b: int) -> int:
    """One DSP48E2 multiply ``(a + d) * b`` with port-width checks."""
    lo, hi = _signed_range(A_BITS)
    if not (lo <= a <= hi and lo <= d <= hi):
        raise ValueError("A/D operand exceeds 27 bits")
    if not lo <= a + d <= hi:
        raise ValueError("pre-adder result exceeds 27 bits")
    blo, bhi = _signed_range(B_BITS)
    if not blo <= b <= bhi:
        raise ValueError("B operand exceeds 18 bits")
    return wrap_signed((a + d) * b, P_BITS)


@dataclass(frozen=True)
class PackedMode:
    name: str
    operand_bits: int
    n_weights: int
    field_bits: int
    wgt_shift: int  # offset of the second operand on the A/D side
    act_shift: int  # offset of the second operand on the B side (0: unused)

    @property
    def n_products(self) -> int:
        return 2 * self.n_weights

    @property
    def product_offsets(self) -> tuple[int, ...]:
        return tuple(i * self.field_bits for i in range(self.n_products))

    @property
    def guard_bits(self) -> int:
        lo, _ = _signed_range(self.operand_bits)
        product_bits = (lo * lo).bit_length() + 1
        return self.field_bits - product_bits


INT8_PAIR = PackedMode("int8_pair", 8, 1, 18, 18, 0)
INT4_QUAD = PackedMode("int4_quad", 4, 2, 11, 22, 11)
MODES = {m.name: m for m in (INT8_PAIR, INT4_QUAD)}


def mode_for_bits(b: int) -> PackedMode:
    return INT4_QUAD if b <= 4 else INT8_PAIR


def _unpack(p, mode: PackedMode):
    """Split a packed product into signed fields, low field first."""
    out = []
    for _ in range(mode.n_products):
        lane = wrap_signed(p, mode.field_bits)
        out.append(lane)
        # the borrow of a negative lane is undone by subtracting it before shifting
        p = (p - lane) >> mode.field_bits
    return out


def dsp_pack_multiply(mode: PackedMode, weights: Sequence[int], activations: Sequence[int]) -> tuple[int, ...]:
    """Products of ``weights`` x ``activations`` from one packed DSP multiply.

    int8_pair: one weight, two activations -> ``(w*a0, w*a1)``.
    int4_quad: two weights, two activations -> ``(w0*a0, w0*a1, w1*a0, w1*a1)``.
    """
    if isinstance(mode, str):
        mode = MODES[mode]
    weights = [int(w) for w in weights]
    acts = [int(a) for a in activations]
    if len(weights) != mode.n_weights or len(acts) != 2:
        raise ValueError(f"{mode.name} takes {mode.n_weights} weight(s) and 2 activations")
    lo, hi = _signed_range(mode.operand_bits)
    for v in weights + acts:
        if not lo <= v <= hi:
            raise ValueError(f"operand {v} outside {mode.operand_bits}-bit range [{lo}, {hi}]")
    if mode is INT8_PAIR:
        p = dsp48(acts[1] << mode.wgt_shift, acts[0], weights[0])
    else:
        p = dsp48(weights[1] << mode.wgt_shift, weights[0], acts[0] + (acts[1] << mode.act_shift))
    return tuple(int(v) for v in _unpack(p, mode))


def _pack_multiply_array(mode: PackedMode, w: np.ndarray, a0: np.ndarray, a1: np.ndarray, w1=None):
    """Vectorised hardware path; operands are wrapped, not range-checked."""
    ob = mode.operand_bits
    w, a0, a1 = (wrap_signed(np.asarray(x, dtype=np.int64), ob) for x in (w, a0, a1))
    if mode is INT8_PAIR:
        p = ((a1 << mode.wgt_shift) + a0) * w
    else:
        w1 = wrap_signed(np.asarray(w1, dtype=np.int64), ob)
        p = ((w1 << mode.wgt_shift) + w) * (a0 + (a1 << mode.act_shift))
    return _unpack(wrap_signed(p, P_BITS), mode)


def pot_shift_multiply(a_int: int, code: tuple[int, int], bits: BitWidths) -> int:
    """``sign * (a << (E - e))``; the row output then carries ``scale * 2**-E``."""
    sign, e = int(code[0]), int(code[1])
    lim = fixed_levels(bits.b)
    if not -lim <= a_int <= lim:
        raise ValueError(f"activation {a_int} outside the {bits.b}-bit range")
    E = bits.max_shift
    if sign not in (-1, 0, 1) or not 0 <= e <= E:
        raise ValueError(f"PoT code {code} out of range (e must lie in [0, {E}])")
    return sign * (int(a_int) << (E - e))


@dataclass
class MatmulResult:
    """Integer outputs plus one real scale per weight row.

    ``outputs`` is ``(M, F)``, or ``(n_heads, M, F)`` for multi-output
    attention; ``outputs * row_scales[:, None]`` is the real-valued result.
    """

    outputs: np.ndarray
    row_scales: np.ndarray

    def dequantize(self) -> np.ndarray:
        return self.outputs * self.row_scales[:, None]


def _row_scales(qW: QuantizedRowMatrix, qA: FixedQuantizedTensor) -> np.ndarray:
    a_unit = qA.scale / fixed_levels(qA.b)
    E = qW.bits.max_shift
    return np.array([
        r.scale * 2.0 ** -E * a_unit if isinstance(r, PotQuantizedRow) else r.scale / fixed_levels(r.b) * a_unit
        for r in qW.rows
    ])


def _check_shapes(qW: QuantizedRowMatrix, qA: FixedQuantizedTensor, n_heads: int):
    M, N = qW.shape
    if qA.q.ndim != 2 or qA.q.shape[0] != N:
        raise ValueError(f"activation shape {qA.q.shape} does not match weight shape {qW.shape}")
    if qA.b != qW.bits.b:
        raise ValueError(f"activation bits {qA.b} differ from weight bits {qW.bits.b}")
    if N % n_heads:
        raise ValueError(f"N={N} not divisible by n_heads={n_heads}")


def reference_matmul(qW: QuantizedRowMatrix, qA: FixedQuantizedTensor,
                     n_heads: int = 1, multi_out: bool = False) -> MatmulResult:
    """Plain integer matmul used as the oracle for :func:`simulate_layer`."""
    _check_shapes(qW, qA, n_heads)
    M, N = qW.shape
    F = qA.q.shape[1]
    A = qA.q.astype(np.int64)
    E = qW.bits.max_shift
    hd = N // n_heads
    out = np.zeros((n_heads, M, F), dtype=np.int64)
    for i, row in enumerate(qW.rows):
        if isinstance(row, PotQuantizedRow):
            shifts = (E - row.exps).astype(np.int64)
            for h in range(n_heads):
                for c in range(h * hd, (h + 1) * hd):
                    if row.signs[c]:
                        out[h, i] += row.signs[c] * np.left_shift(A[c], shifts[c])
        else:
            w = row.q.astype(np.int64)
            for h in range(n_heads):
                sl = slice(h * hd, (h + 1) * hd)
                out[h, i] = w[sl] @ A[sl]
    if not multi_out:
        out = out.sum(axis=0)
    return MatmulResult(out, _row_scales(qW, qA))


@dataclass
class SimTrace:
    cycles: dict[str, int]
    outputs: np.ndarray
    row_scales: np.ndarray
    events: list[dict] = field(default_factory=list)

    @property
    def cycles_total(self) -> int:
        return self.cycles["total"]

    def dump_events(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.events, fh, indent=1)
            fh.write("\n")


def _lane_schedule(qW: QuantizedRowMatrix, cfg: TilingConfig) -> list[tuple[list[int], list[int]]]:
    """Assign rows to ``(fixed lanes, pot lanes)`` per output group.

    PoT rows prefer PoT lanes; surplus PoT rows run on spare DSP lanes since
    ``2**(E-e)`` fits a ``b``-bit fixed weight. Fixed rows need DSP lanes.
    """
    fix_rows = [i for i, t in enumerate(qW.scheme_mask) if t != POT]
    pot_rows = [i for i, t in enumerate(qW.scheme_mask) if t == POT]
    if fix_rows and cfg.t_m_fix == 0:
        raise ValueError("fixed-point rows present but the engine has no DSP lanes")
    groups = []
    while fix_rows or pot_rows:
        fl, fix_rows = fix_rows[:cfg.t_m_fix], fix_rows[cfg.t_m_fix:]
        pl, pot_rows = pot_rows[:cfg.t_m_pot], pot_rows[cfg.t_m_pot:]
        spare = cfg.t_m_fix - len(fl)
        fl = fl + pot_rows[:spare]
        pot_rows = pot_rows[spare:]
        groups.append((fl, pl))
    return groups


def _fixed_lane_weights(qW: QuantizedRowMatrix, rows: list[int], chans: np.ndarray) -> np.ndarray:
    """b-bit weights as stored in the DSP-lane weight buffer."""
    E = qW.bits.max_shift
    out = np.zeros((len(rows), len(chans)), dtype=np.int64)
    for k, r in enumerate(rows):
        row = qW.rows[r]
        if isinstance(row, PotQuantizedRow):
            signs, exps = _pot_fields(row, qW.bits)
            out[k] = signs[chans] << (E - exps[chans])
        else:
            out[k] = row.q[chans]
    return wrap_signed(out, qW.bits.b)


def _pot_fields(row: PotQuantizedRow, bits: BitWidths):
    """Decode PoT codes as the hardware would: sign bit plus a (b'-1)-bit level."""
    level_bits = bits.b_prime - 1
    signs = np.sign(row.signs).astype(np.int64)
    level = np.where(signs == 0, 0, (row.exps.astype(np.int64) + 1) & ((1 << level_bits) - 1))
    signs = np.where(level == 0, 0, signs)
    return signs, np.where(level == 0, 0, level - 1)


def _dsp_products(mode: PackedMode, W: np.ndarray, A: np.ndarray) -> np.ndarray:
    """``W[r, c] * A[c, f]`` for every (r, c, f) via packed DSP multiplies."""
    R, C = W.shape
    F = A.shape[1]
    Fp = F + (F & 1)
    Ap = np.zeros((C, Fp), dtype=np.int64)
    Ap[:, :F] = A
    a0, a1 = Ap[None, :, 0::2], Ap[None, :, 1::2]
    out = np.empty((R + (R & 1 if mode is INT4_QUAD else 0), C, Fp), dtype=np.int64)
    if mode is INT8_PAIR:
        p0, p1 = _pack_multiply_array(mode, W[:, :, None], a0, a1)
        out[:, :, 0::2], out[:, :, 1::2] = p0, p1
    else:
        Wp = np.zeros((out.shape[0], C), dtype=np.int64)
        Wp[:R] = W
        w0, w1 = Wp[0::2, :, None], Wp[1::2, :, None]
        p00, p01, p10, p11 = _pack_multiply_array(mode, w0, a0, a1, w1)
        out[0::2, :, 0::2], out[0::2, :, 1::2] = p00, p01
        out[1::2, :, 0::2], out[1::2, :, 1::2] = p10, p11
    return out[:R, :, :F]


def _pot_products(qW: QuantizedRowMatrix, rows: list[int], chans: np.ndarray, A: np.ndarray) -> np.ndarray:
    E = qW.bits.max_shift
    out = np.zeros((len(rows), len(chans), A.shape[1]), dtype=np.int64)
    for k, r in enumerate(rows):
        signs, exps = _pot_fields(qW.rows[r], qW.bits)
        out[k] = signs[chans, None] * np.left_shift(A, (E - exps[chans])[:, None])
    return out


def _phase_costs(layer: LayerDims, cfg: TilingConfig) -> dict[str, int]:
    """Cycles of each pipeline phase for one tile step, built from transfer counts."""
    in_beats = 0
    for _head in range(cfg.p_h):
        for _word_row in range(cdiv(cfg.t_n, cfg.d)):
            in_beats += cdiv(layer.F, cfg.a_in)
    wgt_beats = 0
    for _head in range(cfg.p_h):
        wgt_beats += cdiv(cfg.t_n, cfg.d) * cdiv(cfg.t_m_fix, cfg.a_wgt)
        wgt_beats += cdiv(cfg.t_n, cfg.d_prime) * cdiv(cfg.t_m_pot, cfg.a_wgt)
    token_pairs = cdiv(layer.F, 2)
    head_passes = cdiv(layer.n_heads, cfg.p_h)
    out_copies = layer.n_heads if layer.is_attention_multi_out else 1
    store = out_copies * cdiv(cfg.t_m, cfg.d) * cdiv(layer.F, cfg.a_out)
    return {"load_in": in_beats, "load_wgt": wgt_beats, "compute": token_pairs * head_passes, "store": store}


def simulate_layer(layer: LayerDims, cfg: TilingConfig, qW: QuantizedRowMatrix,
                   qA: FixedQuantizedTensor) -> SimTrace:
    """Run one layer through the tiled engine.

    Loop order: output-channel groups of ``T_fix + T_pot`` rows, then input
    steps of ``P_h * T_n`` channels. Loads of step ``j`` overlap compute of
    step ``j-1`` in lock-step slots of ``max(load_in, load_wgt, compute)``
    cycles; the store of group ``g`` overlaps group ``g+1``.
    """
    if qW.shape != (layer.M, layer.N) or qA.q.shape != (layer.N, layer.F):
        raise ValueError(f"quantized operands {qW.shape} x {qA.q.shape} do not match layer "
                         f"{layer.name} (M={layer.M}, N={layer.N}, F={layer.F})")
    _check_shapes(qW, qA, layer.n_heads)
    bits = qW.bits
    mode = mode_for_bits(bits.b)
    A = wrap_signed(qA.q.astype(np.int64), bits.b)
    hd = layer.head_dim
    n_out = layer.n_heads if layer.is_attention_multi_out else 1
    acc = np.zeros((n_out, layer.M, layer.F), dtype=np.int64)
    acc_lo, acc_hi = _signed_range(ACC_BITS)

    costs = _phase_costs(layer, cfg)
    slot = max(costs["load_in"], costs["load_wgt"], costs["compute"])
    step_width = cfg.p_h * cfg.t_n
    events: list[dict] = []
    busy = dict.fromkeys(costs, 0)

    def log(group, phase, start, length, step=None):
        ev = {"tile_group": group, "phase": phase, "start_cycle": start, "end_cycle": start + length}
        if step is not None:
            ev["step"] = step
        events.append(ev)
        busy[phase] += length

    # group-level slot: compute of group g overlaps the store of group g-1
    t = 0
    groups = _lane_schedule(qW, cfg)
    for g, (fix_lanes, pot_lanes) in enumerate(groups):
        step = 0
        for c0 in range(0, layer.N, step_width):
            chans = np.arange(c0, min(c0 + step_width, layer.N))
            s0 = t + step * slot
            log(g, "load_in", s0, costs["load_in"], step)
            log(g, "load_wgt", s0, costs["load_wgt"], step)
            if step:
                log(g, "compute", s0, costs["compute"], step - 1)
            heads = chans // hd if n_out > 1 else np.zeros_like(chans)
            if fix_lanes:
                prods = _dsp_products(mode, _fixed_lane_weights(qW, fix_lanes, chans), A[chans])
                for h in np.unique(heads):
                    acc[h, fix_lanes] += prods[:, heads == h].sum(axis=1)
            if pot_lanes:
                prods = _pot_products(qW, pot_lanes, chans, A[chans])
                for h in np.unique(heads):
                    acc[h, pot_lanes] += prods[:, heads == h].sum(axis=1)
            if acc.min() < acc_lo or acc.max() > acc_hi:
                raise OverflowError(f"{layer.name}: accumulator exceeds {ACC_BITS} bits")
            step += 1
        log(g, "compute", t + step * slot, costs["compute"], step - 1)
        if g:
            log(g - 1, "store", t, costs["store"])
        group_slot = max(step * slot + costs["compute"], costs["store"])
        t += group_slot
    log(len(groups) - 1, "store", t, costs["store"])
    total = t + costs["store"]
    out = acc if layer.is_attention_multi_out else acc[0]
    cycles = {**busy, "total": total, "groups": len(groups)}
    return SimTrace(cycles, out, _row_scales(qW, qA), events)
