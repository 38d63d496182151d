"""Design-space exploration: bit-widths, tiling and PoT ratio for a target FPS.

For each candidate fixed-point bit-width ``b`` (highest precision first) the
PoT width is aligned, ``P_h``, ``D``, ``D'`` and ``T_n`` are derived, and the
``(T_fix, T_pot)`` pair with the highest modelled FPS under the resource
constraints gives ``FPS_max``. At the first band with ``FPS_max >= target``,
``T_fix`` is frozen and ``T_pot`` lowered to the smallest value still meeting
the target, which gives the smallest PoT ratio and hence the best accuracy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .perf import (
    DEFAULT_AXI_WIDTH,
    DEFAULT_FREQ_HZ,
    LutCostModel,
    ResourceBudget,
    TilingConfig,
    Violation,
    bram_usage,
    check_constraints,
    dsp_per_mac,
    packing_factors,
)
from .quant import BitWidths
from .workload import Workload

# P_h choices quoted for the common DeiT head counts
PAPER_PARALLEL_HEADS = {6: 3, 8: 4, 12: 4}
MAX_PARALLEL_HEADS = 4


class InfeasibleError(RuntimeError):
    def __init__(self, message: str, violations: Sequence[Violation] = ()):
        super().__init__(message)
        self.violations = list(violations)


def select_parallel_heads(n_heads_set) -> int:
    """Heads processed in parallel: a common divisor of every head count, at most 4."""
    heads = sorted({int(h) for h in n_heads_set})
    if not heads:
        raise ValueError("need at least one head count")
    if len(heads) == 1 and heads[0] in PAPER_PARALLEL_HEADS:
        return PAPER_PARALLEL_HEADS[heads[0]]
    g = math.gcd(*heads)
    return max(p for p in range(1, MAX_PARALLEL_HEADS + 1) if g % p == 0)


@dataclass(frozen=True)
class EngineShape:
    """Everything in a :class:`TilingConfig` except the output-channel tiling."""

    p_h: int
    t_n: int
    d: int
    d_prime: int
    a_in: int = 1
    a_wgt: int = 1
    a_out: int = 1
    freq_hz: float = DEFAULT_FREQ_HZ

    @classmethod
    def derive(cls, workload: Workload, bits: BitWidths, axi_width: int = DEFAULT_AXI_WIDTH,
               ports: tuple[int, int, int] = (1, 1, 1), freq_hz: float = DEFAULT_FREQ_HZ) -> "EngineShape":
        d, d_prime, t_n = packing_factors(bits, axi_width)
        p_h = select_parallel_heads(workload.head_counts)
        return cls(p_h, t_n, d, d_prime, *ports, freq_hz=freq_hz)

    def config(self, t_m_fix: int, t_m_pot: int) -> TilingConfig:
        return TilingConfig(int(t_m_fix), int(t_m_pot), self.t_n, self.p_h, self.d, self.d_prime,
                            self.a_in, self.a_wgt, self.a_out, self.freq_hz)


def _cdiv(a, b):
    return -(-a // b)


class _CycleTable:
    """Total workload cycles for one fixed ``T_fix`` over a vector of ``T_pot``.

    Repeated layer shapes are folded, so a 12-block encoder costs as much as
    one block.
    """

    def __init__(self, workload: Workload, shape: EngineShape):
        counts: dict[tuple, int] = {}
        for L in workload.layers:
            key = (L.M, L.N, L.F, L.n_heads, L.gamma)
            counts[key] = counts.get(key, 0) + 1
        self.layers = list(counts.items())
        self.shape = shape

    def cycles(self, t_fix: int, t_pot: np.ndarray) -> np.ndarray:
        s = self.shape
        t_pot = np.asarray(t_pot, dtype=np.int64)
        t_m = t_fix + t_pot
        tn_words = _cdiv(s.t_n, s.d)
        l_wgt = s.p_h * (tn_words * _cdiv(t_fix, s.a_wgt) + _cdiv(s.t_n, s.d_prime) * _cdiv(t_pot, s.a_wgt))
        total = np.zeros_like(t_pot)
        for (M, N, F, n_heads, gamma), count in self.layers:
            l_in = s.p_h * tn_words * _cdiv(F, s.a_in)
            l_out = (1 + gamma) * _cdiv(t_m, s.d) * _cdiv(F, s.a_out)
            l_cmpt = _cdiv(F, 2) * _cdiv(n_heads, s.p_h)
            l1 = np.maximum(np.maximum(l_in, l_wgt), l_cmpt)
            l2 = np.maximum(l1 * _cdiv(N, s.p_h * s.t_n) + l_cmpt, l_out)
            total = total + count * (_cdiv(M, t_m) * l2 + l_out)
        return total


def _lane_bounds(shape: EngineShape, bits: BitWidths, budget: ResourceBudget,
                 lut_model: LutCostModel, cap: int) -> int:
    lanes = shape.p_h * shape.t_n
    dsp_lane = dsp_per_mac(bits.b) * lanes
    fix_max = min(cap, math.floor(Fraction(budget.dsp_limit) / dsp_lane))
    fix_lut = lut_model.c_lut_fix * lanes
    if fix_lut > 0:
        fix_max = min(fix_max, math.floor((budget.lut_limit - lut_model.c_lut_base) / fix_lut))
    return max(fix_max, 0)


def _pot_bound(shape: EngineShape, budget: ResourceBudget, lut_model: LutCostModel, t_fix: int, cap: int) -> int:
    lanes = shape.p_h * shape.t_n
    room = budget.lut_limit - lut_model.c_lut_base - lut_model.c_lut_fix * t_fix * lanes
    if room < 0:
        return -1
    if lut_model.c_lut_pot == 0:
        return cap
    return min(cap, math.floor(room / (lut_model.c_lut_pot * lanes)))


def _fits(shape, bits, budget, lut_model, workload, t_fix, t_pot) -> bool:
    return not check_constraints(shape.config(t_fix, t_pot), bits, budget, lut_model, workload)


def default_lane_cap(workload: Workload) -> int:
    """Beyond the widest layer every layer is a single output group and more lanes cannot help."""
    return max(L.M for L in workload.layers)


def max_fps_config(workload: Workload, bits: BitWidths, budget: ResourceBudget, lut_model: LutCostModel,
                   shape: Optional[EngineShape] = None, t_m_cap: Optional[int] = None,
                   allow_pot_only: bool = False, pot_allowed: bool = True) -> tuple[TilingConfig, float]:
    """Highest-FPS ``(T_fix, T_pot)`` inside the resource budget.

    Ties prefer the smaller PoT ratio, then the smaller ``T_fix``.
    ``allow_pot_only`` admits ``T_fix = 0``; ``pot_allowed=False`` pins
    ``T_pot = 0``.
    """
    shape = shape or EngineShape.derive(workload, bits)
    cap = t_m_cap or default_lane_cap(workload)
    table = _CycleTable(workload, shape)
    fix_max = _lane_bounds(shape, bits, budget, lut_model, cap)
    best = None  # (cycles, k_pot, t_fix, t_pot)
    for t_fix in range(0 if allow_pot_only else 1, fix_max + 1):
        p_hi = min(_pot_bound(shape, budget, lut_model, t_fix, cap), cap - t_fix) if pot_allowed else 0
        p_lo = 1 if t_fix == 0 else 0
        if p_hi < p_lo:
            continue
        t_pots = np.arange(p_lo, p_hi + 1)
        cyc = table.cycles(t_fix, t_pots)
        # BRAM grows with T_pot; trim the tail that does not fit
        ok = np.array([_bram_ok(shape, bits, budget, workload, t_fix, int(p)) for p in t_pots])
        if not ok.any():
            continue
        cyc = np.where(ok, cyc, np.iinfo(np.int64).max)
        c = int(cyc.min())
        # first index of the minimum is the smallest T_pot, so the smallest k_pot at this T_fix
        p = int(t_pots[int(np.argmin(cyc))])
        cand = (c, Fraction(p, t_fix + p), t_fix, p)
        if best is None or cand < best:
            best = cand
    if best is None:
        cfg = shape.config(0, 1) if allow_pot_only else shape.config(1, 0)
        raise InfeasibleError(
            f"no tiling fits the budget at b={bits.b}",
            check_constraints(cfg, bits, budget, lut_model, workload),
        )
    cycles, _, t_fix, t_pot = best
    return shape.config(t_fix, t_pot), shape.freq_hz / cycles


def _bram_ok(shape, bits, budget, workload, t_fix, t_pot) -> bool:
    cfg = shape.config(t_fix, t_pot)
    return sum(bram_usage(cfg, bits, workload.max_F, max(workload.head_counts))) <= budget.s_bram


@dataclass
class DseRequest:
    workload: Workload
    target_fps: float
    budget: ResourceBudget
    lut_model: LutCostModel
    bitwidth_ladder: Sequence[int] = (8, 4)
    axi_width: int = DEFAULT_AXI_WIDTH
    ports: tuple[int, int, int] = (1, 1, 1)
    freq_hz: float = DEFAULT_FREQ_HZ
    t_m_cap: Optional[int] = None

    def __post_init__(self):
        if not self.target_fps > 0:
            raise ValueError("target_fps must be positive")
        ladder = list(self.bitwidth_ladder)
        if not ladder or any(a <= b for a, b in zip(ladder, ladder[1:])):
            raise ValueError(f"bit-width ladder must be non-empty and strictly decreasing, got {ladder}")


@dataclass
class DseResult:
    bits: Optional[BitWidths]
    cfg: Optional[TilingConfig]
    k_pot: float
    fps_estimate: float
    feasible: bool
    target_fps: float
    fps_max_per_band: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "feasible": self.feasible,
            "target_fps": self.target_fps,
            "bits": None if self.bits is None else {"b": self.bits.b, "b_prime": self.bits.b_prime},
            "k_pot": self.k_pot,
            "fps_estimate": self.fps_estimate,
            "cfg": None if self.cfg is None else self.cfg.to_dict(),
            "fps_max_per_band": {str(b): v for b, v in self.fps_max_per_band.items()},
        }


def explore(req: DseRequest) -> DseResult:
    bands: dict[int, tuple[BitWidths, EngineShape, Optional[TilingConfig], float]] = {}
    for b in req.bitwidth_ladder:
        bits = BitWidths.aligned(b)
        shape = EngineShape.derive(req.workload, bits, req.axi_width, req.ports, req.freq_hz)
        try:
            cfg, fps = max_fps_config(req.workload, bits, req.budget, req.lut_model, shape, req.t_m_cap)
        except InfeasibleError:
            cfg, fps = None, 0.0
        bands[b] = (bits, shape, cfg, fps)
    per_band = {b: v[3] for b, v in bands.items()}

    for b in req.bitwidth_ladder:
        bits, shape, best, fps_max = bands[b]
        if best is None or fps_max < req.target_fps:
            continue
        table = _CycleTable(req.workload, shape)
        t_fix = best.t_m_fix
        t_pots = np.arange(0, best.t_m_pot + 1)
        fps = shape.freq_hz / table.cycles(t_fix, t_pots)
        for t_pot, f in zip(t_pots, fps):
            if f >= req.target_fps and _fits(shape, bits, req.budget, req.lut_model, req.workload, t_fix, int(t_pot)):
                cfg = shape.config(t_fix, int(t_pot))
                return DseResult(bits, cfg, cfg.k_pot, float(f), True, req.target_fps, per_band)
    return DseResult(None, None, 0.0, max(per_band.values()), False, req.target_fps, per_band)
