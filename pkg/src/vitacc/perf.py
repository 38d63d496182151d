"""Closed-form latency and resource model of the tiled ViT accelerator.

Cycle counts are exact integers. Per layer, for one group of tiles::

    L_in   = P_h * ceil(T_n/D) * ceil(F/A_in)
    L_wgt  = P_h * (ceil(T_n/D) * ceil(T_fix/A_wgt) + ceil(T_n/D') * ceil(T_pot/A_wgt))
    L_out  = (1 + gamma) * ceil((T_fix + T_pot)/D) * ceil(F/A_out)
    L_cmpt = ceil(F/2) * ceil(N_h/P_h)
    L1     = max(L_in, L_wgt, L_cmpt)
    L2     = max(L1 * ceil(N/(P_h*T_n)) + L_cmpt, L_out)
    L_tot  = ceil(M/(T_fix + T_pot)) * L2 + L_out

with ``gamma = N_h - 1`` for multi-output attention matmuls.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from fractions import Fraction
from typing import Iterable, Optional

from .quant import BitWidths
from .workload import LayerDims, Workload

BRAM_BITS = 18_000
DEFAULT_FREQ_HZ = 150e6
DEFAULT_AXI_WIDTH = 64


def cdiv(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class TilingConfig:
    t_m_fix: int
    t_m_pot: int
    t_n: int
    p_h: int
    d: int
    d_prime: int
    a_in: int = 1
    a_wgt: int = 1
    a_out: int = 1
    freq_hz: float = DEFAULT_FREQ_HZ

    def __post_init__(self):
        for name in ("t_n", "p_h", "d", "d_prime", "a_in", "a_wgt", "a_out"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be an integer ≥ 1, got {v!r}")
        for name in ("t_m_fix", "t_m_pot"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise ValueError(f"{name} must be an integer ≥ 0, got {v!r}")
        if self.t_m == 0:
            raise ValueError("t_m_fix + t_m_pot must be ≥ 1")
        if not self.freq_hz > 0:
            raise ValueError("freq_hz must be positive")

    @property
    def t_m(self) -> int:
        return self.t_m_fix + self.t_m_pot

    @property
    def k_pot(self) -> float:
        return self.t_m_pot / self.t_m

    def with_(self, **kw) -> "TilingConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ResourceBudget:
    s_bram: int
    s_dsp: int
    s_lut: int
    r_dsp: float = 1.0
    r_lut: float = 1.0

    def __post_init__(self):
        if min(self.s_bram, self.s_dsp, self.s_lut) < 0:
            raise ValueError("resource capacities must be non-negative")
        if not (0 <= self.r_dsp <= 1 and 0 <= self.r_lut <= 1):
            raise ValueError("usable ratios must lie in [0, 1]")

    @property
    def dsp_limit(self) -> float:
        return self.s_dsp * self.r_dsp

    @property
    def lut_limit(self) -> float:
        return self.s_lut * self.r_lut


# Xilinx ZCU102 (XCZU9EG): 912 BRAM36 = 1824 BRAM18
ZCU102 = ResourceBudget(s_bram=1824, s_dsp=2520, s_lut=274_080)


@dataclass(frozen=True)
class LutCostModel:
    c_lut_fix: float = 0.0
    c_lut_pot: float = 0.0
    c_lut_base: float = 0.0

    def __post_init__(self):
        if min(self.c_lut_fix, self.c_lut_pot, self.c_lut_base) < 0:
            raise ValueError("LUT cost coefficients must be non-negative")


@dataclass(frozen=True)
class LatencyBreakdown:
    l_in: int
    l_wgt: int
    l_out: int
    l_cmpt: int
    l1: int
    l2: int
    l_tot: int
    n_m_groups: int
    n_n_steps: int


def packing_factors(bits: BitWidths, axi_width: int = DEFAULT_AXI_WIDTH) -> tuple[int, int, int]:
    """``(D, D', T_n)`` derived from the AXI word width; ``T_n = D``."""
    d = axi_width // bits.b
    d_prime = axi_width // bits.b_prime
    return d, d_prime, d


def tile_latencies(layer: LayerDims, cfg: TilingConfig) -> tuple[int, int, int, int]:
    """``(L_in, L_wgt, L_out, L_cmpt)`` for one group of tiles."""
    tn_words = cdiv(cfg.t_n, cfg.d)
    l_in = cfg.p_h * tn_words * cdiv(layer.F, cfg.a_in)
    l_wgt = cfg.p_h * (tn_words * cdiv(cfg.t_m_fix, cfg.a_wgt)
                       + cdiv(cfg.t_n, cfg.d_prime) * cdiv(cfg.t_m_pot, cfg.a_wgt))
    l_out = (1 + layer.gamma) * cdiv(cfg.t_m, cfg.d) * cdiv(layer.F, cfg.a_out)
    l_cmpt = cdiv(layer.F, 2) * cdiv(layer.n_heads, cfg.p_h)
    return l_in, l_wgt, l_out, l_cmpt


def layer_cycles(layer: LayerDims, cfg: TilingConfig) -> LatencyBreakdown:
    l_in, l_wgt, l_out, l_cmpt = tile_latencies(layer, cfg)
    l1 = max(l_in, l_wgt, l_cmpt)
    n_steps = cdiv(layer.N, cfg.p_h * cfg.t_n)
    l2 = max(l1 * n_steps + l_cmpt, l_out)
    groups = cdiv(layer.M, cfg.t_m)
    return LatencyBreakdown(l_in, l_wgt, l_out, l_cmpt, l1, l2, groups * l2 + l_out, groups, n_steps)


def total_cycles(layers: Iterable[LayerDims], cfg: TilingConfig, host_cycles_per_layer: int = 0) -> int:
    return sum(layer_cycles(layer, cfg).l_tot + host_cycles_per_layer for layer in layers)


def model_fps(workload: Workload, cfg: TilingConfig, bits: Optional[BitWidths] = None,
              host_cycles_per_layer: int = 0) -> float:
    """Frames per second, ``f / sum_i L_tot^i``.

    ``bits`` is accepted for call-site symmetry; the bit-widths already enter
    through ``cfg.d`` and ``cfg.d_prime``. ``host_cycles_per_layer`` charges a
    constant for work done off the accelerator (default none).
    """
    layers = workload.layers if isinstance(workload, Workload) else tuple(workload)
    if not layers:
        raise ValueError("cannot estimate FPS of an empty workload")
    return cfg.freq_hz / total_cycles(layers, cfg, host_cycles_per_layer)


def bram_usage(cfg: TilingConfig, bits: BitWidths, max_F: int, max_n_heads: int) -> tuple[int, int, int]:
    """Double-buffered 18k-bit BRAM count of the input, weight and output tiles."""
    tn_words = cdiv(cfg.t_n, cfg.d)
    b_in = 2 * cfg.p_h * tn_words * cdiv(bits.b * max_F * cfg.d, BRAM_BITS)
    b_wgt = 2 * cfg.p_h * (
        tn_words * cdiv(bits.b * cfg.t_m_fix * cfg.d, BRAM_BITS)
        + cdiv(cfg.t_n, cfg.d_prime) * cdiv(bits.b_prime * cfg.t_m_pot * cfg.d_prime, BRAM_BITS)
    )
    b_out = 2 * max_n_heads * cdiv(cfg.t_m, cfg.d) * cdiv(bits.b * max_F * cfg.d, BRAM_BITS)
    return b_in, b_wgt, b_out


def dsp_per_mac(b: int) -> Fraction:
    """DSPs per fixed-point MAC: four W4A4 products or two W8A8 products per DSP."""
    if b <= 4:
        return Fraction(1, 4)
    if b <= 8:
        return Fraction(1, 2)
    raise ValueError(f"no DSP packing band for {b}-bit operands")


def compute_resource_usage(cfg: TilingConfig, bits: BitWidths, lut_model: LutCostModel) -> tuple[float, float]:
    """``(dsp, lut)`` consumed by the MAC array."""
    lanes = cfg.p_h * cfg.t_n
    dsp = float(dsp_per_mac(bits.b) * cfg.t_m_fix * lanes)
    lut = (lut_model.c_lut_fix * cfg.t_m_fix + lut_model.c_lut_pot * cfg.t_m_pot) * lanes + lut_model.c_lut_base
    return dsp, lut


@dataclass(frozen=True)
class Violation:
    resource: str
    used: float
    limit: float

    @property
    def overshoot(self) -> float:
        return self.used - self.limit


def check_constraints(cfg: TilingConfig, bits: BitWidths, budget: ResourceBudget,
                      lut_model: LutCostModel, workload: Workload) -> list[Violation]:
    """Resource violations of ``cfg``; an empty list means it fits."""
    bram = sum(bram_usage(cfg, bits, workload.max_F, max(workload.head_counts)))
    dsp, lut = compute_resource_usage(cfg, bits, lut_model)
    out = []
    if bram > budget.s_bram:
        out.append(Violation("bram", bram, budget.s_bram))
    if dsp > budget.dsp_limit:
        out.append(Violation("dsp", dsp, budget.dsp_limit))
    if lut > budget.lut_limit:
        out.append(Violation("lut", lut, budget.lut_limit))
    return out
