"""Board calibration: LUT cost coefficients, usable ratios and AXI port counts.

The shipped file is fitted to published ZCU102 implementation results of
DeiT-small at W4A4 (Fixed-only, PoT-only and mixed designs). Run
``vitacc calibrate --toml FILE --report FILE`` to refit and rewrite the data
file and the fit report. The procedure:

1. Rebuild the tiling of the Fixed-only and mixed designs from their DSP
   counts (``T_fix = DSP / (C_dsp * P_h * T_n)``) and PoT ratio
   (``T_pot = k / (1 - k) * T_fix``).
2. Choose the AXI port counts ``(A_in, A_wgt, A_out)`` that minimise the
   squared log error between modelled and reported FPS of those two designs.
3. The PoT-only design uses almost no DSPs, so its lane count is read off the
   FPS curve: the smallest ``T_pot`` on the rising branch whose modelled FPS is
   closest to the reported one.
4. Fit ``(c_lut_fix, c_lut_pot, c_lut_base)`` to the kLUT column by
   non-negative least squares.
5. Usable ratios are the largest observed utilisations, reported or
   modelled, rounded up to six decimals.
"""

from __future__ import annotations

import itertools
import math
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import nnls

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dse import EngineShape, _CycleTable, max_fps_config
from .perf import (
    DEFAULT_AXI_WIDTH,
    DEFAULT_FREQ_HZ,
    ZCU102,
    LutCostModel,
    ResourceBudget,
    TilingConfig,
    check_constraints,
    compute_resource_usage,
    dsp_per_mac,
    model_fps,
)
from .quant import BitWidths
from .workload import Workload, build_workload


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class Calibration:
    lut_model: LutCostModel
    budget: ResourceBudget
    axi_width: int = DEFAULT_AXI_WIDTH
    ports: tuple[int, int, int] = (1, 1, 1)
    freq_hz: float = DEFAULT_FREQ_HZ

    def shape(self, workload: Workload, bits: BitWidths) -> EngineShape:
        return EngineShape.derive(workload, bits, self.axi_width, self.ports, self.freq_hz)

    def to_toml(self) -> str:
        lm, bud = self.lut_model, self.budget
        return "\n".join([
            f"c_lut_fix = {lm.c_lut_fix!r}",
            f"c_lut_pot = {lm.c_lut_pot!r}",
            f"c_lut_base = {lm.c_lut_base!r}",
            f"axi_width = {self.axi_width}",
            f"r_dsp = {bud.r_dsp!r}",
            f"r_lut = {bud.r_lut!r}",
            f"ports = [{', '.join(str(p) for p in self.ports)}]",
            f"freq_hz = {self.freq_hz!r}",
            "",
            "[board]",
            f"s_bram = {bud.s_bram}",
            f"s_dsp = {bud.s_dsp}",
            f"s_lut = {bud.s_lut}",
            "",
        ])


DEFAULT_CALIBRATION = "calibration.toml"


def default_calibration_path() -> Path:
    return Path(str(resources.files("vitacc") / "data" / DEFAULT_CALIBRATION))


def parse_calibration(data: dict) -> Calibration:
    try:
        board = data["board"]
        lut_model = LutCostModel(float(data["c_lut_fix"]), float(data["c_lut_pot"]), float(data["c_lut_base"]))
        budget = ResourceBudget(int(board["s_bram"]), int(board["s_dsp"]), int(board["s_lut"]),
                                float(data["r_dsp"]), float(data["r_lut"]))
        ports = tuple(int(p) for p in data.get("ports", (1, 1, 1)))
        if len(ports) != 3 or min(ports) < 1:
            raise CalibrationError(f"ports must be three positive integers, got {list(ports)}")
        return Calibration(lut_model, budget, int(data["axi_width"]), ports,
                           float(data.get("freq_hz", DEFAULT_FREQ_HZ)))
    except KeyError as exc:
        raise CalibrationError(f"calibration is missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise CalibrationError(f"bad calibration value: {exc}") from None


def load_calibration(path=None) -> Calibration:
    """Read a calibration TOML file; ``None`` loads the shipped one."""
    p = Path(path) if path is not None else default_calibration_path()
    try:
        text = p.read_text()
    except OSError as exc:
        raise CalibrationError(f"cannot read calibration file {p}: {exc.strerror}") from None
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise CalibrationError(f"{p}: invalid TOML ({exc})") from None
    return parse_calibration(data)


# -- published design points -------------------------------------------------


@dataclass(frozen=True)
class DesignPoint:
    variant: str
    scheme: str  # "fixed", "pot" or "mixed"
    b: int
    k_pot: float
    dsp: int
    klut: float
    fps: float


# ZCU102 @ 150 MHz implementation results
DESIGN_POINTS = (
    DesignPoint("deit-small", "fixed", 4, 0.0, 1933, 137, 130.3),
    DesignPoint("deit-small", "pot", 4, 1.0, 13, 176, 150.9),
    DesignPoint("deit-small", "mixed", 4, 0.43, 1549, 193, 155.8),
    DesignPoint("deit-small", "fixed", 8, 0.0, 1936, 122, 78.1),
    DesignPoint("deit-small", "pot", 8, 1.0, 16, 175, 91.9),
    DesignPoint("deit-small", "mixed", 8, 0.43, 1552, 185, 99.7),
    DesignPoint("deit-base", "fixed", 4, 0.0, 2064, 139, 47.5),
    DesignPoint("deit-base", "pot", 4, 1.0, 19, 191, 56.4),
    DesignPoint("deit-base", "mixed", 4, 0.40, 1555, 179, 56.8),
    DesignPoint("deit-base", "fixed", 8, 0.0, 2066, 128, 25.9),
    DesignPoint("deit-base", "pot", 8, 1.0, 20, 192, 31.1),
    DesignPoint("deit-base", "mixed", 8, 0.45, 1556, 186, 34.0),
)

FIT_VARIANT = "deit-small"
FIT_BITS = 4


def lanes_from_dsp(point: DesignPoint, shape: EngineShape) -> tuple[int, int]:
    """``(T_fix, T_pot)`` of a design that uses DSPs for its fixed-point rows."""
    if point.scheme == "pot":
        raise ValueError("PoT-only designs carry no DSP lanes")
    t_fix = round(point.dsp / (float(dsp_per_mac(point.b)) * shape.p_h * shape.t_n))
    t_pot = round(t_fix * point.k_pot / (1.0 - point.k_pot))
    return t_fix, t_pot


def pot_lanes_from_fps(workload: Workload, shape: EngineShape, fps: float, cap: int = 4096) -> int:
    """Smallest PoT-only lane count on the rising FPS branch closest to ``fps``."""
    t = np.arange(1, cap + 1)
    model = shape.freq_hz / _CycleTable(workload, shape).cycles(0, t)
    peak = int(np.argmax(model))
    err = np.abs(np.log(model[:peak + 1] / fps))
    return int(t[int(np.argmin(err))])


@dataclass
class FitResult:
    calibration: Calibration
    points: list[DesignPoint]
    tilings: list[TilingConfig]
    port_error: float
    lut_residual: float
    modelled_fps: list[float] = field(default_factory=list)
    modelled_klut: list[float] = field(default_factory=list)


def fit_calibration(points: Optional[Sequence[DesignPoint]] = None, board: ResourceBudget = ZCU102,
                    axi_width: int = DEFAULT_AXI_WIDTH, freq_hz: float = DEFAULT_FREQ_HZ,
                    port_range: Sequence[int] = range(1, 9)) -> FitResult:
    if points is None:
        points = [p for p in DESIGN_POINTS if p.variant == FIT_VARIANT and p.b == FIT_BITS]
    points = list(points)
    if len({(p.variant, p.b) for p in points}) != 1:
        raise ValueError("fit points must share one variant and bit-width")
    workload = build_workload(points[0].variant)
    bits = BitWidths.aligned(points[0].b)
    dsp_points = [p for p in points if p.scheme != "pot"]
    if not dsp_points:
        raise ValueError("need at least one design point with DSP lanes")

    best = None
    for ports in itertools.product(port_range, repeat=3):
        shape = EngineShape.derive(workload, bits, axi_width, ports, freq_hz)
        err = 0.0
        for p in dsp_points:
            cfg = shape.config(*lanes_from_dsp(p, shape))
            err += math.log(model_fps(workload, cfg) / p.fps) ** 2
        if best is None or err < best[0]:
            best = (err, ports, shape)
    port_error, ports, shape = best

    tilings = []
    for p in points:
        if p.scheme == "pot":
            tilings.append(shape.config(0, pot_lanes_from_fps(workload, shape, p.fps)))
        else:
            tilings.append(shape.config(*lanes_from_dsp(p, shape)))

    lanes = shape.p_h * shape.t_n
    A = np.array([[c.t_m_fix * lanes, c.t_m_pot * lanes, 1.0] for c in tilings])
    y = np.array([p.klut * 1000.0 for p in points])
    coef, residual = nnls(A, y)
    lut_model = LutCostModel(*(round(float(c), 4) for c in coef))

    usage = [compute_resource_usage(c, bits, lut_model) for c in tilings]
    # cover both the reported and the modelled usage so every fit design fits
    r_dsp = max(max(p.dsp, float(u[0])) for p, u in zip(points, usage)) / board.s_dsp
    r_lut = max(max(p.klut * 1000.0, float(u[1])) for p, u in zip(points, usage)) / board.s_lut
    budget = ResourceBudget(board.s_bram, board.s_dsp, board.s_lut, _ceil6(r_dsp), _ceil6(r_lut))
    cal = Calibration(lut_model, budget, axi_width, ports, freq_hz)

    fps = [model_fps(workload, c) for c in tilings]
    klut = [u[1] / 1000.0 for u in usage]
    return FitResult(cal, points, tilings, port_error, float(residual), fps, klut)


def _ceil6(x: float) -> float:
    return math.ceil(x * 1e6 - 1e-9) / 1e6


# -- ordering check ------------------------------------------------------------


@dataclass
class OrderingReport:
    design_fps: dict[str, float]
    design_tilings: dict[str, TilingConfig]
    budget_fps: dict[str, float]
    budget_tilings: dict[str, TilingConfig]

    @staticmethod
    def _ordered(fps: dict[str, float]) -> bool:
        return fps["fixed"] < fps["pot"] < fps["mixed"]

    @property
    def design_ordered(self) -> bool:
        return self._ordered(self.design_fps)

    @property
    def budget_ordered(self) -> bool:
        return self._ordered(self.budget_fps)


def design_tiling(point: DesignPoint, cal: Calibration, workload: Workload) -> TilingConfig:
    """Tiling of a published design rebuilt from its resource columns under ``cal``.

    Fixed and mixed designs come from the DSP count; a PoT-only design from
    its LUT count through the fitted cost model.
    """
    bits = BitWidths.aligned(point.b)
    shape = cal.shape(workload, bits)
    if point.scheme != "pot":
        return shape.config(*lanes_from_dsp(point, shape))
    lm = cal.lut_model
    if lm.c_lut_pot <= 0:
        raise CalibrationError("c_lut_pot is zero; PoT-only lanes cannot be recovered from LUTs")
    t_pot = round((point.klut * 1000.0 - lm.c_lut_base) / (lm.c_lut_pot * shape.p_h * shape.t_n))
    return shape.config(0, max(t_pot, 1))


def ordering_report(cal: Calibration, variant: str = FIT_VARIANT, b: int = FIT_BITS) -> OrderingReport:
    """Fixed-only, PoT-only and mixed FPS two ways.

    ``design_*``: the published designs rebuilt from their resource columns.
    ``budget_*``: the best tiling of each kind inside the calibrated budget.
    """
    workload = build_workload(variant)
    bits = BitWidths.aligned(b)
    points = {p.scheme: p for p in DESIGN_POINTS if p.variant == variant and p.b == b}
    d_cfg = {s: design_tiling(p, cal, workload) for s, p in points.items()}
    d_fps = {s: model_fps(workload, c) for s, c in d_cfg.items()}

    shape = cal.shape(workload, bits)
    args = (workload, bits, cal.budget, cal.lut_model, shape)
    b_cfg, b_fps = {}, {}
    b_cfg["fixed"], b_fps["fixed"] = max_fps_config(*args, pot_allowed=False)
    b_cfg["mixed"], b_fps["mixed"] = max_fps_config(*args)
    # PoT-only: T_fix pinned to zero
    cap = max(L.M for L in workload.layers)
    t = np.arange(1, cap + 1)
    fits = [not check_constraints(shape.config(0, int(p)), bits, cal.budget, cal.lut_model, workload) for p in t]
    cyc = _CycleTable(workload, shape).cycles(0, t)
    cyc = np.where(fits, cyc, np.iinfo(np.int64).max)
    best = int(np.argmin(cyc))
    b_cfg["pot"] = shape.config(0, int(t[best]))
    b_fps["pot"] = shape.freq_hz / int(cyc[best])
    return OrderingReport(d_fps, d_cfg, b_fps, b_cfg)


# -- regeneration ----------------------------------------------------------------


def render_report(fit: FitResult, order: OrderingReport) -> str:
    cal = fit.calibration
    lm, bud = cal.lut_model, cal.budget
    lines = [
        "# Calibration report",
        "",
        "Generated by `vitacc calibrate`. The fit procedure is described",
        "in the module docstring of `vitacc/calibration.py`.",
        "",
        "## Fitted values",
        "",
        f"- ports (A_in, A_wgt, A_out): {cal.ports} (squared log FPS error {fit.port_error:.2e})",
        f"- c_lut_fix = {lm.c_lut_fix}, c_lut_pot = {lm.c_lut_pot}, c_lut_base = {lm.c_lut_base}"
        f" (NNLS residual {fit.lut_residual:.0f} LUTs)",
        f"- r_dsp = {bud.r_dsp}, r_lut = {bud.r_lut}",
        f"- axi_width = {cal.axi_width}, freq_hz = {cal.freq_hz:g}",
        "",
        "## Design points used",
        "",
        "| design | b | T_fix | T_pot | reported FPS | model FPS | reported kLUT | model kLUT |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for p, c, f, k in zip(fit.points, fit.tilings, fit.modelled_fps, fit.modelled_klut):
        lines.append(f"| {p.variant} {p.scheme} | {p.b} | {c.t_m_fix} | {c.t_m_pot} | {p.fps} | {f:.1f}"
                     f" | {p.klut} | {k:.1f} |")
    lines += [
        "",
        "The PoT-only lane count is read off the FPS curve (step 3), so its modelled",
        "FPS matches the reported value by construction. The Fixed-only and mixed",
        "FPS values are genuine predictions from the DSP-derived tilings.",
        "",
        "## Ordering check (DeiT-small, b=4)",
        "",
        "Published designs rebuilt from their resource columns (PoT-only lanes from",
        "the kLUT column through the fitted cost model):",
        "",
    ]
    for s in ("fixed", "pot", "mixed"):
        c = order.design_tilings[s]
        lines.append(f"- {s}: T_fix={c.t_m_fix}, T_pot={c.t_m_pot}, {order.design_fps[s]:.1f} FPS")
    lines += ["", f"Fixed-only < PoT-only < mixed: **{'holds' if order.design_ordered else 'FAILS'}**.", "",
              "Best tiling of each kind inside the calibrated budget:", ""]
    for s in ("fixed", "pot", "mixed"):
        c = order.budget_tilings[s]
        lines.append(f"- {s}: T_fix={c.t_m_fix}, T_pot={c.t_m_pot}, {order.budget_fps[s]:.2f} FPS")
    lines += ["", f"Fixed-only < PoT-only < mixed: **{'holds' if order.budget_ordered else 'does not hold'}**.", ""]
    if not order.budget_ordered:
        lines += [
            "Discrepancy. Under a single LUT budget the model cannot make mixed beat",
            "PoT-only once PoT-only lanes reach the peak of the FPS curve. `L_out` grows",
            "with T_m, so FPS peaks at a finite lane count, and the PoT-only design can",
            "afford that many lanes within the LUT budget. A mixed design with the same",
            "total T_m loads weights in two streams and is never faster, so the best case",
            "is a tie. The published PoT-only design used 64% of the LUTs while the mixed",
            "one used 70%. Whatever stopped the PoT-only design from growing further",
            "(routing, timing closure) is not part of this resource model. The ordering",
            "does hold for the published designs themselves, shown above.",
            "",
        ]
    return "\n".join(lines)


def main(argv=None) -> int:
    import argparse

    ap = argparse.ArgumentParser(description="Refit the shipped board calibration.")
    ap.add_argument("--out", type=Path, default=default_calibration_path())
    ap.add_argument("--report", type=Path, default=None, help="write the Markdown fit report here")
    args = ap.parse_args(argv)
    fit = fit_calibration()
    args.out.write_text(fit.calibration.to_toml())
    report = render_report(fit, ordering_report(fit.calibration))
    if args.report:
        args.report.write_text(report)
    else:
        print(report)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
