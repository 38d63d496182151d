"""``vitacc`` command-line entry point.

Exit codes: 0 success (an infeasible DSE answer included), 1 internal error or
a simulation MISMATCH, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .calibration import (
    Calibration,
    CalibrationError,
    fit_calibration,
    load_calibration,
    ordering_report,
    render_report,
)
from .dse import DseRequest, InfeasibleError, explore, max_fps_config
from .engine import reference_matmul, simulate_layer
from .mixed import QuantizedRowMatrix, ToyModel, make_regression_data, qat_train_toy, quantize_matrix
from .perf import (
    ResourceBudget,
    TilingConfig,
    bram_usage,
    check_constraints,
    compute_resource_usage,
    layer_cycles,
    model_fps,
)
from .quant import BitWidths, quantize_activations
from .workload import LayerDims, Workload, WorkloadError, build_workload, load_workload

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2

FORMATS = ("json", "table", "csv")


class UsageError(Exception):
    pass


class Mismatch(Exception):
    """Raised after output has been emitted when a self-check failed."""


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    fmt: str = "json"
    out: Optional[Path] = None
    inputs: dict[str, Path] = field(default_factory=dict)

    def __post_init__(self):
        for what, path in self.inputs.items():
            if not path.is_file():
                raise UsageError(f"{what} file not found: {path}")

    @classmethod
    def from_args(cls, args) -> "RunConfig":
        inputs = {}
        for attr, what in (("workload", "workload"), ("calibration", "calibration"),
                           ("model", "model"), ("weights", "weights")):
            p = getattr(args, attr, None)
            if p is not None:
                inputs[what] = Path(p)
        return cls(args.command, args.seed, args.format, Path(args.out) if args.out else None, inputs)


# -- output --------------------------------------------------------------------


def _scalar(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (dict, list, tuple)):
        return json.dumps(v)
    return str(v)


def _render_rows(rows: list[dict]) -> str:
    cols = list(rows[0])
    cells = [[_scalar(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def render(result: dict, rows: Optional[list[dict]], fmt: str) -> str:
    """``json`` dumps ``result``; ``csv`` prints ``rows`` (or the summary as one row); ``table`` both."""
    if fmt == "json":
        return json.dumps(result, indent=2) + "\n"
    scalars = {k: v for k, v in result.items() if not isinstance(v, (dict, list))}
    if fmt == "csv":
        data = rows if rows else [scalars]
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(data[0]), lineterminator="\n")
        writer.writeheader()
        for r in data:
            writer.writerow({k: _scalar(v) if isinstance(v, (dict, list, tuple)) else v for k, v in r.items()})
        return buf.getvalue()
    width = max((len(k) for k in scalars), default=0)
    parts = ["\n".join(f"{k.ljust(width)}  {_scalar(v)}" for k, v in scalars.items())]
    if rows:
        parts.append(_render_rows(rows))
    return "\n\n".join(p for p in parts if p) + "\n"


def emit(cfg: RunConfig, result: dict, rows: Optional[list[dict]] = None) -> None:
    text = render(result, rows, cfg.fmt)
    if cfg.out is None:
        sys.stdout.write(text)
    else:
        cfg.out.write_text(text)


# -- shared argument handling ----------------------------------------------------


def _load_cal(args) -> Calibration:
    cal = load_calibration(args.calibration)
    overrides = {k: getattr(args, k, None) for k in ("s_bram", "s_dsp", "s_lut", "r_dsp", "r_lut")}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        cal = Calibration(cal.lut_model, ResourceBudget(**{**asdict(cal.budget), **overrides}),
                          cal.axi_width, cal.ports, cal.freq_hz)
    return cal


def _workload(args) -> Workload:
    if getattr(args, "layer_dims", None):
        M, N, F = args.layer_dims
        return Workload("custom", (LayerDims("layer", M, N, F, args.n_heads, args.multi_out),))
    if args.workload:
        return load_workload(args.workload)
    return build_workload(args.variant)


def _tiling(args, workload: Workload, bits: BitWidths, cal: Calibration) -> TilingConfig:
    shape = cal.shape(workload, bits)
    kw = shape.config(args.t_fix, args.t_pot).to_dict()
    for name in ("t_n", "p_h", "d", "d_prime", "a_in", "a_wgt", "a_out", "freq_hz"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    return TilingConfig(**kw)


def _bits_dict(bits: BitWidths) -> dict:
    return {"b": bits.b, "b_prime": bits.b_prime}


def _add_workload_source(p, layer_dims: bool = True):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--variant", default="deit-small", help="built-in DeiT variant (default deit-small)")
    g.add_argument("--workload", help="workload JSON file")
    if layer_dims:
        g.add_argument("--layer-dims", type=int, nargs=3, metavar=("M", "N", "F"), help="single ad-hoc layer")
        p.add_argument("--n-heads", type=int, default=1)
        p.add_argument("--multi-out", action="store_true", help="attention matmul with one output per head")


def _add_calibration(p, budget: bool = False):
    p.add_argument("--calibration", help="calibration TOML (default: the shipped ZCU102 fit)")
    if budget:
        for name, typ in (("s-bram", int), ("s-dsp", int), ("s-lut", int), ("r-dsp", float), ("r-lut", float)):
            p.add_argument(f"--{name}", type=typ, help="override the calibration budget")


def _add_tiling(p):
    p.add_argument("--bits", type=int, default=4, help="fixed-point bit-width b; b' is aligned")
    p.add_argument("--t-fix", type=int, required=True, help="fixed-point output lanes T_m^Fix")
    p.add_argument("--t-pot", type=int, required=True, help="PoT output lanes T_m^PoT")
    for name in ("t-n", "p-h", "d", "d-prime", "a-in", "a-wgt", "a-out"):
        p.add_argument(f"--{name}", type=int, help="override the derived value")
    p.add_argument("--freq-hz", type=float)


# -- subcommands -----------------------------------------------------------------


def cmd_workload(args, rc: RunConfig) -> int:
    w = build_workload(args.variant)
    rows = [{"name": L.name, "M": L.M, "N": L.N, "F": L.F, "n_heads": L.n_heads,
             "multi_out": L.is_attention_multi_out, "macs": L.macs} for L in w.layers]
    result = w.to_dict() if rc.fmt == "json" else {"variant": w.variant, "layers": len(w.layers), "macs": w.macs}
    emit(rc, result, rows)
    return EXIT_OK


def estimate_report(workload: Workload, cfg: TilingConfig, bits: BitWidths, cal: Calibration) -> dict:
    layers = []
    for L in workload.layers:
        lb = layer_cycles(L, cfg)
        layers.append({"name": L.name, "M": L.M, "N": L.N, "F": L.F, **asdict(lb)})
    bram = bram_usage(cfg, bits, workload.max_F, max(workload.head_counts))
    dsp, lut = compute_resource_usage(cfg, bits, cal.lut_model)
    violations = check_constraints(cfg, bits, cal.budget, cal.lut_model, workload)
    return {
        "workload": workload.variant,
        "bits": _bits_dict(bits),
        "cfg": cfg.to_dict(),
        "layers": layers,
        "total_cycles": sum(r["l_tot"] for r in layers),
        "fps": model_fps(workload, cfg),
        "resources": {"bram": list(bram), "bram_total": sum(bram), "dsp": dsp, "lut": lut},
        "limits": {"bram": cal.budget.s_bram, "dsp": cal.budget.dsp_limit, "lut": cal.budget.lut_limit},
        "warnings": [{**asdict(v), "overshoot": v.overshoot} for v in violations],
    }


def cmd_estimate(args, rc: RunConfig) -> int:
    cal = _load_cal(args)
    workload = _workload(args)
    bits = BitWidths.aligned(args.bits)
    cfg = _tiling(args, workload, bits, cal)
    report = estimate_report(workload, cfg, bits, cal)
    if rc.fmt != "json":
        summary = {k: report[k] for k in ("workload", "total_cycles", "fps")}
        summary.update(dsp=report["resources"]["dsp"], lut=report["resources"]["lut"],
                       bram=report["resources"]["bram_total"], warnings=len(report["warnings"]))
        emit(rc, summary, report["layers"])
    else:
        emit(rc, report)
    return EXIT_OK


def cmd_dse(args, rc: RunConfig) -> int:
    cal = _load_cal(args)
    workload = _workload(args)
    req = DseRequest(workload, args.target_fps, cal.budget, cal.lut_model, tuple(args.ladder),
                     cal.axi_width, cal.ports, cal.freq_hz, args.t_m_cap)
    res = explore(req).to_dict()
    rows = [{"b": int(b), "fps_max": f} for b, f in res["fps_max_per_band"].items()]
    if rc.fmt == "json":
        emit(rc, res)
    else:
        summary = {k: res[k] for k in ("feasible", "target_fps", "k_pot", "fps_estimate")}
        if res["bits"]:
            summary.update(b=res["bits"]["b"], b_prime=res["bits"]["b_prime"],
                           t_m_fix=res["cfg"]["t_m_fix"], t_m_pot=res["cfg"]["t_m_pot"])
        emit(rc, summary, rows)
    return EXIT_OK


def _load_weights(path: str) -> np.ndarray:
    if path.endswith(".npy"):
        return np.load(path)
    return np.asarray(json.loads(Path(path).read_text()), dtype=np.float64)


def cmd_quantize(args, rc: RunConfig) -> int:
    if args.weights:
        W = _load_weights(args.weights)
    else:
        W = np.random.default_rng(args.seed).normal(size=(args.rows, args.cols))
    qm = quantize_matrix(W, BitWidths.aligned(args.bits), args.k_pot, args.n_heads)
    if rc.fmt == "json":
        emit(rc, qm.to_dict())
    else:
        rows = [{"row": i, "scheme": t, "scale": s} for i, (t, s) in enumerate(zip(qm.scheme_mask, qm.scales))]
        emit(rc, {"rows": qm.shape[0], "cols": qm.shape[1], "k_pot_actual": qm.k_pot_actual}, rows)
    return EXIT_OK


def cmd_qat(args, rc: RunConfig) -> int:
    model = ToyModel.random(args.dims, args.seed)
    X, Y = make_regression_data(args.dims, args.samples, args.seed)
    bits = BitWidths.aligned(args.bits)
    res = qat_train_toy(model, X, Y, bits, args.k_pot, args.epochs, args.lr, args.batch_size, args.seed)
    if not all(np.isfinite(res.losses)):
        raise ValueError("training diverged; lower --lr")
    result = {
        "dims": list(args.dims),
        "bits": _bits_dict(bits),
        "k_pot": args.k_pot,
        "initial_loss": res.losses[0],
        "final_loss": res.losses[-1],
        "losses": res.losses,
        "layers": [q.to_dict() for q in res.quantized],
    }
    if rc.fmt == "json":
        emit(rc, result)
    else:
        emit(rc, {k: result[k] for k in ("initial_loss", "final_loss")},
             [{"step": i, "loss": v} for i, v in enumerate(res.losses)])
    return EXIT_OK


def _pick_layer(args, workload: Workload) -> LayerDims:
    if args.layer_dims or args.layer is None:
        if len(workload.layers) == 1:
            return workload.layers[0]
        raise UsageError("--layer is required for a multi-layer workload")
    if args.layer.isdigit():
        i = int(args.layer)
        if i >= len(workload.layers):
            raise UsageError(f"layer index {i} out of range (workload has {len(workload.layers)} layers)")
        return workload.layers[i]
    for L in workload.layers:
        if L.name == args.layer:
            return L
    raise UsageError(f"no layer named {args.layer!r}")


def cmd_simulate(args, rc: RunConfig) -> int:
    cal = _load_cal(args)
    workload = _workload(args)
    layer = _pick_layer(args, workload)
    if args.model:
        try:
            qW = QuantizedRowMatrix.from_json(Path(args.model).read_text(), validate=False)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.model}: invalid JSON ({exc})") from None
        bits = qW.bits
    else:
        bits = BitWidths.aligned(args.bits)
        k = args.k_pot if args.k_pot is not None else args.t_pot / (args.t_fix + args.t_pot)
        W = np.random.default_rng([args.seed, 0]).normal(size=(layer.M, layer.N))
        qW = quantize_matrix(W, bits, k)
    A = np.random.default_rng([args.seed, 2]).normal(size=(layer.N, layer.F))
    qA = quantize_activations(A, bits.b)
    cfg = _tiling(args, Workload(workload.variant, (layer,)), bits, cal)

    trace = simulate_layer(layer, cfg, qW, qA)
    ref = reference_matmul(qW, qA, layer.n_heads, layer.is_attention_multi_out)
    l_tot = layer_cycles(layer, cfg).l_tot
    same = trace.outputs.shape == ref.outputs.shape and np.array_equal(trace.outputs, ref.outputs)
    diff = int(np.abs(trace.outputs - ref.outputs).max()) if trace.outputs.shape == ref.outputs.shape else None
    if args.trace:
        trace.dump_events(args.trace)
    result = {
        "layer": layer.name,
        "M": layer.M, "N": layer.N, "F": layer.F,
        "bits": _bits_dict(bits),
        "k_pot_actual": qW.k_pot_actual,
        "cfg": cfg.to_dict(),
        "cycles": trace.cycles,
        "simulated_cycles": trace.cycles_total,
        "analytical_l_tot": l_tot,
        "cycles_verdict": "MATCH" if trace.cycles_total == l_tot else "MISMATCH",
        "outputs_verdict": "MATCH" if same else "MISMATCH",
        "max_abs_output_diff": diff,
    }
    emit(rc, result)
    if not same or trace.cycles_total != l_tot:
        raise Mismatch(f"simulation {result['cycles_verdict']} (cycles) / {result['outputs_verdict']} (outputs)")
    return EXIT_OK


def cmd_report(args, rc: RunConfig) -> int:
    cal = _load_cal(args)
    workload = _workload(args)
    bands = []
    for b in args.ladder:
        bits = BitWidths.aligned(b)
        try:
            cfg, fps = max_fps_config(workload, bits, cal.budget, cal.lut_model, cal.shape(workload, bits))
            bands.append({"b": b, "b_prime": bits.b_prime, "t_m_fix": cfg.t_m_fix, "t_m_pot": cfg.t_m_pot,
                          "k_pot": cfg.k_pot, "fps_max": fps})
        except InfeasibleError:
            bands.append({"b": b, "b_prime": bits.b_prime, "t_m_fix": None, "t_m_pot": None,
                          "k_pot": None, "fps_max": 0.0})
    dse = explore(DseRequest(workload, args.target_fps, cal.budget, cal.lut_model, tuple(args.ladder),
                             cal.axi_width, cal.ports, cal.freq_hz)).to_dict()
    result = {
        "workload": workload.variant,
        "layers": len(workload.layers),
        "gmacs": workload.macs / 1e9,
        "calibration": {"ports": list(cal.ports), "axi_width": cal.axi_width, **asdict(cal.lut_model),
                        "r_dsp": cal.budget.r_dsp, "r_lut": cal.budget.r_lut},
        "bands": bands,
        "dse": dse,
    }
    if args.ordering:
        order = ordering_report(cal)
        result["ordering"] = {"design_fps": order.design_fps, "design_ordered": order.design_ordered,
                              "budget_fps": order.budget_fps, "budget_ordered": order.budget_ordered}
    if rc.fmt == "json":
        emit(rc, result)
    else:
        emit(rc, {"workload": workload.variant, "gmacs": result["gmacs"], "target_fps": args.target_fps,
                  "feasible": dse["feasible"], "k_pot": dse["k_pot"], "fps_estimate": dse["fps_estimate"]}, bands)
    return EXIT_OK


def cmd_calibrate(args, rc: RunConfig) -> int:
    fit = fit_calibration()
    cal = fit.calibration
    if args.toml:
        Path(args.toml).write_text(cal.to_toml())
    if args.report:
        Path(args.report).write_text(render_report(fit, ordering_report(cal)))
    result = {"ports": list(cal.ports), "axi_width": cal.axi_width, "freq_hz": cal.freq_hz,
              **asdict(cal.lut_model), "r_dsp": cal.budget.r_dsp, "r_lut": cal.budget.r_lut,
              "port_error": fit.port_error, "lut_residual": fit.lut_residual}
    rows = [{"design": f"{p.variant} {p.scheme}", "b": p.b, "t_m_fix": c.t_m_fix, "t_m_pot": c.t_m_pot,
             "fps": p.fps, "model_fps": f, "klut": p.klut, "model_klut": k}
            for p, c, f, k in zip(fit.points, fit.tilings, fit.modelled_fps, fit.modelled_klut)]
    if rc.fmt == "json":
        result["designs"] = rows
        emit(rc, result)
    else:
        emit(rc, {**result, "ports": ",".join(map(str, cal.ports))}, rows)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS keeps a value given before the subcommand from being reset after it
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for every random draw")
    common.add_argument("--format", choices=FORMATS, default=argparse.SUPPRESS, help="output format")
    common.add_argument("-o", "--out", default=argparse.SUPPRESS, help="write output here instead of stdout")

    ap = argparse.ArgumentParser(prog="vitacc", description="Mixed fixed/PoT ViT accelerator toolkit.")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--format", choices=FORMATS, default="json")
    ap.add_argument("-o", "--out", default=None)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("workload", parents=[common], help="emit the matmul workload of a DeiT variant")
    p.add_argument("--variant", default="deit-small")
    p.set_defaults(func=cmd_workload)

    p = sub.add_parser("estimate", parents=[common], help="analytical cycles, FPS and resources")
    _add_workload_source(p)
    _add_calibration(p, budget=True)
    _add_tiling(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("dse", parents=[common], help="pick bit-widths, tiling and PoT ratio for a target FPS")
    _add_workload_source(p)
    _add_calibration(p, budget=True)
    p.add_argument("--target-fps", type=float, required=True)
    p.add_argument("--ladder", type=int, nargs="+", default=[8, 4], help="bit-widths, highest first")
    p.add_argument("--t-m-cap", type=int, help="upper bound on T_fix + T_pot")
    p.set_defaults(func=cmd_dse)

    p = sub.add_parser("quantize", parents=[common], help="mixed-scheme quantization of a weight matrix")
    p.add_argument("--weights", help=".npy or JSON 2-D array; default is a seeded random matrix")
    p.add_argument("--rows", type=int, default=4)
    p.add_argument("--cols", type=int, default=8)
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--k-pot", type=float, default=0.5)
    p.add_argument("--n-heads", type=int, default=1)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("qat", parents=[common], help="quantization-aware training of a toy linear model")
    p.add_argument("--dims", type=int, nargs="+", default=[4, 4])
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--bits", type=int, default=8)
    p.add_argument("--k-pot", type=float, default=0.5)
    p.set_defaults(func=cmd_qat)

    p = sub.add_parser("simulate", parents=[common], help="run one layer through the engine and self-check")
    _add_workload_source(p)
    _add_calibration(p)
    _add_tiling(p)
    p.add_argument("--layer", help="layer name or index in the workload")
    p.add_argument("--model", help="QuantizedRowMatrix JSON; default is a seeded random matrix")
    p.add_argument("--k-pot", type=float, help="PoT ratio of the generated matrix (default T_pot/T_m)")
    p.add_argument("--trace", help="write the pipeline event log here")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", parents=[common], help="per-band maxima and DSE summary for a workload")
    _add_workload_source(p, layer_dims=False)
    _add_calibration(p, budget=True)
    p.add_argument("--target-fps", type=float, default=150.0)
    p.add_argument("--ladder", type=int, nargs="+", default=[8, 4])
    p.add_argument("--ordering", action="store_true", help="include the Fixed/PoT/mixed ordering check")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("calibrate", parents=[common], help="refit the board calibration from reference designs")
    p.add_argument("--toml", help="write the fitted calibration TOML here")
    p.add_argument("--report", help="write the Markdown fit report here")
    p.set_defaults(func=cmd_calibrate)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        rc = RunConfig.from_args(args)
        return args.func(args, rc)
    except Mismatch as exc:
        print(f"vitacc: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (UsageError, CalibrationError, WorkloadError, ValueError, OSError) as exc:
        print(f"vitacc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"vitacc {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
