"""FPGA-aware mixed fixed-point / power-of-two quantization for ViT accelerators."""

from .calibration import Calibration, CalibrationError, load_calibration
from .dse import DseRequest, DseResult, EngineShape, InfeasibleError, explore, max_fps_config, select_parallel_heads
from .engine import INT4_QUAD, INT8_PAIR, PackedMode, SimTrace, dsp_pack_multiply, pot_shift_multiply, \
    reference_matmul, simulate_layer
from .mixed import QuantizedRowMatrix, ToyModel, assign_schemes, qat_train_toy, quantize_matrix, row_variance
from .perf import (
    LatencyBreakdown,
    LutCostModel,
    ResourceBudget,
    TilingConfig,
    bram_usage,
    check_constraints,
    compute_resource_usage,
    layer_cycles,
    model_fps,
    tile_latencies,
)
from .quant import (
    BitWidths,
    aligned_pot_bitwidth,
    calibrate_scale,
    dequantize_row,
    fixed_quantize,
    pot_quantize,
    quantize_activations,
)
from .workload import LayerDims, Workload, build_workload, load_workload, save_workload

__version__ = "0.1.0"
