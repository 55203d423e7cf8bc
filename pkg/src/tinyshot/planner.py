"""Static flash/SRAM memory planner for MCU deployment.

Given model weights, a prototype table, and a platform description, decide
where each item lives and whether everything fits. Read-only items (weights,
embedding table) prefer dedicated accelerator weight memory, then flash;
live data (activation arena, I/O staging) prefers accelerator data memory,
then SRAM. All accounting is exact integer bytes; an infeasible layout is a
reported state, never an exception.

Platform specs are plain-text key=value files (sizes accept KB/MB suffixes)
so targets can be edited or added without touching code.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .embedstore import EmbeddingTable
from .encoder import (
    InvertedResidualLayer,
    LayerGraph,
    layer_shapes,
    model_size_bytes,
)
from .errors import InfeasibleBase

_SIZE_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(KB|MB|B)?\s*$", re.IGNORECASE)

REGION_NAMES = ("flash", "sram", "accel_weight", "accel_data")

# placement preferences: most specialized region first
_READONLY_ORDER = ("accel_weight", "flash")
_LIVE_ORDER = ("accel_data", "sram")

ITEM_ORDER = ("weights", "embeddings", "activations", "io")


@dataclass(frozen=True)
class PlatformSpec:
    """One deployment target: core memories plus optional accelerator pools."""

    name: str
    flash_bytes: int
    sram_bytes: int
    accel_weight_bytes: int = 0
    accel_data_bytes: int = 0
    clock_mhz: int | None = None

    def __post_init__(self):
        if self.flash_bytes <= 0 or self.sram_bytes <= 0:
            raise ValueError("flash and SRAM capacities must be positive")
        if self.accel_weight_bytes < 0 or self.accel_data_bytes < 0:
            raise ValueError("accelerator capacities cannot be negative")

    def capacity(self, region: str) -> int:
        return {
            "flash": self.flash_bytes,
            "sram": self.sram_bytes,
            "accel_weight": self.accel_weight_bytes,
            "accel_data": self.accel_data_bytes,
        }[region]

    def regions(self) -> dict:
        return {r: self.capacity(r) for r in REGION_NAMES if self.capacity(r) > 0}


@dataclass(frozen=True)
class Placement:
    item: str
    size_bytes: int
    region: str | None  # None when nothing could hold the item


@dataclass(frozen=True)
class LayoutReport:
    """Complete placement outcome for one platform."""

    platform: PlatformSpec
    placements: tuple[Placement, ...]
    peak_activation_bytes: int
    feasible: bool
    violations: tuple[str, ...]

    def used_bytes(self, region: str) -> int:
        return sum(p.size_bytes for p in self.placements if p.region == region)

    def slack_bytes(self, region: str) -> int:
        return self.platform.capacity(region) - self.used_bytes(region)

    def region_usage(self) -> dict:
        return {r: (self.used_bytes(r), cap)
                for r, cap in self.platform.regions().items()}

    def placement_of(self, item: str) -> Placement:
        for p in self.placements:
            if p.item == item:
                return p
        raise KeyError(item)

    def to_dict(self) -> dict:
        return {
            "platform": {
                "name": self.platform.name,
                "regions": self.platform.regions(),
                "clock_mhz": self.platform.clock_mhz,
            },
            "placements": [
                {"item": p.item, "bytes": p.size_bytes, "region": p.region}
                for p in self.placements
            ],
            "peak_activation_bytes": self.peak_activation_bytes,
            "feasible": self.feasible,
            "violations": list(self.violations),
            "slack": {r: self.slack_bytes(r) for r in self.platform.regions()},
        }


# -- activation liveness -----------------------------------------------------

def _elem(shape) -> int:
    return int(np.prod(shape))


def layer_live_sets(g: LayerGraph) -> list[tuple[str, int]]:
    """(step label, live element count) for every execution step.

    Execution model: buffers hold whole tensors; a step's live set is its
    input buffer(s) plus its output buffer, and inside a residual inverted
    bottleneck the block input stays live until the final skip add.
    """
    steps: list[tuple[str, int]] = []
    for idx, (in_shape, out_shape) in enumerate(layer_shapes(g)):
        layer = g.layers[idx]
        n_in, n_out = _elem(in_shape), _elem(out_shape)
        if isinstance(layer, InvertedResidualLayer):
            hidden = int(layer.expand_w.shape[1])
            n_exp = in_shape[0] * in_shape[1] * hidden
            n_dw = out_shape[0] * out_shape[1] * hidden
            n_proj = out_shape[0] * out_shape[1] * layer.out_channels
            if layer.has_residual:
                steps.append((f"layer{idx}.expand", n_in + n_exp))
                steps.append((f"layer{idx}.dw", n_in + n_exp + n_dw))
                steps.append((f"layer{idx}.project", n_in + n_dw + n_proj))
                steps.append((f"layer{idx}.add", n_in + n_proj + n_out))
            else:
                steps.append((f"layer{idx}.expand", n_in + n_exp))
                steps.append((f"layer{idx}.dw", n_exp + n_dw))
                steps.append((f"layer{idx}.project", n_dw + n_proj))
        else:
            steps.append((f"layer{idx}", n_in + n_out))
    return steps


def peak_activation(g: LayerGraph, element_bytes: int = 1) -> int:
    """Max simultaneously-live activation bytes over a sequential forward.

    ``element_bytes`` is the deployed activation precision (1 for the int8
    path). Raises UnresolvedShapes (via shape walking) on inconsistent
    graphs.
    """
    steps = layer_live_sets(g)
    return element_bytes * max(live for _, live in steps)


# -- placement ---------------------------------------------------------------

def _place(sizes: dict, spec: PlatformSpec,
           peak_activation_bytes: int) -> LayoutReport:
    remaining = {r: spec.capacity(r) for r in REGION_NAMES}
    preference = {
        "weights": _READONLY_ORDER,
        "embeddings": _READONLY_ORDER,
        "activations": _LIVE_ORDER,
        "io": _LIVE_ORDER,
    }
    placements: list[Placement] = []
    violations: list[str] = []
    for item in ITEM_ORDER:
        size = sizes[item]
        if size == 0:
            placements.append(Placement(item, 0, None))
            continue
        chosen = None
        for region in preference[item]:
            if remaining[region] >= size:
                chosen = region
                break
        if chosen is None:
            violations.append(item)
        else:
            remaining[chosen] -= size
        placements.append(Placement(item, size, chosen))
    return LayoutReport(
        platform=spec,
        placements=tuple(placements),
        peak_activation_bytes=peak_activation_bytes,
        feasible=not violations,
        violations=tuple(violations),
    )


def plan_sizes(weights_bytes: int, table_bytes: int, activation_bytes: int,
               spec: PlatformSpec, io_bytes: int = 0) -> LayoutReport:
    """Place explicitly-sized items (the budget-level planning entry point)."""
    for name, v in (("weights", weights_bytes), ("table", table_bytes),
                    ("activations", activation_bytes), ("io", io_bytes)):
        if v < 0:
            raise ValueError(f"{name} size cannot be negative")
    sizes = {"weights": int(weights_bytes), "embeddings": int(table_bytes),
             "activations": int(activation_bytes), "io": int(io_bytes)}
    return _place(sizes, spec, int(activation_bytes))


def plan(g: LayerGraph, table: EmbeddingTable | None, spec: PlatformSpec,
         precision: str = "i8", include_io: bool = True) -> LayoutReport:
    """Plan a concrete graph + table: weights and code payload to read-only
    memory, the activation arena and the raw input frame to live memory."""
    weights = model_size_bytes(g, precision)
    table_bytes = table.payload_bytes() if table is not None else 0
    element_bytes = 4 if precision == "f32" else 2 if precision == "f16" else 1
    act = peak_activation(g, element_bytes)
    io = _elem(g.input_shape) if include_io else 0
    return plan_sizes(weights, table_bytes, act, spec, io_bytes=io)


def max_classes(spec: PlatformSpec, g: LayerGraph, d: int,
                bytes_per_value: int = 1, precision: str = "i8") -> int:
    """Largest class count whose d-wide code payload still fits after the
    model is placed. The plan without any table must already be feasible."""
    if d < 1 or bytes_per_value < 1:
        raise ValueError("dimension and bytes-per-value must be >= 1")
    base = plan(g, None, spec, precision=precision)
    if not base.feasible:
        raise InfeasibleBase(
            f"model alone does not fit on {spec.name}: {', '.join(base.violations)}"
        )
    best = 0
    for region in _READONLY_ORDER:
        slack = base.slack_bytes(region) if spec.capacity(region) > 0 else 0
        best = max(best, slack // (d * bytes_per_value))
    return int(best)


# -- platform spec files -----------------------------------------------------

def parse_size(text: str) -> int:
    """'512KB' / '2MB' / '1048576' -> bytes (KB/MB are binary units)."""
    m = _SIZE_RE.match(text)
    if not m:
        raise ValueError(f"cannot parse size {text!r}")
    value, unit = float(m.group(1)), (m.group(2) or "B").upper()
    mult = {"B": 1, "KB": 1024, "MB": 1024 * 1024}[unit]
    out = value * mult
    if out != int(out):
        raise ValueError(f"size {text!r} is not a whole number of bytes")
    return int(out)


def parse_platform(text: str, fallback_name: str = "unnamed") -> PlatformSpec:
    """Parse the key=value platform format ('#' starts a comment)."""
    fields: dict = {"name": fallback_name}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "name":
            fields["name"] = value
        elif key == "clock_mhz":
            fields["clock_mhz"] = int(value)
        elif key in REGION_NAMES:
            fields[f"{key}_bytes"] = parse_size(value)
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    if "flash_bytes" not in fields or "sram_bytes" not in fields:
        raise ValueError("platform file must define at least flash and sram")
    return PlatformSpec(**fields)


def load_platform_file(path) -> PlatformSpec:
    stem = os.path.splitext(os.path.basename(path))[0]
    with open(path, encoding="utf-8") as fh:
        return parse_platform(fh.read(), fallback_name=stem)


def builtin_platform_names() -> list[str]:
    root = resources.files("tinyshot") / "platforms"
    return sorted(p.name[: -len(".platform")] for p in root.iterdir()
                  if p.name.endswith(".platform"))


def load_platform(name: str) -> PlatformSpec:
    """Load a bundled platform by name (see builtin_platform_names())."""
    ref = resources.files("tinyshot") / "platforms" / f"{name}.platform"
    try:
        text = ref.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise KeyError(
            f"unknown platform {name!r}; available: {', '.join(builtin_platform_names())}"
        ) from None
    return parse_platform(text, fallback_name=name)


# -- report rendering --------------------------------------------------------

def _kb(n: int) -> str:
    return f"{n / 1024:.1f} KB" if n % 1024 else f"{n // 1024} KB"


def ascii_layout(report: LayoutReport, width: int = 34) -> str:
    """Fixed-width panel per used region, mirroring the layout figure."""
    lines: list[str] = []
    for region, cap in report.platform.regions().items():
        entries = [(p.item, p.size_bytes) for p in report.placements
                   if p.region == region]
        used = sum(s for _, s in entries)
        lines.append(f"{region} ({_kb(cap)})")
        lines.append("+" + "-" * width + "+")
        for item, size in entries:
            body = f" {item:<{width - 13}}{_kb(size):>11} "
            lines.append("|" + body + "|")
        free = cap - used
        body = f" {'free':<{width - 13}}{_kb(free):>11} "
        lines.append("|" + body + "|")
        lines.append("+" + "-" * width + "+")
        lines.append("")
    if report.violations:
        lines.append("UNPLACED: " + ", ".join(report.violations))
    return "\n".join(lines).rstrip() + "\n"
