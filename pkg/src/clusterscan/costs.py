"""Analytic cost accounting for the restoration network.

:func:`count_model` derives per-layer counts from layer specs and an input shape
without executing anything. :func:`instrumented_ledger` runs a real forward pass
under :class:`~clusterscan.instrument.RuntimeCounter`; the two must agree
exactly. Conventions are those of :mod:`clusterscan.instrument`
(FLOPs = 2 * MACs + 4 * transcendentals).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .autodiff import no_grad
from .blocks import CCSMBlock, DecoderBlock, FFNBlock, SCFMBlock
from .instrument import RuntimeCounter
from .network import Model, check_extents, forward, param_count
from .scan import scan_cost, scan_transcendentals

PUBLISHED_PARAMS = 2.71e6
PUBLISHED_FLOPS_64 = 0.407e9
PARAM_BAND = (2.0e6, 3.4e6)
FLOPS_BAND_64 = (0.3e9, 0.7e9)


class CostClaimError(AssertionError):
    """A scaling property expected of the cost ledger does not hold."""


@dataclass
class CostEntry:
    macs: int = 0
    transcendentals: int = 0
    params: int = 0
    activations: int = 0

    @property
    def flops(self) -> int:
        return 2 * self.macs + 4 * self.transcendentals


@dataclass
class CostLedger:
    entries: dict = field(default_factory=dict)

    def add(self, path: str, macs=0, transcendentals=0, params=0, activations=0) -> None:
        e = self.entries.setdefault(path, CostEntry())
        e.macs += int(macs)
        e.transcendentals += int(transcendentals)
        e.params += int(params)
        e.activations += int(activations)

    def _sum(self, attr, suffix=None):
        return sum(
            getattr(e, attr)
            for k, e in self.entries.items()
            if suffix is None or k == suffix or k.endswith("." + suffix)
        )

    @property
    def macs(self) -> int:
        return self._sum("macs")

    @property
    def transcendentals(self) -> int:
        return self._sum("transcendentals")

    @property
    def flops(self) -> int:
        return self._sum("flops")

    @property
    def params(self) -> int:
        return self._sum("params")

    def flops_of(self, suffix: str) -> int:
        """Total FLOPs of entries whose last path component is ``suffix``."""
        return self._sum("flops", suffix)

    def op_counts(self) -> dict:
        """``{path: (macs, transcendentals)}`` for entries with any work."""
        return {
            k: (e.macs, e.transcendentals)
            for k, e in self.entries.items()
            if e.macs or e.transcendentals
        }

    def table(self) -> str:
        width = max([len(k) for k in self.entries] + [8])
        lines = [f"{'operator':<{width}}  {'MACs':>14}  {'FLOPs':>14}  {'params':>10}  {'activations':>12}"]
        for k in sorted(self.entries):
            e = self.entries[k]
            lines.append(f"{k:<{width}}  {e.macs:>14,}  {e.flops:>14,}  {e.params:>10,}  {e.activations:>12,}")
        lines.append(f"{'TOTAL':<{width}}  {self.macs:>14,}  {self.flops:>14,}  {self.params:>10,}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Analytic counts
# ---------------------------------------------------------------------------


def _norm(B, C, P):
    return B * P + B * C * P


def _ccsm(led: CostLedger, path: str, blk: CCSMBlock, B: int, H: int, W: int) -> None:
    C, P = blk.channels, H * W
    n, N = blk.aggregator.n, blk.scan.N
    agg, sc = blk.aggregator, blk.scan
    act = B * C * P
    led.add(f"{path}.norm_in", transcendentals=_norm(B, C, P),
            params=blk.norm_in.param_count(), activations=act)
    led.add(f"{path}.in_mlp", macs=blk.in_mlp.macs(B, H, W),
            params=blk.in_mlp.param_count(), activations=act)
    led.add(f"{path}.dwconv", macs=blk.dwconv.macs(B, H, W), transcendentals=act,
            params=blk.dwconv.param_count(), activations=act)
    led.add(f"{path}.gate", macs=blk.gate_mlp.macs(B, H, W), transcendentals=act,
            params=blk.gate_mlp.param_count(), activations=act)
    led.add(
        f"{path}.fa",
        macs=B * (2 * n * C * P + 2 * C * C * n),
        transcendentals=B * (P + n + 3 * n * P + C * n),
        params=agg.value_proj.param_count() + agg.pixel_proj.param_count() + 2,
        activations=B * (2 * n * P + C * n),
    )
    led.add(
        f"{path}.s6",
        macs=B * scan_cost(C, n, N),
        transcendentals=B * scan_transcendentals(C, n, N),
        params=(sc.A_log.size + sc.D_skip.size + sc.B_proj.param_count()
                + sc.C_proj.param_count() + sc.delta_proj.param_count()),
        activations=B * C * n,
    )
    led.add(f"{path}.sd", macs=B * C * n * P, transcendentals=B * 2 * n * P,
            params=2, activations=B * (n * P + C * P))
    led.add(f"{path}.norm_f", transcendentals=_norm(B, C, P),
            params=blk.norm_f.param_count(), activations=act)
    led.add(f"{path}.out", macs=blk.out_proj.macs(B, H, W),
            params=blk.out_proj.param_count(), activations=act)


def _scfm(led: CostLedger, path: str, blk: SCFMBlock, B: int, H: int, W: int) -> None:
    C, P = blk.fuse_s.in_channels, H * W
    led.add(f"{path}.spatial", macs=blk.spatial_conv.macs(B, H, W), transcendentals=B * P,
            params=blk.spatial_conv.param_count(), activations=B * P)
    led.add(
        f"{path}.channel",
        macs=blk.reduce_conv.macs(B, H, W) + blk.expand_conv.macs(B, H, W),
        transcendentals=B * C,
        params=blk.reduce_conv.param_count() + blk.expand_conv.param_count(),
        activations=B * C,
    )
    led.add(f"{path}.fuse", macs=blk.fuse_s.macs(B, H, W) + blk.fuse_c.macs(B, H, W),
            params=blk.fuse_s.param_count() + blk.fuse_c.param_count(), activations=B * C * P)


def _ffn(led: CostLedger, path: str, blk: FFNBlock, B: int, H: int, W: int) -> None:
    C, P = blk.expand.in_channels, H * W
    hidden = blk.expand.out_channels
    led.add(f"{path}.norm", transcendentals=_norm(B, C, P),
            params=blk.norm.param_count(), activations=B * C * P)
    led.add(f"{path}.expand", macs=blk.expand.macs(B, H, W),
            params=blk.expand.param_count(), activations=B * hidden * P)
    led.add(f"{path}.dwconv", macs=blk.dwconv.macs(B, H, W), transcendentals=B * hidden * P,
            params=blk.dwconv.param_count(), activations=B * hidden * P)
    led.add(f"{path}.contract", macs=blk.contract.macs(B, H, W),
            params=blk.contract.param_count(), activations=B * C * P)


def _decoder(led, path, blk: DecoderBlock, B, H, W):
    _ccsm(led, f"{path}.ccsm", blk.ccsm, B, H, W)
    _scfm(led, f"{path}.scfm", blk.scfm, B, H, W)
    _ffn(led, f"{path}.ffn", blk.ffn, B, H, W)


def _conv(led, path, spec, B, H, W):
    ho, wo = spec.output_hw(H, W)
    led.add(path, macs=spec.macs(B, H, W), params=spec.param_count(),
            activations=B * spec.out_channels * ho * wo)


def count_model(model: Model, input_shape) -> CostLedger:
    """Per-operator analytic counts for one forward pass on ``input_shape``."""
    B, _, H, W = (int(s) for s in input_shape)
    check_extents(model.config, (B, 3, H, W))
    cfg = model.config
    led = CostLedger()
    _conv(led, "stem", model.stem, B, H, W)
    sizes = [(H >> i, W >> i) for i in range(cfg.levels)]
    for i, blocks in enumerate(model.encoder):
        h, w = sizes[i]
        for j, blk in enumerate(blocks):
            _ffn(led, f"encoder.level{i + 1}.block{j + 1}", blk, B, h, w)
        if i < cfg.levels - 1:
            _conv(led, f"encoder.level{i + 1}.down", model.downs[i], B, h, w)
    h, w = sizes[-1]
    for j, blk in enumerate(model.bottleneck):
        _decoder(led, f"bottleneck.block{j + 1}", blk, B, h, w)
    for i in reversed(range(cfg.levels)):
        h, w = sizes[i]
        if i < cfg.levels - 1:
            hs, ws = sizes[i + 1]
            _conv(led, f"decoder.level{i + 1}.up", model.ups[i], B, hs, ws)
        _conv(led, f"decoder.level{i + 1}.fuse", model.fuses[i], B, h, w)
        for j, blk in enumerate(model.decoder[i]):
            _decoder(led, f"decoder.level{i + 1}.block{j + 1}", blk, B, h, w)
    for j, blk in enumerate(model.refine):
        _decoder(led, f"refine.block{j + 1}", blk, B, H, W)
    _conv(led, "head", model.head, B, H, W)
    return led


def instrumented_ledger(model: Model, input_shape, seed: int = 0) -> CostLedger:
    """Counts gathered by executing a forward pass with the runtime counter on."""
    rng = np.random.default_rng(seed)
    image = rng.random(tuple(int(s) for s in input_shape))
    with no_grad(), RuntimeCounter() as counter:
        forward(model, image)
    led = CostLedger()
    for path, (macs, trans) in counter.entries().items():
        led.add(path, macs=macs, transcendentals=trans)
    return led


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("H", "W", "total_flops", "s6_flops", "assignment_flops")


@dataclass
class Report:
    columns: tuple
    rows: list

    def text(self) -> str:
        widths = [max(len(str(c)), *(len(_fmt(r[i])) for r in self.rows)) for i, c in enumerate(self.columns)]
        out = ["  ".join(f"{c:>{w}}" for c, w in zip(self.columns, widths))]
        for r in self.rows:
            out.append("  ".join(f"{_fmt(v):>{w}}" for v, w in zip(r, widths)))
        return "\n".join(out) + "\n"

    def delimited(self, sep: str = "\t") -> str:
        buf = io.StringIO()
        buf.write(sep.join(self.columns) + "\n")
        for r in self.rows:
            buf.write(sep.join(_fmt(v) for v in r) + "\n")
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def parse_delimited(text: str, sep: str = "\t") -> Report:
    lines = [ln for ln in text.splitlines() if ln]
    columns = tuple(lines[0].split(sep))
    rows = []
    for ln in lines[1:]:
        rows.append(tuple(float(v) if "." in v or "e" in v or v == "inf" else int(v) for v in ln.split(sep)))
    return Report(columns, rows)


def scaling_report(model: Model, shapes) -> Report:
    """Total, scan and assignment FLOPs for each ``(H, W)`` in ``shapes``.

    Raises :class:`CostClaimError` unless the scan column is constant and the
    assignment column is exactly proportional to ``H * W``.
    """
    rows = []
    for shape in shapes:
        h, w = (shape, shape) if isinstance(shape, int) else shape
        led = count_model(model, (1, 3, h, w))
        rows.append((h, w, led.flops, led.flops_of("s6"), led.flops_of("sd")))
    h0, w0, _, s60, a0 = rows[0]
    for h, w, _, s6, a in rows[1:]:
        if s6 != s60:
            raise CostClaimError(f"scan FLOPs vary with image size: {s60} vs {s6}")
        if a * h0 * w0 != a0 * h * w:
            raise CostClaimError(f"assignment FLOPs not linear in H*W: {a0} at {h0}x{w0}, {a} at {h}x{w}")
    return Report(REPORT_COLUMNS, rows)


def fa_macs(channels: int, pixels: int, n: int) -> int:
    """Similarity, gated pooling and centroid projections for one feature map."""
    return 2 * n * channels * pixels + 2 * channels * channels * n


def sd_macs(channels: int, pixels: int, n: int) -> int:
    return channels * n * pixels


def strategy_compare(C: int, H: int, W: int, n: int, N: int, free_assignment: bool = False) -> dict:
    """MACs of a serial scan over all ``H*W`` pixels against the cluster-centric path."""
    if min(C, H, W, n, N) < 1:
        raise ValueError("all dimensions must be positive")
    hw = H * W
    full = scan_cost(C, hw, N)
    assignment = 0 if free_assignment else fa_macs(C, hw, n)
    diffusion = 0 if free_assignment else sd_macs(C, hw, n)
    s6 = scan_cost(C, n, N)
    cluster = assignment + s6 + diffusion
    return {
        "C": C, "H": H, "W": W, "n": n, "N": N,
        "full_pixel_macs": full,
        "assignment_macs": assignment,
        "cluster_s6_macs": s6,
        "diffusion_macs": diffusion,
        "cluster_macs": cluster,
        "ratio": cluster / full,
    }


STRATEGY_COLUMNS = ("C", "H", "W", "n", "N", "full_pixel_macs", "assignment_macs",
                    "cluster_s6_macs", "diffusion_macs", "cluster_macs", "ratio")


def strategy_table(rows: list) -> Report:
    return Report(STRATEGY_COLUMNS, [tuple(r[c] for c in STRATEGY_COLUMNS) for r in rows])


def published_comparison(model: Model) -> dict:
    led = count_model(model, (1, 3, 64, 64))
    params = param_count(model)
    return {
        "params": params,
        "published_params": PUBLISHED_PARAMS,
        "params_in_band": PARAM_BAND[0] <= params <= PARAM_BAND[1],
        "flops_64": led.flops,
        "macs_64": led.macs,
        "published_flops_64": PUBLISHED_FLOPS_64,
        "flops_in_band": FLOPS_BAND_64[0] <= led.flops <= FLOPS_BAND_64[1],
    }
