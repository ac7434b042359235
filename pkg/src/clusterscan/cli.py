"""Command-line entry point: ``clusterscan {restore,train-toy,gradcheck,bench,metrics}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.
Options may also come from ``--config FILE`` (``key = value`` lines, ``#``
comments); explicit flags override the file, and unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import checkpoint, costs
from .autodiff import ContractError, ShapeError, get_dtype, precision
from .gradcheck import AUDITS, network_audit, run_audits
from .imageio import ImageDataError, from_batch, read_image, to_batch, write_image
from .metrics import SSIM_WINDOW, format_psnr, psnr, ssim
from .network import NetworkConfig, build, forward, full_config, smoke_config
from .training import load_pairs, train_pairs

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
PRESETS = {"full": full_config, "smoke": smoke_config}
NETWORK_KEYS = {f.name: f for f in fields(NetworkConfig)}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def parse_config_text(text: str) -> dict:
    """``key = value`` lines into a dict of strings; blank lines and ``#`` comments ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce_network_value(key: str, value):
    if not isinstance(value, str):
        return value
    if key == "blocks_per_level":
        return tuple(int(v) for v in value.replace("[", "").replace("]", "").split(",") if v.strip())
    if key == "fft_loss_weight":
        return float(value)
    if key == "seed_policy":
        return value
    return int(value)


def network_config(preset: str, overrides: dict) -> NetworkConfig:
    values = {}
    for key, value in overrides.items():
        try:
            values[key] = _coerce_network_value(key, value)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {value!r}") from exc
    try:
        return PRESETS[preset](**values)
    except ContractError as exc:
        raise UsageError(f"invalid network config: {exc}") from exc


def _add_network_flags(p):
    p.add_argument("--preset", choices=sorted(PRESETS))
    for name in NETWORK_KEYS:
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, metavar="V")


def resolve(args, run_keys: tuple) -> tuple:
    """Merge the config file with flags; returns ``(run options, network overrides, preset)``."""
    file_values = {}
    if getattr(args, "config", None):
        try:
            file_values = parse_config_text(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
    known = set(run_keys) | set(NETWORK_KEYS) | {"preset"}
    unknown = sorted(set(file_values) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    merged = dict(file_values)
    for key in known:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    run = {k: merged[k] for k in run_keys if k in merged}
    net = {k: merged[k] for k in NETWORK_KEYS if k in merged}
    return run, net, merged.get("preset")


def _int(run, key, default):
    try:
        return int(run.get(key, default))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{key} must be an integer, got {run.get(key)!r}") from exc


def _float(run, key, default):
    try:
        return float(run.get(key, default))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{key} must be a number, got {run.get(key)!r}") from exc


def _precision_bits(run) -> int:
    value = str(run.get("precision", np.dtype(get_dtype()).itemsize * 8))
    if value not in ("32", "64"):
        raise UsageError(f"precision must be 32 or 64, got {value!r}")
    return int(value)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def pad_to_multiple(img: np.ndarray, multiple: int) -> tuple:
    """Symmetric reflection padding of ``[H, W, 3]`` at the bottom/right; returns ``(padded, (H, W))``."""
    h, w = img.shape[:2]
    ph, pw = -h % multiple, -w % multiple
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="symmetric"), (h, w)


def restore_image(model, img: np.ndarray, seed=None) -> np.ndarray:
    padded, (h, w) = pad_to_multiple(img, model.config.multiple)
    out = forward(model, to_batch(padded).astype(get_dtype()), seed=seed)
    return from_batch(out.data)[:h, :w]


def _load_checkpoint(path, expected=None):
    try:
        return checkpoint.load(path, expected)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    except (checkpoint.CheckpointFormatError, checkpoint.CheckpointMismatch) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _quality_report(a, b) -> list:
    lines = [f"PSNR {format_psnr(psnr(a, b))}"]
    if min(a.shape[:2]) >= SSIM_WINDOW:
        lines.append(f"SSIM {ssim(a, b):.6f}")
    else:
        lines.append("SSIM n/a (image smaller than the SSIM window)")
    return lines


def cmd_restore(args) -> int:
    run, net, preset = resolve(args, ("input", "output", "checkpoint", "seed", "reference", "precision"))
    for key in ("input", "output", "checkpoint"):
        if key not in run:
            raise UsageError(f"--{key} is required")
    with precision(_precision_bits(run)):
        expected = network_config(preset or "full", net) if (net or preset) else None
        model = _load_checkpoint(run["checkpoint"], expected)
        img = read_image(run["input"])
        seed = _int(run, "seed", 0) if "seed" in run else None
        out = restore_image(model, img, seed)
    write_image(run["output"], out)
    print(f"wrote {run['output']} ({out.shape[1]}x{out.shape[0]})")
    if "reference" in run:
        ref = read_image(run["reference"])
        restored = read_image(run["output"])
        if ref.shape != restored.shape:
            raise DataError(f"reference {ref.shape[:2]} and output {restored.shape[:2]} differ in size")
        print("\n".join(_quality_report(restored, ref)))
    return EXIT_OK


def cmd_train_toy(args) -> int:
    run, net, preset = resolve(args, ("data_dir", "steps", "crop", "out", "log", "seed", "lr", "precision"))
    for key in ("data_dir", "out"):
        if key not in run:
            raise UsageError(f"--{key.replace('_', '-')} is required")
    steps = _int(run, "steps", 1000)
    seed = _int(run, "seed", 0)
    if steps < 0:
        raise UsageError("steps must be non-negative")
    cfg = network_config(preset or "smoke", net)
    crop = _int(run, "crop", cfg.crop_size)
    if crop % cfg.multiple:
        raise UsageError(f"crop {crop} must be divisible by {cfg.multiple}")
    log_path = Path(run.get("log", str(run["out"]) + ".log"))
    with precision(_precision_bits(run)):
        pairs = load_pairs(run["data_dir"])
        model = build(cfg, seed=seed)
        log, _ = train_pairs(
            model, pairs, steps, crop=crop, seed=seed, lr0=_float(run, "lr", 5e-4), flips=not args.no_flip
        )
        checkpoint.save(model, run["out"])
    log_path.write_text(log.text(), encoding="utf-8")
    if log.losses:
        print(f"step {steps}: loss {log.losses[-1]:.6f}, PSNR {format_psnr(log.psnrs[-1])} dB")
    print(f"wrote {run['out']} and {log_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    run, net, preset = resolve(args, ("probes", "precision", "seed"))
    probes = _int(run, "probes", 10)
    if probes < 1:
        raise UsageError("probes must be at least 1")
    registry = dict(AUDITS)
    if net or preset:
        registry["network"] = network_audit(network_config(preset or "smoke", net))
    names = args.only.split(",") if args.only else None
    if names and any(n not in registry for n in names):
        raise UsageError(f"unknown audits: {[n for n in names if n not in registry]}")
    bits = _precision_bits(run)
    results = run_audits(probes, bits, names, registry, seed=_int(run, "seed", 0))
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradcheck FAILED ({bits}-bit): {', '.join(failed)}")
        return EXIT_VERIFY
    print(f"gradcheck passed: {len(results)} audits ({bits}-bit)")
    return EXIT_OK


def parse_shapes(text: str) -> list:
    shapes = []
    for item in str(text).split(","):
        item = item.strip().lower()
        if not item:
            continue
        try:
            h, w = (int(v) for v in item.split("x")) if "x" in item else (int(item), int(item))
        except ValueError as exc:
            raise UsageError(f"bad shape {item!r}; use N or HxW") from exc
        shapes.append((h, w))
    if not shapes:
        raise UsageError("no shapes given")
    return shapes


STRATEGY_SIDES = (16, 32, 64, 128, 256)


def _scaling_rows(model, shapes) -> tuple:
    """The scaling table, plus the claim failure message if its checks do not hold."""
    try:
        return costs.scaling_report(model, shapes), None
    except costs.CostClaimError as exc:
        rows = []
        for h, w in shapes:
            led = costs.count_model(model, (1, 3, h, w))
            rows.append((h, w, led.flops, led.flops_of("s6"), led.flops_of("sd")))
        return costs.Report(costs.REPORT_COLUMNS, rows), str(exc)


def cmd_bench(args) -> int:
    run, net, preset = resolve(args, ("shapes", "out"))
    shapes = parse_shapes(run.get("shapes", "64,128"))
    cfg = network_config(preset or "full", net)
    for h, w in shapes:
        if h % cfg.multiple or w % cfg.multiple:
            raise UsageError(f"shape {h}x{w} not divisible by {cfg.multiple}")
    model = build(cfg)
    failures = []
    report, problem = _scaling_rows(model, shapes)
    if problem:
        failures.append(problem)
    strategy = [costs.strategy_compare(cfg.embed_dim, s, s, cfg.centroids, cfg.state_dim) for s in STRATEGY_SIDES]
    ratios = [r["ratio"] for r in strategy]
    if any(b >= a for a, b in zip(ratios, ratios[1:])):
        failures.append("strategy ratio is not decreasing in H*W")
    strategy_report = costs.strategy_table(strategy)
    ledger = costs.count_model(model, (1, 3, *shapes[0]))

    print(report.text())
    print(strategy_report.text())
    lo, hi = costs.PARAM_BAND
    inside = lo <= ledger.params <= hi
    print(f"parameters: {ledger.params:,} (reference 2.71M, band [{lo / 1e6:.1f}M, {hi / 1e6:.1f}M]) "
          f"{'inside' if inside else 'OUTSIDE'}")
    if not inside:
        failures.append("parameter count outside band")
    if (64, 64) in shapes:
        led64 = costs.count_model(model, (1, 3, 64, 64))
        lo, hi = costs.FLOPS_BAND_64
        inside = lo <= led64.flops <= hi
        print(f"64x64 FLOPs: {led64.flops / 1e9:.4f}G, MACs {led64.macs / 1e9:.4f}G "
              f"(reference 0.407G, band [{lo / 1e9:.1f}G, {hi / 1e9:.1f}G]) {'inside' if inside else 'OUTSIDE'}")
        if not inside:
            failures.append("64x64 FLOPs outside band")
    if "out" in run:
        out = Path(run["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "scaling.txt").write_text(report.text(), encoding="utf-8")
        (out / "scaling.tsv").write_text(report.delimited(), encoding="utf-8")
        (out / "strategy.txt").write_text(strategy_report.text(), encoding="utf-8")
        (out / "strategy.tsv").write_text(strategy_report.delimited(), encoding="utf-8")
        (out / "ledger.txt").write_text(ledger.table() + "\n", encoding="utf-8")
        print(f"wrote tables to {out}")
    for f in failures:
        print(f"claim check failed: {f}")
    return EXIT_VERIFY if failures else EXIT_OK


def cmd_metrics(args) -> int:
    a, b = read_image(args.a), read_image(args.b)
    if a.shape != b.shape:
        raise DataError(f"extent mismatch: {a.shape[1]}x{a.shape[0]} vs {b.shape[1]}x{b.shape[0]}")
    print("\n".join(_quality_report(a, b)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clusterscan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("restore", help="restore one image with a checkpoint")
    p.add_argument("--input")
    p.add_argument("--output")
    p.add_argument("--checkpoint")
    p.add_argument("--reference", help="clean image; prints PSNR/SSIM of the output against it")
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=["32", "64"])
    p.add_argument("--config")
    _add_network_flags(p)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("train-toy", help="desk-scale training on <stem>_in/<stem>_gt pairs")
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--steps", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--log", help="loss log path (default: <out>.log)")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--no-flip", dest="no_flip", action="store_true", help="disable random flips")
    p.add_argument("--precision", choices=["32", "64"])
    p.add_argument("--config")
    _add_network_flags(p)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("gradcheck", help="finite-difference audits of every operator")
    p.add_argument("--probes", type=int)
    p.add_argument("--precision", choices=["32", "64"])
    p.add_argument("--seed", type=int)
    p.add_argument("--only", help="comma-separated audit names")
    p.add_argument("--config")
    _add_network_flags(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="analytic cost tables")
    p.add_argument("--shapes", help="comma-separated N or HxW (default 64,128)")
    p.add_argument("--out", help="directory for the text and tab-separated tables")
    p.add_argument("--config")
    _add_network_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("metrics", help="PSNR and SSIM between two images")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ImageDataError, ShapeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
