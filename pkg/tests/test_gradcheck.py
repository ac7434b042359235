import numpy as np
import pytest

from clusterscan import cli, scan
from clusterscan.autodiff import parameter, record_op
from clusterscan.gradcheck import AUDITS, TOLERANCE, _scalarize, audit, run_audits


def _sabotaged_square(rng):
    x = parameter(rng.standard_normal((3, 4)))

    def make():
        # Forward x**2 with a backward missing its factor of two.
        return record_op("bad_square", x.data * x.data, (x,), lambda g: (g * x.data,))

    return _scalarize(rng, make, [x])


@pytest.fixture
def sabotaged(monkeypatch):
    monkeypatch.setitem(AUDITS, "bad_square", _sabotaged_square)
    return "bad_square"


@pytest.fixture
def broken_scan(monkeypatch):
    """Doubles the state-matrix gradient of the selective-scan kernel."""
    real = scan.record_op

    def tampered(name, data, parents, backward):
        def bw(g):
            grads = list(backward(g))
            grads[2] = 2 * grads[2]
            return tuple(grads)

        return real(name, data, parents, bw if name == "selective_scan" else backward)

    monkeypatch.setattr(scan, "record_op", tampered)


def test_registry_covers_every_module():
    for name in ("conv2d", "layer_norm", "fft2d", "similarity", "refine_centroids", "s6_scan",
                 "assign", "invert_weights", "sd_apply", "ccsm", "scfm", "ffn", "decoder_block", "loss", "network"):
        assert name in AUDITS


@pytest.mark.parametrize("bits", [64, 32])
def test_every_audit_passes(bits):
    results = run_audits(probes=3, bits=bits)
    assert len(results) == len(AUDITS)
    bad = [r.line() for r in results if not r.passed]
    assert not bad, bad
    assert all(r.tolerance == TOLERANCE[np.dtype(f"float{bits}")] for r in results)


def test_sabotaged_operator_fails_by_name(sabotaged):
    (result,) = run_audits(probes=5, names=[sabotaged])
    assert not result.passed and result.worst > 0.1
    assert result.line().startswith("FAIL") and sabotaged in result.line()


def test_broken_scan_gradient_is_caught(broken_scan):
    results = {r.name: r for r in run_audits(probes=5, names=["selective_scan", "s6_scan", "conv2d"])}
    assert not results["selective_scan"].passed and not results["s6_scan"].passed
    assert results["conv2d"].passed


def test_cli_names_failing_operator(sabotaged, capsys):
    assert cli.main(["gradcheck", "--only", f"add,{sabotaged}", "--probes", "2"]) == 3
    out = capsys.readouterr().out
    assert f"FAIL  {sabotaged}" in out and "PASS  add" in out
    assert out.strip().endswith(f"gradcheck FAILED (64-bit): {sabotaged}")


def test_single_probe_per_operator(capsys):
    assert cli.main(["gradcheck", "--probes", "1", "--only", "matmul,ccsm"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert all("(tol 1e-05, 1 probes)" in ln for ln in lines[:2])


def test_unknown_audit_is_usage_error(capsys):
    assert cli.main(["gradcheck", "--only", "nope"]) == 1


def test_precision_is_restored():
    from clusterscan.autodiff import get_dtype

    run_audits(probes=1, bits=32, names=["add"])
    assert get_dtype() == np.float64


def test_custom_tolerance_and_probes():
    r = audit("matmul", AUDITS["matmul"], probes=4, tolerance=1e-9)
    assert r.probes == 4 and r.tolerance == 1e-9 and r.passed
