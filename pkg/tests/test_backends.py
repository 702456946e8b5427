"""Backend selection at import and the backend benchmark script."""

import os
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def _run(code, **env):
    full = {**os.environ, **env}
    return subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=full, check=True)


def test_env_var_forces_fallback():
    out = _run("from multidev.numerics import fft; print(fft.DEFAULT_BACKEND, sorted(fft.BACKENDS))",
               MULTIDEV_PURE_PYTHON="1")
    assert out.stdout.split()[0] == "python"
    assert "cython" not in out.stdout


def test_compiled_backend_is_default_when_built():
    out = _run("from multidev.numerics import fft; print(fft.DEFAULT_BACKEND, sorted(fft.BACKENDS))",
               MULTIDEV_PURE_PYTHON="0")
    if "cython" in out.stdout:
        assert out.stdout.split()[0] == "cython"


def test_benchmark_script_runs():
    script = ROOT / "benchmarks" / "bench_fft_backends.py"
    out = subprocess.run([sys.executable, str(script), "--sizes", "16", "--batch", "2", "--repeat", "1"],
                         capture_output=True, text=True, check=True)
    assert "python" in out.stdout
