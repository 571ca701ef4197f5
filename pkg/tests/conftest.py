import numpy as np
import pytest


def naive_conv2d(x, w, b, pad):
    """Direct six-loop cross-correlation, stride 1."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    oh, ow = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    out = np.zeros((n, o, oh, ow))
    for bi in range(n):
        for oc in range(o):
            for y in range(oh):
                for xx in range(ow):
                    s = float(b[oc])
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                s += xp[bi, ci, y + i, xx + j] * w[oc, ci, i, j]
                    out[bi, oc, y, xx] = s
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split(".")[0])):
        verdict, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{verdict}] {key} {detail}")
