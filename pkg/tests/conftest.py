import numpy as np

from taylortd import autodiff as ad


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def check_node_gradients(fn, values, rng, eps=1e-5):
    """Max relative error between ``grad`` and central differences of ``sum(fn(*nodes) * R)``."""
    nodes = [ad.param(v) for v in values]
    out = fn(*nodes)
    R = rng.standard_normal(out.shape)
    grads = ad.grad(ad.sum(out * R), nodes)
    worst = 0.0
    for i, v in enumerate(values):
        def f(x, i=i):
            args = [ad.param(w) for w in values]
            args[i] = ad.param(x)
            return float(np.sum(fn(*args).value * R))

        fd = ad.finite_difference_gradient(f, v, eps)
        worst = max(worst, rel_err(grads[i], fd))
    return worst


# ---------------------------------------------------------------------------
# acceptance criterion reporting: one PASS/FAIL line per criterion

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when not in ("setup", "call"):
        return
    number, title = marker.args
    failed = call.excinfo is not None
    if call.when == "call" or failed:
        _CRITERIA[number] = (title, "FAIL" if failed else "PASS", call.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, outcome, seconds = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {outcome}  {title}  ({seconds:.1f} s)")
