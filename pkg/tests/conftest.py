import pytest

_RESULTS = {}

CRITERIA = {
    1: "size accounting reproduces the published totals",
    2: "mean |w| is the L2-optimal binarization scale",
    3: "packed inference matches fake-quant matmul",
    4: "pack/unpack and file round-trips, corruption rejected",
    5: "gradient suite vs central differences",
    6: "MSE monotone in bits and block size",
    7: "desk-scale QAT experiments",
    8: "double-quantization rounding bound",
}


@pytest.fixture
def acceptance():
    """``record(criterion, ok, detail)``; a criterion passes only if every record does."""

    def record(criterion: int, ok: bool, detail: str) -> bool:
        _RESULTS.setdefault(criterion, []).append((bool(ok), detail))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        if k not in _RESULTS:
            terminalreporter.write_line(f"[SKIP] {k}. {CRITERIA[k]}: not run")
            continue
        entries = _RESULTS[k]
        status = "PASS" if all(ok for ok, _ in entries) else "FAIL"
        details = "; ".join(("" if ok else "FAILED ") + d for ok, d in entries)
        terminalreporter.write_line(f"[{status}] {k}. {CRITERIA[k]}: {details}")
