"""Shared pytest hooks: the acceptance suite reports one line per criterion."""

# criterion number -> (status, detail); filled in by test_acceptance.py
ACCEPTANCE = {}


def record(k, ok, detail):
    ACCEPTANCE[k] = ("PASS" if ok else "FAIL", detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'} {detail}", flush=True)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, 11):
        status, detail = ACCEPTANCE.get(k, ("NOT RUN", ""))
        terminalreporter.write_line(f"criterion {k:2d}: {status:7s} {detail}")
