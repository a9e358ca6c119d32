import re

CRITERIA = {
    "01": "gradient correctness vs central finite differences",
    "02": "loss unit oracles and pinball minimizer",
    "03": "non-crossing latent quantiles",
    "04": "leakage audit (bitwise TRAIN-only fits, no early TEST reads)",
    "05": "coordinate-descent reassignment properties",
    "06": "fallback dominance and full-fallback collapse",
    "07": "synthetic heterogeneity recovery (select-k, ARI, gains)",
    "08": "weak-heterogeneity safety (alpha = 0)",
    "09": "interval calibration",
    "10": "paper-scale structure (loader, x100 report, directional claims)",
}

_outcomes: dict[str, set] = {}


def pytest_runtest_logreport(report):
    match = re.search(r"test_criterion_(\d\d)", report.nodeid)
    if not match:
        return
    crit = match.group(1)
    if report.when == "call" or (report.when == "setup" and report.failed):
        _outcomes.setdefault(crit, set()).add(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for crit in sorted(CRITERIA):
        if crit not in _outcomes:
            continue
        outcomes = _outcomes[crit]
        status = "PASS" if outcomes == {"passed"} else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {crit}: {CRITERIA[crit]}")
