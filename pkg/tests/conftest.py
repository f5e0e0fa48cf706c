from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", derandomize=True, deadline=None, suppress_health_check=[HealthCheck.too_slow], print_blob=True
)
settings.load_profile("repo")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not getattr(mod, "REPORT", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.REPORT):
        parts = mod.REPORT[n]
        verdict = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {verdict}  " + "; ".join(d for _, d in parts))
