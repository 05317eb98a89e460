"""Collects acceptance outcomes and prints one line per criterion at the end."""

_results: dict = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        entry = _results.setdefault(props["criterion"], {"ok": True, "details": []})
        entry["ok"] &= report.outcome == "passed"
        if props.get("detail"):
            entry["details"].append(props["detail"])


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_results):
        r = _results[k]
        detail = "; ".join(r["details"])
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if r['ok'] else 'FAIL'}"
                                    + (f"  ({detail})" if detail else ""))
