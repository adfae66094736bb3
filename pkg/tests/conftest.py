import re


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion, printed after the run."""
    lines = []
    for status, label in (("passed", "PASS"), ("failed", "FAIL"), ("error", "FAIL")):
        for rep in terminalreporter.stats.get(status, []):
            if "test_acceptance" not in rep.nodeid:
                continue
            if status != "error" and rep.when != "call":
                continue
            name = rep.nodeid.split("::")[-1]
            match = re.match(r"test_criterion_(\d+)_(.*)", name)
            if match:
                num, slug = match.groups()
                lines.append((int(num), f"acceptance criterion {num} ({slug.replace('_', ' ')}): {label}"))
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
