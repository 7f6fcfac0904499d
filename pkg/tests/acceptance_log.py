"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
LINES = []


def record(criterion: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    print(line)
    LINES.append(line)
    assert ok, line
