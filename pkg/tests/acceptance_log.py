"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
LINES = []


def record(number: int, ok: bool, detail: str) -> bool:
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    LINES.append(line)
    print(line)
    return ok
