"""Collects one verdict line per acceptance criterion for the terminal summary."""
LINES: dict[int, str] = {}


def record(n: int, ok: bool | None, detail: str) -> None:
    verdict = "N/A " if ok is None else ("PASS" if ok else "FAIL")
    LINES[n] = f"criterion {n:2d}: {verdict}  {detail}"
