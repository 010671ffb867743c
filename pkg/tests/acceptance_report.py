"""Shared registry for the acceptance checks: each check records exactly one
pass/fail line here, and the terminal-summary hook in conftest prints them
after the run so the verdicts survive pytest's output capture."""

LINES = []


def record(name, ok, detail):
    LINES.append(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
