"""Collects one verdict line per acceptance criterion for the terminal summary."""

import functools

LINES: dict[int, str] = {}


def verdict(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    LINES[number] = line
    print(line)
    assert ok, line


def criterion(number: int, name: str):
    """Record a FAIL line if the wrapped test raises before reaching its verdict."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except Exception as exc:
                if number not in LINES:
                    LINES[number] = f"criterion {number:2d} FAIL  {name}: {type(exc).__name__}: {exc}"
                raise

        return run

    return wrap
