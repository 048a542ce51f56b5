"""Regenerate the golden --help texts: python3 tests/make_golden.py"""

import contextlib
import io
from pathlib import Path

from umsn.cli import COMMANDS, main

HERE = Path(__file__).parent / "golden"


def help_text(argv):
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main(argv + ["--help"])
    assert code == 0
    return buf.getvalue()


if __name__ == "__main__":
    HERE.mkdir(exist_ok=True)
    (HERE / "umsn.txt").write_text(help_text([]))
    for cmd in COMMANDS:
        (HERE / f"{cmd}.txt").write_text(help_text([cmd]))
