"""Error type shared by all modules.

Every failure the library can signal carries a stable, machine-readable
``code`` string (e.g. ``row-sum-violation``) next to the human-readable
message. The CLI maps these to exit status 1 and prints the code on stderr.
"""

from __future__ import annotations


class DistriblockError(Exception):
    """Domain error with a stable error-code string."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code

    def __str__(self) -> str:
        return f"[{self.code}] {super().__str__()}"
