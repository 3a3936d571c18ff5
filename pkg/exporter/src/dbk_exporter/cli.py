"""`dbk-export --in DIR --out DIR`: batch-convert dumps, report per-file errors."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .convert import DumpSpec, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dbk-export",
        description="Convert RAW1 probability dumps (benign/ and adversarial/ "
        "subdirectories) into .dbk files plus a manifest.",
    )
    parser.add_argument("--in", dest="in_dir", required=True, help="dump directory")
    parser.add_argument("--out", dest="out_dir", required=True, help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    in_dir = Path(args.in_dir)
    if not in_dir.is_dir():
        sys.stderr.write(f"error code=missing-input message={in_dir} is not a directory\n")
        return 1
    report = export(DumpSpec(in_dir, Path(args.out_dir)))
    for path, code, message in report.failures:
        sys.stderr.write(f"error code={code} file={path} message={message}\n")
    sys.stdout.write(f"exported {len(report.exported)} file(s), {len(report.failures)} failure(s)\n")
    return 0 if report.ok else 1


if __name__ == "__main__":
    sys.exit(main())
