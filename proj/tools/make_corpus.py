#!/usr/bin/env python3
"""Assemble a plain-English character corpus from installed Python docstrings.

Walks the standard library and a few scientific packages, parses each source
file with ``ast`` (nothing is imported), keeps long docstrings, drops doctest
lines and non-ASCII characters, and concatenates until the byte budget is met.
The traversal order is sorted so the output is deterministic for a given
installation.
"""
import argparse
import ast
import pathlib
import re
import sys

ROOTS = [
    "/usr/lib/python3.10",
    "/usr/local/lib/python3.10/dist-packages/numpy",
    "/usr/local/lib/python3.10/dist-packages/scipy",
    "/usr/local/lib/python3.10/dist-packages/sklearn",
    "/usr/local/lib/python3.10/dist-packages/pandas",
    "/usr/local/lib/python3.10/dist-packages/matplotlib",
]

SKIP_PARTS = {"test", "tests", "site-packages", "dist-packages", "idlelib", "lib2to3"}


def docstrings(path):
    try:
        tree = ast.parse(path.read_text(encoding="utf-8"))
    except (SyntaxError, UnicodeDecodeError, ValueError):
        return
    for node in ast.walk(tree):
        if isinstance(node, (ast.Module, ast.FunctionDef, ast.ClassDef, ast.AsyncFunctionDef)):
            doc = ast.get_docstring(node)
            if doc and len(doc) >= 200:
                yield doc


def clean(doc):
    keep = []
    for line in doc.splitlines():
        s = line.strip()
        if s.startswith((">>>", "...")) or re.fullmatch(r"[-=~^*]{3,}", s):
            continue
        keep.append(line.rstrip())
    text = "\n".join(keep)
    text = text.encode("ascii", "ignore").decode("ascii")
    text = re.sub(r"[^\x20-\x7e\n]", "", text)
    text = re.sub(r"\n{3,}", "\n\n", text)
    return text.strip() + "\n\n"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--bytes", type=int, default=3_000_000)
    args = ap.parse_args()
    out = []
    total = 0
    for root in ROOTS:
        base = pathlib.Path(root)
        if not base.exists():
            continue
        for path in sorted(base.rglob("*.py")):
            rel = path.relative_to(base).parts
            if SKIP_PARTS.intersection(rel):
                continue
            for doc in docstrings(path):
                chunk = clean(doc)
                out.append(chunk)
                total += len(chunk)
                if total >= args.bytes:
                    break
            if total >= args.bytes:
                break
        if total >= args.bytes:
            break
    pathlib.Path(args.out).write_text("".join(out), encoding="ascii")
    print(f"wrote {total} bytes to {args.out}", file=sys.stderr)


if __name__ == "__main__":
    main()
