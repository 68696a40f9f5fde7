#!/usr/bin/env python3
"""Build the ~1 MB English smoke corpus from Python standard-library docstrings.

One prose paragraph per line. Paragraphs that look like code (doctests, low
letter ratio) or are very short are dropped. Output is deterministic for a
given Python installation.
"""
import argparse
import ast
import pathlib
import re
import sys

SKIP = {"test", "tests", "idle_test", "lib2to3", "site-packages", "dist-packages"}


def paragraphs(root):
    for path in sorted(root.rglob("*.py")):
        if SKIP.intersection(path.parts):
            continue
        try:
            tree = ast.parse(path.read_text(encoding="utf-8"))
        except (SyntaxError, UnicodeDecodeError, ValueError):
            continue
        for node in ast.walk(tree):
            if not isinstance(node, (ast.Module, ast.FunctionDef, ast.ClassDef, ast.AsyncFunctionDef)):
                continue
            doc = ast.get_docstring(node)
            if not doc:
                continue
            for para in re.split(r"\n\s*\n", doc):
                text = " ".join(para.split())
                if len(text) < 60 or ">>>" in text:
                    continue
                letters = sum(c.isalpha() or c == " " for c in text)
                if letters / len(text) >= 0.85:
                    yield text


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=pathlib.Path)
    ap.add_argument("--stdlib", type=pathlib.Path,
                    default=pathlib.Path(sys.prefix) / "lib" / f"python{sys.version_info.major}.{sys.version_info.minor}")
    ap.add_argument("--bytes", type=int, default=1_000_000)
    args = ap.parse_args()
    written = 0
    with args.out.open("w", encoding="utf-8") as f:
        for text in paragraphs(args.stdlib):
            size = len(text.encode("utf-8")) + 1
            if written + size > args.bytes:
                break
            f.write(text + "\n")
            written += size
    print(f"wrote {written} bytes to {args.out}")


if __name__ == "__main__":
    main()
