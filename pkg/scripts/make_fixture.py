"""Build the bundled ~1 MB English text fixture from standard-library docstrings.

The output is committed; rerunning on another Python version may differ.
"""

import argparse
import ast
import sys
import sysconfig
from pathlib import Path


def docstrings(root: Path):
    for path in sorted(root.rglob("*.py")):
        if any(part in ("test", "tests", "idlelib", "site-packages", "lib2to3") for part in path.parts):
            continue
        try:
            tree = ast.parse(path.read_text(encoding="utf-8"))
        except (SyntaxError, UnicodeDecodeError, ValueError):
            continue
        for node in ast.walk(tree):
            if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
                doc = ast.get_docstring(node)
                if doc and len(doc) > 80 and doc.isascii():
                    yield doc.strip()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", type=Path)
    ap.add_argument("--bytes", type=int, default=1 << 20)
    args = ap.parse_args(argv)
    root = Path(sysconfig.get_paths()["stdlib"])
    seen, parts, size = set(), [], 0
    for doc in docstrings(root):
        if doc in seen:
            continue
        seen.add(doc)
        chunk = doc + "\n\n"
        parts.append(chunk)
        size += len(chunk)
        if size >= args.bytes:
            break
    text = "".join(parts)[: args.bytes]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(text, encoding="ascii")
    print(f"wrote {len(text)} bytes to {args.out}", file=sys.stderr)


if __name__ == "__main__":
    main()
