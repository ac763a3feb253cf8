"""Reference external objective speaking the line protocol.

Run as ``python -m addtree.reference_objective [--function jenatton|example]``.
"""

from __future__ import annotations

import argparse
import json
import sys

from .bench import BUILTINS, load_builtin_spec


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--function", choices=sorted(BUILTINS), default="jenatton")
    args = parser.parse_args(argv)
    builtin = BUILTINS[args.function]
    spec = load_builtin_spec(builtin.spec_name)
    for line in sys.stdin:
        if not line.strip():
            continue
        try:
            msg = json.loads(line)
            point = spec.point(msg["path"], msg["params"])
            out = {"y": builtin.evaluate(point, spec)}
        except Exception as exc:  # report, keep serving
            out = {"error": str(exc)}
        sys.stdout.write(json.dumps(out) + "\n")
        sys.stdout.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
