"""Loopback completion server speaking the framed stdin/stdout protocol.

Run as ``python3 -m semocc.backend_server --backend heuristic``. The
``--fault`` options exist to exercise client error handling.
"""

import argparse
import sys
import time

import numpy as np

from .completion import HeuristicBackend, NullBackend, encode_frame, read_frame
from .submap import SubMapAnchor, SubMapGrid


def _side(n_bytes: int) -> int:
    side = round((n_bytes / 5) ** (1 / 3))
    if 5 * side ** 3 != n_bytes:
        raise ValueError(f"payload of {n_bytes} bytes is not a cubic grid dump")
    return side


def serve(backend, fault=None, delay=0.0, stdin=None, stdout=None) -> int:
    fin = (stdin or sys.stdin.buffer).fileno()
    out = stdout or sys.stdout.buffer
    while True:
        payload = read_frame(fin)
        if not payload:
            return 0
        grid = SubMapGrid.from_bytes(payload, SubMapAnchor((0, 0, 0), _side(len(payload))))
        reply = backend.complete(grid).to_bytes()
        if fault == "bad-label":
            reply = bytes([200]) + reply[1:]
        elif fault == "bad-magic":
            out.write(b"NOTMAGIC" + encode_frame(reply)[8:])
            out.flush()
            continue
        elif fault == "truncate":
            reply = reply[: len(reply) // 2]
        if fault == "sleep" or delay:
            time.sleep(delay or 5.0)
        out.write(encode_frame(reply))
        out.flush()


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--backend", choices=("null", "heuristic"), default="heuristic")
    p.add_argument("--fault", choices=("bad-label", "bad-magic", "truncate", "sleep"))
    p.add_argument("--delay", type=float, default=0.0, help="seconds to wait per reply")
    args = p.parse_args(argv)
    backend = HeuristicBackend() if args.backend == "heuristic" else NullBackend()
    np.seterr(all="ignore")
    return serve(backend, args.fault, args.delay)


if __name__ == "__main__":
    sys.exit(main())
