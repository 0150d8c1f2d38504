#!/usr/bin/env python3
"""Reference scorer backend for the newline-delimited JSON protocol.

score(q, i) = q + i / 1000. Flags exist so tests can exercise failure paths:
  --version N       answer the handshake with protocol version N
  --die-after N     exit without replying after N score requests
  --garbage         reply to score requests with a malformed line
"""
import argparse
import json
import sys


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--version", type=int, default=1)
    ap.add_argument("--die-after", type=int, default=-1)
    ap.add_argument("--garbage", action="store_true")
    args = ap.parse_args()

    served = 0
    for line in sys.stdin:
        req = json.loads(line)
        op = req.get("op")
        if op == "hello":
            reply = {"op": "hello", "version": args.version, "name": "echo-scorer"}
        elif op == "score":
            if served == args.die_after:
                return 3
            served += 1
            if args.garbage:
                sys.stdout.write("not json\n")
                sys.stdout.flush()
                continue
            q = req["query_id"]
            reply = {"op": "score", "scores": [q + i / 1000.0 for i in req["item_ids"]]}
        elif op == "shutdown":
            return 0
        else:
            return 2
        sys.stdout.write(json.dumps(reply) + "\n")
        sys.stdout.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
