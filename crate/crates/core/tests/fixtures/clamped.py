#!/usr/bin/env python3
# h(x) = min(x_1, 1): no level above 1 is ever reached
import sys

for header in sys.stdin:
    _, n, d = header.split()
    out = []
    for _ in range(int(n)):
        x = float(sys.stdin.readline().split()[0])
        out.append(repr(min(x, 1.0)))
    sys.stdout.write("\n".join(out) + "\n")
    sys.stdout.flush()
