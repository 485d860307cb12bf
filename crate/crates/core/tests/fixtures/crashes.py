#!/usr/bin/env python3
# h(x) = x_1, but exits as soon as it sees a point with x_1 > 2.5
import sys

for header in sys.stdin:
    _, n, d = header.split()
    rows = [float(sys.stdin.readline().split()[0]) for _ in range(int(n))]
    for x in rows:
        if x > 2.5:
            sys.stdout.flush()
            sys.exit(1)
        sys.stdout.write(repr(x) + "\n")
    sys.stdout.flush()
