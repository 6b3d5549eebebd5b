"""Scalar brute-force loss oracles, written as plain loops over rows and pairs."""

import math


def sqdist(a, b):
    return sum((float(p) - float(q)) ** 2 for p, q in zip(a, b))


def rep_instance_loop(y, yt):
    return sum(sqdist(yt[i], y[i]) for i in range(len(y)))


def rep_label_aware_loop(y, yt, labels):
    n, d = len(y), len(y[0])
    total = 0.0
    for i in range(n):
        partners = [j for j in range(n) if j != i and labels[j] == labels[i]]
        k = 1.0 / ((3 * len(partners) + 1) * d)
        s = sqdist(yt[i], y[i])
        for j in partners:
            s += sqdist(y[i], y[j]) + sqdist(yt[i], y[j]) + sqdist(y[i], yt[j])
        total += k * s
    return total


def cross_entropy_loop(logits, labels):
    total = 0.0
    for row, lab in zip(logits, labels):
        m = max(row)
        z = sum(math.exp(v - m) for v in row)
        total += -(row[lab] - m - math.log(z))
    return total / len(labels)
