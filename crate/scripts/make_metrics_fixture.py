"""Writes the metrics fixture and its expected report.

The expected values are computed here from the textbook definitions and never
from the Rust code: exact rationals for the binned calibration errors, brute
force pair counting for AUROC and scikit-learn for average precision.
"""

import json
import math
from fractions import Fraction
from pathlib import Path

from sklearn.metrics import average_precision_score

OUT = Path(__file__).resolve().parent.parent / "fixtures" / "metrics"
BINS = 10

# (probabilities as decimal strings, label, mutual information)
TEST = [
    (("0.92", "0.05", "0.03"), 0, "0.010"),
    (("0.88", "0.07", "0.05"), 0, "0.020"),
    (("0.12", "0.83", "0.05"), 1, "0.015"),
    (("0.05", "0.15", "0.80"), 2, "0.030"),
    (("0.74", "0.16", "0.10"), 0, "0.050"),
    (("0.74", "0.20", "0.06"), 1, "0.070"),
    (("0.22", "0.71", "0.07"), 1, "0.060"),
    (("0.18", "0.13", "0.69"), 2, "0.040"),
    (("0.63", "0.27", "0.10"), 2, "0.110"),
    (("0.35", "0.58", "0.07"), 1, "0.090"),
    (("0.56", "0.30", "0.14"), 0, "0.080"),
    (("0.31", "0.14", "0.55"), 0, "0.120"),
    (("0.24", "0.52", "0.24"), 1, "0.100"),
    (("0.47", "0.33", "0.20"), 1, "0.140"),
    (("0.44", "0.41", "0.15"), 0, "0.130"),
    (("0.30", "0.27", "0.43"), 2, "0.160"),
    (("0.38", "0.36", "0.26"), 2, "0.150"),
    (("0.97", "0.02", "0.01"), 0, "0.005"),
    (("0.03", "0.95", "0.02"), 2, "0.008"),
    (("1.00", "0.00", "0.00"), 0, "0.000"),
]

OOD = [
    (("0.40", "0.35", "0.25"), "0.200"),
    (("0.72", "0.18", "0.10"), "0.090"),
    (("0.34", "0.33", "0.33"), "0.180"),
    (("0.51", "0.45", "0.04"), "0.170"),
]


def argmax(p):
    best = 0
    for c in range(1, len(p)):
        if p[c] > p[best]:
            best = c
    return best


def bin_of(conf):
    # equal-width bins over [0, 1], right-closed; zero goes to the first bin
    for b in range(BINS):
        if conf <= Fraction(b + 1, BINS):
            return b
    raise AssertionError(conf)


def calibration(items):
    bins = [[] for _ in range(BINS)]
    for conf, ok in items:
        bins[bin_of(conf)].append((conf, ok))
    n = len(items)
    ece, mce = Fraction(0), Fraction(0)
    for members in bins:
        if not members:
            continue
        k = len(members)
        acc = Fraction(sum(ok for _, ok in members), k)
        conf = sum(c for c, _ in members) / k
        gap = abs(acc - conf)
        ece += Fraction(k, n) * gap
        mce = max(mce, gap)
    return float(ece), float(mce)


def auroc(pos, neg):
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def aupr(pos, neg):
    return float(average_precision_score([1] * len(pos) + [0] * len(neg), pos + neg))


def entropy(p):
    return -sum(float(v) * math.log(float(v)) for v in p if v > 0)


def histogram(values):
    counts = [0] * BINS
    for v in values:
        counts[bin_of(v)] += 1
    return [c / len(values) for c in counts] if values else [0.0] * BINS


def prediction(p, y, mi):
    return {
        "mean": [float(v) for v in p],
        "conf": float(max(p)),
        "entropy": entropy(p),
        "mi": float(mi),
        "y": y,
    }


def main():
    test = [([Fraction(v) for v in p], y, Fraction(mi)) for p, y, mi in TEST]
    ood = [([Fraction(v) for v in p], Fraction(mi)) for p, mi in OOD]
    for p, *_ in test + ood:
        assert sum(p) == 1

    correct = [argmax(p) == y for p, y, _ in test]
    confs = [max(p) for p, _, _ in test]
    ece, mce = calibration(list(zip(confs, correct)))
    ece_ood, mce_ood = calibration(list(zip(confs, correct)) + [(max(p), False) for p, _ in ood])
    nll = -sum(math.log(float(p[y])) for p, y, _ in test) / len(test)
    brier = sum(float(sum((p[c] - (1 if c == y else 0)) ** 2 for c in range(len(p)))) for p, y, _ in test) / len(test)

    pos = [float(c) for c, ok in zip(confs, correct) if ok]
    neg = [float(c) for c, ok in zip(confs, correct) if not ok]
    ood_conf = [float(max(p)) for p, _ in ood]
    all_conf = [float(c) for c in confs]

    report = {
        "n_test": len(test),
        "n_ood": len(ood),
        "bins": BINS,
        "accuracy": sum(correct) / len(test),
        "ece": ece,
        "mce": mce,
        "nll": nll,
        "brier": brier,
        "ece_with_ood": ece_ood,
        "mce_with_ood": mce_ood,
        "auroc_misclassification": auroc(pos, neg),
        "aupr_misclassification": aupr(pos, neg),
        "auroc_ood": auroc(all_conf, ood_conf),
        "aupr_ood": aupr(all_conf, ood_conf),
        "histogram": {
            "correct": histogram([c for c, ok in zip(confs, correct) if ok]),
            "misclassified": histogram([c for c, ok in zip(confs, correct) if not ok]),
            "ood": histogram([max(p) for p, _ in ood]),
        },
    }

    OUT.mkdir(parents=True, exist_ok=True)
    dump = lambda obj, name: (OUT / name).write_text(json.dumps(obj, indent=2) + "\n")
    dump([prediction(p, y, mi) for p, y, mi in test], "test.json")
    dump([prediction(p, None, mi) for p, mi in ood], "ood.json")
    dump(report, "expected.json")


if __name__ == "__main__":
    main()
