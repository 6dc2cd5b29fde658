"""Independent reference implementations written as plain loops.

None of these import from ``medfuse``; they exist so the vectorised code can
be compared against something obviously correct.
"""

import csv
import io
import math


def group_lab_rows(rows, vocabulary):
    """rows: (pid, vid, item, value, unit, abnormal) -> {(pid, vid): {item_index: (value, abnormal)}}."""
    index = {item: j for j, item in enumerate(vocabulary)}
    panels = {}
    for pid, vid, item, value, unit, abnormal in rows:
        if item not in index:
            continue
        panels.setdefault((pid, vid), {})[index[item]] = (value, abnormal)
    return panels


def lab_csv_text(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["PATIENT_ID", "VISIT_ID", "ITEMID", "VALUE", "VALUEUOM", "ABNORMAL"])
    for pid, vid, item, value, unit, abnormal in rows:
        w.writerow([pid, vid, item, repr(float(value)), unit, "1" if abnormal else "0"])
    return buf.getvalue()


def abnormal_sentence(items):
    """items: list of (item_id, value_text, unit) in output order."""
    if not items:
        return ""
    text = "These are abnormal results recorded:"
    for item_id, value_text, unit in items:
        text = text + " ITEMID " + item_id + ": " + value_text + " " + unit + ";"
    return text


def outer(a, b):
    return [[a[i] * b[j] for j in range(len(b))] for i in range(len(a))]


def matmul(A, B):
    n, k, m = len(A), len(B), len(B[0])
    return [[sum(A[i][t] * B[t][j] for t in range(k)) for j in range(m)] for i in range(n)]


def affine(W, b, x):
    """y = W x + b with W given as rows (out x in)."""
    return [sum(W[o][i] * x[i] for i in range(len(x))) + b[o] for o in range(len(W))]


def softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def gauss_logpdf(y, mu, logvar):
    total = 0.0
    for d in range(len(y)):
        total += -0.5 * ((y[d] - mu[d]) ** 2 / math.exp(logvar[d]) + logvar[d] + math.log(2 * math.pi))
    return total


def vclub_double_sum(mus, logvars, ys):
    """(1/N^2) sum_i sum_j [log q(y_i|x_i) - log q(y_j|x_i)] given per-sample moments."""
    n = len(ys)
    total = 0.0
    for i in range(n):
        for j in range(n):
            total += gauss_logpdf(ys[i], mus[i], logvars[i]) - gauss_logpdf(ys[j], mus[i], logvars[i])
    return total / (n * n)


def mean_loglik(mus, logvars, ys):
    return sum(gauss_logpdf(ys[i], mus[i], logvars[i]) for i in range(len(ys))) / len(ys)


def reconstruction_mse(recon, values, observed_idx):
    total = 0.0
    for r, i in zip(recon, observed_idx):
        total += (r - values[i]) ** 2
    return total / len(observed_idx)


def bce(logit, label):
    p = 1.0 / (1.0 + math.exp(-logit))
    return -math.log(p) if label else -math.log(1.0 - p)


def focal_term(logit, label, gamma, alpha):
    p = 1.0 / (1.0 + math.exp(-logit))
    pt = p if label else 1.0 - p
    at = alpha if label else 1.0 - alpha
    return -at * (1.0 - pt) ** gamma * math.log(pt)


def label_metrics(pred, truth):
    """Per-label counts and scores plus the five headline numbers, by definition."""
    n, L = len(truth), len(truth[0])
    per = []
    for j in range(L):
        tp = fp = fn = 0
        for i in range(n):
            if pred[i][j] and truth[i][j]:
                tp += 1
            elif pred[i][j]:
                fp += 1
            elif truth[i][j]:
                fn += 1
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        per.append((p, r, f, tp + fn))
    total_support = sum(x[3] for x in per)
    correct = sum(1 for i in range(n) for j in range(L) if bool(pred[i][j]) == bool(truth[i][j]))
    return {
        "precision": sum(x[0] for x in per) / L,
        "recall": sum(x[1] for x in per) / L,
        "f1_macro": sum(x[2] for x in per) / L,
        "f1_weighted": sum(x[2] * x[3] for x in per) / total_support if total_support else 0.0,
        "accuracy": correct / (n * L),
        "per_label": per,
    }


def masked_mean_rows(rows, valid):
    picked = [r for r, v in zip(rows, valid) if v]
    if not picked:
        return [0.0] * len(rows[0])
    return [sum(r[d] for r in picked) / len(picked) for d in range(len(rows[0]))]
