"""Brute-force reference implementations used as test oracles.

Everything here is written with explicit Python loops and ``math`` so that it
shares no code path with the package under test.
"""

import math

import numpy as np


def matmul_loop(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def conv2d_loop(x, w, stride=1, pad=0):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for ic in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                s += xp[b, ic, i * stride + di, j * stride + dj] * w[oc, ic, di, dj]
                    out[b, oc, i, j] = s
    return out


def log_softmax_row(row):
    m = max(row)
    lse = m + math.log(sum(math.exp(v - m) for v in row))
    return [v - lse for v in row]


def cross_entropy(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        total -= log_softmax_row(list(map(float, row)))[int(y)]
    return total / len(labels)


def dot(u, v):
    return sum(float(a) * float(b) for a, b in zip(u, v))


def nt_xent(z, tau):
    """Direct per-term summation of the two-view contrastive loss, first N anchors."""
    rows = len(z)
    n = rows // 2
    total = 0.0
    for i in range(n):
        num = math.exp(dot(z[i], z[i + n]) / tau)
        den = sum(math.exp(dot(z[i], z[k]) / tau) for k in range(rows) if k != i)
        total -= math.log(num / den)
    return total


def supcon(z, labels, tau):
    """Double loop: anchors are the first half of the rows, log outside the positive mean."""
    rows = len(z)
    total = 0.0
    for i in range(rows // 2):
        den = sum(math.exp(dot(z[i], z[k]) / tau) for k in range(rows) if k != i)
        pos = [p for p in range(rows) if p != i and labels[p] == labels[i]]
        if not pos:
            continue
        acc = 0.0
        for p in pos:
            acc += -math.log(math.exp(dot(z[i], z[p]) / tau) / den)
        total += acc / len(pos)
    return total


def kl_soft(student, teacher, T):
    total = 0.0
    for s, t in zip(student, teacher):
        ls = log_softmax_row([float(v) / T for v in s])
        lt = log_softmax_row([float(v) / T for v in t])
        total += sum(math.exp(a) * (a - b) for a, b in zip(lt, ls))
    return total / len(student)


def distill_distance(teacher_list, student_list):
    total = 0.0
    for ft, fs in zip(teacher_list, student_list):
        n = ft.shape[0]
        acc = 0.0
        for b in range(n):
            d = (np.asarray(ft[b], dtype=np.float64) - np.asarray(fs[b], dtype=np.float64)).ravel()
            acc += math.sqrt(sum(float(v) * float(v) for v in d))
        total += acc / n
    return total


def ece(probs, labels, n_bins):
    """Bins (b/n, (b+1)/n]; a sample with confidence exactly 0 is placed in bin 0."""
    conf = [max(map(float, r)) for r in probs]
    pred = [int(np.argmax(r)) for r in probs]
    bins = [[] for _ in range(n_bins)]
    for c, p, y in zip(conf, pred, labels):
        for b in range(n_bins):
            lo, hi = b / n_bins, (b + 1) / n_bins
            if (lo < c <= hi) or (b == 0 and c <= lo):
                bins[b].append((c, 1.0 if p == int(y) else 0.0))
                break
    total = len(conf)
    err = 0.0
    for members in bins:
        if members:
            mc = sum(m[0] for m in members) / len(members)
            ma = sum(m[1] for m in members) / len(members)
            err += len(members) / total * abs(mc - ma)
    return err, [len(m) for m in bins]


def sgd_unrolled(p0, g, lr, momentum, wd, steps):
    """Hand-unrolled heavy-ball recurrence on scalars."""
    p, v = float(p0), 0.0
    for _ in range(steps):
        v = momentum * v + g + wd * p
        p = p - lr * v
    return p


def median(values):
    s = sorted(values)
    m = len(s) // 2
    return s[m] if len(s) % 2 else (s[m - 1] + s[m]) / 2


# --- composites, assembled term by term from the pieces above ---------------------


def deep_supervision(final, aux, labels, alpha):
    return cross_entropy(final, labels) + alpha * sum(cross_entropy(a, labels) for a in aux)


def dks(final, aux, labels, alpha, beta, T):
    kl = sum(kl_soft(a, final, T) for a in aux)
    return deep_supervision(final, aux, labels, alpha) + beta * kl


def contrastive(z, labels, tau, kind):
    if kind == "simclr":
        return nt_xent(z, tau)
    return supcon(z, list(labels) + list(labels), tau)


def cds(final, embeds, labels, lambda1, tau, kind="simclr"):
    n = len(labels)
    return cross_entropy(final[:n], labels) + lambda1 * sum(contrastive(z, labels, tau, kind) for z in embeds)


def semi_cds(final, embeds, labels, unlabeled_embeds, lambda1, tau, kind="simclr"):
    total = cds(final, embeds, labels, lambda1, tau, kind) if len(labels) else 0.0
    return total + sum(nt_xent(z, tau) for z in unlabeled_embeds)


def dcds(final, embeds, feats, t_final, t_embeds, t_feats, labels, lambda1, lambda2, lambda3, tau, T,
         distill="embedding", kind="simclr"):
    n = len(labels)
    d = distill_distance(t_embeds, embeds) if distill == "embedding" else distill_distance(t_feats, feats)
    return (cds(final, embeds, labels, lambda1, tau, kind) + lambda2 * d
            + lambda3 * kl_soft(final[:n], t_final[:n], T))
