"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np


def naive_conv1d(x, w, b=None, stride=1, padding=0):
    """Direct nested-loop 1D cross-correlation of one (C, L) input."""
    c_in, length = x.shape
    c_out, _, k = w.shape
    xp = np.zeros((c_in, length + 2 * padding))
    xp[:, padding:padding + length] = x
    n_out = (length + 2 * padding - k) // stride + 1
    y = np.zeros((c_out, n_out))
    for o in range(c_out):
        for t in range(n_out):
            acc = 0.0 if b is None else float(b[o])
            for c in range(c_in):
                for j in range(k):
                    acc += w[o, c, j] * xp[c, t * stride + j]
            y[o, t] = acc
    return y


def pairwise_auc(scores, labels):
    """Mann-Whitney statistic by enumerating every positive/negative pair."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins) / (len(pos) * len(neg))


def gradient_check(model, x, n_per_tensor=6, h=1e-5, seed=0):
    """Largest relative error between backward() and central differences.

    Coordinates whose difference quotient changes between h and h/2 sit on a
    kink of relu/hardtanh and are skipped. Returns (worst, checked, skipped,
    per-tensor checked counts).
    """
    rng = np.random.default_rng(seed)
    coef = rng.normal(size=(len(x), 2))

    def loss():
        return float((model.forward(x, train=True, rng=np.random.default_rng(1)) * coef).sum())

    model.forward(x, train=True, rng=np.random.default_rng(1))
    grads = model.backward(coef)
    worst, checked, skipped = 0.0, 0, 0
    per_tensor = {}
    for name, p in model.params.items():
        flat = p.reshape(-1)
        for i in rng.choice(flat.size, size=min(n_per_tensor, flat.size), replace=False):
            orig = flat[i]
            quotients = []
            for step in (h, h / 2):
                flat[i] = orig + step
                up = loss()
                flat[i] = orig - step
                down = loss()
                flat[i] = orig
                quotients.append((up - down) / (2 * step))
            fd = quotients[0]
            if abs(quotients[0] - quotients[1]) > 1e-3 * max(abs(fd), 1e-3):
                skipped += 1
                continue
            an = grads[name].reshape(-1)[i]
            err = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
            worst = max(worst, err)
            checked += 1
            per_tensor[name] = per_tensor.get(name, 0) + 1
    return worst, checked, skipped, per_tensor


def enumerate_viterbi(obs, transition, emission, initial):
    """First state of the most probable hidden path, by listing all 2**n paths.

    Scores are plain products; a path beats the incumbent only when clearly
    larger, and on a tie the path starting in state 0 is kept.
    """
    import itertools

    n = len(obs)
    best = {0: -1.0, 1: -1.0}
    for path in itertools.product((0, 1), repeat=n):
        prob = initial[path[0]] * emission[path[0]][obs[0]]
        for t in range(1, n):
            prob *= transition[path[t - 1]][path[t]] * emission[path[t]][obs[t]]
        best[path[0]] = max(best[path[0]], prob)
    return int(best[1] > best[0] * (1 + 1e-9) and best[1] > 0)


def random_stochastic(rng, zero_prob=0.0):
    rows = rng.dirichlet([1.0, 1.0], size=2)
    if zero_prob and rng.random() < zero_prob:
        i, j = rng.integers(2), rng.integers(2)
        rows[i] = 0.0
        rows[i, j] = 1.0
    return rows
