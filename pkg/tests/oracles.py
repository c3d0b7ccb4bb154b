"""Independent reference implementations used only by the tests.

Each one takes a different route from the production code: pair counting
instead of merge counting, two-sided eigen-Jacobi instead of one-sided SVD,
per-position loops instead of batched tensor ops.
"""

import math

import numpy as np


def kendall_tau_pairs(a, b):
    """Tau-b by enumerating all pairs; None when either side is constant."""
    a = [float(v) for v in a]
    b = [float(v) for v in b]
    n = len(a)
    nc = nd = ta = tb = tab = 0
    for i in range(n):
        for j in range(i + 1, n):
            da = (a[i] > a[j]) - (a[i] < a[j])
            db = (b[i] > b[j]) - (b[i] < b[j])
            if da == 0 and db == 0:
                tab += 1
            if da == 0:
                ta += 1
            if db == 0:
                tb += 1
            if da * db > 0:
                nc += 1
            elif da * db < 0:
                nd += 1
    n0 = n * (n - 1) // 2
    if ta == n0 or tb == n0:
        return None
    return (nc - nd) / math.sqrt(float((n0 - ta) * (n0 - tb)))


def jacobi_eigvalsh(s, tol=1e-14, max_sweeps=100):
    """Eigenvalues of a symmetric matrix by classical cyclic two-sided Jacobi rotations."""
    a = np.array(s, dtype=np.float64)
    n = a.shape[0]
    for _ in range(max_sweeps):
        off = math.sqrt(float((np.triu(a, 1) ** 2).sum() * 2))
        if off <= tol * max(1.0, float(np.abs(np.diag(a)).max())):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1))
                c = 1 / math.sqrt(t * t + 1)
                sn = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = sn
                rot[q, p] = -sn
                a = rot.T @ a @ rot
    return np.sort(np.diag(a))[::-1]


def effective_rank_eig(h):
    """exp(entropy) of singular values taken as sqrt of eigenvalues of H^T H."""
    h = np.asarray(h, dtype=np.float64)
    g = h.T @ h if h.shape[0] >= h.shape[1] else h @ h.T
    ev = np.clip(jacobi_eigvalsh(g), 0, None)
    s = np.sqrt(ev)
    p = s[s > 0] / s.sum()
    return float(np.exp(-(p * np.log(p)).sum()))


def finite_difference(fn, x, h=1e-5):
    """Central differences of scalar ``fn`` at a copy of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn(x)
        flat[i] = old - h
        down = fn(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def relative_error(analytic, numeric, floor=1e-6):
    """Max over entries of |a - n| / max(|a| + |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float((np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)).max())


# -- straight-line transformer block -----------------------------------------------


def _rms(v, g, eps):
    return [v[i] / math.sqrt(sum(x * x for x in v) / len(v) + eps) * g[i] for i in range(len(v))]


def _silu(x):
    return x / (1 + math.exp(-x))


def _rot(vec, t, base):
    out = list(vec)
    dk = len(vec)
    for i in range(dk // 2):
        ang = t * base ** (-2 * i / dk)
        c, s = math.cos(ang), math.sin(ang)
        x0, x1 = vec[2 * i], vec[2 * i + 1]
        out[2 * i] = x0 * c - x1 * s
        out[2 * i + 1] = x0 * s + x1 * c
    return out


def block_reference(x, p, prefix, n_heads, variant="softmax", eps=1e-6, head_eps=1e-6, base=10000.0):
    """One pre-norm block over a single sequence ``x`` (T, d) with scalar Python loops."""
    x = np.asarray(x, dtype=np.float64)
    T, d = x.shape
    dk = d // n_heads
    W = {k[len(prefix):]: np.asarray(v, dtype=np.float64) for k, v in p.items() if k.startswith(prefix)}

    def mv(vec, m):
        return [sum(vec[i] * m[i, j] for i in range(m.shape[0])) for j in range(m.shape[1])]

    a_in = [_rms(list(x[t]), W["attn_norm"], eps) for t in range(T)]
    q = [mv(a_in[t], W["wq"]) for t in range(T)]
    k = [mv(a_in[t], W["wk"]) for t in range(T)]
    v = [mv(a_in[t], W["wv"]) for t in range(T)]
    merged = [[0.0] * d for _ in range(T)]
    for h in range(n_heads):
        sl = slice(h * dk, (h + 1) * dk)
        qh = [_rot(q[t][sl], t, base) for t in range(T)]
        kh = [_rot(k[t][sl], t, base) for t in range(T)]
        vh = [v[t][sl] for t in range(T)]
        for t in range(T):
            logits = [sum(a * b for a, b in zip(qh[t], kh[j])) / math.sqrt(dk) for j in range(t + 1)]
            if variant == "sigmoid":
                w = [1 / (1 + math.exp(-z)) for z in logits]
            else:
                m = max(logits)
                e = [math.exp(z - m) for z in logits]
                w = [z / sum(e) for z in e]
            o = [sum(w[j] * vh[j][i] for j in range(t + 1)) for i in range(dk)]
            if variant == "headnorm":
                o = _rms(o, W["head_norm"], head_eps)
            merged[t][sl] = o
    h_res = [[x[t, i] + val for i, val in enumerate(mv(merged[t], W["wo"]))] for t in range(T)]
    out = []
    for t in range(T):
        f = _rms(h_res[t], W["ffn_norm"], eps)
        gate = mv(f, W["w_gate"])
        up = mv(f, W["w_up"])
        mid = [_silu(g) * u for g, u in zip(gate, up)]
        out.append([h_res[t][i] + val for i, val in enumerate(mv(mid, W["w_down"]))])
    return np.array(out)


def attention_reference(A):
    """sink score, received profile and entropies by explicit loops over (B, H, T, T)."""
    A = np.asarray(A, dtype=np.float64)
    B, H, T, _ = A.shape
    sink = sum(A[b, h, t, 0] for b in range(B) for h in range(H) for t in range(1, T)) / (B * H * (T - 1))
    recv = []
    for j in range(T):
        vals = [A[b, h, t, j] for b in range(B) for h in range(H) for t in range(max(j, 1), T)]
        recv.append(sum(vals) / len(vals) if vals else 0.0)
    ent = []
    for h in range(H):
        tot = 0.0
        for b in range(B):
            for t in range(T):
                tot += -sum(a * math.log(a) for a in A[b, h, t] if a > 0)
        ent.append(tot / (B * T))
    return sink, np.array(recv), np.array(ent)


def model_gradient_errors(model, inputs, targets, h=1e-5):
    """Per-parameter (tape gradient, central-difference gradient) pairs for the model loss."""
    from sinklab.tensor import Tape

    params = model.params
    with Tape() as tape:
        loss = model.loss(inputs, targets)
        tape.backward(loss)
    out = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        num = np.zeros(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = model.loss(inputs, targets).item()
            flat[i] = old - h
            down = model.loss(inputs, targets).item()
            flat[i] = old
            num[i] = (up - down) / (2 * h)
        out[name] = (p.grad.reshape(-1).copy(), num)
    return out


def synthetic_outlier_vector(d=768, seed=0, top=1.2568, mean_abs=0.0048):
    """One coordinate at ``top``; the others i.i.d. normal, rescaled so the mean |x| over all d is ``mean_abs``."""
    r = np.random.default_rng(seed)
    x = r.normal(size=d)
    x[0] = 0
    x *= (mean_abs * d - top) / np.abs(x).sum()
    x[0] = top
    return x, 0
