"""Shared builders and brute-force oracles for the test suite."""

import math

import numpy as np

from f3dgs.factors import FactorSetCP, FactorSetVM


def random_cp(rng, n, d, dtype=np.float64):
    arr = lambda *s: rng.normal(size=s).astype(dtype)
    return FactorSetCP(arr(n), arr(n), arr(n), arr(n, 3), arr(n, 3), arr(n, 3),
                       arr(n, 4), arr(n, 4), arr(n, 4), arr(n, d), arr(n, d), arr(n, d))


def random_vm(rng, n, d, dtype=np.float64):
    cp = random_cp(rng, n, d, dtype)
    arr = lambda *s: rng.normal(size=s).astype(dtype)
    return FactorSetVM(p_xy=arr(n, n, 2), p_yz=arr(n, n, 2), p_xz=arr(n, n, 2),
                       f_xy=arr(n, n, d), f_yz=arr(n, n, d), f_xz=arr(n, n, d), **cp.arrays())


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / scale)


def fd_grad(f, x, eps=1e-6):
    """Central finite-difference gradient of scalar ``f`` at array ``x`` (modified in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


# --- brute-force expansion -------------------------------------------------------------


def _unit(r):
    norm = math.sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + r[3] * r[3])
    if norm == 0:
        return [1.0, 0.0, 0.0, 0.0]
    return [v / norm for v in r]


def loop_expand_cp(b):
    n = b.n
    pos, sc, rot, feat = [], [], [], []
    for i in range(n):
        for j in range(n):
            for k in range(n):
                pos.append([b.p_x[i], b.p_y[j], b.p_z[k]])
                sc.append([(b.s_x[i, c] * b.s_y[j, c]) * b.s_z[k, c] for c in range(3)])
                raw = [(b.q_x[i, c] * b.q_y[j, c]) * b.q_z[k, c] for c in range(4)]
                rot.append(_unit(raw))
                feat.append([(b.f_x[i, c] * b.f_y[j, c]) * b.f_z[k, c] for c in range(b.d)])
    dt = b.p_x.dtype
    return {"positions": np.array(pos, dtype=dt), "scales": np.array(sc, dtype=dt),
            "rotations": np.array(rot, dtype=dt), "features": np.array(feat, dtype=dt)}


def loop_expand_vm(b, mode):
    n, d = b.n, b.d
    dt = b.p_x.dtype
    terms = [[], [], []]
    pts = [[], [], []]
    for i in range(n):
        for j in range(n):
            for k in range(n):
                terms[0].append([b.f_xy[i, j, c] * b.f_z[k, c] for c in range(d)])
                terms[1].append([b.f_yz[j, k, c] * b.f_x[i, c] for c in range(d)])
                terms[2].append([b.f_xz[i, k, c] * b.f_y[j, c] for c in range(d)])
                pts[0].append([b.p_xy[i, j, 0], b.p_xy[i, j, 1], b.p_z[k]])
                pts[1].append([b.p_x[i], b.p_yz[j, k, 0], b.p_yz[j, k, 1]])
                pts[2].append([b.p_xz[i, k, 0], b.p_y[j], b.p_xz[i, k, 1]])
    cp = loop_expand_cp(b)
    if mode == "shared":
        feat = [[(t0 + t1) + t2 for t0, t1, t2 in zip(*row)] for row in zip(*terms)]
        return {"positions": cp["positions"], "scales": cp["scales"], "rotations": cp["rotations"],
                "features": np.array(feat, dtype=dt)}
    return {"positions": np.array(pts[0] + pts[1] + pts[2], dtype=dt),
            "scales": np.tile(cp["scales"], (3, 1)), "rotations": np.tile(cp["rotations"], (3, 1)),
            "features": np.array(terms[0] + terms[1] + terms[2], dtype=dt)}
