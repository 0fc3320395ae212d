"""Brute-force reference implementations used as test oracles."""
import itertools

import numpy as np


def pairwise(A, B):
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    out = np.empty((len(A), len(B)))
    for i, a in enumerate(A):
        out[i] = np.sqrt(((B - a) ** 2).sum(axis=1))
    return out


def nearest_distance(q, pts):
    return float(np.sqrt(((np.asarray(pts, dtype=np.float64) - q) ** 2).sum(axis=1)).min())


def radius_query(q, r, pts):
    d = np.sqrt(((np.asarray(pts, dtype=np.float64) - q) ** 2).sum(axis=1))
    return set(np.flatnonzero(d <= r).tolist())


def directed_hausdorff(A, B):
    return float(pairwise(A, B).min(axis=1).max())


def hausdorff(A, B):
    return max(directed_hausdorff(A, B), directed_hausdorff(B, A))


def dice_masks(x, y, c):
    xs = {tuple(p) for p in np.argwhere(x == c)}
    ys = {tuple(p) for p in np.argwhere(y == c)}
    if not xs and not ys:
        return 1.0
    return 2 * len(xs & ys) / (len(xs) + len(ys))


def greedy_matches(X, Y, threshold):
    D = pairwise(X, Y)
    cand = sorted((D[i, j], i, j) for i in range(len(X)) for j in range(len(Y)) if D[i, j] < threshold)
    ux, uy, n = set(), set(), 0
    for _, i, j in cand:
        if i not in ux and j not in uy:
            ux.add(i)
            uy.add(j)
            n += 1
    return n


def optimal_matches(X, Y, threshold):
    """Maximum cardinality bipartite matching by augmenting paths."""
    D = pairwise(X, Y)
    adj = [[j for j in range(len(Y)) if D[i, j] < threshold] for i in range(len(X))]
    owner = [-1] * len(Y)

    def augment(i, seen):
        for j in adj[i]:
            if j in seen:
                continue
            seen.add(j)
            if owner[j] < 0 or augment(owner[j], seen):
                owner[j] = i
                return True
        return False

    return sum(augment(i, set()) for i in range(len(X)))


def sbr(values, target, background):
    t = [v for v, m in zip(np.ravel(values), np.ravel(target)) if m]
    b = [v for v, m in zip(np.ravel(values), np.ravel(background)) if m]
    return (sum(t) / len(t)) / (sum(b) / len(b))


def margin_errors(incision, tumor, margin, offset):
    return [nearest_distance(p, tumor) + offset - margin for p in incision]


def margin_set(points, labels, margin, healthy=1, tumor=2):
    """Double loop over (healthy, tumor) pairs; the inner loop is one vector row."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    tumor_pts = points[labels == tumor]
    out = set()
    for i in range(len(points)):
        if labels[i] == healthy and np.any(np.sqrt(((tumor_pts - points[i]) ** 2).sum(axis=1)) <= margin):
            out.add(i)
    return out


def ball_centers(a, b, c, rho):
    """Both centres of radius-rho balls through a, b, c (solved as a linear system)."""
    a, b, c = (np.asarray(p, dtype=np.float64) for p in (a, b, c))
    n = np.cross(b - a, c - a)
    M = np.array([b - a, c - a, n])
    rhs = np.array([(b @ b - a @ a) / 2, (c @ c - a @ a) / 2, n @ a])
    cc = np.linalg.solve(M, rhs)
    h2 = rho ** 2 - ((cc - a) ** 2).sum()
    if h2 < 0:
        return []
    u = n / np.linalg.norm(n)
    return [cc + np.sqrt(h2) * u, cc - np.sqrt(h2) * u]


def winding_number(poly, p):
    """Winding number of a closed 2D polygon around point p."""
    d = np.asarray(poly) - np.asarray(p)
    ang = np.arctan2(d[:, 1], d[:, 0])
    diff = np.diff(np.concatenate([ang, ang[:1]]))
    diff = (diff + np.pi) % (2 * np.pi) - np.pi
    return int(round(diff.sum() / (2 * np.pi)))


def permutations_best(X, Y, threshold):
    """Exhaustive assignment for very small sets (cross-check of optimal_matches)."""
    D = pairwise(X, Y)
    best = 0
    small, large = (len(X), len(Y)) if len(X) <= len(Y) else (len(Y), len(X))
    for perm in itertools.permutations(range(large), small):
        if len(X) <= len(Y):
            n = sum(D[i, perm[i]] < threshold for i in range(small))
        else:
            n = sum(D[perm[i], i] < threshold for i in range(small))
        best = max(best, n)
    return best


def first_hit(origin, direction, tri_vertices):
    """Smallest positive ray parameter over all triangles (plain loop)."""
    best = np.inf
    for a, b, c in tri_vertices:
        e1, e2 = b - a, c - a
        h = np.cross(direction, e2)
        det = e1 @ h
        if abs(det) < 1e-14:
            continue
        s = origin - a
        u = (s @ h) / det
        q = np.cross(s, e1)
        v = (direction @ q) / det
        t = (e2 @ q) / det
        if u >= -1e-12 and v >= -1e-12 and u + v <= 1 + 1e-12 and 0 < t < best:
            best = t
    return best
