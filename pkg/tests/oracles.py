"""Independent reference implementations used as test oracles."""
import numpy as np
import scipy.linalg

R_EARTH = 6371.0


def chord_km(lat1, lon1, lat2, lon2):
    """Great-circle distance via the 3-D chord (different formula from haversine)."""
    def xyz(la, lo):
        la, lo = np.radians(la), np.radians(lo)
        return np.stack([np.cos(la) * np.cos(lo), np.cos(la) * np.sin(lo), np.sin(la)], axis=-1)
    c = np.linalg.norm(xyz(lat1, lon1) - xyz(lat2, lon2), axis=-1)
    return 2.0 * R_EARTH * np.arcsin(np.minimum(c / 2.0, 1.0))


def exp_variogram(h, sill, rng, nugget):
    h = np.asarray(h, dtype=float)
    return np.where(h > 0, nugget + sill * (1 - np.exp(-h / rng)), 0.0)


def ordinary_kriging(target, lat, lon, values, sill, rng, nugget=0.0):
    """Closed-form Lagrangian solution: w = G^-1 (g0 - lam 1), lam = (1'G^-1 g0 - 1) / 1'G^-1 1."""
    lat, lon = np.asarray(lat, float), np.asarray(lon, float)
    G = exp_variogram(chord_km(lat[:, None], lon[:, None], lat[None], lon[None]), sill, rng, nugget)
    g0 = exp_variogram(chord_km(lat, lon, target[0], target[1]), sill, rng, nugget)
    lu = scipy.linalg.lu_factor(G)
    a = scipy.linalg.lu_solve(lu, g0)
    b = scipy.linalg.lu_solve(lu, np.ones_like(g0))
    lam = (a.sum() - 1.0) / b.sum()
    w = a - lam * b
    return w, float(w @ np.asarray(values, float)), float(w @ g0 + lam)


def min_invocations(max_h, leads=(24, 6, 3, 1)):
    """Coin-change DP: fewest steps summing to each horizon."""
    best = [0] + [10 ** 9] * max_h
    for h in range(1, max_h + 1):
        best[h] = 1 + min(best[h - l] for l in leads if l <= h)
    return best


def greedy_count(h, leads=(24, 6, 3, 1)):
    """Greedy step count by the recurrence count(h) = 1 + count(h - max lead <= h)."""
    n = 0
    while h:
        h -= max(l for l in leads if l <= h)
        n += 1
    return n
