"""Independent reference computations used by the tests.

None of these share code with the package: the convolution oracle works on
a sampled density grid, the path oracle enumerates every simple path.
"""

import math

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.signal import fftconvolve


def normal_pdf(x, mean, var):
    return np.exp(-0.5 * (x - mean) ** 2 / var) / math.sqrt(2 * math.pi * var)


def _grid_density(mean, var, dx):
    sd = math.sqrt(var)
    half = int(math.ceil(12 * sd / dx))
    x = mean + dx * np.arange(-half, half + 1)
    return x[0], normal_pdf(x, mean, var)


def numeric_hop_likelihood(h, lat_mean, lat_var, proc_mean, proc_var, t, eps, points_per_sd=200):
    """Numeric h-fold convolutions of latency and processing densities, integrated over [t-eps, t+eps].

    A zero processing variance is a point mass and only shifts the grid.
    """
    sds = [math.sqrt(v) for v in (lat_var, proc_var) if v > 0]
    dx = min(sds) / points_per_sd
    x0, one = _grid_density(lat_mean, lat_var, dx)
    if proc_var > 0:
        d0, fd = _grid_density(proc_mean, proc_var, dx)
        one = fftconvolve(one, fd) * dx
        x0 += d0
    else:
        x0 += proc_mean
    f, start = one, x0
    for _ in range(h - 1):
        f = fftconvolve(f, one) * dx
        start += x0
    xs = start + dx * np.arange(len(f))
    if t + eps <= xs[0] or t - eps >= xs[-1]:
        return 0.0
    spline = CubicSpline(xs, f)
    return float(spline.integrate(max(t - eps, xs[0]), min(t + eps, xs[-1])))


def brute_force_delays(n, edges, node_delay, source):
    """Minimum over all simple paths of sum(edge weight + delay of the entered node).

    ``edges`` maps (a, b) -> weight; costs accumulate from the source
    outward.  Unreachable nodes get inf.
    """
    adj = {u: [] for u in range(n)}
    for (a, b), w in edges.items():
        adj[a].append((b, w))
        adj[b].append((a, w))
    best = [math.inf] * n
    best[source] = 0.0

    def walk(u, cost, seen):
        for v, w in adj[u]:
            if v in seen:
                continue
            c = cost + (w + node_delay[v])
            if c < best[v]:
                best[v] = c
            seen.add(v)
            walk(v, c, seen)
            seen.remove(v)

    walk(source, 0.0, {source})
    return best


def direct_posterior(edge_prob, hop_mean, hop_var, eps, t, max_hops):
    """Bayes rule evaluated term by term with the standard-normal CDF from erf."""
    def cdf(z):
        return 0.5 * (1 + math.erf(z / math.sqrt(2)))

    terms = []
    for h in range(1, max_hops + 1):
        sd = math.sqrt(h * hop_var)
        lik = cdf((t + eps - h * hop_mean) / sd) - cdf((t - eps - h * hop_mean) / sd)
        prior = (1 - edge_prob) ** (h - 1) * edge_prob
        terms.append(lik * prior)
    total = sum(terms)
    return [x / total for x in terms], total
