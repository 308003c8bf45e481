"""Oracles shared by the unit tests and the acceptance suite."""

import itertools
import json
from pathlib import Path

import numpy as np

from fodf_kit import net


def finite_difference_check(params, batch, w, h=1e-5):
    """Worst relative error between backprop and central differences over every parameter.

    Runs in float64. The denominator is floored at 1e-3 of the gradient's RMS so
    exact-zero entries (conv biases feeding batch norm) do not divide round-off by zero.
    """
    p = params.astype(np.float64)
    _, grads, _ = net.backward(p, batch, w)
    rms = np.sqrt(np.mean(np.concatenate([g.ravel() for g in grads.values()]) ** 2))
    floor = 1e-3 * rms
    worst = 0.0
    n = 0
    for (layer, name), g in grads.items():
        arr = p[layer].tensors[name]
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + h
            up = net.batch_loss(p, batch, w)
            arr[i] = old - h
            down = net.batch_loss(p, batch, w)
            arr[i] = old
            fd = (up - down) / (2 * h)
            err = abs(g[i] - fd) / max(abs(g[i]), abs(fd), floor)
            worst = max(worst, err)
            n += 1
    return worst, n


def brute_force_wilcoxon(x, y):
    """Exact two-sided signed-rank test by enumerating all sign patterns."""
    from scipy.stats import rankdata

    d = np.asarray(x, float) - np.asarray(y, float)
    d = d[d != 0]
    r = rankdata(np.abs(d))
    w_plus = r[d > 0].sum()
    w_minus = r[d < 0].sum()
    stat = min(w_plus, w_minus)
    tot = r.sum()
    lo = hi = 0
    count = 0
    for signs in itertools.product((0, 1), repeat=len(r)):
        wp = float(np.dot(signs, r))
        lo += wp <= w_plus + 1e-9
        hi += wp >= w_plus - 1e-9
        count += 1
    assert abs(w_plus + w_minus - tot) < 1e-9
    return stat, min(1.0, 2 * min(lo, hi) / count)


def random_connected_graph(seed, n_min=3, n_max=8):
    """Symmetric weighted graph with a random spanning tree plus extra random edges."""
    r = np.random.default_rng(seed)
    n = int(r.integers(n_min, n_max + 1))
    w = np.zeros((n, n))
    perm = r.permutation(n)
    for i in range(1, n):
        a, b = perm[i], perm[r.integers(0, i)]
        w[a, b] = w[b, a] = r.uniform(0.1, 2.0)
    extra = np.triu(r.random((n, n)) < r.uniform(0.1, 0.6), 1)
    vals = np.triu(r.uniform(0.1, 2.0, (n, n)), 1)
    w = np.where(extra & (w == 0), vals, np.triu(w, 1))
    return w + w.T


def brute_force_paths(w, rtol=1e-12):
    """Enumerate every simple path; return distances and betweenness (normalised, undirected)."""
    n = len(w)
    adj = [np.flatnonzero(w[i] > 0).tolist() for i in range(n)]
    best = {}

    def dfs(path, length, seen):
        u = path[-1]
        s = path[0]
        if u != s:
            key = (s, u)
            cur = best.get(key)
            if cur is None or length < cur[0] - rtol * max(1.0, length):
                best[key] = [length, [tuple(path)]]
            elif abs(length - cur[0]) <= rtol * max(1.0, length):
                cur[1].append(tuple(path))
        for v in adj[u]:
            if not seen & (1 << v):
                path.append(v)
                dfs(path, length + 1.0 / w[u, v], seen | (1 << v))
                path.pop()

    for s in range(n):
        dfs([s], 0.0, 1 << s)
    dist = np.full((n, n), np.inf)
    np.fill_diagonal(dist, 0.0)
    bc = np.zeros(n)
    for (s, t), (d, paths) in best.items():
        dist[s, t] = d
        if s < t:
            for p in paths:
                for v in p[1:-1]:
                    bc[v] += 1.0 / len(paths)
    if n > 2:
        bc /= (n - 1) * (n - 2) / 2.0
    return dist, bc


def set_partitions(n):
    """All restricted-growth label vectors of length n."""
    def rec(prefix, m):
        if len(prefix) == n:
            yield list(prefix)
            return
        for c in range(m + 1):
            yield from rec(prefix + [c], max(m, c + 1))
    yield from rec([0], 1)


def brute_force_modularity(w, gamma=1.0):
    two_m = w.sum()
    k = w.sum(axis=1)
    best = -np.inf
    for labels in set_partitions(len(w)):
        lab = np.asarray(labels)
        same = lab[:, None] == lab[None, :]
        q = float(np.sum((w - gamma * np.outer(k, k) / two_m) * same) / two_m)
        best = max(best, q)
    return best


def cli(*argv):
    from fodf_kit.cli import main

    return main([str(a) for a in argv])


def run_cli_pipeline(root, shape=(8, 8, 8), epochs=2):
    """Phantom -> CSD -> train -> predict -> evaluate -> wilcoxon -> degrade -> connectome.

    Returns the list of step output directories, in order.
    """
    root = Path(root)
    steps = []

    def run(name, *args):
        out = root / name
        assert cli(*args, "--out", out) == 0, name
        steps.append(out)
        return out

    ph = run("phantom", "phantom-gen", "--seed", 3, "--set", f"shape={json.dumps(list(shape))}",
             "--set", "rescan=true", "--set", "geometry_seed=1")
    grad = ["--set", f"bvals_path={ph / 'dwi.bval'}", "--set", f"bvecs_path={ph / 'dwi.bvec'}",
            "--set", f"mask={ph / 'mask.dwv'}"]
    fit = run("csd", "csd-fit", "--set", f"dwi={ph / 'dwi.dwv'}", *grad)
    subject = {"dwi": str(ph / "dwi.dwv"), "bvals_path": str(ph / "dwi.bval"),
               "bvecs_path": str(ph / "dwi.bvec"), "mask": str(ph / "mask.dwv"),
               "labels": str(fit / "fodf.dwv")}
    pair = {"scan": str(ph / "dwi.dwv"), "rescan": str(ph / "rescan.dwv"),
            "bvals_path": subject["bvals_path"], "bvecs_path": subject["bvecs_path"],
            "mask": subject["mask"]}
    cfg = root / "train.json"
    cfg.write_text(json.dumps({"subjects": [subject], "pairs": [pair], "architecture": "cnn",
                               "conv_channels": 4, "dense_width": 8, "epochs": epochs,
                               "beta": 0.5}))
    tr = run("train", "train", "--config", cfg, "--seed", 1)
    pred = run("predict", "predict", "--set", f"model={tr / 'model'}",
               "--set", f"dwi={ph / 'dwi.dwv'}", *grad)
    ev = run("evaluate", "evaluate", "--set", f"a={pred / 'fodf.dwv'}", "--set", f"b={fit / 'fodf.dwv'}",
             "--set", f"mask={ph / 'mask.dwv'}")
    run("wilcoxon", "wilcoxon", "--set", f"x={ev / 'acc_map.dwv'}", "--set", f"y={ev / 'md_map.dwv'}",
        "--set", f"mask={ph / 'mask.dwv'}")
    run("degrade", "degrade", "--set", f"dwi={ph / 'dwi.dwv'}", *grad, "--set", "counts=[45,96]",
        "--set", "repeats=2", "--set", f"reference={fit / 'fodf.dwv'}")
    w = random_connected_graph(7, 12, 12)
    np.savetxt(root / "graph.csv", w, delimiter=",")
    run("connectome", "connectome-metrics", "--set", f"matrix={root / 'graph.csv'}")
    return steps


def rerun_from_resolved(steps, root):
    """Rerun each step from its resolved_config.json; return (step, file) pairs that differ."""
    diffs = []
    for step in steps:
        cfg = step / "resolved_config.json"
        sub = json.loads(cfg.read_text())["subcommand"]
        out = Path(root) / step.name
        assert cli(sub, "--config", cfg, "--out", out) == 0, step.name
        for f in sorted(step.glob("*.json")):
            if f.read_bytes() != (out / f.name).read_bytes():
                diffs.append((step.name, f.name))
    return diffs
