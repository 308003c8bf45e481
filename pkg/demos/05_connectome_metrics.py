"""
Connectome summary measures
===========================

Path length, efficiency, betweenness and modularity on a toy weighted
network with two planted modules.
"""

import numpy as np

from fodf_kit import connectome as cn

rng = np.random.default_rng(0)
n = 12
module = np.repeat([0, 1], n // 2)
p = np.where(module[:, None] == module[None, :], 0.9, 0.1)
w = np.triu((rng.random((n, n)) < p) * rng.uniform(0.5, 2.0, (n, n)), 1)
g = cn.Connectome(w + w.T)

for k, v in cn.connectome_metrics(g).items():
    print("%-18s %.4f" % (k, v))

# the partition found should recover the planted modules
q, labels = cn.modularity(g)
print("communities:", labels)
print("planted partition Q = %.4f, found Q = %.4f" % (cn.partition_modularity(g, module), q))

# stronger edges are shorter: doubling every weight halves path length
print("path length x2 weights: %.4f" % cn.characteristic_path_length(cn.Connectome(2 * g.w)))
