"""
A synthetic pretraining corpus
==============================

Every series in the corpus is an observed node of a random DAG whose root
nodes are Gaussian-process samples. This walk-through draws a few graphs,
looks at their series and writes a small UTSD file.
"""

import numpy as np

from tsdistill.rng import stream
from tsdistill.synth import generate_corpus, read_utsd, sample_dag, sample_graph_series, write_utsd

# a DAG with up to 6 nodes; edges only go from earlier to later nodes
dag = sample_dag(stream(0, "demo", "dag"), max_nodes=6)
print("nodes:", dag.n_nodes, "roots:", dag.roots)

# observed series of one graph, each standardised to zero mean and unit variance
series = sample_graph_series(stream(0, "demo", "series"), 512, max_nodes=6)
for i, s in enumerate(series):
    print(f"series {i}: mean {s.mean():+.3f} std {s.std():.3f} lag-1 acf {np.corrcoef(s[:-1], s[1:])[0, 1]:+.3f}")

# a corpus is the concatenation of many graphs; the same seed always gives the same bytes
corpus = generate_corpus(seed=0, n_samples=200, T=512, max_nodes=8)
write_utsd("demo_corpus.utsd", corpus)
back = read_utsd("demo_corpus.utsd")
print("corpus", back.data.shape, "identical after round-trip:", np.array_equal(back.data, corpus.data))
