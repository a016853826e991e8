"""weightpath: policy weight trajectories as sequence data.

Pipeline: PPO trials generate weight snapshots, a temporal-SVD codec
compresses them to low-dimensional codes, a causal transformer predicts
the next code autoregressively, and predicted weights are scored both in
weight space (WPE) and as executable policies (REPW).
"""

__version__ = "0.1.0"
