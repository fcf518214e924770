"""White-box membership-inference auditing toolkit.

The package walks the full audit chain: disjoint target/shadow splits,
classifier training, hidden-activation capture, statistical neuron
selection, white-box attack models over a method-by-threshold grid,
Shapley-ranked stacked ensembling, and attack-driven input attribution.
"""

__version__ = "0.1.0"
