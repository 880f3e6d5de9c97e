"""How close does a trained linear flow get to its closed-form optimum?

Run:  python3 demos/linear_bound.py

A single affine map ``z = W x + b`` can do no better than the Gaussian fit
to the data, whose log-likelihood depends only on the covariance spectrum.
We train one with Adamax on correlated Gaussian data, then do the same with
a nonlinear coupling flow on the rings set to see the bound being respected
(and, for this data, not reached).
"""

import numpy as np

from flowdet.data import toy_dataset
from flowdet.flow import FlowModel
from flowdet.io import linear_model
from flowdet.layers import DualCoupling, InvConv
from flowdet.qlf import ppca_lmax
from flowdet.training import TrainConfig, mean_nll, train


def fit(model, data, steps):
    model, _ = train(model, TrainConfig(steps=steps, batch_size=512, holdout_fraction=0.0), data)
    return -mean_nll(model, data)


def main():
    rng = np.random.default_rng(0)
    mix = rng.standard_normal((4, 4))
    gauss = rng.standard_normal((50000, 4)) @ mix.T
    report = ppca_lmax(gauss)
    print("covariance eigenvalues:", np.round(report.eigenvalues, 4))
    print(f"bound      {report.lmax_nats:.5f} nats/point")
    print(f"linear fit {fit(linear_model(4), gauss, 2000):.5f} nats/point")

    rings = toy_dataset("rings", 10000, seed=0)
    layers = []
    for _ in range(4):
        layers += [InvConv((2, 1, 1)), DualCoupling((2, 1, 1), hidden=32, rng=rng)]
    print()
    print(f"rings bound          {ppca_lmax(rings).lmax_nats:.4f}")
    print(f"conv + coupling flow {fit(FlowModel.from_layers(layers), rings, 1500):.4f}")


if __name__ == "__main__":
    main()
