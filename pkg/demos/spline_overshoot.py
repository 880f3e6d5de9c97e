"""Bounded knot derivatives do not bound the spline's slope.

Run:  python3 demos/spline_overshoot.py

With every knot derivative and every bin's height/width ratio inside (0, 1)
one might expect the rational-quadratic map to be a contraction.  It need
not be: flat knots with a steep bin make the curve overshoot in the middle
of the bin, where the slope is ``2 delta^2 / (delta + alpha)``.
"""

import numpy as np

from flowdet.layers import knots_from_params, rq_derivative
from flowdet.layers.spline import logit


def main():
    for alpha, delta in ((0.5, 0.5), (0.1, 0.9), (0.01, 0.9), (0.001, 0.99)):
        kn = knots_from_params(np.zeros(2), np.full(2, logit(delta)), np.full(2, logit(alpha)), 1.0)
        xs = np.linspace(0.0, 1.0, 10001)
        slope = rq_derivative(kn, xs)
        print(f"alpha={alpha:<6} delta={delta:<5} max slope {slope.max():.4f} "
              f"(closed form at bin centre {2 * delta**2 / (delta + alpha):.4f})")


if __name__ == "__main__":
    main()
