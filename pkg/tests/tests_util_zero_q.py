"""Shared test helper: a Youla policy whose augmentation output is pinned to zero."""

import numpy as np

import yoularen as yr
from yoularen.ren import IqcSpec, Ren, RenDims, theta_layout, theta_length


def zero_q_policy(plant, gamma=10.0, dims=None, seed=0, xhat0="zero"):
    dims = dims if dims is not None else RenDims(4, 8, 4, 1)
    iqc = IqcSpec.lipschitz(gamma)
    theta = np.random.default_rng(seed).standard_normal(theta_length(dims, iqc))
    offset = 0
    for name, shape in theta_layout(dims, iqc, True):
        size = int(np.prod(shape))
        if name in ("C2", "D21", "by"):
            theta[offset:offset + size] = 0.0
        offset += size
    ren = Ren(dims, iqc, theta=theta)
    return yr.YoulaPolicy(plant, ren, gamma=gamma, xhat0=xhat0)
