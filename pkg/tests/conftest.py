import os

# Pin BLAS before numpy loads anywhere; multi-threaded BLAS is slower than
# single-threaded at the matrix sizes this package uses.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import pytest

from covertpath.model import Channel, Layer, NodeSpec, Scenario


def make_channel(src, dst, v=1.0, sigma=1.0, lo=0.0, hi=1.0, layer=Layer.NETWORK):
    return Channel(
        src=src, dst=dst, layer=layer, capacity_v=v, car_sigma=sigma,
        covert_lo=lo, covert_hi=hi,
    )


def triangle_scenario(h_ab=2.0, h_ac=1.0, h_cb=4.0, tau=0.5):
    """Three nodes, no wardens: alice 0, bob 1, relay 2.

    With sigma=1 and no wardens, each channel's quality score equals its
    capacity, so path scores are trivial to hand-compute.
    """
    nodes = (
        NodeSpec(0, (0.0, 0.0), (
            make_channel(0, 1, v=h_ab),
            make_channel(0, 2, v=h_ac),
        )),
        NodeSpec(1, (4.0, 0.0), ()),
        NodeSpec(2, (2.0, 3.0), (make_channel(2, 1, v=h_cb),)),
    )
    return Scenario(nodes=nodes, wardens=(), tau=tau, alice=0, bob=1, k_max=9)


@pytest.fixture
def triangle():
    return triangle_scenario()
