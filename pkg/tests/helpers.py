import numpy as np
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from plumebias.tiles import Tile


@st.composite
def tiles(draw, channels=st.integers(1, 4), size=st.integers(2, 12), label=True):
    c = draw(channels)
    h = draw(size)
    pixels = draw(hnp.arrays(np.float32, (c, h, h),
                             elements=st.floats(-50, 50, width=32, allow_nan=False, allow_infinity=False)))
    mask = draw(hnp.arrays(np.bool_, (h, h)))
    return Tile(
        id=draw(st.text("abcdefgh0123456789_", min_size=1, max_size=8)),
        pixels=pixels,
        mask=mask,
        label=draw(st.sampled_from([0, 1])) if label else None,
        lat=draw(st.floats(-90, 90)),
        lon=draw(st.floats(-180, 179.999)),
    )


def random_tile(rng: np.random.Generator, c=3, h=8, coverage=None, tid="t0", label=0) -> Tile:
    if coverage is None:
        mask = rng.random((h, h)) < rng.uniform(0.05, 1.0)
    else:
        mask = np.zeros(h * h, bool)
        mask[: int(round(coverage * h * h))] = True
        mask = rng.permutation(mask).reshape(h, h)
    pixels = rng.normal(0.3, 1.0, (c, h, h)).astype(np.float32)
    return Tile(tid, pixels, mask, label, float(rng.uniform(-60, 60)), float(rng.uniform(-180, 180)))
