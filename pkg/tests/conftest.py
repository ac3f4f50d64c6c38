import pytest

from panosplat import accel

LANES = ["numpy"] + (["numba"] if accel.numba_available() else [])


@pytest.fixture(params=LANES)
def lane(request):
    """Run the test once per kernel backend."""
    with accel.forced(request.param):
        yield request.param
