import pytest

from spikedepth import backend


@pytest.fixture(scope="session", autouse=True)
def warm_backend():
    """Compile every jitted kernel once so timed tests measure the math,
    not the JIT."""
    backend.warmup()
