import pytest

from weight_export import export_network


@pytest.fixture(scope="session")
def exports():
    """Architecture exports are slow enough to share across the session."""
    cache = {}

    def get(arch):
        if arch not in cache:
            cache[arch] = export_network(arch)
        return cache[arch]

    return get
