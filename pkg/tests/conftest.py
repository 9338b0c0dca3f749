import numpy as np
import pytest

from cldlab import cld_core


@pytest.fixture(scope="session")
def canon_d():
    return cld_core.canonical_fixture("CANON-D")


@pytest.fixture(scope="session")
def canon_n():
    return cld_core.canonical_fixture("CANON-N")


@pytest.fixture
def identity_family():
    """2x2 deterministic family: x encodes the latent pair, y copies x^c."""
    spaces = cld_core.LatentSpaces(2, 2, 4, 2)
    px = np.zeros((2, 2, 4))
    for c in range(2):
        for n in range(2):
            px[c, n, 2 * c + n] = 1.0
    family = cld_core.build_family(spaces, px, np.eye(2))
    domain = cld_core.make_domain(family, "CLD2", domain_id="u",
                                  p_cn=np.full((2, 2), 0.25))
    return family, domain
