import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cldlab import cld_core
from cldlab.errors import MixedVariants, NotStochastic, ShapeMismatch, UnknownFixture


def test_identity_family_is_valid(identity_family):
    family, domain = identity_family
    assert family.spaces.n_obs == 4
    assert np.allclose(family.p_x_given_cn.sum(axis=2), 1.0)


def test_row_summing_short_rejected():
    spaces = cld_core.LatentSpaces(2, 2, 4, 2)
    px = np.zeros((2, 2, 4))
    px[:, :, 0] = 0.9  # rows sum to 0.9
    with pytest.raises(NotStochastic):
        cld_core.build_family(spaces, px, np.eye(2))


def test_canon_d_tables(canon_d):
    family, source, target = canon_d
    assert family.spaces == cld_core.LatentSpaces(2, 2, 4, 2)
    # y | c flips a 0.75 coin toward the core value
    assert np.allclose(family.p_y_given_c, [[0.75, 0.25], [0.25, 0.75]])
    # x = 2A + B with A = x^c, B = x^n, deterministically
    for c in range(2):
        for n in range(2):
            assert family.p_x_given_cn[c, n, 2 * c + n] == 1.0
    assert np.allclose(source.p_cn, [[0.475, 0.025], [0.025, 0.475]])
    assert np.allclose(target.p_cn, [[0.025, 0.475], [0.475, 0.025]])


def test_canon_n_flips_noncore(canon_n):
    family, source, target = canon_n
    # A survives with probability 0.75, so x=(A,B) lands off-diagonal in A
    # with mass 0.25 regardless of the noncore bit
    assert family.p_x_given_cn[0, 0, 0] == pytest.approx(0.75)
    assert family.p_x_given_cn[0, 0, 2] == pytest.approx(0.25)


def test_unknown_fixture_rejected():
    with pytest.raises(UnknownFixture):
        cld_core.canonical_fixture("CANON-Z")


def test_uniform_cld_domain(identity_family):
    family, _ = identity_family
    d = cld_core.make_domain(family, "CLD", domain_id="flat",
                             p_cn=np.full((2, 2), 0.25))
    assert d.variant == "CLD"


def test_cld3_domain_with_identity_channel(identity_family):
    family, _ = identity_family
    d = cld_core.make_domain(family, "CLD3", domain_id="anti",
                             p_y=np.array([0.5, 0.5]),
                             p_c_given_y=np.eye(2),
                             p_n_given_c=np.full((2, 2), 0.5))
    assert d.variant == "CLD3"
    assert np.allclose(d.p_c_given_y, np.eye(2))


class TestCoherence:
    def test_identical_core_marginals_pass(self, identity_family):
        family, domain = identity_family
        other = cld_core.make_domain(family, "CLD2", domain_id="v",
                                     p_cn=np.array([[0.4, 0.1], [0.3, 0.2]]))
        report = cld_core.check_family_coherence([domain, other], "CLD2")
        assert report["pass"]
        assert report["max_deviation"] == 0.0

    def test_skewed_core_marginal_fails(self, identity_family):
        family, domain = identity_family
        skew = cld_core.make_domain(family, "CLD2", domain_id="w",
                                    p_cn=np.array([[0.3, 0.3], [0.2, 0.2]]))
        report = cld_core.check_family_coherence([domain, skew], "CLD2")
        assert not report["pass"]
        assert report["max_deviation"] == pytest.approx(0.1)

    def test_canon_d_pair_coheres(self, canon_d):
        family, source, target = canon_d
        report = cld_core.check_family_coherence([source, target], "CLD2")
        assert report["pass"]

    def test_mixed_variants_rejected(self, identity_family):
        family, domain = identity_family
        cld3 = cld_core.make_domain(family, "CLD3", domain_id="m",
                                    p_y=np.array([0.5, 0.5]),
                                    p_c_given_y=np.eye(2),
                                    p_n_given_c=np.full((2, 2), 0.5))
        with pytest.raises(MixedVariants):
            cld_core.check_family_coherence([domain, cld3], "CLD2")


class TestSampling:
    def test_zero_draws_forbidden(self, canon_d):
        family, source, _ = canon_d
        with pytest.raises(ShapeMismatch):
            cld_core.sample_dataset(family, source, 0, seed=0)

    def test_point_mass_forces_the_record(self, identity_family):
        family, _ = identity_family
        point = cld_core.make_domain(
            family, "CLD2", domain_id="pt",
            p_cn=np.array([[0.0, 0.0], [0.0, 1.0]]))
        ds = cld_core.sample_dataset(family, point, 1, seed=0)
        assert (ds.xc[0], ds.xn[0], ds.x[0], ds.y[0]) == (1, 1, 3, 1)

    def test_source_correlation_shows_in_counts(self, canon_d):
        family, source, _ = canon_d
        ds = cld_core.sample_dataset(family, source, 100000, seed=3)
        assert (ds.xn == ds.xc).mean() == pytest.approx(0.95, abs=0.01)

    def test_same_seed_same_bytes(self, canon_d):
        family, source, _ = canon_d
        a = cld_core.sample_dataset(family, source, 500, seed=11)
        b = cld_core.sample_dataset(family, source, 500, seed=11)
        for field in ("x", "y", "xc", "xn"):
            assert np.array_equal(getattr(a, field), getattr(b, field))

    def test_provenance_is_consistent(self, canon_d):
        family, source, _ = canon_d
        ds = cld_core.sample_dataset(family, source, 2000, seed=5)
        # bijective channel: x must decode back to the latent pair
        assert np.array_equal(ds.x, 2 * ds.xc + ds.xn)


def test_round_trip_through_dict(canon_d):
    family, source, target = canon_d
    doc = cld_core.family_to_dict(family, [source, target])
    fam2, doms2 = cld_core.family_from_dict(doc)
    assert np.array_equal(fam2.p_y_given_c, family.p_y_given_c)
    assert np.array_equal(fam2.p_x_given_cn, family.p_x_given_cn)
    assert [d.domain_id for d in doms2] == ["source", "target"]
    assert np.array_equal(doms2[1].p_cn, target.p_cn)


def test_load_family_json(tmp_path, canon_d):
    family, source, target = canon_d
    path = tmp_path / "fam.json"
    path.write_text(json.dumps(cld_core.family_to_dict(family, [source, target])))
    fam2, doms2 = cld_core.load_family_json(str(path))
    assert fam2.spaces == family.spaces
    assert len(doms2) == 2


def test_bit_coords_cover_the_plane():
    assert np.array_equal(cld_core.bit_coords(4),
                          [[0, 0], [0, 1], [1, 0], [1, 1]])


def test_joint_sums_to_one(canon_d):
    family, source, _ = canon_d
    assert cld_core.joint_cnxy(family, source).sum() == pytest.approx(1.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_random_families_are_well_formed(seed):
    family, domains = cld_core.random_family(seed)
    s = family.spaces
    assert s.n_obs == s.n_core * s.n_noncore
    # channel is a bijection: exactly one unit cell per (c, n)
    flat = family.p_x_given_cn.reshape(-1, s.n_obs)
    assert np.array_equal(np.sort(flat.argmax(axis=1)), np.arange(s.n_obs))
    assert np.allclose(flat.sum(axis=1), 1.0)
    report = cld_core.check_family_coherence(domains, "CLD2")
    assert report["pass"]
