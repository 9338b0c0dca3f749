import numpy as np
import pytest

from cldlab import pairgen
from cldlab.errors import EmptyPureSet, ShapeMismatch


def test_pair_members_share_the_core_value(canon_d):
    family, source, _ = canon_d
    pairs = pairgen.sample_pairs(family, source, 3000, seed=1)
    for p in pairs:
        # bijective channel: x = 2*xc + xn on both sides
        assert p.x == 2 * p.xc + p.xn
        assert p.x_tilde == 2 * p.xc + p.xn_tilde


def test_marginal_style_matches_the_noncore_marginal(canon_d):
    family, source, _ = canon_d
    pairs = pairgen.sample_pairs(family, source, 100000, style="marginal", seed=4)
    emp = np.bincount([p.xn_tilde for p in pairs], minlength=2) / len(pairs)
    assert np.abs(emp - source.noncore_marginal()).max() < 0.01


def test_uniform_style_redraw(canon_d):
    family, source, _ = canon_d
    pairs = pairgen.sample_pairs(family, source, 100000, style="uniform", seed=4)
    emp = np.bincount([p.xn_tilde for p in pairs], minlength=2) / len(pairs)
    assert np.abs(emp - 0.5).max() < 0.01


def test_labels_follow_the_mechanism(canon_d):
    family, source, _ = canon_d
    pairs = pairgen.sample_pairs(family, source, 100000, seed=4)
    lab = np.array([p.label for p in pairs])
    xc = np.array([p.xc for p in pairs])
    for c in (0, 1):
        assert lab[xc == c].mean() == pytest.approx(
            family.p_y_given_c[c, 1], abs=0.01)


def test_same_seed_reproduces(canon_d):
    family, source, _ = canon_d
    assert pairgen.sample_pairs(family, source, 50, seed=9) == \
        pairgen.sample_pairs(family, source, 50, seed=9)


def test_unknown_style_rejected(canon_d):
    family, source, _ = canon_d
    with pytest.raises(ShapeMismatch):
        pairgen.sample_pairs(family, source, 10, style="latent", seed=0)


class TestPureComposition:
    def test_reps_two_gives_one_pair_per_element(self, canon_d):
        family, source, _ = canon_d
        pairs = pairgen.compose_pure(family, [0, 1], source, reps=2, seed=0)
        assert len(pairs) == 2
        assert [p.xc for p in pairs] == [0, 1]

    def test_groups_share_the_core_value(self, canon_d):
        family, source, _ = canon_d
        groups = pairgen.compose_pure_groups(family, [0, 1], source,
                                             reps=4, seed=3)
        for g in groups:
            assert len(g.xs) == 4
            for p in g.pairs():
                assert p.xc == g.xc
                assert p.label == g.label

    def test_group_pair_count_is_all_unordered(self, canon_d):
        family, source, _ = canon_d
        (g,) = pairgen.compose_pure_groups(family, [1], source, reps=5, seed=3)
        assert len(g.pairs()) == 10  # C(5, 2)

    def test_empty_pure_set_rejected(self, canon_d):
        family, source, _ = canon_d
        with pytest.raises(EmptyPureSet):
            pairgen.compose_pure(family, [], source, reps=2, seed=0)

    def test_single_rep_rejected(self, canon_d):
        family, source, _ = canon_d
        with pytest.raises(ShapeMismatch):
            pairgen.compose_pure(family, [0], source, reps=1, seed=0)


def test_jsonl_round_trip(tmp_path, canon_d):
    family, source, _ = canon_d
    pairs = pairgen.sample_pairs(family, source, 64, seed=2)
    path = str(tmp_path / "pairs.jsonl")
    pairgen.write_pairs_jsonl(pairs, path)
    assert pairgen.read_pairs_jsonl(path) == pairs
