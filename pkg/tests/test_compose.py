import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from augtransfer.augcatalog import make_augmentation
from augtransfer.compose import (
    PRESETS,
    CompositionSyntaxError,
    EmissionPlan,
    Leaf,
    Parallel,
    Serial,
    branch_with_dst,
    count_samples,
    emit,
    format_composition,
    parse_composition,
    preset,
)

LEAF_NAMES = ["identity", "scale", "greyscale", "cutout", "uniform_noise", "horizontal_flip", "dst"]


def trees(max_leaves=6, min_children=1):
    leaf = st.builds(lambda n, m: Leaf(make_augmentation(n, m=m) if n in ("scale", "dst") else make_augmentation(n)),
                     st.sampled_from(LEAF_NAMES), st.integers(1, 3))
    return st.recursive(
        leaf,
        lambda kids: st.one_of(st.builds(lambda c: Serial(tuple(c)), st.lists(kids, min_size=min_children, max_size=3)),
                               st.builds(lambda c: Parallel(tuple(c)),
                                         st.lists(kids, min_size=min_children, max_size=3))),
        max_leaves=max_leaves,
    )


def brute_count(node):
    if isinstance(node, Leaf):
        return node.aug.multiplicity
    counts = [brute_count(c) for c in node.children]
    return sum(counts) if isinstance(node, Parallel) else int(np.prod(counts))


class TestCounts:
    @pytest.mark.parametrize("name,count", [("none", 1), ("dst", 5), ("gsdt", 10), ("admix_dt", 15),
                                            ("ultcombo", 30), ("undp", 1)])
    def test_presets(self, name, count):
        assert count_samples(preset(name)) == count

    def test_all_presets_build(self):
        for name in PRESETS:
            preset(name)

    def test_serial_multiplies_parallel_adds(self):
        a, b = Leaf(make_augmentation("scale", m=2)), Leaf(make_augmentation("scale", m=3))
        assert count_samples(Serial((a, b))) == 6
        assert count_samples(Parallel((a, b))) == 5

    def test_empty_children_rejected(self):
        with pytest.raises(ValueError):
            Parallel(())

    @settings(max_examples=50, deadline=None)
    @given(trees(), st.integers(0, 1000))
    def test_emit_matches_count(self, tree, seed):
        x = np.random.default_rng(seed).uniform(size=(3, 8, 8))
        assert len(emit(tree, x, seed)) == count_samples(tree) == brute_count(tree)

    def test_emission_plan(self):
        node = preset("dst")
        assert EmissionPlan().total_count(node) == 5
        assert EmissionPlan(include_pristine_original=True).total_count(node) == 6
        assert EmissionPlan(subset=3).total_count(node) == 3
        assert EmissionPlan(subset=30).total_count(node) == 5

    def test_emit_include_original(self):
        x = np.full((3, 4, 4), 0.5)
        out = emit(preset("dst"), x, 0, include_original=True)
        assert len(out) == 6
        np.testing.assert_array_equal(out[0], x)


class TestBranchWithDst:
    def test_each_aug_gets_a_branch(self):
        node = branch_with_dst(["greyscale", "cutout"])
        assert isinstance(node, Parallel) and len(node.children) == 2
        assert all(isinstance(c, Serial) for c in node.children)

    def test_empty_is_plain_dst(self):
        node = branch_with_dst([])
        assert isinstance(node, Leaf) and node.aug.name == "dst"

    def test_dst_entry_reuses_given_dst(self):
        dst = make_augmentation("dst", size=3)
        node = branch_with_dst(["dst"], dst=dst)
        assert node.aug == dst

    def test_admix_single_copy_in_branch(self):
        node = branch_with_dst(["admix"])
        assert node.children[0].aug.params["m"] == 1
        assert count_samples(node) == 5


class TestDsl:
    def test_parse_example(self):
        node = parse_composition("[greyscale>dst,dst]")
        assert count_samples(node) == 10

    def test_arrow_glyph(self):
        assert parse_composition("greyscale ▸ dst") == parse_composition("greyscale > dst")

    def test_parameters_and_fractions(self):
        node = parse_composition("uniform_noise(amplitude=16/255)")
        assert node.aug.params["amplitude"] == pytest.approx(16 / 255)

    def test_grouping(self):
        node = parse_composition("(scale(m=2) > scale(m=3)) > identity")
        assert count_samples(node) == 6

    def test_preset_names(self):
        assert count_samples(parse_composition("[ultcombo, gsdt]")) == 40

    def test_unclosed_bracket_offset(self):
        with pytest.raises(CompositionSyntaxError) as e:
            parse_composition("[a,b")
        assert e.value.offset == 4

    def test_unknown_name_offset(self):
        with pytest.raises(CompositionSyntaxError) as e:
            parse_composition("dst > blurp")
        assert e.value.offset == 6

    def test_offset_is_in_bytes(self):
        with pytest.raises(CompositionSyntaxError) as e:
            parse_composition("dst ▸ ]")
        assert e.value.offset == len("dst ▸ ".encode())

    def test_bad_parameter(self):
        with pytest.raises(CompositionSyntaxError):
            parse_composition("scale(q=2)")

    @settings(max_examples=60, deadline=None)
    @given(trees(min_children=2))
    def test_round_trip(self, tree):
        assert parse_composition(format_composition(tree)) == tree

    @settings(max_examples=30, deadline=None)
    @given(trees())
    def test_singletons_print_as_child(self, tree):
        # one-child nodes collapse; the sample count is unchanged
        assert count_samples(parse_composition(format_composition(tree))) == count_samples(tree)
