from hypothesis import given
from hypothesis import strategies as st

from crlbench.seeding import derive_seed


def test_same_parts_same_seed() -> None:
    assert derive_seed(1, "augment", 2) == derive_seed(1, "augment", 2)


def test_different_parts_differ() -> None:
    seen = {
        derive_seed(1, "augment", 2),
        derive_seed(1, "augment", 3),
        derive_seed(2, "augment", 2),
        derive_seed(1, "order", 2),
    }
    assert len(seen) == 4


@given(st.lists(st.one_of(st.integers(), st.text(max_size=8)), min_size=1, max_size=5))
def test_seed_fits_numpy_range(parts) -> None:
    seed = derive_seed(*parts)
    assert 0 <= seed < 2**63


def test_part_boundaries_matter() -> None:
    # ("ab", "c") and ("a", "bc") must not collide via naive concatenation
    assert derive_seed("ab", "c") != derive_seed("a", "bc")
