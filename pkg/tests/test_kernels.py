import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zsslu import kernels
from zsslu.kernels import edit_distance, levenshtein_numpy


def dp_reference(a, b):
    """Full quadratic table, written independently of the kernels."""
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[len(a)][len(b)]


BACKENDS = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("a,b,expected", [
    ("", "", 0), ("abc", "", 3), ("", "ab", 2), ("kitten", "sitting", 3), ("flaw", "lawn", 2),
    (["a", "b", "c"], ["a", "x", "c"], 1), (["new", "york"], ["york"], 1),
])
def test_known_distances(backend, a, b, expected):
    assert edit_distance(a, b, backend) == expected


@pytest.mark.parametrize("backend", BACKENDS)
def test_backends_match_reference_on_random_pairs(backend):
    rng = np.random.default_rng(0)
    for _ in range(300):
        a = list(rng.integers(0, 4, rng.integers(0, 12)))
        b = list(rng.integers(0, 4, rng.integers(0, 12)))
        assert edit_distance(a, b, backend) == dp_reference(a, b)


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="abcd ", max_size=15), st.text(alphabet="abcd ", max_size=15))
def test_metric_properties(a, b):
    d = edit_distance(a, b)
    assert d == edit_distance(b, a)
    assert abs(len(a) - len(b)) <= d <= max(len(a), len(b))
    assert (d == 0) == (a == b)
    assert d == levenshtein_numpy(*kernels._encode_pair(a, b))


def test_non_ascii_characters():
    assert edit_distance("café", "cafe") == 1


def test_unknown_backend():
    with pytest.raises(ValueError):
        edit_distance("a", "b", "fortran")


def test_env_flag_selects_numpy_path():
    code = ("from zsslu import kernels; from zsslu.kernels import edit_distance; "
            "print(kernels.HAVE_NUMBA, edit_distance('kitten', 'sitting'))")
    env = {**os.environ, "ZSSLU_DISABLE_NUMBA": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "3"]
