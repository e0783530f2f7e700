import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_map
from scdm.errors import CellValueError, MapFormatError, TruncatedFileError
from scdm.labelmap import (
    ClassStats,
    SemanticMap,
    class_ious,
    decode_map,
    encode_map,
    estimate_stats,
    load_map,
    load_stats,
    miou,
    save_map,
    save_stats,
)


def slm_bytes(h, w, c, cells) -> bytes:
    # independent writer: header text plus struct-free little-endian u16
    body = b"".join(int(v).to_bytes(2, "little") for v in cells)
    return f"SLM1\n{h} {w} {c}\n".encode() + body


class TestFormat:
    def test_smallest_file(self):
        m = decode_map(slm_bytes(1, 1, 3, [2]))
        assert m == SemanticMap(np.array([[2]]), 3)

    def test_cell_above_mask_rejected(self):
        with pytest.raises(CellValueError):
            decode_map(slm_bytes(1, 1, 3, [5]))

    def test_mask_encodes_as_c(self):
        data = encode_map(SemanticMap.all_mask((1, 1), 3))
        assert data == slm_bytes(1, 1, 3, [3])

    @pytest.mark.parametrize(
        "data, err",
        [
            (b"SLM2\n1 1 3\n\x00\x00", MapFormatError),
            (b"SLM1\n1 1\n\x00\x00", MapFormatError),
            (b"SLM1\n2 2 3\n\x00\x00", TruncatedFileError),
            (b"SLM1\n1 1 3\n\x00\x00\x00", MapFormatError),
            (b"SLM1\n0 1 3\n", MapFormatError),
        ],
    )
    def test_malformed(self, data, err):
        with pytest.raises(err):
            decode_map(data)

    def test_roundtrip_bytes_100_maps(self, tmp_path, rng):
        for i in range(100):
            h, w = rng.integers(1, 24, size=2)
            c = int(rng.integers(1, 300))
            cells = rng.integers(0, c + 1, size=h * w)
            raw = slm_bytes(h, w, c, cells)
            p = tmp_path / f"m{i}.slm"
            p.write_bytes(raw)
            save_map(load_map(p), tmp_path / "again.slm")
            assert (tmp_path / "again.slm").read_bytes() == raw

    def test_two_saves_identical(self, tmp_path, rng):
        m = random_map(rng, allow_mask=True)
        save_map(m, tmp_path / "a.slm")
        save_map(m, tmp_path / "b.slm")
        assert (tmp_path / "a.slm").read_bytes() == (tmp_path / "b.slm").read_bytes()

    @given(arrays(np.uint16, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 7)))
    def test_load_save_identity(self, cells):
        m = SemanticMap(cells, 7)
        assert decode_map(encode_map(m)) == m

    def test_cells_read_only(self, rng):
        m = random_map(rng)
        with pytest.raises(ValueError):
            m.cells[0, 0] = 1


def test_semantic_map_validation():
    with pytest.raises(CellValueError):
        SemanticMap(np.array([[4]]), 3)
    with pytest.raises(ValueError):
        SemanticMap(np.zeros((2, 2, 2), dtype=int), 3)
    with pytest.raises(ValueError):
        SemanticMap(np.zeros((1, 1), dtype=int), 0)


class TestStats:
    def test_single_class_corpus(self):
        m = SemanticMap.full((3, 3), 0, 1)
        s = estimate_stats([m])
        assert s.psi[0] == 1.0 and s.phi[0] == 0.0
        assert estimate_stats([m], clamp_phi=True).phi[0] == 1.0

    def test_hand_example(self):
        a = SemanticMap.full((2, 2), 0, 2)
        b = SemanticMap(np.array([[0, 0], [1, 1]]), 2)
        s = estimate_stats([a, b])
        assert s.psi[1] == 2.0
        assert s.phi[1] == pytest.approx(math.log(2), abs=1e-15)
        # class 0: fractions 1 and 1/2 over two maps
        assert s.psi[0] == float(1 / Fraction(3, 4))
        assert s.phi[0] == 0.0

    def test_absent_class(self):
        s = estimate_stats([SemanticMap.full((2, 2), 0, 3)], clamp_phi=True)
        assert math.isinf(s.psi[2]) and math.isinf(s.phi[2])
        assert s.products()[2] == s.products()[0]

    def test_target_min_product(self, rng):
        maps = [random_map(rng, (8, 8), 4) for _ in range(10)]
        maps.append(SemanticMap.full((8, 8), 0, 4))
        s = estimate_stats(maps, clamp_phi=True, target_min_product=5.0)
        assert s.products().min() == pytest.approx(5.0)

    @given(st.lists(st.integers(0, 2**31), min_size=1, max_size=6), st.randoms())
    def test_permutation_invariant(self, seeds, pyrand):
        maps = [random_map(np.random.default_rng(s), (4, 5), 4) for s in seeds]
        shuffled = list(maps)
        pyrand.shuffle(shuffled)
        a, b = estimate_stats(maps), estimate_stats(shuffled)
        assert np.array_equal(a.psi, b.psi) and np.array_equal(a.phi, b.phi)

    @given(st.integers(0, 2**31))
    def test_psi_at_least_one(self, seed):
        rng = np.random.default_rng(seed)
        maps = [random_map(rng, (3, 4), 6) for _ in range(3)]
        s = estimate_stats(maps)
        assert (s.psi[s.present] >= 1.0).all()

    def test_json_roundtrip(self, tmp_path):
        s = estimate_stats([SemanticMap(np.array([[0, 1]]), 3)], clamp_phi=True, unlabeled_class=0)
        save_stats(s, tmp_path / "s.json", {"note": "x"})
        back = load_stats(tmp_path / "s.json")
        assert np.array_equal(back.psi, s.psi) and np.array_equal(back.phi, s.phi)
        assert back.unlabeled_class == 0

    def test_rejects_bad_corpus(self):
        with pytest.raises(ValueError):
            estimate_stats([])
        with pytest.raises(ValueError):
            estimate_stats([SemanticMap.all_mask((2, 2), 2)])


class TestMiou:
    def test_identical(self, rng):
        m = random_map(rng)
        assert miou(m, m) == 1.0

    def test_disjoint(self):
        assert miou(SemanticMap.full((2, 2), 0, 2), SemanticMap.full((2, 2), 1, 2)) == 0.0

    def test_hand_example(self):
        pred = SemanticMap(np.array([[0, 0], [1, 1]]), 2)
        truth = SemanticMap(np.array([[0, 1], [1, 1]]), 2)
        ious = class_ious(pred, truth)
        assert ious == {0: 0.5, 1: pytest.approx(2 / 3)}
        assert miou(pred, truth) == pytest.approx(7 / 12, abs=1e-15)

    def test_ignore(self):
        pred = SemanticMap(np.array([[0, 1]]), 2)
        truth = SemanticMap(np.array([[0, 0]]), 2)
        assert miou(pred, truth, ignore=None) == 0.25
        assert miou(pred, SemanticMap(np.array([[0, 2]]), 2), ignore=2) == 1.0

    @given(st.integers(0, 2**31))
    def test_symmetric_same_class_set(self, seed):
        rng = np.random.default_rng(seed)
        a = random_map(rng, (6, 6), 3)
        b = SemanticMap(rng.permutation(a.cells.ravel()).reshape(6, 6), 3)
        assert miou(a, b) == pytest.approx(miou(b, a), abs=1e-15)
        assert miou(a, a) == 1.0
