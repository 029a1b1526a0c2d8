import numpy as np
import pytest

from gridcodec.corpus import (
    CORPUS_SIDE,
    context_vs_frequency,
    frequency_code,
    gen_corpus,
    gen_correlated_pair,
    load_corpus,
    save_corpus,
)

N = CORPUS_SIDE**3


class TestGeneration:
    def test_sizes_and_values(self):
        for kind in ("iid", "ones", "correlated"):
            signs = gen_corpus(kind, seed=0)
            assert signs.shape == (N,)
            assert set(np.unique(signs)) <= {-1, 1}

    def test_iid_frequency(self):
        signs = gen_corpus("iid", seed=0, p=0.3)
        assert abs((signs > 0).mean() - 0.3) < 0.005

    def test_deterministic(self):
        assert np.array_equal(gen_corpus("correlated", 7),
                              gen_corpus("correlated", 7))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            gen_corpus("random-walk")

    def test_parent_correlation(self):
        fine, parent = gen_correlated_pair(0)
        agree = (fine == parent).mean()
        assert agree == pytest.approx(0.9, abs=0.01)


class TestFileFormat:
    def test_round_trip(self, tmp_path):
        signs = gen_corpus("iid", seed=1, p=0.6)
        path = str(tmp_path / "c.cnb")
        save_corpus(signs, path)
        assert np.array_equal(load_corpus(path), signs)

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.cnb"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(ValueError):
            load_corpus(str(path))


class TestCoding:
    def test_iid_half_codes_near_one_bit(self):
        signs = gen_corpus("iid", seed=0, p=0.5)
        data = frequency_code(signs)
        assert abs(len(data) - 125000) <= 125  # within 0.1%

    def test_all_ones_tiny(self):
        data = frequency_code(gen_corpus("ones"))
        assert len(data) < 100

    def test_context_beats_frequency_by_ten_percent(self):
        ctx_bytes, freq_bytes = context_vs_frequency(seed=0)
        assert ctx_bytes <= 0.9 * freq_bytes
