import numpy as np
import pytest
from hypothesis import given, strategies as st

from infra.exceptions import ValidationError, DatasetParseError, EmptyInputError
from domain.models import SymbolSpace, ContextTuple, Sample, SynthParams, UNAVAILABLE, CONTEXT_NAMES
from domain.dataset import (
    build_histogram, histogram_from_counts, normalize_context_set, load_samples, save_samples,
    synth_dataset, SyntheticGenerator
)

SMALL = SymbolSpace(6)

sample_st = st.builds(
    Sample,
    st.integers(0, SMALL.k - 1),
    st.builds(ContextTuple, *(st.integers(-1, SMALL.k - 1) for _ in CONTEXT_NAMES)),
)


# =============================================================================
# Symbol space / samples
# =============================================================================

def test_hevc_space_wraps_angular_modes(hevc_space):
    assert hevc_space.k == 35
    assert hevc_space.num_angular == 33
    assert hevc_space.wrap(34, 1) == 2
    assert hevc_space.wrap(2, -1) == 34
    assert hevc_space.wrap(10, 3) == 13


def test_symbol_space_rejects_bad_ranges():
    with pytest.raises(ValueError):
        SymbolSpace(2)
    with pytest.raises(ValueError):
        SymbolSpace.for_profile("custom")
    assert SymbolSpace.for_profile("custom", 12).angular_max == 11


def test_sample_validation(hevc_space):
    Sample(26, ContextTuple(l=26, u=-1)).validate(hevc_space)
    with pytest.raises(ValueError):
        Sample(35, ContextTuple()).validate(hevc_space)
    with pytest.raises(ValueError):
        Sample(3, ContextTuple(l=40)).validate(hevc_space)
    with pytest.raises(ValueError):
        Sample(3, ContextTuple(), ((4, 0.1), (5, 0.2))).validate(hevc_space)


# =============================================================================
# Histogram
# =============================================================================

def test_normalize_context_set():
    assert normalize_context_set("l, u") == ("L", "U")
    assert normalize_context_set(["UL", "L"]) == ("UL", "L")
    with pytest.raises(ValidationError):
        normalize_context_set("L,X")
    with pytest.raises(ValidationError):
        normalize_context_set("L,L")


def test_empty_samples_rejected():
    with pytest.raises(EmptyInputError):
        build_histogram([], ("L",), SMALL)


@given(st.lists(sample_st, min_size=1, max_size=60))
def test_histogram_counts_every_sample(samples):
    """셀 합계 == 샘플 수, 풀링된 분포 == 모드 빈도"""
    hist = build_histogram(samples, ("L", "U"), SMALL)
    assert hist.total == len(samples)
    expected = np.bincount([s.ipm for s in samples], minlength=SMALL.k)
    assert np.array_equal(hist.pooled(), expected)


@given(st.lists(sample_st, min_size=1, max_size=60))
def test_marginalize_matches_direct_projection(samples):
    full = build_histogram(samples, CONTEXT_NAMES, SMALL)
    direct = build_histogram(samples, ("U",), SMALL)
    projected = full.marginalize(("U",))
    assert projected.cells.keys() == direct.cells.keys()
    for key, counts in direct.cells.items():
        assert np.array_equal(projected.cells[key], counts)


def test_marginalize_to_empty_set_pools_everything(make_samples):
    samples = make_samples(SMALL, 50, seed=1)
    hist = build_histogram(samples, ("L", "U"), SMALL).marginalize(())
    assert hist.num_cells == 1
    assert hist.total == 50


def test_histogram_from_counts_checks_length():
    hist = histogram_from_counts(("L",), 4, {(2,): [1, 0, 3, 0], (3,): [0, 0, 0, 5]})
    assert hist.total == 9
    assert hist.cell_context(0).l == 2
    with pytest.raises(ValidationError):
        histogram_from_counts(("L",), 4, {(2,): [1, 0, 3]})


def test_missing_context_column_reads_unavailable():
    hist = histogram_from_counts(("L",), 4, {(2,): [1, 0, 3, 0]})
    assert hist.column("U").tolist() == [UNAVAILABLE]


# =============================================================================
# File I/O
# =============================================================================

def test_csv_roundtrip_keeps_rd_candidates(tmp_path, hevc_space):
    samples = [
        Sample(26, ContextTuple(l=26, u=10), ((26, 1.5), (10, 2.25))),
        Sample(0, ContextTuple(), ((0, 0.0), (1, 0.5))),
    ]
    path = tmp_path / "s.csv"
    save_samples(str(path), samples, hevc_space, header_comment="experiment: {}")
    assert path.read_text().startswith("# experiment: {}")
    assert load_samples(str(path), hevc_space) == samples


def test_binary_roundtrip(tmp_path, hevc_synth, hevc_space):
    path = tmp_path / "s.ipms"
    save_samples(str(path), hevc_synth, hevc_space, binary=True)
    assert load_samples(str(path), hevc_space) == hevc_synth


def test_binary_format_rejects_rd_candidates(tmp_path, hevc_space):
    with pytest.raises(ValidationError):
        save_samples(str(tmp_path / "x.ipms"), [Sample(1, ContextTuple(), ((1, 0.0),))], hevc_space, binary=True)


def test_binary_file_with_other_k_is_rejected(tmp_path, hevc_synth, hevc_space):
    path = tmp_path / "s.ipms"
    save_samples(str(path), hevc_synth, hevc_space, binary=True)
    with pytest.raises(ValidationError):
        load_samples(str(path), SymbolSpace.jem())


def test_malformed_csv_reports_line(tmp_path, hevc_space):
    path = tmp_path / "bad.csv"
    path.write_text("ipm,L,U,BL,UR,UL\n# note\n3,1,1,-1,-1,-1\n4,x,1,-1,-1,-1\n")
    with pytest.raises(DatasetParseError) as info:
        load_samples(str(path), hevc_space)
    assert info.value.line == 4


def test_out_of_range_mode_in_csv(tmp_path, hevc_space):
    path = tmp_path / "bad.csv"
    path.write_text("35,1,1,-1,-1,-1\n")
    with pytest.raises(ValidationError):
        load_samples(str(path), hevc_space)


def test_missing_file(tmp_path, hevc_space):
    with pytest.raises(ValidationError):
        load_samples(str(tmp_path / "nope.csv"), hevc_space)


# =============================================================================
# Synthetic generator
# =============================================================================

def test_synth_is_deterministic(hevc_space):
    params = SynthParams(width=8, height=8, seed=42)
    assert synth_dataset(hevc_space, params) == synth_dataset(hevc_space, params)
    assert synth_dataset(hevc_space, params) != synth_dataset(hevc_space, SynthParams(width=8, height=8, seed=43))


def test_synth_raster_neighbours(hevc_synth):
    assert len(hevc_synth) == 32 * 32
    assert hevc_synth[0].ctx == ContextTuple()
    assert all(s.ctx.bl == UNAVAILABLE for s in hevc_synth)
    # 두 번째 블록의 L 은 첫 블록의 모드
    assert hevc_synth[1].ctx.l == hevc_synth[0].ipm
    assert hevc_synth[32].ctx.u == hevc_synth[0].ipm


def test_synth_full_copy_reuses_neighbours(hevc_space):
    samples = synth_dataset(hevc_space, SynthParams(width=10, height=10, copy_prob=1.0, jitter_prob=0.0,
                                                    nonangular_prob=0.0, seed=9))
    for s in samples[1:]:
        neighbours = {v for v in (s.ctx.l, s.ctx.u, s.ctx.ur, s.ctx.ul) if v != UNAVAILABLE}
        assert s.ipm in neighbours


def test_synth_rd_candidates(hevc_synth_rd, hevc_space):
    for s in hevc_synth_rd:
        s.validate(hevc_space)
        assert len(s.rd_candidates) == 4
        chosen = dict(s.rd_candidates)[s.ipm]
        assert all(d > chosen for m, d in s.rd_candidates if m != s.ipm)


def test_synth_rejects_bad_probabilities(hevc_space):
    with pytest.raises(ValidationError):
        SyntheticGenerator(hevc_space).generate(SynthParams(copy_prob=0.8, jitter_prob=0.5))
    with pytest.raises(ValidationError):
        SyntheticGenerator(hevc_space).generate(SynthParams(width=1))
