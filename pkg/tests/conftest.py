import os
from typing import List, Sequence

import hypothesis
import numpy as np
import pytest

from domain.models import SymbolSpace, ContextTuple, Sample, SynthParams
from domain.dataset import synth_dataset, build_histogram

np.seterr(all="warn")

hypothesis.settings.register_profile("default", max_examples=40, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))


# =============================================================================
# Spaces
# =============================================================================

@pytest.fixture
def hevc_space() -> SymbolSpace:
    return SymbolSpace.hevc()


@pytest.fixture
def jem_space() -> SymbolSpace:
    return SymbolSpace.jem()


# =============================================================================
# Samples
# =============================================================================

def random_samples(space: SymbolSpace, n: int, seed: int, contexts: Sequence[str] = ("L", "U")) -> List[Sample]:
    """균등 난수 샘플; contexts 밖의 이웃은 -1"""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        values = {c.lower(): int(rng.integers(-1, space.k)) for c in contexts}
        out.append(Sample(int(rng.integers(space.k)), ContextTuple(**values)))
    return out


@pytest.fixture
def make_samples():
    return random_samples


@pytest.fixture(scope="session")
def hevc_synth() -> List[Sample]:
    return synth_dataset(SymbolSpace.hevc(), SynthParams(width=32, height=32, seed=3))


@pytest.fixture(scope="session")
def hevc_synth_rd() -> List[Sample]:
    params = SynthParams(width=16, height=16, seed=11, rd_alternates=3, rd_gap_scale=0.5)
    return synth_dataset(SymbolSpace.hevc(), params)


@pytest.fixture(scope="session")
def jem_synth() -> List[Sample]:
    return synth_dataset(SymbolSpace.jem(), SynthParams(width=24, height=24, seed=5))


@pytest.fixture(scope="session")
def hevc_hist_lu(hevc_synth):
    return build_histogram(hevc_synth, ("L", "U"), SymbolSpace.hevc())


@pytest.fixture(scope="session")
def hevc_hist_full(hevc_synth):
    return build_histogram(hevc_synth, ("L", "U", "BL", "UR", "UL"), SymbolSpace.hevc())
