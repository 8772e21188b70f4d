import numpy as np
import pytest

from adlog.ingest import SequencePair, EventSequence
from adlog.seq2seq import ModelParams


def make_pair(src, tgt, context="udp") -> SequencePair:
    return SequencePair(EventSequence(tuple(src), context, (0.0, 0.0)),
                        EventSequence(tuple(tgt), context, (1.0, 1.0)))


@pytest.fixture
def tiny_params():
    return ModelParams.init(12, 4, np.random.default_rng(7))
