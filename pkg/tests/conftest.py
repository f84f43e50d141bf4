import pytest

from convspec.subtitles import segment_dialogs
from convspec.tokenizer import build_vocab
from convspec.toyworld import ToyWorld


@pytest.fixture(scope="session")
def world():
    return ToyWorld.build(0)


@pytest.fixture(scope="session")
def os_pairs(world):
    return world.subtitle_pairs(60, seed=0)


@pytest.fixture(scope="session")
def vocab(os_pairs):
    return build_vocab([p.src_text for p in os_pairs] + [p.tgt_text for p in os_pairs], 120)


@pytest.fixture(scope="session")
def os_dialogs(os_pairs):
    return segment_dialogs(os_pairs, 2, 15, seed=0)[0]
