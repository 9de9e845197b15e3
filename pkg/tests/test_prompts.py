import pytest

from steermusic.errors import InvalidArgumentError, InvalidStateError
from steermusic.prompts import CONCEPT_SLOT, PromptCondition, PromptVocabulary


def test_ids_follow_slot_order(vocab):
    assert vocab.token_id('instrument', 'piano') == 1
    assert vocab.token_id('genre', 'rock') == 5
    assert vocab.ids_in_slot('texture') == [8, 9]
    assert len(vocab) == 10


def test_null_prompt():
    null = PromptCondition.null()
    assert null.token_ids() == [0]
    with pytest.raises(InvalidArgumentError):
        PromptCondition(frozenset({1}), True)
    with pytest.raises(InvalidArgumentError):
        PromptCondition(frozenset())
    with pytest.raises(InvalidArgumentError):
        PromptCondition(frozenset({0, 3}))


def test_condition_skips_missing_slots(vocab):
    cond = vocab.condition(instrument='flute', genre=None)
    assert cond.token_ids() == [3]
    assert vocab.describe(cond) == 'a recording of flute'


def test_one_token_per_slot(vocab):
    with pytest.raises(InvalidArgumentError):
        vocab.condition_from_ids([1, 2])


def test_unknown_tokens(vocab):
    with pytest.raises(InvalidArgumentError):
        vocab.condition(instrument='kazoo')
    with pytest.raises(InvalidArgumentError):
        vocab.name_of(99)


def test_concepts_are_appended(vocab):
    piano = vocab.token_id('instrument', 'piano')
    sks = vocab.add_concept('sks')
    assert sks == 10
    assert vocab.add_concept('sks') == sks
    assert vocab.token_id('instrument', 'piano') == piano
    assert vocab.slot_of(sks) == CONCEPT_SLOT
    assert vocab.describe(vocab.condition(concept='sks', genre='jazz')) == 'a recording of jazz, [sks]'


def test_require_known(vocab):
    other = vocab.copy()
    cond = other.condition_from_ids([other.add_concept('sks')])
    with pytest.raises(InvalidStateError):
        vocab.require_known(cond)
    other.require_known(cond)


def test_dict_round_trip(vocab):
    vocab.add_concept('sks')
    restored = PromptVocabulary.from_dict(vocab.to_dict())
    assert restored.token_id(CONCEPT_SLOT, 'sks') == vocab.token_id(CONCEPT_SLOT, 'sks')
    assert len(restored) == len(vocab)


def test_duplicate_names_rejected():
    with pytest.raises(InvalidArgumentError):
        PromptVocabulary({'instrument': ['piano', 'piano']})
