"""Structured prompt vocabulary and conditions.

Prompts are sets of attribute tokens, one per slot. Token id 0 is the null
token used for unconditional (classifier-free guidance) predictions.
"""

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional

from steermusic.errors import InvalidArgumentError, InvalidStateError

NULL_TOKEN_ID = 0
CONCEPT_SLOT = 'concept'

DEFAULT_SLOTS: Dict[str, List[str]] = {
    'instrument': ['piano', 'strings', 'flute', 'brass'],
    'genre': ['rock', 'jazz', 'ambient'],
    'texture': ['dry', 'airy'],
    CONCEPT_SLOT: [],
}


@dataclass(frozen=True)
class PromptCondition:
    """An immutable prompt: a set of token ids, or the null prompt."""

    tokens: FrozenSet[int] = frozenset()
    is_null: bool = False

    def __post_init__(self):
        if self.is_null and self.tokens:
            raise InvalidArgumentError('the null prompt cannot carry tokens')
        if not self.is_null and not self.tokens:
            raise InvalidArgumentError('a non-null prompt needs at least one token')
        if NULL_TOKEN_ID in self.tokens:
            raise InvalidArgumentError('token id 0 is reserved for the null prompt')

    @classmethod
    def null(cls) -> 'PromptCondition':
        return cls(frozenset(), True)

    def token_ids(self) -> List[int]:
        """Token ids used for the embedding lookup, sorted for determinism."""
        return [NULL_TOKEN_ID] if self.is_null else sorted(self.tokens)


@dataclass
class PromptVocabulary:
    """Maps slot/name pairs to token ids.

    Ids are assigned in slot order at construction; concept tokens are
    appended at the end so existing ids never move.
    """

    slots: Dict[str, List[str]] = field(default_factory=lambda: {
        k: list(v) for k, v in DEFAULT_SLOTS.items()})

    def __post_init__(self):
        if CONCEPT_SLOT not in self.slots:
            self.slots[CONCEPT_SLOT] = []
        self._ids: Dict[tuple, int] = {}
        self._names: Dict[int, tuple] = {}
        next_id = NULL_TOKEN_ID + 1
        for slot, names in self.slots.items():
            for name in names:
                if (slot, name) in self._ids:
                    raise InvalidArgumentError(f'duplicate token {slot}:{name}')
                self._ids[(slot, name)] = next_id
                self._names[next_id] = (slot, name)
                next_id += 1

    def __len__(self) -> int:
        """Number of embedding rows, null token included."""
        return len(self._ids) + 1

    def token_id(self, slot: str, name: str) -> int:
        try:
            return self._ids[(slot, name)]
        except KeyError:
            raise InvalidArgumentError(f'unknown token {slot}:{name}')

    def slot_of(self, token_id: int) -> str:
        return self._lookup(token_id)[0]

    def name_of(self, token_id: int) -> str:
        return self._lookup(token_id)[1]

    def _lookup(self, token_id: int) -> tuple:
        try:
            return self._names[token_id]
        except KeyError:
            raise InvalidArgumentError(f'unknown token id {token_id}')

    def ids_in_slot(self, slot: str) -> List[int]:
        return [self._ids[(slot, name)] for name in self.slots.get(slot, [])]

    def has_token(self, token_id: int) -> bool:
        return token_id == NULL_TOKEN_ID or token_id in self._names

    def has_concept(self, name: str) -> bool:
        return (CONCEPT_SLOT, name) in self._ids

    def add_concept(self, name: str) -> int:
        """Register a concept token and return its id (idempotent)."""
        if self.has_concept(name):
            return self._ids[(CONCEPT_SLOT, name)]
        token_id = len(self)
        self.slots[CONCEPT_SLOT].append(name)
        self._ids[(CONCEPT_SLOT, name)] = token_id
        self._names[token_id] = (CONCEPT_SLOT, name)
        return token_id

    def condition(self, **slot_names: Optional[str]) -> PromptCondition:
        """Build a prompt from ``slot=name`` keywords; ``None`` values are skipped."""
        ids = [self.token_id(slot, name) for slot, name in slot_names.items() if name]
        return self.condition_from_ids(ids)

    def condition_from_ids(self, ids: Iterable[int]) -> PromptCondition:
        ids = frozenset(ids)
        seen = set()
        for token_id in ids:
            slot = self.slot_of(token_id)
            if slot in seen:
                raise InvalidArgumentError(f'prompt has more than one {slot} token')
            seen.add(slot)
        return PromptCondition(ids)

    def require_known(self, cond: PromptCondition) -> None:
        """Raise InvalidStateError if the prompt uses tokens this vocabulary lacks."""
        for token_id in cond.tokens:
            if not self.has_token(token_id):
                raise InvalidStateError(f'token id {token_id} is not registered in this vocabulary')

    def describe(self, cond: PromptCondition) -> str:
        """Human-readable prompt, e.g. ``a recording of flute, rock``."""
        if cond.is_null:
            return ''
        names = []
        for token_id in cond.token_ids():
            slot, name = self._names[token_id]
            names.append(f'[{name}]' if slot == CONCEPT_SLOT else name)
        return 'a recording of ' + ', '.join(names)

    def to_dict(self) -> Dict[str, List[str]]:
        return {slot: list(names) for slot, names in self.slots.items()}

    @classmethod
    def from_dict(cls, data: Dict[str, List[str]]) -> 'PromptVocabulary':
        return cls({slot: list(names) for slot, names in data.items()})

    def copy(self) -> 'PromptVocabulary':
        return PromptVocabulary.from_dict(self.to_dict())
