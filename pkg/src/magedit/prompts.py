"""Token sequences and the source/target alignment that defines common and new tokens."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

from magedit.errors import ConfigError, ContractError


@dataclass(frozen=True)
class Token:
    text: str
    id: int
    position: int


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[Token, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        for i, tok in enumerate(self.tokens):
            if tok.position != i:
                raise ContractError("token positions must be 0-based and contiguous")

    @classmethod
    def from_pieces(cls, pieces: Sequence[tuple[str, int]]) -> "TokenSequence":
        return cls(tuple(Token(text, int(tid), i) for i, (text, tid) in enumerate(pieces)))

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(t.id for t in self.tokens)

    @property
    def text(self) -> str:
        return " ".join(t.text for t in self.tokens)

    def __len__(self):
        return len(self.tokens)

    def __getitem__(self, i):
        return self.tokens[i]


@dataclass(frozen=True)
class NegativePrompt:
    """An auxiliary prompt: the target with the first edit group replaced by a negative phrase."""

    text: str
    tokens: TokenSequence
    positions: tuple[int, ...]
    common: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class PromptPair:
    source: TokenSequence
    target: TokenSequence
    common: tuple[tuple[int, int], ...]
    new_target: tuple[int, ...]
    groups: tuple[tuple[int, ...], ...] = ()
    per_new_token_weight: tuple[float, ...] = ()
    negatives: tuple[NegativePrompt, ...] = field(default=())

    def __post_init__(self):
        covered = sorted([tp for _, tp in self.common] + list(self.new_target))
        if covered != list(range(len(self.target))):
            raise ContractError("common and new positions must partition the target")
        new = set(self.new_target)
        for g in self.groups:
            if not g or not set(g) <= new:
                raise ContractError(f"edit group {g} is not a non-empty set of new positions")
        if self.per_new_token_weight:
            if len(self.per_new_token_weight) != len(self.groups):
                raise ConfigError("one weight per edit group is required")
            if len(self.groups) > 1 and abs(sum(self.per_new_token_weight) - 1.0) > 1e-9:
                raise ConfigError("per-group weights must sum to 1")

    @property
    def weights(self) -> tuple[float, ...]:
        if self.per_new_token_weight:
            return self.per_new_token_weight
        return tuple(1.0 / len(self.groups) for _ in self.groups)

    @property
    def common_target_positions(self) -> tuple[int, ...]:
        return tuple(tp for _, tp in self.common)

    def to_dict(self) -> dict:
        return {
            "source": [t.text for t in self.source],
            "target": [t.text for t in self.target],
            "common": [list(p) for p in self.common],
            "new_target": list(self.new_target),
            "groups": [list(g) for g in self.groups],
            "weights": list(self.weights),
            "negatives": [
                {"text": n.text, "aux_prompt": n.tokens.text, "positions": list(n.positions)}
                for n in self.negatives
            ],
        }


def _lcs_table(a: Sequence[int], b: Sequence[int]) -> list[list[int]]:
    n, m = len(a), len(b)
    table = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            if a[i] == b[j]:
                table[i][j] = table[i + 1][j + 1] + 1
            else:
                table[i][j] = max(table[i + 1][j], table[i][j + 1])
    return table


def lcs_pairs(a: Sequence[int], b: Sequence[int]) -> list[tuple[int, int]]:
    """Longest common subsequence as matched index pairs.

    Among all maximum matchings, picks the next match greedily by smallest
    ``i + j``, then smallest id, then smallest ``i``. Swapping the inputs mirrors
    the result, so both directions match the same ids.
    """
    table = _lcs_table(a, b)
    pairs = []
    i = j = 0
    remaining = table[0][0]
    while remaining:
        best = None
        for ii in range(i, len(a)):
            for jj in range(j, len(b)):
                if a[ii] == b[jj] and table[ii + 1][jj + 1] == remaining - 1:
                    key = (ii + jj, a[ii], ii)
                    if best is None or key < best[0]:
                        best = (key, ii, jj)
        _, ii, jj = best
        pairs.append((ii, jj))
        i, j = ii + 1, jj + 1
        remaining -= 1
    return pairs


def contiguous_runs(positions: Sequence[int]) -> tuple[tuple[int, ...], ...]:
    runs: list[list[int]] = []
    for p in sorted(positions):
        if runs and p == runs[-1][-1] + 1:
            runs[-1].append(p)
        else:
            runs.append([p])
    return tuple(tuple(r) for r in runs)


def align_prompts(source: TokenSequence, target: TokenSequence) -> PromptPair:
    if not len(source) or not len(target):
        raise ContractError("cannot align an empty prompt")
    common = tuple(lcs_pairs(source.ids, target.ids))
    matched = {tp for _, tp in common}
    new = tuple(p for p in range(len(target)) if p not in matched)
    return PromptPair(source, target, common, new, groups=contiguous_runs(new))


def with_groups(
    pair: PromptPair,
    groups: Sequence[Sequence[int]] | None = None,
    weights: Sequence[float] | None = None,
) -> PromptPair:
    """Replace the edit groups and/or their weights."""
    new_groups = pair.groups if groups is None else tuple(tuple(g) for g in groups)
    new_weights = () if weights is None else tuple(float(w) for w in weights)
    if new_weights and len(new_weights) != len(new_groups):
        raise ConfigError(
            f"got {len(new_weights)} weights for {len(new_groups)} edit groups"
        )
    return replace(pair, groups=new_groups, per_new_token_weight=new_weights)


def attach_negative_tokens(
    pair: PromptPair,
    negatives: Sequence[str],
    tokenize: Callable[[str], TokenSequence],
) -> PromptPair:
    """Build one auxiliary prompt per negative phrase.

    Each negative phrase is substituted for the first edit group's span in the
    target, e.g. target "white t-shirt" with negative "black" gives "black t-shirt".
    """
    if not negatives:
        return pair
    if not pair.groups:
        raise ContractError("negative tokens need at least one new target token")
    span = pair.groups[0]
    start, end = min(span), max(span)
    if list(span) != list(range(start, end + 1)):
        raise ContractError("the first edit group must be a contiguous span")
    new_ids = {pair.target[p].id for p in pair.new_target}
    built = []
    for text in negatives:
        neg = tokenize(text)
        if not len(neg):
            raise ContractError(f"negative phrase {text!r} produced no tokens")
        if any(t.id in new_ids for t in neg):
            raise ContractError(f"negative phrase {text!r} repeats a new target token")
        pieces = (
            [(t.text, t.id) for t in pair.target.tokens[:start]]
            + [(t.text, t.id) for t in neg]
            + [(t.text, t.id) for t in pair.target.tokens[end + 1 :]]
        )
        shift = len(neg) - (end - start + 1)
        common = tuple((s, tp if tp < start else tp + shift) for s, tp in pair.common)
        built.append(
            NegativePrompt(
                text=text,
                tokens=TokenSequence.from_pieces(pieces),
                positions=tuple(range(start, start + len(neg))),
                common=common,
            )
        )
    return replace(pair, negatives=pair.negatives + tuple(built))
