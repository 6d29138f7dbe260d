"""Stage 1: high-recall fuzzy lexicon scan and context-window extraction.

Every token of every note is compared against the adverse-event lexicon
with a normalized edit-distance score; hits above the similarity threshold
become mention candidates, and each candidate gets a window of up to five
tokens on either side for the downstream classifier.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import TokenizedNote
from .errors import ConfigError, DataFormatError

DEFAULT_ADVERSE_EVENTS = (
    "pneumonitis",
    "hepatitis",
    "thyroiditis",
    "colitis",
    "myocarditis",
    "dermatitis",
    "myasthenia_gravis",
)

# Single-token English surface form per adverse event. Multi-word
# expressions are out of scope; myasthenia gravis is matched on its
# distinctive first token.
_DEFAULT_TERMS = {
    "pneumonitis": "pneumonitis",
    "hepatitis": "hepatitis",
    "thyroiditis": "thyroiditis",
    "colitis": "colitis",
    "myocarditis": "myocarditis",
    "dermatitis": "dermatitis",
    "myasthenia_gravis": "myasthenia",
}


@dataclass(frozen=True)
class LexiconEntry:
    ae_id: str
    term: str
    language: str = "en"
    threshold: float | None = None  # overrides MatchConfig.similarity_threshold

    def __post_init__(self) -> None:
        if not self.term:
            raise ConfigError("lexicon term must be non-empty")
        if self.term != self.term.lower():
            raise ConfigError(f"lexicon term must be lowercase-normalized: {self.term!r}")
        if self.threshold is not None and not 0.0 < self.threshold <= 1.0:
            raise ConfigError("per-entry threshold must lie in (0, 1]")


@dataclass(frozen=True)
class MatchConfig:
    similarity_threshold: float = 0.80
    window_radius: int = 5
    case_fold: bool = True
    min_token_length: int = 4

    def __post_init__(self) -> None:
        if not 0.0 < self.similarity_threshold <= 1.0:
            raise ConfigError("similarity_threshold must lie in (0, 1]")
        if self.window_radius < 1:
            raise ConfigError("window_radius must be >= 1")
        if self.min_token_length < 1:
            raise ConfigError("min_token_length must be >= 1")


@dataclass(frozen=True)
class MentionCandidate:
    note_id: str
    ae_id: str
    token_index: int
    matched_surface: str
    matched_term: str
    similarity: float


@dataclass(frozen=True)
class ContextWindow:
    """The matched token plus up to window_radius tokens on each side."""

    note_id: str | None
    ae_id: str
    token_index: int | None
    center: int
    tokens: tuple[str, ...]
    similarity: float | None = None
    label: bool | None = None


def default_lexicon() -> list[LexiconEntry]:
    return [LexiconEntry(ae_id=ae, term=_DEFAULT_TERMS[ae]) for ae in DEFAULT_ADVERSE_EVENTS]


def load_lexicon(path: str | Path) -> list[LexiconEntry]:
    """Parse a tab-separated lexicon file.

    Lines are ``ae_id<TAB>term<TAB>language`` with an optional fourth
    per-entry similarity threshold; ``#`` lines are comments.
    """
    path = Path(path)
    entries: list[LexiconEntry] = []
    seen: set[tuple[str, str]] = set()
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise DataFormatError(
                    f"{path}: line {line_no}: expected ae_id<TAB>term[<TAB>language[<TAB>threshold]]"
                )
            ae_id, term = parts[0].strip(), parts[1].strip().lower()
            language = parts[2].strip() if len(parts) > 2 and parts[2].strip() else "en"
            threshold = None
            if len(parts) > 3 and parts[3].strip():
                try:
                    threshold = float(parts[3])
                except ValueError:
                    raise DataFormatError(
                        f"{path}: line {line_no}: threshold is not a number: {parts[3]!r}"
                    ) from None
            key = (ae_id, term)
            if key in seen:
                raise DataFormatError(f"{path}: line {line_no}: duplicate entry {key}")
            seen.add(key)
            try:
                entries.append(
                    LexiconEntry(ae_id=ae_id, term=term, language=language, threshold=threshold)
                )
            except ConfigError as exc:
                raise DataFormatError(f"{path}: line {line_no}: {exc}") from None
    if not entries:
        raise DataFormatError(f"{path}: lexicon is empty")
    return entries


# ---------------------------------------------------------------------------
# Edit distance
# ---------------------------------------------------------------------------


def levenshtein(a: str, b: str) -> int:
    """Minimum number of single-character edits transforming a into b.

    Two-row dynamic program over Unicode scalar values; insertions,
    deletions, and substitutions all cost 1.
    """
    if a == b:
        return 0
    la, lb = len(a), len(b)
    if la == 0:
        return lb
    if lb == 0:
        return la
    if la < lb:  # iterate over the shorter string's rows
        a, b, la, lb = b, a, lb, la
    prev = list(range(lb + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        append = cur.append
        for j, cb in enumerate(b, start=1):
            cost = 0 if ca == cb else 1
            append(min(cur[j - 1] + 1, prev[j] + 1, prev[j - 1] + cost))
        prev = cur
    return prev[lb]


def levenshtein_within(a: str, b: str, limit: int) -> int:
    """Banded variant: the exact distance when it is <= limit, else limit + 1.

    Cells outside the diagonal band of half-width ``limit`` cannot lie on
    any path of cost <= limit, so only the band is evaluated; an early exit
    fires when a full row exceeds the budget.
    """
    la, lb = len(a), len(b)
    if limit < 0:
        return 0 if a == b else limit + 1
    if abs(la - lb) > limit:
        return limit + 1
    if a == b:
        return 0
    if la == 0 or lb == 0:
        return max(la, lb)
    if la < lb:
        a, b, la, lb = b, a, lb, la
    big = limit + 1
    prev = [j if j <= limit else big for j in range(lb + 1)]
    for i in range(1, la + 1):
        ca = a[i - 1]
        j_lo = max(1, i - limit)
        j_hi = min(lb, i + limit)
        cur = [big] * (lb + 1)
        if j_lo == 1:
            cur[0] = i if i <= limit else big
        best = cur[0] if j_lo == 1 else big
        for j in range(j_lo, j_hi + 1):
            cb = b[j - 1]
            cost = 0 if ca == cb else 1
            value = min(cur[j - 1] + 1, prev[j] + 1, prev[j - 1] + cost)
            if value > big:
                value = big
            cur[j] = value
            if value < best:
                best = value
        if best > limit:
            return big
        prev = cur
    return prev[lb] if prev[lb] <= limit else big


def similarity(a: str, b: str) -> float:
    """Normalized similarity 1 - d(a, b) / max(|a|, |b|), in [0, 1]."""
    if not a and not b:
        raise ValueError("similarity is undefined for two empty strings")
    return 1.0 - levenshtein(a, b) / max(len(a), len(b))


# ---------------------------------------------------------------------------
# Scanning
# ---------------------------------------------------------------------------


class LexiconScanner:
    """Reusable scanner with a per-surface memo.

    Clinical text repeats a small vocabulary heavily, so hit lists are
    cached per distinct surface; the cache is semantically transparent
    (scan results are a pure function of surface, lexicon, and config).
    """

    def __init__(self, lexicon: Sequence[LexiconEntry], config: MatchConfig | None = None):
        if not lexicon:
            raise ConfigError("lexicon must be non-empty")
        self.config = config or MatchConfig()
        by_ae: dict[str, list[LexiconEntry]] = {}
        for entry in lexicon:
            by_ae.setdefault(entry.ae_id, []).append(entry)
        # sorted terms make the tie rule (lexicographically smallest) a
        # strict-improvement comparison
        self._by_ae = {ae: sorted(entries, key=lambda e: e.term) for ae, entries in sorted(by_ae.items())}
        self._cache: dict[str, tuple[tuple[str, str, float], ...]] = {}

    def lookup(self, surface: str) -> tuple[tuple[str, str, float], ...]:
        """Best (ae_id, term, similarity) per adverse event for one token."""
        hits = self._cache.get(surface)
        if hits is not None:
            return hits
        word = surface.casefold() if self.config.case_fold else surface
        lw = len(word)
        found: list[tuple[str, str, float]] = []
        default_threshold = self.config.similarity_threshold
        for ae_id, entries in self._by_ae.items():
            best_sim = -1.0
            best_term = None
            for entry in entries:
                term = entry.term
                threshold = entry.threshold if entry.threshold is not None else default_threshold
                longest = max(lw, len(term))
                budget = int((1.0 - threshold) * longest + 1e-9)
                if abs(lw - len(term)) > budget:
                    continue
                dist = levenshtein_within(word, term, budget)
                if dist > budget:
                    continue
                sim = 1.0 - dist / longest
                if sim >= threshold and sim > best_sim:
                    best_sim = sim
                    best_term = term
            if best_term is not None:
                found.append((ae_id, best_term, best_sim))
        hits = tuple(found)
        self._cache[surface] = hits
        return hits

    def scan(self, tnote: TokenizedNote) -> list[MentionCandidate]:
        config = self.config
        min_len = config.min_token_length
        note_id = tnote.note.note_id
        candidates: list[MentionCandidate] = []
        for index, token in enumerate(tnote.tokens):
            surface = token.surface
            if len(surface) < min_len:
                continue
            for ae_id, term, sim in self.lookup(surface):
                candidates.append(
                    MentionCandidate(
                        note_id=note_id,
                        ae_id=ae_id,
                        token_index=index,
                        matched_surface=surface,
                        matched_term=term,
                        similarity=sim,
                    )
                )
        return candidates


def scan_note(
    tnote: TokenizedNote,
    lexicon: Sequence[LexiconEntry],
    config: MatchConfig | None = None,
) -> list[MentionCandidate]:
    """Scan one tokenized note; output is ordered by (token_index, ae_id)."""
    return LexiconScanner(lexicon, config).scan(tnote)


def extract_window(
    tnote: TokenizedNote,
    candidate: MentionCandidate,
    config: MatchConfig | None = None,
) -> ContextWindow:
    """Matched token plus up to window_radius tokens per side, truncated at note bounds."""
    config = config or MatchConfig()
    index = candidate.token_index
    if candidate.note_id != tnote.note.note_id or not 0 <= index < len(tnote.tokens):
        raise ValueError("candidate does not belong to the given note")
    lo = max(0, index - config.window_radius)
    hi = min(len(tnote.tokens), index + config.window_radius + 1)
    return ContextWindow(
        note_id=candidate.note_id,
        ae_id=candidate.ae_id,
        token_index=index,
        center=index - lo,
        tokens=tuple(tok.surface for tok in tnote.tokens[lo:hi]),
        similarity=candidate.similarity,
    )


def save_candidates(candidates: Iterable[MentionCandidate], path: str | Path) -> None:
    import json

    with Path(path).open("w", encoding="utf-8") as handle:
        for c in candidates:
            handle.write(
                json.dumps(
                    {
                        "note_id": c.note_id,
                        "ae_id": c.ae_id,
                        "token_index": c.token_index,
                        "matched_surface": c.matched_surface,
                        "matched_term": c.matched_term,
                        "similarity": c.similarity,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
