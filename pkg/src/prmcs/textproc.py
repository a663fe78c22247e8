"""Tokenization and the five caption perturbation generators.

All perturbations are pure functions of (input, probability, RngStream):
the same seed always produces the same output. Probabilistic operations
draw exactly one unit float per input token, in input order, so event
positions line up across Repetition / Removal / Masking under one seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .errors import InvalidRecord
from .rng import RngStream

MASK_TOKEN = "[MASK]"

REPETITION = "repetition"
REMOVAL = "removal"
MASKING = "masking"
JUMBLE = "jumble"
SUBSTITUTION = "substitution"
KINDS = (REPETITION, REMOVAL, MASKING, JUMBLE, SUBSTITUTION)

# Reshuffle budget for substitution before falling back to rotation-by-one.
_MAX_RESHUFFLES = 64

# Scripts written without spaces, tokenized one codepoint per token.
_CJK_RANGES = (
    (0x3040, 0x30FF),   # hiragana + katakana
    (0x3400, 0x4DBF),   # CJK extension A
    (0x4E00, 0x9FFF),   # CJK unified ideographs
    (0xF900, 0xFAFF),   # CJK compatibility ideographs
    (0xFF66, 0xFF9F),   # halfwidth katakana
)


@dataclass
class CaptionRecord:
    """One caption with its language, key phrases, and image reference.

    ``kind`` is None for original captions and a perturbation kind string
    for generated ones.
    """

    id: str
    lang: str
    caption: str
    critical_objects: list[str] = field(default_factory=list)
    image_id: str = ""
    kind: str | None = None

    def validate(self) -> None:
        """Reject records whose critical objects are not substrings of the caption.

        Only original records are held to this invariant; perturbed
        captions are corrupted on purpose.
        """
        if self.kind is not None:
            return
        for obj in self.critical_objects:
            if not obj:
                raise InvalidRecord(f"record {self.id!r}: empty critical object")
            if obj not in self.caption:
                raise InvalidRecord(
                    f"record {self.id!r}: critical object {obj!r} is not a substring of the caption"
                )


def _has_cjk(text: str) -> bool:
    return any(lo <= ord(ch) <= hi for ch in text for lo, hi in _CJK_RANGES)


def _char_mode(text: str, lang: str) -> bool:
    if lang == "ja":
        return True
    return len(text.split()) <= 1 and _has_cjk(text)


def tokenize(text: str, lang: str) -> list[str]:
    """Split a caption into word tokens.

    Whitespace-delimited languages split on whitespace runs. Japanese and
    any space-free text containing CJK codepoints fall back to one token
    per codepoint, which for such scripts is effectively character
    granularity.
    """
    if _char_mode(text, lang):
        return [ch for ch in text if not ch.isspace()]
    return text.split()


def detokenize(tokens: list[str], lang: str) -> str:
    """Inverse of tokenize: space-join, or plain concatenation for ja."""
    if lang == "ja":
        return "".join(tokens)
    return " ".join(tokens)


def perturb_repetition(tokens: list[str], p: float, rng: RngStream) -> list[str]:
    """Emit each token, immediately doubled with probability p."""
    out = []
    for tok in tokens:
        out.append(tok)
        if rng.unit() < p:
            out.append(tok)
    return out


def perturb_removal(tokens: list[str], p_keep: float, rng: RngStream) -> list[str]:
    """Keep each token with probability p_keep; the rest are dropped.

    The result may be empty. With the standard p_keep = 0.4 roughly 60%
    of tokens are removed.
    """
    return [tok for tok in tokens if rng.unit() < p_keep]


def perturb_masking(tokens: list[str], p: float, rng: RngStream) -> list[str]:
    """Replace each token by the literal "[MASK]" with probability p."""
    return [MASK_TOKEN if rng.unit() < p else tok for tok in tokens]


def _fisher_yates(items: list, rng: RngStream) -> None:
    for i in range(len(items) - 1, 0, -1):
        j = int(rng.unit() * (i + 1))
        items[i], items[j] = items[j], items[i]


def perturb_jumble(tokens: list[str], rng: RngStream) -> list[str]:
    """Random-order permutation of the tokens (Fisher-Yates)."""
    out = list(tokens)
    _fisher_yates(out, rng)
    return out


def _shuffled_differently(objects: list[str], rng: RngStream) -> list[str]:
    shuffled = list(objects)
    for _ in range(_MAX_RESHUFFLES):
        _fisher_yates(shuffled, rng)
        if shuffled != objects:
            return shuffled
    # Pathological lists (e.g. all-identical entries) cannot differ under
    # any permutation; rotation keeps the guarantee wherever one exists.
    return objects[1:] + objects[:1]


def perturb_substitution(
    caption: str,
    critical_objects: list[str],
    rng: RngStream,
    forced: list[str] | None = None,
) -> str:
    """Swap the positions of the caption's key phrases.

    The object list is reshuffled until its order differs from the
    original, then original object j is replaced by shuffled object j,
    one at a time, each at its LAST occurrence in the working string.
    Replacing at the last occurrence keeps earlier substituted copies
    intact when a phrase appears more than once mid-rewrite. A step whose
    original phrase has already been consumed is a no-op.

    ``forced`` bypasses the RNG with a caller-chosen order (testing hook).
    """
    for obj in critical_objects:
        if obj not in caption:
            raise InvalidRecord(f"critical object {obj!r} is not a substring of the caption")
    if len(critical_objects) < 2:
        return caption
    if forced is not None:
        if sorted(forced) != sorted(critical_objects):
            raise InvalidRecord("forced permutation is not a permutation of the critical objects")
        shuffled = list(forced)
    else:
        shuffled = _shuffled_differently(critical_objects, rng)
    target = caption
    for original, replacement in zip(critical_objects, shuffled):
        head, sep, tail = target.rpartition(original)
        if sep:
            target = head + replacement + tail
    return target


def perturb_record(
    record: CaptionRecord,
    kind: str,
    p: float,
    rng: RngStream,
    forced: list[str] | None = None,
) -> CaptionRecord:
    """Apply one perturbation kind to a record, returning a tagged copy.

    Token-level kinds go through tokenize/detokenize; substitution works
    on the raw caption so phrase boundaries survive.
    """
    if kind == SUBSTITUTION:
        caption = perturb_substitution(record.caption, record.critical_objects, rng, forced)
    else:
        tokens = tokenize(record.caption, record.lang)
        if kind == REPETITION:
            tokens = perturb_repetition(tokens, p, rng)
        elif kind == REMOVAL:
            tokens = perturb_removal(tokens, p, rng)
        elif kind == MASKING:
            tokens = perturb_masking(tokens, p, rng)
        elif kind == JUMBLE:
            tokens = perturb_jumble(tokens, rng)
        else:
            raise ValueError(f"unknown perturbation kind {kind!r}")
        caption = detokenize(tokens, record.lang)
    return replace(record, caption=caption, kind=kind)
