"""Decoders over frame posteriors, plus edit-distance scoring and an n-gram LM.

Two decoders are provided:

* :func:`best_path_decode` — per-frame argmax followed by collapse; fast and
  adequate once posteriors are sharp.
* :func:`beam_search_decode` — prefix beam search that tracks, for every
  surviving label prefix, its blank-terminated and non-blank-terminated
  probability masses and merges paths that collapse to the same prefix.
  Optional shallow fusion with a backoff n-gram language model: each token
  extension adds ``lm_weight * lm_logprob + insertion_bonus`` to the path
  score.

The LM is an interpolated absolute-discounting model stored in a textual
backoff format (log10 probabilities, optional backoff weight per entry,
``#`` comment lines allowed); conditional distributions normalize to one by
construction, and the parser re-validates this on load.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .ctc import LabelSequence, Vocab, validate_frame_log_probs
from .numerics import NEG_INF, log_add

BOS = "<s>"
EOS = "</s>"

_LN10 = math.log(10.0)


@dataclass(frozen=True)
class BeamConfig:
    beam_width: int = 30
    lm_weight: float = 0.5
    insertion_bonus: float = 0.0

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")


@dataclass
class DecodeResult:
    """Token ids, the decoder's own score, and the frame where each token first appears."""

    tokens: list[int]
    score: float
    emission_frames: list[int]


def best_path_decode(log_probs: np.ndarray, blank: int | None = None) -> DecodeResult:
    """Collapse the per-frame argmax path; ties go to the lowest class index."""
    lp = validate_frame_log_probs(log_probs)
    T, K = lp.shape
    blank = K - 1 if blank is None else blank
    path = np.argmax(lp, axis=1)
    score = float(lp[np.arange(T), path].sum())
    tokens: list[int] = []
    frames: list[int] = []
    prev = -1
    for t, a in enumerate(path):
        a = int(a)
        if a != prev and a != blank:
            tokens.append(a)
            frames.append(t)
        prev = a
    return DecodeResult(tokens=tokens, score=score, emission_frames=frames)


@dataclass
class _Beam:
    log_pb: float = NEG_INF  # mass of paths ending in blank
    log_pnb: float = NEG_INF  # mass of paths ending in the prefix's last token
    frames: tuple[int, ...] = ()

    @property
    def log_total(self) -> float:
        return log_add(self.log_pb, self.log_pnb)


def beam_search_decode(
    log_probs: np.ndarray,
    config: BeamConfig = BeamConfig(),
    lm: "NGramLm | None" = None,
    vocab: Vocab | None = None,
    blank: int | None = None,
) -> DecodeResult:
    """Prefix beam search over a (T, K) frame table.

    Returns the highest-scoring prefix; the score is the fused log mass
    (acoustic path sum plus any LM/bonus increments).  Deterministic:
    score ties break toward the shorter, then lexicographically smaller,
    prefix.
    """
    lp = validate_frame_log_probs(log_probs)
    T, K = lp.shape
    blank = K - 1 if blank is None else blank
    if lm is not None and vocab is None:
        raise ValueError("shallow fusion needs the vocabulary to map token ids to LM tokens")

    def lm_increment(prefix: tuple[int, ...], token: int) -> float:
        bonus = config.insertion_bonus
        if lm is None:
            return bonus
        history = [BOS] + [vocab.symbols[t] for t in prefix]
        return config.lm_weight * lm.log_prob(vocab.symbols[token], history) + bonus

    beams: dict[tuple[int, ...], _Beam] = {(): _Beam(log_pb=0.0, log_pnb=NEG_INF, frames=())}
    for t in range(T):
        next_beams: dict[tuple[int, ...], _Beam] = {}

        def bucket(prefix: tuple[int, ...], frames: tuple[int, ...]) -> _Beam:
            beam = next_beams.get(prefix)
            if beam is None:
                beam = _Beam(frames=frames)
                next_beams[prefix] = beam
            return beam

        for prefix, beam in beams.items():
            total = beam.log_total
            # blank keeps the prefix and seals it
            stay = bucket(prefix, beam.frames)
            stay.log_pb = log_add(stay.log_pb, total + lp[t, blank])
            last = prefix[-1] if prefix else None
            for c in range(K):
                if c == blank:
                    continue
                if c == last:
                    # same symbol again: without an intervening blank it merges
                    # into the existing last token ...
                    stay.log_pnb = log_add(stay.log_pnb, beam.log_pnb + lp[t, c])
                    # ... and only the blank-terminated mass spawns a repeat token.
                    mass = beam.log_pb
                else:
                    mass = total
                if mass == NEG_INF:
                    continue
                extended = bucket(prefix + (c,), beam.frames + (t,))
                extended.log_pnb = log_add(
                    extended.log_pnb, mass + lp[t, c] + lm_increment(prefix, c)
                )
        ranked = sorted(next_beams.items(), key=lambda kv: (-kv[1].log_total, len(kv[0]), kv[0]))
        beams = dict(ranked[: config.beam_width])

    best_prefix, best_beam = min(beams.items(), key=lambda kv: (-kv[1].log_total, len(kv[0]), kv[0]))
    return DecodeResult(
        tokens=list(best_prefix),
        score=best_beam.log_total,
        emission_frames=list(best_beam.frames),
    )


# ---------------------------------------------------------------------------
# edit distance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EditCounts:
    substitutions: int
    insertions: int
    deletions: int

    @property
    def total(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    def rate(self, ref_len: int) -> float:
        return self.total / max(ref_len, 1)


def edit_distance(hyp: Sequence[int], ref: Sequence[int]) -> EditCounts:
    """Levenshtein alignment of ``hyp`` against ``ref`` -> (sub, ins, del) counts.

    Insertions are hypothesis tokens with no reference counterpart;
    deletions are reference tokens the hypothesis missed.
    """
    n, m = len(hyp), len(ref)
    # dp[i][j]: (cost, subs, ins, dels) for hyp[:i] vs ref[:j]
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            same = hyp[i - 1] == ref[j - 1]
            cost[i, j] = min(
                cost[i - 1, j - 1] + (0 if same else 1),
                cost[i - 1, j] + 1,  # insertion (extra hyp token)
                cost[i, j - 1] + 1,  # deletion (missed ref token)
            )
    # backtrace for the operation counts
    i, j = n, m
    subs = ins = dels = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (0 if hyp[i - 1] == ref[j - 1] else 1):
            if hyp[i - 1] != ref[j - 1]:
                subs += 1
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            ins += 1
            i -= 1
        else:
            dels += 1
            j -= 1
    return EditCounts(substitutions=subs, insertions=ins, deletions=dels)


def error_rate(hyp: Sequence[int], ref: Sequence[int]) -> float:
    return edit_distance(hyp, ref).rate(len(ref))


# ---------------------------------------------------------------------------
# backoff n-gram language model
# ---------------------------------------------------------------------------


@dataclass
class NGramLm:
    """Backoff n-gram model over symbol strings.

    ``logp`` maps full n-grams ``(h_1, ..., h_k, w)`` to natural-log
    probabilities; ``backoff`` maps histories to natural-log backoff
    weights.  The event space is the unigram token set minus ``<s>``.
    """

    order: int
    logp: dict[tuple[str, ...], float]
    backoff: dict[tuple[str, ...], float] = field(default_factory=dict)

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("LM order must be >= 1")

    def tokens(self) -> list[str]:
        """Predictable tokens (the unigram inventory without the start marker)."""
        return sorted(w[0] for w in self.logp if len(w) == 1 and w[0] != BOS)

    def log_prob(self, token: str, history: Sequence[str]) -> float:
        """Natural-log ``p(token | history)`` with suffix backoff."""
        hist = tuple(history)[-(self.order - 1) :] if self.order > 1 else ()
        acc = 0.0
        while True:
            entry = self.logp.get(hist + (token,))
            if entry is not None:
                return entry + acc
            if not hist:
                raise KeyError(f"token {token!r} missing from the LM unigram inventory")
            acc += self.backoff.get(hist, 0.0)
            hist = hist[1:]

    def conditional_masses(self, history: Sequence[str]) -> dict[str, float]:
        return {w: math.exp(self.log_prob(w, history)) for w in self.tokens()}

    @classmethod
    def train(cls, sequences: Iterable[Sequence[str]], order: int = 4, discount: float = 0.5) -> "NGramLm":
        """Interpolated absolute discounting; normalizes exactly at every history.

        Each training sequence is padded with ``order - 1`` start markers and
        one end marker.  Seen n-grams store the interpolated probability;
        the backoff weight of a history is its interpolation mass
        ``discount * distinct_successors / count``.
        """
        if order < 1:
            raise ValueError("LM order must be >= 1")
        if not 0.0 < discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        counts: list[dict[tuple[str, ...], int]] = [dict() for _ in range(order + 1)]
        n_events = 0
        for seq in sequences:
            padded = [BOS] * max(order - 1, 1) + list(seq) + [EOS]
            start = max(order - 1, 1)
            for i in range(start, len(padded)):
                n_events += 1
                for k in range(1, order + 1):
                    if i - (k - 1) < 0:
                        continue
                    gram = tuple(padded[i - k + 1 : i + 1])
                    counts[k][gram] = counts[k].get(gram, 0) + 1
        if n_events == 0:
            raise ValueError("cannot train an LM on empty data")

        vocab_tokens = sorted({g[0] for g in counts[1]})
        event_tokens = [w for w in vocab_tokens if w != BOS]
        logp: dict[tuple[str, ...], float] = {}
        backoff: dict[tuple[str, ...], float] = {}

        # unigrams: add-one over the closed event space
        denom = n_events + len(event_tokens)
        for w in event_tokens:
            logp[(w,)] = math.log((counts[1].get((w,), 0) + 1) / denom)

        def lower_prob(gram: tuple[str, ...]) -> float:
            """Interpolated probability of gram's word given its shortened history."""
            word = gram[-1]
            hist = gram[1:-1]
            acc = 0.0
            g = hist + (word,)
            while True:
                if g in logp:
                    return math.exp(logp[g] + acc)
                acc += backoff.get(g[:-1], 0.0)
                g = g[1:]

        for k in range(2, order + 1):
            by_hist: dict[tuple[str, ...], list[tuple[str, int]]] = {}
            for gram, c in counts[k].items():
                by_hist.setdefault(gram[:-1], []).append((gram[-1], c))
            for hist, successors in sorted(by_hist.items()):
                total = sum(c for _, c in successors)
                lam = discount * len(successors) / total
                backoff[hist] = math.log(lam)
                for word, c in successors:
                    p = (c - discount) / total + lam * lower_prob(hist + (word,))
                    logp[hist + (word,)] = math.log(p)
        # histories that end inside the start padding (e.g. ("<s>",)) carry a
        # backoff weight but were never counted as events; give them the
        # conventional placeholder entry so the weight survives a save/load.
        for hist in backoff:
            if hist not in logp:
                logp[hist] = math.log(1e-99)
        return cls(order=order, logp=logp, backoff=backoff)

    # -- textual backoff format ------------------------------------------
    def save(self, path) -> None:
        grams_by_order: dict[int, list[tuple[str, ...]]] = {}
        for gram in self.logp:
            grams_by_order.setdefault(len(gram), []).append(gram)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# backoff n-gram model, log10 probabilities\n")
            fh.write("\\data\\\n")
            for k in range(1, self.order + 1):
                fh.write(f"ngram {k}={len(grams_by_order.get(k, []))}\n")
            fh.write("\n")
            for k in range(1, self.order + 1):
                fh.write(f"\\{k}-grams:\n")
                for gram in sorted(grams_by_order.get(k, [])):
                    logp10 = self.logp[gram] / _LN10
                    line = f"{logp10:.12g}\t{' '.join(gram)}"
                    if gram in self.backoff:
                        line += f"\t{self.backoff[gram] / _LN10:.12g}"
                    fh.write(line + "\n")
                fh.write("\n")
            fh.write("\\end\\\n")

    @classmethod
    def load(cls, path, validate: bool = True, tol: float = 1e-6) -> "NGramLm":
        """Parse the textual format; ``#`` comments and blank lines are skipped."""
        logp: dict[tuple[str, ...], float] = {}
        backoff: dict[tuple[str, ...], float] = {}
        declared: dict[int, int] = {}
        section = 0
        saw_data = saw_end = False
        with open(path, "r", encoding="utf-8") as fh:
            for raw in fh:
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if line == "\\data\\":
                    saw_data = True
                    continue
                if line == "\\end\\":
                    saw_end = True
                    continue
                if line.startswith("ngram "):
                    k_str, n_str = line[len("ngram ") :].split("=")
                    declared[int(k_str)] = int(n_str)
                    continue
                if line.endswith("-grams:") and line.startswith("\\"):
                    section = int(line[1 : line.index("-")])
                    continue
                if section == 0:
                    raise ValueError(f"entry line outside any n-gram section: {line!r}")
                parts = line.split()
                expected = section + 1
                if len(parts) not in (expected, expected + 1):
                    raise ValueError(f"malformed {section}-gram line: {line!r}")
                gram = tuple(parts[1 : section + 1])
                logp[gram] = float(parts[0]) * _LN10
                if len(parts) == expected + 1:
                    backoff[gram] = float(parts[-1]) * _LN10
        if not saw_data or not saw_end:
            raise ValueError("missing \\data\\ or \\end\\ marker")
        for k, n in declared.items():
            actual = sum(1 for g in logp if len(g) == k)
            if actual != n:
                raise ValueError(f"declared {n} {k}-grams but found {actual}")
        order = max((len(g) for g in logp), default=0)
        lm = cls(order=order, logp=logp, backoff=backoff)
        if validate:
            lm.validate_normalization(tol=tol)
        return lm

    def validate_normalization(self, tol: float = 1e-6, max_histories: int = 200) -> None:
        """Check sum_w p(w | h) = 1 at the empty history and every stored context."""
        histories: list[tuple[str, ...]] = [()]
        histories += sorted(self.backoff)[:max_histories]
        for hist in histories:
            mass = sum(self.conditional_masses(hist).values())
            if abs(mass - 1.0) > tol:
                raise ValueError(f"conditional mass at history {hist!r} is {mass!r}, not 1")
