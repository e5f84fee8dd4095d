"""Edit-distance error rates and system-comparison report arithmetic."""
from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal, ROUND_HALF_UP
from typing import Optional, Sequence


def round1(value: float | Decimal) -> float:
    """Half-up rounding to one decimal (table formatting convention)."""
    d = value if isinstance(value, Decimal) else Decimal(str(value))
    return float(d.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    """Levenshtein distance with unit substitution/deletion/insertion costs."""
    n, m = len(hyp), len(ref)
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        for j in range(1, m + 1):
            sub = prev[j - 1] + (hyp[i - 1] != ref[j - 1])
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, sub)
        prev = cur
    return prev[m]


def edit_distance_rate(hyp: Sequence, ref: Sequence) -> float:
    """Levenshtein / len(ref) * 100; the reference must be non-empty."""
    if len(ref) == 0:
        raise ValueError("empty reference")
    return 100.0 * edit_distance(hyp, ref) / len(ref)


def segmented_word_error_rate(hyp_phonemes: Sequence, ref_words: Sequence[Sequence],
                              max_word_len: int | None = None) -> float:
    """Word error rate when the hypothesis is an unsegmented phoneme stream.

    Minimizes word-level edits over all segmentations of the hypothesis into
    chunks of at most `max_word_len` phonemes, so an exact phoneme stream
    always scores 0 regardless of lexicon prefix ambiguity.
    """
    if len(ref_words) == 0:
        raise ValueError("empty reference")
    words = [tuple(w) for w in ref_words]
    kmax = max_word_len or max(len(w) for w in words)
    hyp = list(hyp_phonemes)
    n, m = len(hyp), len(words)
    INF = 10 ** 9
    d = [[INF] * (m + 1) for _ in range(n + 1)]
    d[0][0] = 0
    for i in range(n + 1):
        for j in range(m + 1):
            if d[i][j] == INF:
                continue
            base = d[i][j]
            if j < m and base + 1 < d[i][j + 1]:
                d[i][j + 1] = base + 1  # ref word deleted
            for k in range(1, min(kmax, n - i) + 1):
                seg = tuple(hyp[i : i + k])
                if j < m:
                    cost = base + (seg != words[j])
                    if cost < d[i + k][j + 1]:
                        d[i + k][j + 1] = cost
                if base + 1 < d[i + k][j]:
                    d[i + k][j] = base + 1  # inserted word segment
    return 100.0 * d[n][m] / m


@dataclass
class MetricReport:
    """Per-speaker values plus the derived table cells.

    delta1 = best - worst system value, delta2 = best system - original,
    each computed per speaker row and for the (rounded) averages row.
    """

    systems: list[str]
    per_speaker: dict[str, dict[str, float]]
    averages: dict[str, float]
    delta1: float
    delta2: Optional[float]

    def to_json(self) -> dict:
        return {
            "systems": self.systems,
            "per_speaker": self.per_speaker,
            "averages": self.averages,
            "delta1": self.delta1,
            "delta2": self.delta2,
        }

    def render_table(self) -> str:
        cols = list(self.systems)
        if any("original" in row for row in self.per_speaker.values()):
            cols = ["original"] + cols
        header = ["speaker"] + cols + ["d1:best-worst", "d2:best-original"]
        lines = [header]
        for spk in sorted(self.per_speaker):
            row = self.per_speaker[spk]
            cells = [spk] + [f"{row[c]:.1f}" for c in cols]
            cells.append(f"{row['delta1']:.1f}")
            cells.append(f"{row['delta2']:.1f}" if "delta2" in row else "-")
            lines.append(cells)
        avg = ["average"] + [f"{self.averages[c]:.1f}" for c in cols]
        avg.append(f"{self.delta1:.1f}")
        avg.append(f"{self.delta2:.1f}" if self.delta2 is not None else "-")
        lines.append(avg)
        widths = [max(len(r[c]) for r in lines) for c in range(len(header))]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in lines)


def aggregate_report(per_speaker_metrics: dict[str, dict[str, float]],
                     systems: Sequence[str],
                     original: dict[str, float] | None = None) -> MetricReport:
    """Averages and delta rows over per-speaker error rates.

    `per_speaker_metrics` maps system name -> speaker -> percentage. `systems`
    names the comparable systems eligible for best/worst; `original`
    optionally supplies the unprocessed-speech column for delta2. The
    averages-row deltas are computed from the rounded averages, matching the
    one-decimal table convention.
    """
    systems = list(systems)
    if not systems:
        raise ValueError("need at least one system")
    speaker_sets = {s: frozenset(per_speaker_metrics[s]) for s in systems}
    speakers = speaker_sets[systems[0]]
    if not speakers:
        raise ValueError("need at least one speaker")
    for s, present in speaker_sets.items():
        if present != speakers:
            raise ValueError(f"inconsistent speaker sets across systems (system {s!r})")
    if original is not None and frozenset(original) != speakers:
        raise ValueError("inconsistent speaker set in original column")

    dec = {s: {spk: Decimal(str(per_speaker_metrics[s][spk])) for spk in speakers}
           for s in systems}
    per_speaker: dict[str, dict[str, float]] = {}
    for spk in sorted(speakers):
        row = {s: float(dec[s][spk]) for s in systems}
        best = min(dec[s][spk] for s in systems)
        worst = max(dec[s][spk] for s in systems)
        row["delta1"] = round1(best - worst)
        if original is not None:
            row["original"] = float(original[spk])
            row["delta2"] = round1(best - Decimal(str(original[spk])))
        per_speaker[spk] = row

    averages = {
        s: round1(sum(dec[s].values()) / len(speakers)) for s in systems
    }
    best_avg = min(averages[s] for s in systems)
    worst_avg = max(averages[s] for s in systems)
    delta1 = round1(Decimal(str(best_avg)) - Decimal(str(worst_avg)))
    delta2 = None
    if original is not None:
        orig_avg = round1(sum(Decimal(str(v)) for v in original.values()) / len(speakers))
        averages["original"] = orig_avg
        delta2 = round1(Decimal(str(best_avg)) - Decimal(str(orig_avg)))
    return MetricReport(systems=systems, per_speaker=per_speaker,
                        averages=averages, delta1=delta1, delta2=delta2)


def speaker_error_rates(utterances: Sequence[tuple[str, Sequence, Sequence]],
                        ref_words: Sequence[Sequence[Sequence]] | None = None
                        ) -> dict[str, dict[str, float]]:
    """Corpus-level PER (and WER when word groupings are given) per speaker.

    `utterances` holds (speaker, hyp tokens, ref tokens); `ref_words`, when
    present, aligns 1:1 with `utterances` and holds each reference as a list
    of words (lists of phonemes).
    """
    edits: dict[str, int] = {}
    lengths: dict[str, int] = {}
    word_edits: dict[str, float] = {}
    word_counts: dict[str, int] = {}
    for idx, (speaker, hyp, ref) in enumerate(utterances):
        if len(ref) == 0:
            raise ValueError(f"utterance {idx}: empty reference transcript")
        edits[speaker] = edits.get(speaker, 0) + edit_distance(hyp, ref)
        lengths[speaker] = lengths.get(speaker, 0) + len(ref)
        if ref_words is not None:
            words = ref_words[idx]
            wer = segmented_word_error_rate(hyp, words)
            word_edits[speaker] = word_edits.get(speaker, 0.0) + wer * len(words) / 100.0
            word_counts[speaker] = word_counts.get(speaker, 0) + len(words)
    out: dict[str, dict[str, float]] = {}
    for speaker in edits:
        metrics = {"per": 100.0 * edits[speaker] / lengths[speaker]}
        if ref_words is not None:
            metrics["wer"] = 100.0 * word_edits[speaker] / word_counts[speaker]
        out[speaker] = metrics
    return out
