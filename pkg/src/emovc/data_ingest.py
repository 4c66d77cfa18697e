"""Manifest loading, deterministic splits, and training-tuple sampling.

The manifest is line-delimited JSON, one utterance per line:
``{"id": ..., "path": ..., "speaker": ..., "emotion"?: ..., "text"?: ...}``.
Speaker labels are mapped to dense integer codes in file order; emotion
labels index the fixed five-class set in :data:`emovc.EMOTION_CLASSES`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import EMOTION_CLASSES

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
TRAIN_FRACTION, VAL_FRACTION, TEST_FRACTION = 0.8, 0.1, 0.1


class ManifestError(ValueError):
    """Raised for unreadable, malformed, or inconsistent manifests."""


@dataclass(frozen=True)
class DomainCode:
    """Integer identity of a speaker or emotion class."""

    kind: str  # "speaker" | "emotion"
    index: int
    label: str

    def __post_init__(self):
        if self.kind not in ("speaker", "emotion"):
            raise ValueError(f"unknown domain kind: {self.kind!r}")
        if self.index < 0:
            raise ValueError("domain index must be nonnegative")


@dataclass
class UtteranceRecord:
    id: str
    audio_path: str
    speaker: DomainCode
    emotion: DomainCode | None = None
    transcript: str | None = None
    split: str | None = None


@dataclass
class TrainingTuple:
    """One optimization-step sample: a source plus two same-speaker references."""

    source: UtteranceRecord
    reference: UtteranceRecord
    reference2: UtteranceRecord
    target_speaker: DomainCode


def emotion_code(label: str) -> DomainCode:
    if label not in EMOTION_CLASSES:
        raise ManifestError(
            f"unknown emotion {label!r}; expected one of {list(EMOTION_CLASSES)}"
        )
    return DomainCode("emotion", EMOTION_CLASSES.index(label), label)


def parse_manifest(path: str | Path) -> list[UtteranceRecord]:
    """Read a JSON-lines manifest into records, order preserved.

    Speaker string labels become dense indices in order of first
    appearance.  Duplicate ids and malformed lines are rejected with the
    offending line number.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")

    records: list[UtteranceRecord] = []
    speaker_index: dict[str, int] = {}
    seen_ids: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(raw, dict):
                raise ManifestError(f"{path}:{lineno}: record must be a JSON object")
            try:
                utt_id = str(raw["id"])
                audio_path = str(raw["path"])
                speaker_label = str(raw["speaker"])
            except KeyError as exc:
                raise ManifestError(f"{path}:{lineno}: missing field {exc}") from exc
            if not audio_path:
                raise ManifestError(f"{path}:{lineno}: empty audio path")
            if utt_id in seen_ids:
                raise ManifestError(f"{path}:{lineno}: duplicate id {utt_id!r}")
            seen_ids.add(utt_id)

            if speaker_label not in speaker_index:
                speaker_index[speaker_label] = len(speaker_index)
            speaker = DomainCode("speaker", speaker_index[speaker_label], speaker_label)

            emotion = None
            if raw.get("emotion") is not None:
                try:
                    emotion = emotion_code(str(raw["emotion"]))
                except ManifestError as exc:
                    raise ManifestError(f"{path}:{lineno}: {exc}") from exc

            records.append(
                UtteranceRecord(
                    id=utt_id,
                    audio_path=audio_path,
                    speaker=speaker,
                    emotion=emotion,
                    transcript=raw.get("text", raw.get("transcript")),
                )
            )
    return records


def speaker_labels(records: list[UtteranceRecord]) -> list[str]:
    """Dense-index-ordered speaker labels present in ``records``."""
    by_index: dict[int, str] = {}
    for rec in records:
        by_index[rec.speaker.index] = rec.speaker.label
    return [by_index[i] for i in sorted(by_index)]


def _split_counts(n: int) -> tuple[int, int, int]:
    # round-half-up on the 0.1 fractions; train keeps the remainder and
    # never drops below one item
    n_val = int(np.floor(VAL_FRACTION * n + 0.5))
    n_test = int(np.floor(TEST_FRACTION * n + 0.5))
    while n - n_val - n_test < 1:
        if n_val >= n_test and n_val > 0:
            n_val -= 1
        elif n_test > 0:
            n_test -= 1
        else:
            break
    return n - n_val - n_test, n_val, n_test


def split_records(records: list[UtteranceRecord], seed: int) -> list[UtteranceRecord]:
    """Assign train/val/test per speaker at 0.8/0.1/0.1, deterministically.

    Stratified per speaker so every speaker keeps at least one training
    utterance.  Returns new records in the input order; input records are
    not mutated.
    """
    if not records:
        raise ManifestError("cannot split an empty record list")

    by_speaker: dict[int, list[int]] = {}
    for pos, rec in enumerate(records):
        by_speaker.setdefault(rec.speaker.index, []).append(pos)

    rng = np.random.default_rng(seed)
    assignment: dict[int, str] = {}
    for spk in sorted(by_speaker):
        positions = by_speaker[spk]
        if not positions:
            raise ManifestError(f"speaker index {spk} has zero utterances")
        order = rng.permutation(len(positions))
        n_train, n_val, _ = _split_counts(len(positions))
        for rank, j in enumerate(order):
            if rank < n_train:
                split = "train"
            elif rank < n_train + n_val:
                split = "val"
            else:
                split = "test"
            assignment[positions[j]] = split

    return [replace(rec, split=assignment[pos]) for pos, rec in enumerate(records)]


def write_split_assignments(
    records: list[UtteranceRecord], manifest_path: str | Path
) -> Path:
    """Write the sibling ``<manifest>.splits.json`` mapping id -> split."""
    out = Path(str(manifest_path) + ".splits.json")
    mapping = {rec.id: rec.split for rec in records}
    out.write_text(json.dumps(mapping, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def apply_split_assignments(
    records: list[UtteranceRecord], assignments_path: str | Path
) -> list[UtteranceRecord]:
    """Apply a ``<manifest>.splits.json`` id -> split mapping to records."""
    path = Path(assignments_path)
    mapping = json.loads(path.read_text(encoding="utf-8"))
    out = []
    for rec in records:
        split = mapping.get(rec.id)
        if split is not None and split not in SPLITS:
            raise ManifestError(f"record {rec.id!r} has unknown split {split!r}")
        out.append(replace(rec, split=split))
    return out


def _training_pool(records: list[UtteranceRecord]) -> list[UtteranceRecord]:
    # unassigned records count as train so toy sets work without a split pass
    return [rec for rec in records if rec.split in (None, "train")]


def _domain_of(rec: UtteranceRecord, kind: str) -> DomainCode:
    if kind == "speaker":
        return rec.speaker
    if kind == "emotion":
        if rec.emotion is None:
            raise ManifestError(f"record {rec.id!r} lacks an emotion label")
        return rec.emotion
    raise ManifestError(f"unknown domain kind {kind!r}")


def sample_tuple(
    records: list[UtteranceRecord], rng: np.random.Generator, kind: str = "speaker"
) -> TrainingTuple:
    """Draw one (source, reference, reference2) training tuple.

    The target domain (a speaker, or an emotion class when ``kind`` is
    ``"emotion"``) is drawn uniformly, then two distinct reference
    utterances of that domain; a single-utterance domain falls back to
    ``reference2 == reference`` with a warning.
    """
    pool = _training_pool(records)
    if not pool:
        raise ManifestError("no training utterances to sample from")

    by_domain: dict[int, list[UtteranceRecord]] = {}
    for rec in pool:
        by_domain.setdefault(_domain_of(rec, kind).index, []).append(rec)
    domains = sorted(by_domain)

    target_idx = domains[int(rng.integers(len(domains)))]
    candidates = by_domain[target_idx]
    reference = candidates[int(rng.integers(len(candidates)))]
    if len(candidates) == 1:
        logger.warning(
            "%s %r has a single utterance; reference2 falls back to reference",
            kind,
            _domain_of(reference, kind).label,
        )
        reference2 = reference
    else:
        others = [rec for rec in candidates if rec.id != reference.id]
        reference2 = others[int(rng.integers(len(others)))]
    source = pool[int(rng.integers(len(pool)))]
    return TrainingTuple(
        source=source,
        reference=reference,
        reference2=reference2,
        target_speaker=_domain_of(reference, kind),
    )


class TupleSampler:
    """Seeded sampler owning its RNG; one instance per loader worker."""

    def __init__(self, records: list[UtteranceRecord], seed: int, kind: str = "speaker"):
        self.records = records
        self.kind = kind
        self.rng = np.random.default_rng(seed)

    def sample(self) -> TrainingTuple:
        return sample_tuple(self.records, self.rng, self.kind)
