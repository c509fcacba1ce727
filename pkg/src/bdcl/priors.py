"""Reasoning-trace priors: AU-support sets, per-modality scoring, decisions,
featurisation, validation, ingestion and trace providers.

A prior record carries three modality-separable pieces of evidence (facial
AU set, prosody descriptor, transcript keywords), per-modality contribution
weights and the decided class.
"""

from __future__ import annotations

import abc
import json
import math
import zlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from .core import BDCLError, Modality, derive_rng

SCHEMA_VERSION = 1
NUM_AUS = 44
PROSODY_LEVELS = 3
HASH_BUCKETS = 64
PRIOR_DIMS = (NUM_AUS, 2 * 3, HASH_BUCKETS)

Aggregation = Literal["weighted_sum", "max"]
RPolicy = Literal["uniform", "dirichlet", "one-hot"]


class UnknownClass(BDCLError):
    pass


class InvalidContent(BDCLError):
    pass


class SchemaError(BDCLError):
    pass


class ProviderUnavailable(BDCLError):
    pass


class MissingPrior(BDCLError):
    pass


# ---------------------------------------------------------------- tables

@dataclass(frozen=True)
class AUSupportTable:
    names: tuple[str, ...]
    support: tuple[frozenset[int], ...]

    def __post_init__(self):
        if len(self.names) != len(self.support):
            raise SchemaError("one AU set per class required")
        for name, aus in zip(self.names, self.support):
            bad = [a for a in aus if not 1 <= a <= NUM_AUS]
            if bad:
                raise SchemaError(f"class {name!r}: AU ids {bad} outside [1, {NUM_AUS}]")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def restrict(self, num_classes: int) -> "AUSupportTable":
        if num_classes > len(self.names):
            raise UnknownClass(f"table defines {len(self.names)} classes, {num_classes} requested")
        return AUSupportTable(self.names[:num_classes], self.support[:num_classes])


@dataclass(frozen=True)
class Lexicons:
    prosody: tuple[tuple[int, int, int], ...]   # prototype per class
    keywords: tuple[frozenset[str], ...]
    filler: tuple[str, ...] = ()

    def restrict(self, num_classes: int) -> "Lexicons":
        return Lexicons(self.prosody[:num_classes], self.keywords[:num_classes], self.filler)


def _read_json(path, default_name):
    if path is None:
        text = resources.files("bdcl.data").joinpath(default_name).read_text(encoding="utf-8")
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise SchemaError(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path or default_name}: invalid JSON ({exc})") from exc
    if doc.get("format_version") != 1:
        raise SchemaError(f"{path or default_name}: unsupported format_version {doc.get('format_version')!r}")
    return doc


def load_au_table(path=None, num_classes: int | None = None) -> AUSupportTable:
    doc = _read_json(path, "au_table.json")
    try:
        names = tuple(str(c["name"]) for c in doc["classes"])
        support = tuple(frozenset(int(a) for a in c["aus"]) for c in doc["classes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed AU table: {exc}") from exc
    table = AUSupportTable(names, support)
    return table if num_classes is None else table.restrict(num_classes)


def load_lexicons(path=None, names: Sequence[str] | None = None) -> Lexicons:
    """Load lexicons aligned to ``names`` (default: the shipped AU table order)."""
    doc = _read_json(path, "lexicons.json")
    if names is None:
        names = load_au_table().names
    try:
        prosody = tuple(tuple(int(v) for v in doc["prosody"][n]) for n in names)
        keywords = tuple(frozenset(w.lower() for w in doc["keywords"][n]) for n in names)
    except KeyError as exc:
        raise SchemaError(f"lexicon has no entry for class {exc}") from exc
    for n, p in zip(names, prosody):
        if len(p) != 3 or any(not 0 <= v < PROSODY_LEVELS for v in p):
            raise SchemaError(f"prosody prototype for {n!r} must be three levels in 0..2")
    if len(set(prosody)) != len(prosody):
        raise SchemaError("prosody prototypes must be distinct")
    return Lexicons(prosody, keywords, tuple(doc.get("filler", ())))


# ---------------------------------------------------------------- records

@dataclass(frozen=True)
class Prosody:
    pitch: int = 0
    energy: int = 0
    tempo: int = 0

    def levels(self) -> tuple[int, int, int]:
        return (self.pitch, self.energy, self.tempo)


@dataclass(frozen=True)
class PriorRecord:
    sample_id: str
    au_ids: frozenset[int] = frozenset()
    au_text: str = ""
    prosody: Prosody = field(default_factory=Prosody)
    prosody_text: str = ""
    tokens: tuple[str, ...] = ()
    text_note: str = ""
    weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    label: int = 0
    provider: str = ""
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "sample_id": self.sample_id,
            "au_ids": sorted(self.au_ids),
            "au_text": self.au_text,
            "prosody": {"pitch": self.prosody.pitch, "energy": self.prosody.energy,
                        "tempo": self.prosody.tempo},
            "prosody_text": self.prosody_text,
            "tokens": list(self.tokens),
            "text_note": self.text_note,
            "weights": list(self.weights),
            "label": self.label,
            "provider": self.provider,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PriorRecord":
        fields = ("schema_version", "sample_id", "au_ids", "au_text", "prosody", "prosody_text",
                  "tokens", "text_note", "weights", "label", "provider")
        missing = [f for f in fields if f not in obj]
        if missing:
            raise SchemaError(f"missing fields: {', '.join(missing)}")
        extra = sorted(set(obj) - set(fields))
        if extra:
            raise SchemaError(f"unknown fields: {', '.join(extra)}")
        if obj["schema_version"] != SCHEMA_VERSION:
            raise SchemaError(f"unsupported schema_version {obj['schema_version']!r}")
        try:
            p = obj["prosody"]
            return cls(
                sample_id=str(obj["sample_id"]),
                au_ids=frozenset(_as_int(a) for a in obj["au_ids"]),
                au_text=str(obj["au_text"]),
                prosody=Prosody(_as_int(p["pitch"]), _as_int(p["energy"]), _as_int(p["tempo"])),
                prosody_text=str(obj["prosody_text"]),
                tokens=tuple(str(t) for t in obj["tokens"]),
                text_note=str(obj["text_note"]),
                weights=tuple(float(w) for w in obj["weights"]),
                label=_as_int(obj["label"]),
                provider=str(obj["provider"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed field: {exc}") from exc


def _as_int(v) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise TypeError(f"expected an integer, got {v!r}")
    return v


def validate(record: PriorRecord, num_classes: int | None = None) -> list[str]:
    """All invariant violations of ``record``; an empty list means valid."""
    problems = []
    bad_aus = sorted(a for a in record.au_ids if not 1 <= a <= NUM_AUS)
    if bad_aus:
        problems.append(f"AU out of range: {bad_aus}")
    for name, v in zip(("pitch", "energy", "tempo"), record.prosody.levels()):
        if not 0 <= v < PROSODY_LEVELS:
            problems.append(f"prosody {name} level {v} outside 0..{PROSODY_LEVELS - 1}")
    w = record.weights
    if len(w) != 3:
        problems.append(f"expected 3 weights, got {len(w)}")
    else:
        if any(not math.isfinite(x) or x < 0 for x in w):
            problems.append("weights must be finite and non-negative")
        total = math.fsum(w)
        if abs(total - 1.0) > 1e-9:
            problems.append(f"weights sum {total:.6g}")
    if record.label < 0 or (num_classes is not None and record.label >= num_classes):
        problems.append(f"label {record.label} outside [0, {num_classes})")
    if not record.sample_id:
        problems.append("empty sample_id")
    return problems


def validate_or_raise(record: PriorRecord, num_classes: int | None = None) -> None:
    problems = validate(record, num_classes)
    if problems:
        raise InvalidContent(f"{record.sample_id}: " + "; ".join(problems))


@dataclass(frozen=True)
class IngestProblem:
    line: int
    message: str


def ingest(path, strict: bool = False, num_classes: int | None = None
           ) -> tuple[list[PriorRecord], list[IngestProblem]]:
    """Read a line-delimited prior file.

    Unsupported schema versions are always fatal. Other bad lines are
    reported and skipped, or raise ``SchemaError`` when ``strict``.
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    records, problems = [], []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            obj = exc
        if isinstance(obj, dict) and obj.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise SchemaError(f"line {lineno}: unsupported schema_version {obj['schema_version']!r}")
        try:
            if isinstance(obj, Exception):
                raise SchemaError(f"invalid JSON ({obj})")
            if not isinstance(obj, dict):
                raise SchemaError("record is not an object")
            rec = PriorRecord.from_json(obj)
            issues = validate(rec, num_classes)
            if issues:
                raise SchemaError("; ".join(issues))
        except SchemaError as exc:
            if strict:
                raise SchemaError(f"line {lineno}: {exc}") from exc
            problems.append(IngestProblem(lineno, str(exc)))
            continue
        records.append(rec)
    return records, problems


def write_records(path, records: Iterable[PriorRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")


# ---------------------------------------------------------------- scoring

def au_support(c: int, table: AUSupportTable) -> frozenset[int]:
    if not 0 <= c < table.num_classes:
        raise UnknownClass(f"class {c} not in [0, {table.num_classes})")
    return table.support[c]


def score_modality(modality: Modality, record: PriorRecord, table: AUSupportTable,
                   lexicons: Lexicons) -> np.ndarray:
    """Non-negative evidence score per class from one modality of a record."""
    m = Modality(modality)
    c = table.num_classes
    if m is Modality.VISUAL:
        if any(not 1 <= a <= NUM_AUS for a in record.au_ids):
            raise InvalidContent("AU out of range")
        return np.array([len(record.au_ids & s) / max(1, len(s)) for s in table.support],
                        dtype=np.float64)
    if m is Modality.AUDIO:
        levels = record.prosody.levels()
        if any(not 0 <= v < PROSODY_LEVELS for v in levels):
            raise InvalidContent("prosody level out of range")
        return np.array([sum(a == b for a, b in zip(levels, proto)) / 3.0
                         for proto in lexicons.prosody[:c]], dtype=np.float64)
    tokens = [t.lower() for t in record.tokens]
    hits = np.array([sum(t in kw for t in tokens) for kw in lexicons.keywords[:c]],
                    dtype=np.float64)
    return hits / max(1, len(tokens))


def decide(record: PriorRecord, table: AUSupportTable, lexicons: Lexicons,
           aggregation: Aggregation = "weighted_sum") -> int:
    """Class with the highest aggregated evidence; ties go to the lowest id."""
    validate_or_raise(record)
    r = record.weights
    scores = np.stack([r[m] * score_modality(m, record, table, lexicons) for m in Modality])
    if aggregation == "weighted_sum":
        agg = scores.sum(axis=0)
    elif aggregation == "max":
        agg = scores.max(axis=0)
    else:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    return int(np.argmax(agg))


def token_bucket(token: str) -> int:
    """CRC-32 of the lower-cased UTF-8 token, modulo the bucket count."""
    return zlib.crc32(token.lower().encode("utf-8")) % HASH_BUCKETS


def featurize(record: PriorRecord) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic prior features.

    visual: 44-dim AU indicator (AU j at index j-1); audio: thermometer code
    of the three prosody levels (6 dims); text: hashed token counts (64).
    """
    validate_or_raise(record)
    f_v = np.zeros(NUM_AUS)
    for a in record.au_ids:
        f_v[a - 1] = 1.0
    f_a = np.array([float(v >= t) for v in record.prosody.levels() for t in (1, 2)])
    f_t = np.zeros(HASH_BUCKETS)
    for tok in record.tokens:
        f_t[token_bucket(tok)] += 1.0
    return f_v, f_a, f_t


def featurize_many(records: Sequence[PriorRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    feats = [featurize(r) for r in records]
    return tuple(np.stack([f[m] for f in feats]) if feats else np.zeros((0, PRIOR_DIMS[m]))
                 for m in range(3))


# ---------------------------------------------------------------- providers

@dataclass(frozen=True)
class SampleMeta:
    sample_id: str
    true_label: int | None = None


DEFAULT_PROMPT = (
    "Describe the facial action units, vocal prosody and transcript semantics of this clip, "
    "rate how much each channel contributes, then name the emotion."
)


class TraceProvider(abc.ABC):
    """Source of reasoning traces for individual samples."""

    name = "abstract"

    @abc.abstractmethod
    def request(self, sample: SampleMeta, prompt_template: str = DEFAULT_PROMPT) -> PriorRecord:
        ...


class StubTraceProvider(TraceProvider):
    """Deterministic stand-in for a multimodal LLM.

    With probability ``fidelity`` the evidence describes the sample's true
    class; otherwise it describes a uniformly chosen wrong class. Every
    request draws from its own stream keyed by (seed, sample id).
    """

    name = "stub"

    def __init__(self, fidelity: float, table: AUSupportTable, lexicons: Lexicons,
                 r_policy: RPolicy = "uniform", seed: int = 0,
                 aggregation: Aggregation = "weighted_sum"):
        if not 0.0 <= fidelity <= 1.0:
            raise ValueError("fidelity must lie in [0, 1]")
        if r_policy not in ("uniform", "dirichlet", "one-hot"):
            raise ValueError(f"unknown r_policy {r_policy!r}")
        self.fidelity = fidelity
        self.table = table
        self.lexicons = lexicons.restrict(table.num_classes)
        self.r_policy = r_policy
        self.seed = seed
        self.aggregation = aggregation

    def _weights(self, rng) -> tuple[float, float, float]:
        if self.r_policy == "uniform":
            return (1 / 3, 1 / 3, 1 / 3)
        if self.r_policy == "one-hot":
            w = [0.0, 0.0, 0.0]
            w[int(rng.integers(3))] = 1.0
            return tuple(w)
        w = rng.dirichlet(np.ones(3))
        w = w / w.sum()
        return tuple(float(x) for x in w)

    def request(self, sample: SampleMeta, prompt_template: str = DEFAULT_PROMPT) -> PriorRecord:
        if sample.true_label is None:
            raise ProviderUnavailable(f"stub provider needs the true label of {sample.sample_id}")
        c = self.table.num_classes
        y = sample.true_label
        if not 0 <= y < c:
            raise UnknownClass(f"class {y} not in [0, {c})")
        rng = derive_rng(self.seed, zlib.crc32(sample.sample_id.encode("utf-8")))
        target = y
        if c > 1 and rng.random() >= self.fidelity:
            target = int(rng.choice([k for k in range(c) if k != y]))
        weights = self._weights(rng)
        keywords = sorted(self.lexicons.keywords[target])
        n_kw = int(rng.integers(1, len(keywords) + 1))
        tokens = list(rng.choice(keywords, size=n_kw, replace=False))
        if self.lexicons.filler:
            n_fill = int(rng.integers(0, 4))
            tokens += list(rng.choice(self.lexicons.filler, size=n_fill))
        tokens = [str(t) for t in rng.permutation(tokens)]
        name = self.table.names[target]
        proto = self.lexicons.prosody[target]
        record = PriorRecord(
            sample_id=sample.sample_id,
            au_ids=self.table.support[target],
            au_text=f"AU pattern consistent with {name}",
            prosody=Prosody(*proto),
            prosody_text=f"prosody typical of {name}",
            tokens=tuple(tokens),
            text_note=f"transcript wording suggests {name}",
            weights=weights,
            label=0,
            provider=self.name,
        )
        label = decide(record, self.table, self.lexicons, self.aggregation)
        return PriorRecord(**{**record.__dict__, "label": label})


def get_provider(name: str, **kwargs) -> TraceProvider:
    if name == "stub":
        return StubTraceProvider(**kwargs)
    raise ProviderUnavailable(f"no trace provider named {name!r} is available")
