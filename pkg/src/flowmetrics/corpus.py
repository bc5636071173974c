"""Essay corpus ingestion: prompts, trait scales, essays, and scores.

A corpus arrives as a delimited file of essays plus a prompts table
(delimited or JSON). A column-mapping schema names the id/text columns and
one column per scored trait. Loading normalizes whitespace, segments each
essay into sentence spans, validates scores against their declared scales,
and drops (and counts) rows missing a mapped trait score.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .segmentation import segment_sentences


class SchemaError(ValueError):
    """A required column or schema field is missing or malformed."""


class ValidationError(ValueError):
    """A row or record violates a corpus invariant."""


_WS = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    """Normalize line endings and collapse whitespace runs to single spaces.

    This is the only text normalization applied before scoring; casing and
    anonymization placeholders (@NAME1 etc.) are preserved verbatim.
    """
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    return _WS.sub(" ", text).strip()


@dataclass(frozen=True)
class TraitScale:
    trait: str
    levels: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(float(v) for v in self.levels))
        if len(self.levels) < 2:
            raise ValidationError(f"trait scale {self.trait!r} needs at least 2 levels")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValidationError(f"trait scale {self.trait!r} levels must be strictly increasing")

    def contains(self, value: float) -> bool:
        return any(value == lv for lv in self.levels)


@dataclass(frozen=True)
class PromptSpec:
    prompt_id: str
    topic_text: str
    trait_scales: dict[str, TraitScale] = field(default_factory=dict)

    def __post_init__(self):
        if not self.topic_text.strip():
            raise ValidationError(f"prompt {self.prompt_id!r} has empty topic text")


@dataclass(frozen=True)
class EssayRecord:
    essay_id: str
    prompt_id: str
    text: str
    sentences: tuple[tuple[int, int], ...]
    scores: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "scores", {t: float(v) for t, v in self.scores.items()})

    def sentence_text(self, i: int) -> str:
        s, e = self.sentences[i]
        return self.text[s:e]

    def sentence_texts(self) -> list[str]:
        return [self.sentence_text(i) for i in range(len(self.sentences))]


@dataclass
class Dataset:
    name: str
    prompts: list[PromptSpec]
    essays: list[EssayRecord]

    def prompt_for(self, essay: EssayRecord) -> PromptSpec:
        return self._prompt_index()[essay.prompt_id]

    def _prompt_index(self) -> dict[str, PromptSpec]:
        return {p.prompt_id: p for p in self.prompts}

    def scale_for(self, trait: str) -> TraitScale:
        for p in self.prompts:
            if trait in p.trait_scales:
                return p.trait_scales[trait]
        raise ValidationError(f"no prompt declares a scale for trait {trait!r}")

    def validate(self) -> None:
        prompt_ids = [p.prompt_id for p in self.prompts]
        if len(set(prompt_ids)) != len(prompt_ids):
            raise ValidationError("duplicate prompt_id in prompts")
        index = self._prompt_index()
        seen = set()
        for essay in self.essays:
            if essay.essay_id in seen:
                raise ValidationError(f"duplicate essay_id {essay.essay_id!r}")
            seen.add(essay.essay_id)
            if essay.prompt_id not in index:
                raise ValidationError(
                    f"essay {essay.essay_id!r} references unknown prompt {essay.prompt_id!r}"
                )
            _check_spans(essay)
            prompt = index[essay.prompt_id]
            for trait, value in essay.scores.items():
                scale = prompt.trait_scales.get(trait)
                if scale is None:
                    raise ValidationError(
                        f"essay {essay.essay_id!r} scored on trait {trait!r} "
                        f"with no scale on prompt {essay.prompt_id!r}"
                    )
                if not scale.contains(value):
                    raise ValidationError(
                        f"essay {essay.essay_id!r}: score {value} outside scale "
                        f"{list(scale.levels)} for trait {trait!r}"
                    )


def _check_spans(essay: EssayRecord) -> None:
    if not essay.sentences:
        raise ValidationError(f"essay {essay.essay_id!r} has no sentences")
    prev_end = 0
    for s, e in essay.sentences:
        if not (0 <= s < e <= len(essay.text)):
            raise ValidationError(f"essay {essay.essay_id!r}: span ({s},{e}) out of bounds")
        if s < prev_end:
            raise ValidationError(f"essay {essay.essay_id!r}: spans overlap or are unordered")
        if not essay.text[s:e].strip():
            raise ValidationError(f"essay {essay.essay_id!r}: span ({s},{e}) empty after trim")
        prev_end = e


@dataclass
class LoadReport:
    total_rows: int = 0
    loaded: int = 0
    dropped_missing_score: int = 0
    dropped_empty_text: int = 0

    def to_dict(self) -> dict:
        return {
            "total_rows": self.total_rows,
            "loaded": self.loaded,
            "dropped_missing_score": self.dropped_missing_score,
            "dropped_empty_text": self.dropped_empty_text,
        }


@dataclass
class DatasetSchema:
    """Column mapping for a delimited essay file.

    traits maps trait name -> source column; trait_levels maps trait name ->
    the ordered numeric labels of its scale.
    """

    essay_id: str
    text: str
    traits: dict[str, str]
    trait_levels: dict[str, list[float]]
    prompt_id: str | None = None
    default_prompt_id: str = "default"

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        for key in ("essay_id", "text", "traits", "trait_levels"):
            if key not in d:
                raise SchemaError(f"schema missing required field {key!r}")
        missing = set(d["traits"]) - set(d["trait_levels"])
        if missing:
            raise SchemaError(f"schema missing trait_levels for {sorted(missing)}")
        return cls(
            essay_id=d["essay_id"],
            text=d["text"],
            traits=dict(d["traits"]),
            trait_levels={t: [float(v) for v in lv] for t, lv in d["trait_levels"].items()},
            prompt_id=d.get("prompt_id"),
            default_prompt_id=d.get("default_prompt_id", "default"),
        )


def _sniff_delimiter(path: Path) -> str:
    return "\t" if path.suffix.lower() in (".tsv", ".tab") else ","


def load_prompts(path: str | Path, trait_levels: dict[str, list[float]]) -> list[PromptSpec]:
    """Read a prompts table (CSV/TSV with prompt_id, topic_text, or a JSON
    list of objects) and attach the schema's trait scales to every prompt."""
    path = Path(path)
    scales = {t: TraitScale(t, tuple(lv)) for t, lv in trait_levels.items()}
    prompts = []
    if path.suffix.lower() == ".json":
        rows = json.loads(path.read_text("utf-8"))
        for row in rows:
            prompts.append(
                PromptSpec(str(row["prompt_id"]), normalize_text(row["topic_text"]), dict(scales))
            )
    else:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh, delimiter=_sniff_delimiter(path))
            if reader.fieldnames is None or "prompt_id" not in reader.fieldnames:
                raise SchemaError(f"prompts file {path} must have a prompt_id column")
            if "topic_text" not in reader.fieldnames:
                raise SchemaError(f"prompts file {path} must have a topic_text column")
            for row in reader:
                prompts.append(
                    PromptSpec(str(row["prompt_id"]), normalize_text(row["topic_text"]), dict(scales))
                )
    return prompts


def load_dataset(
    path: str | Path,
    schema: DatasetSchema,
    prompts: list[PromptSpec],
    name: str | None = None,
) -> tuple[Dataset, LoadReport]:
    """Load essays from a delimited file under a column-mapping schema.

    Rows with an empty mapped trait cell are dropped and counted in the
    returned LoadReport; out-of-scale scores and unresolvable prompt ids
    raise ValidationError naming the offending essay.
    """
    path = Path(path)
    report = LoadReport()
    scales = {t: TraitScale(t, tuple(lv)) for t, lv in schema.trait_levels.items()}
    prompt_ids = {p.prompt_id for p in prompts}

    essays = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=_sniff_delimiter(path))
        header = reader.fieldnames or []
        needed = [schema.essay_id, schema.text, *schema.traits.values()]
        if schema.prompt_id:
            needed.append(schema.prompt_id)
        for col in needed:
            if col not in header:
                raise SchemaError(f"mapped column {col!r} not found in {path} (header: {header})")

        for row in reader:
            report.total_rows += 1
            essay_id = str(row[schema.essay_id]).strip()
            text = normalize_text(row[schema.text] or "")
            if not text:
                report.dropped_empty_text += 1
                continue

            raw_scores = {}
            missing = False
            for trait, col in schema.traits.items():
                cell = (row[col] or "").strip()
                if not cell:
                    missing = True
                    break
                try:
                    raw_scores[trait] = float(cell)
                except ValueError:
                    raise ValidationError(
                        f"essay {essay_id!r}: non-numeric score {cell!r} in column {col!r}"
                    )
            if missing:
                report.dropped_missing_score += 1
                continue

            for trait, value in raw_scores.items():
                if not scales[trait].contains(value):
                    raise ValidationError(
                        f"essay {essay_id!r}: score {value} outside scale "
                        f"{schema.trait_levels[trait]} for trait {trait!r}"
                    )

            prompt_id = (
                str(row[schema.prompt_id]).strip() if schema.prompt_id else schema.default_prompt_id
            )
            if prompt_id not in prompt_ids:
                raise ValidationError(
                    f"essay {essay_id!r}: prompt_id {prompt_id!r} not in prompts table"
                )

            spans = tuple(segment_sentences(text))
            essays.append(EssayRecord(essay_id, prompt_id, text, spans, raw_scores))
            report.loaded += 1

    dataset = Dataset(name=name or path.stem, prompts=list(prompts), essays=essays)
    dataset.validate()
    return dataset, report


def dataset_to_dict(dataset: Dataset) -> dict:
    return {
        "name": dataset.name,
        "prompts": [
            {
                "prompt_id": p.prompt_id,
                "topic_text": p.topic_text,
                "trait_scales": {t: list(s.levels) for t, s in sorted(p.trait_scales.items())},
            }
            for p in dataset.prompts
        ],
        "essays": [
            {
                "essay_id": e.essay_id,
                "prompt_id": e.prompt_id,
                "text": e.text,
                "sentences": [list(span) for span in e.sentences],
                "scores": {t: v for t, v in sorted(e.scores.items())},
            }
            for e in dataset.essays
        ],
    }


def dataset_from_dict(d: dict) -> Dataset:
    prompts = [
        PromptSpec(
            p["prompt_id"],
            p["topic_text"],
            {t: TraitScale(t, tuple(float(v) for v in lv)) for t, lv in p["trait_scales"].items()},
        )
        for p in d["prompts"]
    ]
    essays = [
        EssayRecord(
            e["essay_id"],
            e["prompt_id"],
            e["text"],
            tuple((int(s), int(t)) for s, t in e["sentences"]),
            {t: float(v) for t, v in e["scores"].items()},
        )
        for e in d["essays"]
    ]
    dataset = Dataset(d["name"], prompts, essays)
    dataset.validate()
    return dataset


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(dataset_to_dict(dataset), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_dataset_json(path: str | Path) -> Dataset:
    return dataset_from_dict(json.loads(Path(path).read_text("utf-8")))
