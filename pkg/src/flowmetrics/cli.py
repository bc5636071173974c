"""Pipeline front door: ingest -> seq -> features -> judge -> evaluate.

Each stage reads declared input files, writes declared outputs under the
output directory, and records a stamp keyed by a hash of its inputs and
the relevant configuration. Unchanged inputs skip recomputation; LM
responses are additionally cached at request granularity, so an
interrupted scoring stage resumes where it stopped. `--dry-run` prints the
resolved plan without touching anything.
"""

from __future__ import annotations

import csv
import hashlib
import json
import sys
from pathlib import Path

import click

from . import corpus as corpus_mod
from . import judge as judge_mod
from . import sequentiality as seq_mod
from .evaluation import assemble_table, compare_variants, standard_feature_sets
from .features import FEATURE_COLUMNS, FeatureExtractor
from .mocklm import MockBigramModel, default_vocabulary
from .scoring import CachingBackend, HttpCompletionsBackend, LmEndpointConfig, ResponseCache

DEFAULT_FEATURE_SETS = ["seq", "topic", "context", "both", "ling", "ling+seq", "ling+topic",
                        "ling+context"]


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def load_config(config_path: str | None, overrides: dict) -> dict:
    cfg: dict = {}
    if config_path:
        cfg = json.loads(Path(config_path).read_text("utf-8"))
    for key, value in overrides.items():
        if value in (None, ()):
            continue
        if key == "backend_url":
            cfg.setdefault("backend", {})
            cfg["backend"] = dict(cfg["backend"])
            cfg["backend"]["url"] = value
        elif key == "feature_sets":
            cfg["feature_sets"] = list(value)
        else:
            cfg[key] = value
    cfg.setdefault("k", 5)
    cfg.setdefault("seed", 0)
    cfg.setdefault("feature_sets", list(DEFAULT_FEATURE_SETS))
    cfg.setdefault("out_dir", "out")
    cfg.setdefault("cache_dir", str(Path(cfg["out_dir"]) / "cache"))
    cfg.setdefault("max_failure_rate", 0.0)
    return cfg


def build_scoring_backend(cfg: dict):
    spec = cfg.get("backend") or {}
    url = spec.get("url", "")
    if spec.get("kind") == "mock" or url.startswith("mock:"):
        seed = int(spec.get("seed", url.removeprefix("mock:") or 17))
        vocab, topics = default_vocabulary(
            int(spec.get("vocab_size", 64)), int(spec.get("topic_symbols", 8))
        )
        return MockBigramModel(
            seed,
            vocab,
            topic_symbols=topics,
            boost=float(spec.get("boost", 0.5)),
            chain_bonus=float(spec.get("chain_bonus", 4.0)),
            concentration=float(spec.get("concentration", 8.0)),
            max_context_tokens=spec.get("max_context_tokens"),
        )
    if not url:
        raise click.ClickException("no scoring backend configured (backend.url or --backend-url)")
    return HttpCompletionsBackend(
        LmEndpointConfig(
            base_url=url,
            model_name=spec.get("model", "default"),
            max_context_tokens=int(spec.get("max_context_tokens", 4096)),
            request_timeout=float(spec.get("timeout_s", 120.0)),
            max_inflight=int(spec.get("max_inflight", 1)),
        )
    )


def build_judge_backend(cfg: dict, levels):
    spec = cfg.get("judge_backend") or {}
    url = spec.get("url", "")
    if spec.get("kind") == "mock" or url.startswith("mock-judge"):
        return judge_mod.DeterministicMockJudge(levels)
    if not url:
        raise click.ClickException("no judge backend configured (judge_backend.url)")
    return judge_mod.HttpChatBackend(url, spec.get("model", "default"),
                                     timeout=float(spec.get("timeout_s", 120.0)))


# ---------------------------------------------------------------------------
# Stage plumbing
# ---------------------------------------------------------------------------


def _sha_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_digest(parts: dict) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()


class Stage:
    def __init__(self, name: str, out_dir: Path, inputs: list[Path], outputs: list[Path],
                 config_parts: dict):
        self.name = name
        self.out_dir = out_dir
        self.inputs = inputs
        self.outputs = outputs
        self.config_parts = config_parts
        self.stamp_path = out_dir / f"{name}.stamp.json"

    def input_state(self) -> dict:
        state = {"config": _config_digest(self.config_parts)}
        for path in self.inputs:
            state[str(path)] = _sha_file(path) if path.exists() else "MISSING"
        return state

    def missing_inputs(self) -> list[Path]:
        return [p for p in self.inputs if not p.exists()]

    def would_skip(self) -> bool:
        if not self.stamp_path.exists():
            return False
        if not all(p.exists() for p in self.outputs):
            return False
        try:
            stamp = json.loads(self.stamp_path.read_text("utf-8"))
        except (OSError, json.JSONDecodeError):
            return False
        return stamp.get("inputs") == self.input_state()

    def plan(self) -> dict:
        return {
            "stage": self.name,
            "inputs": {str(p): _sha_file(p)[:12] if p.exists() else "MISSING"
                       for p in self.inputs},
            "outputs": [str(p) for p in self.outputs],
            "config_digest": _config_digest(self.config_parts)[:12],
            "would_skip": self.would_skip(),
        }

    def write_stamp(self) -> None:
        self.stamp_path.write_text(
            json.dumps({"inputs": self.input_state()}, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )


def _stage_gate(stage: Stage, dry_run: bool) -> bool:
    """Shared pre-run logic; returns True when the stage should run."""
    if dry_run:
        click.echo(json.dumps(stage.plan(), indent=2, sort_keys=True))
        return False
    missing = stage.missing_inputs()
    if missing:
        raise click.ClickException(
            f"stage {stage.name!r}: missing input file(s) {[str(p) for p in missing]}; "
            f"run the upstream stage first"
        )
    if stage.would_skip():
        click.echo(f"[{stage.name}] inputs unchanged; outputs up to date")
        return False
    stage.out_dir.mkdir(parents=True, exist_ok=True)
    return True


def _dataset_paths(cfg: dict) -> tuple[Path, Path]:
    ds = cfg.get("dataset") or {}
    if "essays_path" not in ds or "prompts_path" not in ds:
        raise click.ClickException("config must set dataset.essays_path and dataset.prompts_path")
    return Path(ds["essays_path"]), Path(ds["prompts_path"])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _common_options(fn):
    decorators = [
        click.option("--config", "config_path", type=click.Path(), default=None,
                     help="JSON run configuration."),
        click.option("--dataset", "dataset_path", type=click.Path(), default=None,
                     help="Essays file (overrides config dataset.essays_path)."),
        click.option("--prompts", "prompts_path", type=click.Path(), default=None,
                     help="Prompts file (overrides config dataset.prompts_path)."),
        click.option("--trait", default=None, help="Trait to evaluate."),
        click.option("--backend-url", default=None,
                     help="Scoring endpoint URL, or mock:<seed> for the built-in mock."),
        click.option("--feature-sets", default=None,
                     help="Comma-separated feature set names."),
        click.option("--k", type=int, default=None, help="Cross-validation folds."),
        click.option("--seed", type=int, default=None, help="Fold seed."),
        click.option("--cache-dir", default=None),
        click.option("--out-dir", default=None),
        click.option("--dry-run", is_flag=True, default=False,
                     help="Print the resolved plan; write nothing."),
    ]
    for dec in reversed(decorators):
        fn = dec(fn)
    return fn


def _resolve(config_path, dataset_path, prompts_path, trait, backend_url, feature_sets,
             k, seed, cache_dir, out_dir) -> dict:
    overrides = {
        "trait": trait,
        "backend_url": backend_url,
        "k": k,
        "seed": seed,
        "cache_dir": cache_dir,
        "out_dir": out_dir,
    }
    if feature_sets:
        overrides["feature_sets"] = [s.strip() for s in feature_sets.split(",") if s.strip()]
    cfg = load_config(config_path, overrides)
    if dataset_path or prompts_path:
        cfg.setdefault("dataset", {})
        cfg["dataset"] = dict(cfg["dataset"])
        if dataset_path:
            cfg["dataset"]["essays_path"] = dataset_path
        if prompts_path:
            cfg["dataset"]["prompts_path"] = prompts_path
    return cfg


@click.group()
def main():
    """Narrative-flow metrics pipeline."""


@main.command()
@_common_options
def ingest(dry_run, **kwargs):
    """Load, validate, and canonicalize the essay corpus."""
    cfg = _resolve(**kwargs)
    essays_path, prompts_path = _dataset_paths(cfg)
    out_dir = Path(cfg["out_dir"])
    dataset_out = out_dir / "dataset.json"
    report_out = out_dir / "load_report.json"
    stage = Stage("ingest", out_dir, [essays_path, prompts_path], [dataset_out, report_out],
                  {"schema": cfg["dataset"].get("schema"), "name": cfg["dataset"].get("name")})
    if not _stage_gate(stage, dry_run):
        return
    schema = corpus_mod.DatasetSchema.from_dict(cfg["dataset"]["schema"])
    prompts = corpus_mod.load_prompts(prompts_path, schema.trait_levels)
    try:
        dataset, report = corpus_mod.load_dataset(
            essays_path, schema, prompts, name=cfg["dataset"].get("name")
        )
    except (corpus_mod.SchemaError, corpus_mod.ValidationError) as exc:
        raise click.ClickException(f"ingest failed: {exc}")
    corpus_mod.save_dataset(dataset, dataset_out)
    report_out.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
    stage.write_stamp()
    click.echo(f"[ingest] {report.loaded} essays loaded, "
               f"{report.dropped_missing_score} dropped (missing score), "
               f"{report.dropped_empty_text} dropped (empty text) -> {dataset_out}")


@main.command()
@_common_options
def seq(dry_run, **kwargs):
    """Score per-sentence topic/context NLLs for every essay."""
    cfg = _resolve(**kwargs)
    out_dir = Path(cfg["out_dir"])
    dataset_in = out_dir / "dataset.json"
    essay_out = out_dir / "sequentiality.jsonl"
    sentence_out = out_dir / "sentences.jsonl"
    failures_out = out_dir / "seq_failures.json"
    stage = Stage("seq", out_dir, [dataset_in], [essay_out, sentence_out, failures_out],
                  {"backend": cfg.get("backend")})
    if not _stage_gate(stage, dry_run):
        return
    dataset = corpus_mod.load_dataset_json(dataset_in)
    backend = build_scoring_backend(cfg)
    cache_dir = Path(cfg["cache_dir"])
    cache_dir.mkdir(parents=True, exist_ok=True)
    cache = ResponseCache(cache_dir / "lm_responses.jsonl")
    scorer = CachingBackend(backend, cache)
    result = seq_mod.score_dataset(dataset, scorer,
                                   max_workers=int(cfg.get("max_workers", 1)))
    seq_mod.write_sequentiality_jsonl(result, essay_out, sentence_out)
    failures_out.write_text(json.dumps(result.failures, indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
    stage.write_stamp()
    rate = len(result.failures) / max(len(dataset.essays), 1)
    click.echo(f"[seq] {len(result.essays)} essays scored, {len(result.failures)} failed "
               f"(cache hits {scorer.hits}, misses {scorer.misses}) -> {essay_out}")
    if rate > float(cfg["max_failure_rate"]):
        click.echo(f"[seq] failure rate {rate:.3f} exceeds threshold "
                   f"{cfg['max_failure_rate']}", err=True)
        sys.exit(1)


@main.command()
@_common_options
def features(dry_run, **kwargs):
    """Extract the ten linguistic counts per essay."""
    cfg = _resolve(**kwargs)
    out_dir = Path(cfg["out_dir"])
    dataset_in = out_dir / "dataset.json"
    features_out = out_dir / "features.csv"
    stage = Stage("features", out_dir, [dataset_in], [features_out],
                  {"long_word_min_chars": cfg.get("long_word_min_chars", 7)})
    if not _stage_gate(stage, dry_run):
        return
    dataset = corpus_mod.load_dataset_json(dataset_in)
    extractor = FeatureExtractor(long_word_min_chars=int(cfg.get("long_word_min_chars", 7)),
                                 wordlist_dir=cfg.get("wordlist_dir"))
    with open(features_out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["essay_id"] + FEATURE_COLUMNS)
        for essay in dataset.essays:
            vec = extractor.extract(essay.text)
            writer.writerow([essay.essay_id] + [vec.to_dict()[c] for c in FEATURE_COLUMNS])
    stage.write_stamp()
    click.echo(f"[features] {len(dataset.essays)} essays -> {features_out}")


@main.command()
@_common_options
def judge(dry_run, **kwargs):
    """Zero-shot trait scoring through the judge backend."""
    cfg = _resolve(**kwargs)
    out_dir = Path(cfg["out_dir"])
    dataset_in = out_dir / "dataset.json"
    judged_out = out_dir / "judged.csv"
    judge_cfg = cfg.get("judge") or {}
    rubric_path = judge_cfg.get("rubric_path")
    inputs = [dataset_in] + ([Path(rubric_path)] if rubric_path else [])
    stage = Stage("judge", out_dir, inputs, [judged_out],
                  {"judge": judge_cfg, "judge_backend": cfg.get("judge_backend"),
                   "trait": cfg.get("trait")})
    if not _stage_gate(stage, dry_run):
        return
    trait = cfg.get("trait")
    if not trait:
        raise click.ClickException("judge requires --trait or config trait")
    if not rubric_path:
        raise click.ClickException("judge requires config judge.rubric_path")
    dataset = corpus_mod.load_dataset_json(dataset_in)
    scale = dataset.scale_for(trait)
    rubric_text = Path(rubric_path).read_text("utf-8").strip()
    backend = build_judge_backend(cfg, scale.levels)
    cache_dir = Path(cfg["cache_dir"])
    cache_dir.mkdir(parents=True, exist_ok=True)
    cache = judge_mod.GenerationCache(cache_dir / "judge_generations.jsonl")
    caching = judge_mod.CachingJudgeBackend(backend, cache)
    config = judge_mod.JudgeConfig(
        scale=scale,
        temperature=float(judge_cfg.get("temperature", 0.0001)),
        max_new_tokens=int(judge_cfg.get("max_new_tokens", 64)),
        retries=int(judge_cfg.get("retries", 2)),
    )
    results = judge_mod.judge_dataset(
        dataset, trait, rubric_text, judge_cfg.get("template_id", "organization"),
        config, caching,
    )
    judge_mod.write_judge_csv(results, judged_out)
    stage.write_stamp()
    unjudged = sum(1 for r in results if not r.judged)
    click.echo(f"[judge] {len(results) - unjudged} judged, {unjudged} unjudged "
               f"(cache hits {caching.hits}, misses {caching.misses}) -> {judged_out}")


@main.command()
@_common_options
def evaluate(dry_run, **kwargs):
    """AIC comparison and cross-validated QWK over the feature sets."""
    cfg = _resolve(**kwargs)
    out_dir = Path(cfg["out_dir"])
    dataset_in = out_dir / "dataset.json"
    seq_in = out_dir / "sequentiality.jsonl"
    features_in = out_dir / "features.csv"
    judged_in = out_dir / "judged.csv"
    names = list(cfg["feature_sets"])
    needs_judge = any("llm_score" in n for n in names)
    needs_seq = any(n != "ling" and "llm_score" not in n for n in names)
    needs_ling = any(n.startswith("ling") for n in names)
    inputs = [dataset_in]
    if needs_seq:
        inputs.append(seq_in)
    if needs_ling:
        inputs.append(features_in)
    if needs_judge:
        inputs.append(judged_in)
    report_json = out_dir / "report.json"
    report_txt = out_dir / "report.txt"
    qwk_csv = out_dir / "qwk.csv"
    stage = Stage("evaluate", out_dir, inputs, [report_json, report_txt, qwk_csv],
                  {"trait": cfg.get("trait"), "feature_sets": names, "k": cfg["k"],
                   "seed": cfg["seed"], "stratified": cfg.get("stratified", False)})
    if not _stage_gate(stage, dry_run):
        return
    trait = cfg.get("trait")
    if not trait:
        raise click.ClickException("evaluate requires --trait or config trait")
    dataset = corpus_mod.load_dataset_json(dataset_in)

    seq_rows = seq_mod.read_essay_sequentiality_jsonl(seq_in) if needs_seq else None
    feature_rows = None
    if needs_ling:
        feature_rows = {}
        with open(features_in, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                feature_rows[row["essay_id"]] = {c: float(row[c]) for c in FEATURE_COLUMNS}
    judge_scores = judge_mod.read_judge_csv(judged_in) if needs_judge else None

    table = assemble_table(dataset, trait, seq_rows, feature_rows, judge_scores)
    if table.n == 0:
        raise click.ClickException(f"no essays with trait {trait!r} and all required columns")
    report = compare_variants(
        table,
        standard_feature_sets(names),
        k=int(cfg["k"]),
        seed=int(cfg["seed"]),
        stratified=bool(cfg.get("stratified", False)),
    )
    report_json.write_text(report.to_json(), encoding="utf-8")
    report_txt.write_text(report.render_text(), encoding="utf-8")
    qwk_csv.write_text(report.qwk_csv(), encoding="utf-8")
    stage.write_stamp()
    click.echo(report.render_text())
    click.echo(f"[evaluate] report -> {report_json}")


if __name__ == "__main__":
    main()
