"""Corpus ingestion, benchmark execution, and mode/accuracy/latency reporting."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path

from .embedding import EmbedderSpec
from .errors import BenchmarkAbortError, IngestError, InsufficientRespondersError
from .index import DocumentSnippet, build_index, extend_index, load_index, save_index
from .inference import BenchmarkQuestion, extract_answer
from .protocol import FederationServer

logger = logging.getLogger("fedrag.harness")

INDEX_FILENAME = "index.frix"
MAX_MALFORMED_RATIO = 0.01

MODE_DISPLAY = {
    "standalone": "Standalone Inference",
    "cascading": "Cascaded Inference",
    "confidential": "Confidential Inference",
}
MODE_ORDER = ("standalone", "cascading", "confidential")

# Yes/No/Maybe datasets are folded onto option labels so one extractor
# serves every dataset.
_YNM_LABELS = {"yes": "A", "no": "B", "maybe": "C"}


def _normalize_options(options: dict, gold: str) -> tuple[dict[str, str], str]:
    keys_lower = {str(k).lower() for k in options}
    if keys_lower <= set(_YNM_LABELS):
        mapped = {_YNM_LABELS[str(k).lower()]: str(v) for k, v in options.items()}
        return mapped, _YNM_LABELS.get(gold.lower(), gold)
    return {str(k).upper(): str(v) for k, v in options.items()}, gold.upper()


def read_question_file(path: str | Path) -> list[BenchmarkQuestion]:
    """Parse a question JSONL file; one question per line."""
    questions: list[BenchmarkQuestion] = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                options, gold = _normalize_options(obj["options"], obj["gold"])
                q = BenchmarkQuestion(
                    qid=str(obj["qid"]),
                    question_text=obj["question"],
                    options=options,
                    gold_label=gold,
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise IngestError(f"bad question on line {lineno} of {path}: {exc}") from exc
            if not 2 <= len(q.options) <= 4:
                raise IngestError(f"question {q.qid} must have 2-4 options")
            if q.gold_label not in q.options:
                raise IngestError(f"question {q.qid} gold label not among its options")
            questions.append(q)
    if not questions:
        raise IngestError(f"question file {path} contains no questions")
    return questions


@dataclass(frozen=True)
class IngestReport:
    silo_id: str
    total_lines: int
    ingested: int
    deduplicated: int
    malformed_lines: tuple[int, ...]
    index_size: int


def ingest_corpus(
    input_path: str | Path,
    data_dir: str | Path,
    spec: EmbedderSpec,
    silo_id: str = "",
) -> IngestReport:
    """Stream snippet JSONL into the silo's persisted index.

    Extends an existing index when one is present. Malformed lines are
    skipped and counted; more than 1% malformed fails the whole ingest.
    """
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    index_path = data_dir / INDEX_FILENAME

    snippets: list[DocumentSnippet] = []
    malformed: list[int] = []
    total = 0
    with Path(input_path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            total += 1
            try:
                obj = json.loads(line)
                snippets.append(
                    DocumentSnippet(
                        text=obj["text"],
                        source=obj.get("source", ""),
                        meta=obj.get("meta", {}),
                    )
                )
            except (ValueError, KeyError, TypeError):
                malformed.append(lineno)
    if total == 0:
        raise IngestError(f"{input_path} contains no snippet lines")
    if len(malformed) / total > MAX_MALFORMED_RATIO:
        raise IngestError(
            f"{len(malformed)}/{total} malformed lines in {input_path}: "
            f"lines {malformed[:20]}{'...' if len(malformed) > 20 else ''}"
        )

    if index_path.exists():
        index = load_index(index_path)
        if index.spec != spec:
            raise IngestError(f"existing index at {index_path} was built with a different spec")
    else:
        index = None

    before_ids = set(index.docs) if index is not None else set()
    seen_in_file: set[str] = set()
    dedup = 0
    for snippet in snippets:
        if snippet.doc_id in before_ids or snippet.doc_id in seen_in_file:
            dedup += 1
        seen_in_file.add(snippet.doc_id)

    if index is None:
        index = build_index(snippets, spec)
    else:
        index = extend_index(index, snippets)
    save_index(index, index_path)
    report = IngestReport(
        silo_id=silo_id,
        total_lines=total,
        ingested=len(seen_in_file - before_ids),
        deduplicated=dedup,
        malformed_lines=tuple(malformed),
        index_size=len(index),
    )
    logger.info(
        "ingested %d snippets into %s (%d duplicates, %d malformed)",
        report.ingested,
        index_path,
        report.deduplicated,
        len(report.malformed_lines),
    )
    return report


@dataclass(frozen=True)
class BenchmarkRun:
    dataset_name: str
    mode: str
    per_question: tuple[dict, ...]
    correct: int
    total: int
    accuracy: float
    mean_time_ms: float

    def to_json_dict(self) -> dict:
        return {
            "dataset": self.dataset_name,
            "mode": self.mode,
            "correct": self.correct,
            "total": self.total,
            "accuracy": self.accuracy,
            "mean_time_ms": self.mean_time_ms,
            "per_question": list(self.per_question),
        }

    def to_json_bytes(self) -> bytes:
        return json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":")).encode()


def run_benchmark(
    questions: list[BenchmarkQuestion],
    server: FederationServer,
    mode: str,
    dataset_name: str = "dataset",
    abort_ratio: float = 0.10,
) -> BenchmarkRun:
    """Run every question sequentially through the federation in one mode.

    Federation failures (too few responders) abort the run once more than
    abort_ratio of the questions have failed; inference errors are recorded
    as incorrect answers with an error code.
    """
    if not questions:
        raise BenchmarkAbortError("no questions to run")
    rows: list[dict] = []
    times: list[float] = []
    correct = 0
    insufficient = 0
    for q in questions:
        try:
            record = server.handle_query(q, mode)
        except InsufficientRespondersError as exc:
            insufficient += 1
            rows.append(
                {
                    "qid": q.qid,
                    "predicted": "",
                    "gold": q.gold_label,
                    "correct": False,
                    "error": "InsufficientResponders",
                    "total_ms": None,
                    "responders": [],
                }
            )
            if insufficient > abort_ratio * len(questions):
                raise BenchmarkAbortError(
                    f"InsufficientResponders on {insufficient} of {len(questions)} questions"
                ) from exc
            continue
        except Exception as exc:
            rows.append(
                {
                    "qid": q.qid,
                    "predicted": "",
                    "gold": q.gold_label,
                    "correct": False,
                    "error": type(exc).__name__,
                    "total_ms": None,
                    "responders": [],
                }
            )
            continue
        extracted = extract_answer(record.answer_text, q.options)
        is_correct = extracted.label == q.gold_label
        correct += int(is_correct)
        times.append(record.total_ms)
        rows.append(
            {
                "qid": q.qid,
                "predicted": extracted.label,
                "gold": q.gold_label,
                "correct": is_correct,
                "flagged": extracted.flagged,
                "total_ms": record.total_ms,
                "responders": list(record.responders),
            }
        )
    return BenchmarkRun(
        dataset_name=dataset_name,
        mode=mode,
        per_question=tuple(rows),
        correct=correct,
        total=len(questions),
        accuracy=correct / len(questions),
        mean_time_ms=(sum(times) / len(times)) if times else 0.0,
    )


def format_accuracy(correct: int, total: int) -> str:
    """Exact rational accuracy rendered at two decimals, round half even."""
    value = Decimal(correct) / Decimal(total)
    return str(value.quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


def format_time(mean_time_ms: float) -> str:
    """Whole seconds above one second, whole milliseconds below."""
    if mean_time_ms >= 1000.0:
        seconds = Decimal(mean_time_ms) / Decimal(1000)
        return f"{seconds.quantize(Decimal('1'), rounding=ROUND_HALF_EVEN)}s"
    return f"{Decimal(mean_time_ms).quantize(Decimal('1'), rounding=ROUND_HALF_EVEN)}ms"


def report(runs: list[BenchmarkRun] | BenchmarkRun) -> str:
    """Render runs as a mode-by-dataset table with Time and Accuracy columns."""
    if isinstance(runs, BenchmarkRun):
        runs = [runs]
    by_dataset: dict[str, dict[str, BenchmarkRun]] = {}
    for run in runs:
        by_dataset.setdefault(run.dataset_name, {})[run.mode] = run

    lines: list[str] = []
    name_width = max(len(v) for v in MODE_DISPLAY.values())
    for dataset, by_mode in by_dataset.items():
        lines.append(f"Dataset: {dataset}")
        header = f"{'Mode':<{name_width}} | {'Time':>8} | {'Accuracy':>8}"
        lines.append(header)
        lines.append("-" * len(header))
        for mode in MODE_ORDER:
            run = by_mode.get(mode)
            if run is None:
                continue
            lines.append(
                f"{MODE_DISPLAY[mode]:<{name_width}} | "
                f"{format_time(run.mean_time_ms):>8} | "
                f"{format_accuracy(run.correct, run.total):>8}"
            )
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"
