"""Run logs: one JSON line per generation, preceded by a header.

Schema (one object per line):
  {"type": "header", "format": "comfygi-run-log/1", "run_id", "prompt",
   "category", "run_seed", "baseline_hash", "initial_score", "config": {...},
   "backend": {...}}
  {"type": "generation", "index", "best_candidate_score", "accepted",
   "incumbent_score_after", "candidates": [...]}
  {"type": "result", "initial_score", "final_score", "evaluations_used",
   "termination_reason", "accepted_generations"}

Mutations are stored in the same kind-tagged form patch files use. Writing is
deterministic: rewriting a parsed log reproduces it byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .mutations import mutation_from_dict, mutation_to_dict
from .search import CandidateRecord, GenerationRecord, RunResult

__all__ = [
    "RunLog",
    "RunLogError",
    "write_run_log",
    "read_run_log",
    "rewrite_run_log",
    "generation_to_dict",
]

FORMAT = "comfygi-run-log/1"


class RunLogError(Exception):
    pass


@dataclass(frozen=True)
class RunLog:
    header: dict
    generations: tuple
    result: "dict | None"


def _candidate_to_dict(c: CandidateRecord) -> dict:
    return {
        "operator": c.operator,
        "slot": c.slot,
        "mutation": mutation_to_dict(c.mutation) if c.mutation is not None else None,
        "score": c.score,
        "skipped": c.skipped,
    }


def _candidate_from_dict(data: dict) -> CandidateRecord:
    return CandidateRecord(
        operator=data["operator"],
        slot=data["slot"],
        mutation=mutation_from_dict(data["mutation"]) if data.get("mutation") else None,
        score=data.get("score"),
        skipped=data.get("skipped"),
    )


def generation_to_dict(g: GenerationRecord) -> dict:
    return {
        "type": "generation",
        "index": g.index,
        "best_candidate_score": g.best_candidate_score,
        "accepted": mutation_to_dict(g.accepted) if g.accepted is not None else None,
        "incumbent_score_after": g.incumbent_score_after,
        "candidates": [_candidate_to_dict(c) for c in g.candidates],
    }


def _generation_from_dict(data: dict) -> GenerationRecord:
    return GenerationRecord(
        index=data["index"],
        candidates=tuple(_candidate_from_dict(c) for c in data.get("candidates", [])),
        best_candidate_score=data.get("best_candidate_score"),
        accepted=mutation_from_dict(data["accepted"]) if data.get("accepted") else None,
        incumbent_score_after=data["incumbent_score_after"],
    )


def _dump_line(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n"


def write_run_log(path, header: dict, result: RunResult) -> None:
    header = dict(header)
    header["type"] = "header"
    header["format"] = FORMAT
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dump_line(header))
        for generation in result.generations:
            fh.write(_dump_line(generation_to_dict(generation)))
        accepted = sum(1 for g in result.generations if g.accepted is not None)
        fh.write(
            _dump_line(
                {
                    "type": "result",
                    "initial_score": result.initial_score,
                    "final_score": result.final_score,
                    "evaluations_used": result.evaluations_used,
                    "termination_reason": result.termination_reason,
                    "accepted_generations": accepted,
                }
            )
        )


def read_run_log(path) -> RunLog:
    header = None
    generations = []
    result = None
    with open(path, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RunLogError(f"{path}: line {line_number} is not JSON: {exc}") from exc
            kind = data.get("type")
            if kind == "header":
                if header is not None:
                    raise RunLogError(f"{path}: duplicate header at line {line_number}")
                header = data
            elif kind == "generation":
                generations.append(_generation_from_dict(data))
            elif kind == "result":
                result = data
            else:
                raise RunLogError(f"{path}: line {line_number} has unknown type {kind!r}")
    if header is None:
        raise RunLogError(f"{path}: missing header line")
    if header.get("format") != FORMAT:
        raise RunLogError(f"{path}: unsupported log format {header.get('format')!r}")
    return RunLog(header=header, generations=tuple(generations), result=result)


def rewrite_run_log(path, log: RunLog) -> None:
    """Serialize a parsed log back out (used to verify lossless round trips)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dump_line(log.header))
        for generation in log.generations:
            fh.write(_dump_line(generation_to_dict(generation)))
        if log.result is not None:
            fh.write(_dump_line(log.result))
