"""Round-robin pair mining over candidate pools and the winner-refresh step."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Optional, Sequence

from .dpo import Provenance, WinLosePair
from .records import Choice

log = logging.getLogger(__name__)

# judge(candidate_a, candidate_b, prompt_id) -> Choice.A or Choice.B
Judge = Callable[[tuple, tuple, str], Choice]


class JudgeError(RuntimeError):
    """A judge failed or returned something other than A/B for a pool pair."""


@dataclass
class CandidatePool:
    prompt_id: str
    candidates: list[tuple[float, ...]]
    judge_matrix: Optional[list[list[Optional[Choice]]]] = None

    def __post_init__(self) -> None:
        self.candidates = [tuple(float(v) for v in c) for c in self.candidates]
        if len(self.candidates) < 2:
            raise ValueError("a pool needs at least two candidates")
        if len({len(c) for c in self.candidates}) != 1:
            raise ValueError("candidates differ in latent dimension")

    def __len__(self) -> int:
        return len(self.candidates)


@dataclass
class TournamentResult:
    pair: WinLosePair
    winner_index: int
    loser_index: int
    counts: list[int]
    audit: list[dict] = field(default_factory=list)


def select_indices(counts: Sequence[int]) -> tuple[int, int]:
    """Winner = lowest index with the max count, loser = lowest index with the min count.

    When every count is equal the two lowest indices are used.
    """
    hi, lo = max(counts), min(counts)
    if hi == lo:
        return 0, 1
    return counts.index(hi), counts.index(lo)


def judge_pool(pool: CandidatePool, judge: Judge) -> list[list[Optional[Choice]]]:
    """Fill the judge matrix; entry (i, j) is the verdict with i presented as video A."""
    n = len(pool)
    matrix: list[list[Optional[Choice]]] = [[None] * n for _ in range(n)]
    for i, j in combinations(range(n), 2):
        try:
            verdict = judge(pool.candidates[i], pool.candidates[j], pool.prompt_id)
        except Exception as exc:  # noqa: BLE001 - any judge failure aborts the pool
            raise JudgeError(f"judge failed on pool {pool.prompt_id} pair ({i}, {j}): {exc}") from exc
        if verdict not in (Choice.A, Choice.B):
            raise JudgeError(f"judge returned {verdict!r} on pool {pool.prompt_id} pair ({i}, {j})")
        matrix[i][j] = verdict
        matrix[j][i] = Choice.B if verdict is Choice.A else Choice.A
    return matrix


def win_counts(matrix: Sequence[Sequence[Optional[Choice]]]) -> list[int]:
    n = len(matrix)
    counts = [0] * n
    for i, j in combinations(range(n), 2):
        if matrix[i][j] is Choice.A:
            counts[i] += 1
        else:
            counts[j] += 1
    return counts


def run_tournament(pool: CandidatePool, judge: Judge, provenance: Provenance = Provenance.INITIAL) -> TournamentResult:
    """Judge every unordered pair once (lower index as A) and pick the most/least chosen."""
    matrix = judge_pool(pool, judge)
    pool.judge_matrix = matrix
    counts = win_counts(matrix)
    w, l = select_indices(counts)
    audit = [
        {"prompt_id": pool.prompt_id, "i": i, "j": j, "verdict": matrix[i][j].value}
        for i, j in combinations(range(len(pool)), 2)
    ]
    pair = WinLosePair(pool.candidates[w], pool.candidates[l], pool.prompt_id, provenance)
    return TournamentResult(pair, w, l, counts, audit)


def refresh_pairs(new_pool: CandidatePool, old_pairs: Sequence[WinLosePair], judge: Judge) -> tuple[list[WinLosePair], int]:
    """Pair the new pool's winner with each earlier loser for the same prompt.

    Returns (pairs, warnings); a warning is counted when no earlier pair
    exists for the pool's prompt.  Pairs whose refreshed winner coincides with
    the old loser are skipped, also with a warning.
    """
    matching = [p for p in old_pairs if p.prompt_id == new_pool.prompt_id]
    if not matching:
        log.warning("no earlier pair for prompt %s; skipping refresh", new_pool.prompt_id)
        return [], 1
    best = run_tournament(new_pool, judge).pair.winner
    out, warnings = [], 0
    for p in matching:
        if best == p.loser:
            warnings += 1
            continue
        out.append(WinLosePair(best, p.loser, p.prompt_id, Provenance.REFRESHED))
    return out, warnings


def presentation_bias_probe(judge: Judge, pool: CandidatePool) -> float:
    """Fraction of pairs whose verdict names the same candidate under both presentation orders."""
    stable = total = 0
    for i, j in combinations(range(len(pool)), 2):
        a, b = pool.candidates[i], pool.candidates[j]
        forward = judge(a, b, pool.prompt_id)
        backward = judge(b, a, pool.prompt_id)
        stable += (forward is Choice.A) == (backward is Choice.B)
        total += 1
    return stable / total


def write_audit(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
