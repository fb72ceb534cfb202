"""Computable metrics over transcripts and evaluation fixtures.

Everything here is a pure function of its inputs (transcript records,
rating tables, gold decision sets), so batch runs over many transcripts
can fan out freely and replays are exact.

Message transforms use the natural logarithm; the correlation
coefficient is invariant under a positive affine transform of either
argument, so the base choice cannot change any reported r.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .errors import AulaError
from .transcript import KIND_UTTERANCE, Record, Transcript

LIKERT_METRICS = ("tone", "clarity", "supportiveness", "alignment")

ACTIVITY_KNOWLEDGE = "knowledge_seeking"
ACTIVITY_MANAGEMENT = "management"
ACTIVITY_OTHER = "other"
BASE_ACTIVITIES = (ACTIVITY_KNOWLEDGE, ACTIVITY_MANAGEMENT, ACTIVITY_OTHER)


class OutOfRangeRating(AulaError):
    pass


class LengthMismatch(AulaError):
    pass


class ZeroVariance(AulaError):
    pass


class EmptyGoldSet(AulaError):
    pass


@dataclass(frozen=True)
class ScriptEvaluation:
    label: str
    tone: float
    clarity: float
    supportiveness: float
    alignment: float
    overall: float


@dataclass(frozen=True)
class EngagementRecord:
    student_id: str
    module_id: str
    msg_num: int
    msg_len_mean: float | None
    log_msg_num: float | None
    log_msg_len: float | None

    @property
    def defined(self) -> bool:
        return self.msg_num > 0


@dataclass(frozen=True)
class GoldDecision:
    scenario_id: str
    snapshot_ref: str
    human: tuple[str, str]
    system: tuple[str, str]
    config: str


@dataclass(frozen=True)
class GroupStats:
    matches: int
    total: int

    @property
    def precision(self) -> float:
        return self.matches / self.total


def likert_aggregate(ratings: Mapping[str, Sequence[float]],
                     label: str = "") -> ScriptEvaluation:
    """Per-metric means over annotators; overall is their unweighted mean.

    ``ratings`` maps each of tone/clarity/supportiveness/alignment to
    one or more 5-point Likert scores.
    """
    means: dict[str, float] = {}
    for metric in LIKERT_METRICS:
        scores = list(ratings.get(metric, ()))
        if not scores:
            raise OutOfRangeRating(f"metric {metric!r} has no ratings")
        for score in scores:
            if not 1.0 <= float(score) <= 5.0:
                raise OutOfRangeRating(f"{metric} rating {score} outside [1, 5]")
        means[metric] = sum(float(s) for s in scores) / len(scores)
    overall = sum(means.values()) / len(LIKERT_METRICS)
    return ScriptEvaluation(label, means["tone"], means["clarity"],
                            means["supportiveness"], means["alignment"], overall)


def _user_utterances(records: Iterable[Record], user_id: str) -> list[Record]:
    return [r for r in records if r.kind == KIND_UTTERANCE and r.speaker == user_id]


def message_metrics(transcript: Transcript,
                    modules: Sequence[tuple[str, int, int]] | None = None,
                    student_id: str = "user") -> list[EngagementRecord]:
    """Per-module message counts and natural-log transforms.

    ``modules`` lists (module_id, start_seq, end_seq) half-open seq
    ranges; None treats the whole transcript as one module. Only the
    student's utterances count. Modules with zero messages come back
    flagged (None log fields), never imputed as zero.
    """
    if modules is None:
        last = transcript.records[-1].seq if transcript.records else 0
        modules = [("all", 0, last + 1)]
    user_msgs = _user_utterances(transcript.records, student_id)
    out: list[EngagementRecord] = []
    for module_id, start, end in modules:
        in_module = [r for r in user_msgs if start <= r.seq < end]
        n = len(in_module)
        if n == 0:
            out.append(EngagementRecord(student_id, module_id, 0, None, None, None))
            continue
        mean_len = sum(len(r.text) for r in in_module) / n
        out.append(EngagementRecord(
            student_id, module_id, n, mean_len,
            math.log(n), math.log(mean_len) if mean_len > 0 else None))
    return out


def aggregate_engagement(records: Iterable[EngagementRecord]) -> dict[str, float | None]:
    """Means of the log transforms over defined modules only."""
    nums = [r.log_msg_num for r in records if r.defined and r.log_msg_num is not None]
    lens = [r.log_msg_len for r in records if r.defined and r.log_msg_len is not None]
    return {
        "mean_log_msg_num": sum(nums) / len(nums) if nums else None,
        "mean_log_msg_len": sum(lens) / len(lens) if lens else None,
        "modules_counted": float(len(nums)),
    }


_MANAGEMENT_PATTERNS = (
    "go back", "previous slide", "next slide", "pause", "resume",
    "slow down", "speed up", "skip", "repeat that", "start over",
    "simpler terms", "louder", "stop",
)
_KNOWLEDGE_PATTERNS = (
    "what", "why", "how", "explain", "can you", "could you", "tell me",
    "i want to learn", "help me understand", "define", "meaning of", "?",
)


def keyword_classifier(text: str) -> str:
    """Deterministic stand-in for a provider-backed activity coder."""
    lowered = text.lower()
    if any(p in lowered for p in _MANAGEMENT_PATTERNS):
        return ACTIVITY_MANAGEMENT
    if any(p in lowered for p in _KNOWLEDGE_PATTERNS):
        return ACTIVITY_KNOWLEDGE
    return ACTIVITY_OTHER


@dataclass(frozen=True)
class ActivityReport:
    counts: dict[str, int]
    ratios: dict[str, float] | None

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def classify_activities(transcript: Transcript,
                        classifier: Callable[[str], str] | None = None,
                        classes: Sequence[str] = BASE_ACTIVITIES,
                        student_id: str = "user") -> ActivityReport:
    """Label every student utterance exactly once and report ratios.

    Labels outside ``classes`` fold into "other". Ratios are None
    (undefined) on an empty transcript rather than zeros.
    """
    classifier = classifier or keyword_classifier
    counts: dict[str, int] = {c: 0 for c in classes}
    for record in _user_utterances(transcript.records, student_id):
        label = classifier(record.text)
        if label not in counts:
            label = ACTIVITY_OTHER
            counts.setdefault(label, 0)
        counts[label] += 1
    total = sum(counts.values())
    if total == 0:
        return ActivityReport(counts, None)
    ratios = {label: count / total for label, count in counts.items()}
    return ActivityReport(counts, ratios)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson product-moment correlation coefficient."""
    if len(x) != len(y) or len(x) < 2:
        raise LengthMismatch(f"need equal-length vectors of size >= 2, got {len(x)}/{len(y)}")
    n = len(x)
    mean_x = sum(x) / n
    mean_y = sum(y) / n
    dx = [xi - mean_x for xi in x]
    dy = [yi - mean_y for yi in y]
    var_x = sum(d * d for d in dx)
    var_y = sum(d * d for d in dy)
    if var_x == 0.0 or var_y == 0.0:
        raise ZeroVariance("an argument has zero variance")
    return sum(a * b for a, b in zip(dx, dy)) / math.sqrt(var_x * var_y)


def manager_precision(golds: Sequence[GoldDecision],
                      group_by: Callable[[GoldDecision], str] | None = None
                      ) -> dict[str, GroupStats]:
    """Agreement between system and human (agent, action type) choices.

    Returns per-config stats keyed by the grouping label plus an
    "overall" entry; a match is equality of the full (agent, action
    type) pair.
    """
    if not golds:
        raise EmptyGoldSet("no gold decisions")
    group_by = group_by or (lambda g: g.config)
    per: dict[str, list[GoldDecision]] = {}
    for gold in golds:
        per.setdefault(group_by(gold), []).append(gold)
    out: dict[str, GroupStats] = {}
    total_matches = 0
    for label in sorted(per):
        matches = sum(1 for g in per[label] if g.human == g.system)
        total_matches += matches
        out[label] = GroupStats(matches, len(per[label]))
    out["overall"] = GroupStats(total_matches, len(golds))
    return out


GOLD_HEADER = ("scenario_id", "config", "snapshot_ref",
               "human_agent", "human_action", "system_agent", "system_action")


def load_gold_decisions(path: str | Path) -> list[GoldDecision]:
    """Read the documented tab-separated gold decision file."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise EmptyGoldSet(str(path))
    header = tuple(lines[0].rstrip("\n").split("\t"))
    if header != GOLD_HEADER:
        raise AulaError(f"bad gold file header: {header}")
    out: list[GoldDecision] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != len(GOLD_HEADER):
            raise AulaError(f"gold line {lineno}: expected {len(GOLD_HEADER)} fields")
        out.append(GoldDecision(
            fields[0], fields[2], (fields[3], fields[4]), (fields[5], fields[6]), fields[1]))
    if not out:
        raise EmptyGoldSet(str(path))
    return out


def dump_gold_decisions(golds: Sequence[GoldDecision]) -> str:
    lines = ["\t".join(GOLD_HEADER)]
    for g in golds:
        lines.append("\t".join((
            g.scenario_id, g.config, g.snapshot_ref,
            g.human[0], g.human[1], g.system[0], g.system[1])))
    return "\n".join(lines) + "\n"
