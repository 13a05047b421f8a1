"""Evaluation report: a structured, diffable text format that round-trips."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import DataFormatError
from .evaluation import FactVerdict, METEOR_NOTE


@dataclass
class MetricReport:
    bleu1: float = 0.0
    bleu2: float = 0.0
    bleu3: float = 0.0
    bleu4: float = 0.0
    rouge_l: float = 0.0
    meteor: float = 0.0
    cider: float = 0.0
    fact_accuracy: float | None = None
    facts_generated: int = 0
    facts_correct: int = 0
    surface_fact_accuracy: float | None = None
    surface_facts_generated: int = 0
    surface_facts_correct: int = 0
    config_hash: str = ""
    seed: int = 0
    verdicts: list[FactVerdict] = field(default_factory=list)
    significance: list[tuple[str, float, float]] = field(default_factory=list)

    def __post_init__(self):
        for name in ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "meteor", "cider"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for value in (self.fact_accuracy, self.surface_fact_accuracy):
            if value is not None and not 0.0 <= value <= 100.0:
                raise ValueError(f"fact accuracy {value} outside [0, 100]")
        if self.facts_correct > self.facts_generated:
            raise ValueError("correct facts cannot exceed generated facts")
        if self.surface_facts_correct > self.surface_facts_generated:
            raise ValueError("correct facts cannot exceed generated facts")


_METRIC_FIELDS = (
    "bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "meteor", "cider",
    "fact_accuracy", "facts_generated", "facts_correct",
    "surface_fact_accuracy", "surface_facts_generated", "surface_facts_correct",
)


def format_report(report: MetricReport) -> str:
    lines = [
        "# geocap evaluation report v1",
        f"config_hash: {report.config_hash}",
        f"seed: {report.seed}",
        f"note: {METEOR_NOTE}",
        "[metrics]",
    ]
    for name in _METRIC_FIELDS:
        value = getattr(report, name)
        if value is None:
            lines.append(f"{name}: n/a")
        elif isinstance(value, int):
            lines.append(f"{name}: {value}")
        else:
            lines.append(f"{name}: {value!r}")
    lines.append("[facts]")
    for v in report.verdicts:
        flags = []
        if v.lexicon_waived:
            flags.append("lexicon_waived")
        if v.surface:
            flags.append("surface")
        lines.append(
            "\t".join(
                [
                    v.image_id,
                    str(v.position),
                    v.subject_name,
                    v.predicate,
                    v.object_label,
                    "correct" if v.correct else "incorrect",
                    ",".join(flags) or "-",
                ]
            )
        )
    if report.significance:
        lines.append("[significance]")
        for metric, t_stat, p_value in report.significance:
            lines.append(f"{metric}\t{t_stat!r}\t{p_value!r}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> MetricReport:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# geocap evaluation report"):
        raise DataFormatError("not a geocap evaluation report")
    report = MetricReport()
    section = None
    for line in lines[1:]:
        if not line.strip():
            continue
        if line in ("[metrics]", "[facts]", "[significance]"):
            section = line
            continue
        if section is None:
            key, _, value = line.partition(": ")
            if key == "config_hash":
                report.config_hash = value
            elif key == "seed":
                report.seed = int(value)
            continue
        if section == "[metrics]":
            key, _, value = line.partition(": ")
            if key not in _METRIC_FIELDS:
                raise DataFormatError(f"unknown metric field {key!r}")
            if value == "n/a":
                setattr(report, key, None)
            elif key.endswith(("generated", "correct")):
                setattr(report, key, int(value))
            else:
                setattr(report, key, float(value))
        elif section == "[facts]":
            parts = line.split("\t")
            if len(parts) != 7:
                raise DataFormatError(f"bad verdict line: {line!r}")
            flags = parts[6].split(",") if parts[6] != "-" else []
            report.verdicts.append(
                FactVerdict(
                    image_id=parts[0],
                    position=int(parts[1]),
                    subject_name=parts[2],
                    predicate=parts[3],
                    object_label=parts[4],
                    correct=parts[5] == "correct",
                    lexicon_waived="lexicon_waived" in flags,
                    surface="surface" in flags,
                )
            )
        elif section == "[significance]":
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(f"bad significance line: {line!r}")
            report.significance.append((parts[0], float(parts[1]), float(parts[2])))
    return report
