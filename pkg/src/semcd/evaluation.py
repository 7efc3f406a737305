"""Scoring of predictions against ground truth, per pair and aggregated."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .raster import BINARY_CHANGE, ConfusionMatrix, MetricReport, format_percent
from .validation import ImagePair

# column order of the results table: CD kappa, dice, total accuracy; LCM kappa, total accuracy
REPORT_COLUMNS = (
    "cd_kappa",
    "cd_dice",
    "cd_total_accuracy",
    "lcm_kappa",
    "lcm_total_accuracy",
)
REPORT_HEADERS = ("CD Kappa", "CD Dice", "CD Tot. acc.", "LCM Kappa", "LCM Tot. acc.")


@dataclass
class PairScores:
    pair_id: str
    cd: Optional[ConfusionMatrix] = None
    lcm: Optional[ConfusionMatrix] = None


def score_pair(truth: ImagePair, change=None, lcm1=None, lcm2=None) -> PairScores:
    """Confusion matrices of a prediction for one pair.

    Change pixels are scored only where both true land cover codes are
    scored (everywhere when the pair has no land cover maps).
    """
    res = PairScores(truth.pair_id)
    if change is not None:
        if truth.change is None:
            raise ValueError(f"pair {truth.pair_id!r} has no ground-truth change map")
        res.cd = ConfusionMatrix(BINARY_CHANGE).accumulate(
            truth.change, np.asarray(change).astype(np.uint8), truth.scored_mask()
        )
    if lcm1 is not None or lcm2 is not None:
        cm = ConfusionMatrix(truth.nomenclature)
        for t, p, role in ((truth.lcm1, lcm1, "lcm1"), (truth.lcm2, lcm2, "lcm2")):
            if p is None:
                continue
            if t is None:
                raise ValueError(f"pair {truth.pair_id!r} has no ground-truth {role}")
            cm.accumulate(t, p)
        res.lcm = cm
    return res


def _safe_metrics(cm: Optional[ConfusionMatrix]) -> Optional[MetricReport]:
    if cm is None or cm.total == 0:
        return None
    return cm.metrics()


def row_values(cd: Optional[ConfusionMatrix], lcm: Optional[ConfusionMatrix]) -> Dict[str, Optional[float]]:
    m_cd, m_lcm = _safe_metrics(cd), _safe_metrics(lcm)
    return {
        "cd_kappa": m_cd.kappa if m_cd else None,
        "cd_dice": m_cd.dice if m_cd else None,
        "cd_total_accuracy": m_cd.total_accuracy if m_cd else None,
        "lcm_kappa": m_lcm.kappa if m_lcm else None,
        "lcm_total_accuracy": m_lcm.total_accuracy if m_lcm else None,
    }


@dataclass
class EvaluationReport:
    rows: List[PairScores] = field(default_factory=list)

    def add(self, scores: PairScores) -> None:
        self.rows.append(scores)

    def aggregate(self) -> PairScores:
        """Pixel-pooled scores over every pair (matrices are summed)."""
        agg = PairScores("ALL")
        for r in self.rows:
            if r.cd is not None:
                agg.cd = r.cd if agg.cd is None else agg.cd.merge(r.cd)
            if r.lcm is not None:
                agg.lcm = r.lcm if agg.lcm is None else agg.lcm.merge(r.lcm)
        return agg

    def values(self) -> List[Dict[str, object]]:
        out = []
        for r in self.rows + [self.aggregate()]:
            out.append({"pair_id": r.pair_id, **row_values(r.cd, r.lcm)})
        return out

    def to_tsv(self) -> str:
        """Machine-readable rows: proportions, ``-`` for undefined values."""
        lines = ["pair_id\t" + "\t".join(REPORT_COLUMNS)]
        for v in self.values():
            cells = ["-" if v[c] is None else f"{v[c]:.6f}" for c in REPORT_COLUMNS]
            lines.append(f"{v['pair_id']}\t" + "\t".join(cells))
        return "\n".join(lines) + "\n"

    def render(self) -> str:
        """Fixed-width table in percent."""
        width = max([len(str(v["pair_id"])) for v in self.values()] + [7])
        head = " " * width + " | " + " | ".join(f"{h:>13}" for h in REPORT_HEADERS)
        lines = [head, "-" * len(head)]
        for v in self.values():
            cells = " | ".join(f"{format_percent(v[c]):>13}" for c in REPORT_COLUMNS)
            lines.append(f"{str(v['pair_id']):<{width}} | {cells}")
        return "\n".join(lines)


def evaluate(predictions: Sequence, truths: Sequence[ImagePair]) -> EvaluationReport:
    """Score a list of :class:`~semcd.inference.Prediction` against their pairs."""
    report = EvaluationReport()
    for pred, truth in zip(predictions, truths):
        report.add(score_pair(truth, pred.change, pred.lcm1, pred.lcm2))
    return report
