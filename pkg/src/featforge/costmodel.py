"""LM-primitive cost accounting: predictive asymptotic estimates for one
evaluation and a whole run, plus reconciliation against the measured token
ledger. The cost unit is abstract (model-size weight times token length);
non-LM executor time is deliberately excluded.
"""

from __future__ import annotations

from dataclasses import dataclass

from .gateway import UsageTotals

ROLE_TO_TERM = {
    "proposer": "propose",
    "extractor": "extract",
    "scorer": "score",
    "feedback": "score",
    "reflector": "propose",
}


@dataclass(frozen=True)
class CostParams:
    """Inputs to the primitive cost model.

    Model-size weights are relative units (e.g. billions of parameters);
    token lengths may be tokenizer counts or whitespace proxies, as long as
    they are consistent with each other.
    """

    m_fp: float  # proposer model size
    m_e: float  # extractor model size
    m_s: float  # scorer model size
    l_phi: float  # prompt (instruction + examples) token length
    l_t: float  # mean text token length
    l_f: float  # serialized feature-schema token length
    n_a: int  # annotation split size
    n_d: int  # number of example sets
    n_iter: int  # search trials

    def __post_init__(self) -> None:
        for name in ("m_fp", "m_e", "m_s", "l_phi", "l_t", "l_f", "n_a", "n_d", "n_iter"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class CostBreakdown:
    propose_term: float
    extract_term: float
    score_term: float
    eval_total: float
    run_total: float
    dominant: str  # "propose" | "extract" | "score"

    def to_doc(self) -> dict:
        return {
            "propose_term": self.propose_term,
            "extract_term": self.extract_term,
            "score_term": self.score_term,
            "eval_total": self.eval_total,
            "run_total": self.run_total,
            "dominant": self.dominant,
        }


def estimate_cost(p: CostParams) -> CostBreakdown:
    """Cost of one candidate evaluation and of the whole run.

    One evaluation costs m_fp*l_phi (a single proposal) plus
    n_a*m_e*(l_t + l_f) (one extractor call per annotated text) plus
    m_s*l_f (constant-count scoring calls); the run multiplies this by
    (n_d + n_iter) evaluated candidates.
    """
    propose = p.m_fp * p.l_phi
    extract = p.n_a * p.m_e * (p.l_t + p.l_f)
    score = p.m_s * p.l_f
    eval_total = propose + extract + score
    terms = {"propose": propose, "extract": extract, "score": score}
    dominant = max(terms, key=lambda k: (terms[k], k))
    return CostBreakdown(
        propose_term=propose,
        extract_term=extract,
        score_term=score,
        eval_total=eval_total,
        run_total=(p.n_d + p.n_iter) * eval_total,
        dominant=dominant,
    )


@dataclass(frozen=True)
class CostReconciliation:
    has_data: bool
    predicted_dominant: str = ""
    measured_dominant: str = ""
    extractor_token_share: float = 0.0
    tokens_by_term: dict | None = None
    agreement: bool = False

    def to_doc(self) -> dict:
        if not self.has_data:
            return {"has_data": False, "note": "no data"}
        return {
            "has_data": True,
            "predicted_dominant": self.predicted_dominant,
            "measured_dominant": self.measured_dominant,
            "extractor_token_share": self.extractor_token_share,
            "tokens_by_term": self.tokens_by_term,
            "agreement": self.agreement,
        }


def reconcile(ledger_by_role: dict[str, UsageTotals], breakdown: CostBreakdown) -> CostReconciliation:
    """Compare the predicted dominant term with the measured token ledger.

    Roles map onto model terms (proposer and reflector to propose, scorer
    and feedback to score); disagreement between the predicted and measured
    dominant role is flagged rather than hidden.
    """
    tokens_by_term = {"propose": 0, "extract": 0, "score": 0}
    total = 0
    for role, totals in ledger_by_role.items():
        term = ROLE_TO_TERM.get(role)
        if term is None:
            continue
        tokens_by_term[term] += totals.total_tokens
        total += totals.total_tokens
    if total == 0:
        return CostReconciliation(has_data=False)
    measured_dominant = max(tokens_by_term, key=lambda k: (tokens_by_term[k], k))
    return CostReconciliation(
        has_data=True,
        predicted_dominant=breakdown.dominant,
        measured_dominant=measured_dominant,
        extractor_token_share=tokens_by_term["extract"] / total,
        tokens_by_term=dict(tokens_by_term),
        agreement=measured_dominant == breakdown.dominant,
    )
