"""Case-level drivers: single solves, the two-stage pipeline, N-1 screening.

The production path is two-stage: solve the deterministic problem first,
then solve the expansion problem with its zero-order coefficients warm
started from the deterministic optimum.  Screening runs one reduced problem
per candidate outage and keeps the ones the solver can secure; the final
run enforces exactly the secure set.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import Contingency, Network, default_contingencies
from .nlp import NlpSolution, SolverOptions, solve
from .pce import (
    GAUSSIAN,
    BasisSpec,
    PolynomialBasis,
    build_basis,
    build_mul_tensor,
)
from .scopf import ModelConfig, NlpProblem, assemble, warm_from_order0


def degree0_basis() -> PolynomialBasis:
    """Single-coefficient expansion: every quantity is certain."""
    return build_basis(BasisSpec.homogeneous(GAUSSIAN, 1, 0))


def expansion_basis(net: Network, degree: int) -> PolynomialBasis:
    """Basis matching the network's germ layout at the requested degree."""
    if degree < 1:
        return degree0_basis()
    dim = max(net.germ_count, 1)
    family = net.loads[0].family if net.loads else GAUSSIAN
    return build_basis(BasisSpec.homogeneous(family, dim, degree))


def build_problem(net: Network, contingencies, config: ModelConfig | None = None,
                  basis: PolynomialBasis | None = None) -> NlpProblem:
    basis = basis if basis is not None else degree0_basis()
    tensor = build_mul_tensor(basis)
    return assemble(net, basis, tensor, contingencies, config)


@dataclass(frozen=True)
class SolveRun:
    """One assembled problem together with its solver outcome."""

    problem: NlpProblem
    solution: NlpSolution
    wall_seconds: float

    @property
    def objective(self) -> float:
        return self.solution.objective

    @property
    def status(self) -> str:
        return self.solution.status

    def max_slack(self) -> float:
        """Largest security-slack value in the solution (0 if none exist)."""
        worst = 0.0
        for name, idx in self.problem.layout.items():
            if name.startswith("slack_"):
                vals = self.solution.x[idx.ravel()]
                if vals.size:
                    worst = max(worst, float(np.max(vals)))
        return worst


def solve_scopf(net: Network, contingencies, *, basis: PolynomialBasis | None = None,
                config: ModelConfig | None = None,
                options: SolverOptions | None = None,
                warm_from: SolveRun | None = None) -> SolveRun:
    """Assemble and solve one problem, optionally warm started from a
    converged lower-degree run (zero-order coefficients copied over)."""
    t0 = time.perf_counter()
    problem = build_problem(net, contingencies, config, basis)
    if warm_from is not None:
        problem = replace(
            problem,
            x0=warm_from_order0(problem, warm_from.problem, warm_from.solution.x),
        )
    solution = solve(problem, options)
    return SolveRun(problem, solution, time.perf_counter() - t0)


@dataclass(frozen=True)
class TwoStageRun:
    """Deterministic stage plus (for degree >= 1) the expansion stage."""

    det: SolveRun
    gpce: SolveRun | None

    @property
    def final(self) -> SolveRun:
        return self.gpce if self.gpce is not None else self.det


def solve_two_stage(net: Network, degree: int, contingencies, *,
                    config: ModelConfig | None = None,
                    options: SolverOptions | None = None) -> TwoStageRun:
    det = solve_scopf(net, contingencies, config=config, options=options)
    if degree < 1:
        return TwoStageRun(det, None)
    basis = expansion_basis(net, degree)
    gp = solve_scopf(net, contingencies, basis=basis, config=config,
                     options=options, warm_from=det)
    return TwoStageRun(det, gp)


# ---------------------------------------------------------------------------
# contingency screening

@dataclass(frozen=True)
class CandidateVerdict:
    contingency: Contingency
    secure: bool
    status: str
    max_slack: float
    objective: float
    wall_seconds: float


@dataclass(frozen=True)
class ScreeningReport:
    secure: tuple[Contingency, ...]
    unsecure: tuple[Contingency, ...]
    verdicts: tuple[CandidateVerdict, ...]
    base: TwoStageRun = field(repr=False)

    @property
    def unsecure_labels(self) -> tuple[str, ...]:
        return tuple(c.label for c in self.unsecure)


def screen_contingencies(net: Network, candidates=None, *, degree: int = 0,
                         config: ModelConfig | None = None,
                         options: SolverOptions | None = None,
                         slack_tol: float = 1e-5) -> ScreeningReport:
    """Classify each candidate outage by solving the base case plus that one
    contingency; a candidate is unsecure when the solver reports infeasible,
    fails outright, or can only close the layer by spending slack."""
    if candidates is None:
        candidates = default_contingencies(net)
    candidates = tuple(candidates)

    # base-only solves double as warm sources for every candidate problem
    base = solve_two_stage(net, degree, (), config=config, options=options)

    secure: list[Contingency] = []
    unsecure: list[Contingency] = []
    verdicts: list[CandidateVerdict] = []
    for cand in candidates:
        t0 = time.perf_counter()
        det = solve_scopf(net, (cand,), config=config, options=options,
                          warm_from=base.det)
        run = det
        if degree >= 1:
            run = solve_scopf(net, (cand,), basis=expansion_basis(net, degree),
                              config=config, options=options, warm_from=det)
        worst = run.max_slack()
        ok = run.status == "optimal" and worst <= slack_tol
        verdict = CandidateVerdict(
            contingency=cand, secure=ok, status=run.status, max_slack=worst,
            objective=run.objective, wall_seconds=time.perf_counter() - t0,
        )
        verdicts.append(verdict)
        (secure if ok else unsecure).append(cand)
    return ScreeningReport(tuple(secure), tuple(unsecure), tuple(verdicts), base)


@dataclass(frozen=True)
class CaseResult:
    """Everything a reporting front end needs for one Table-style row."""

    screening: ScreeningReport
    final: TwoStageRun

    @property
    def objective(self) -> float:
        return self.final.final.objective

    @property
    def unsecure_labels(self) -> tuple[str, ...]:
        return self.screening.unsecure_labels


def run_case(net: Network, degree: int, candidates=None, *,
             config: ModelConfig | None = None,
             options: SolverOptions | None = None,
             screen: bool = True,
             slack_tol: float = 1e-5) -> CaseResult:
    """Screen the candidate set, then solve the full problem over the secure
    contingencies.  With screen=False all candidates are enforced directly."""
    if candidates is None:
        candidates = default_contingencies(net)
    candidates = tuple(candidates)
    if screen:
        report = screen_contingencies(net, candidates, degree=degree,
                                      config=config, options=options,
                                      slack_tol=slack_tol)
        enforced = report.secure
    else:
        base = solve_two_stage(net, degree, (), config=config, options=options)
        report = ScreeningReport(candidates, (), (), base)
        enforced = candidates
    final = solve_two_stage(net, degree, enforced, config=config, options=options)
    return CaseResult(report, final)
