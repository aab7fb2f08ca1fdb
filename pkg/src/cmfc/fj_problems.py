"""Polynomial problem files for the toy Fritz-John suite.

File grammar (INI-like, ``#`` starts a comment)::

    [problem]
    name = disk
    dim = 2
    split = 0              # optional, X1 = first `split` coordinates

    [objective]
    f = 1:1,0; 1:0,1       # sum of coef:exponents terms

    [ineq.1]               # g(x) <=_K 0, one line per component
    cone = orthant         # orthant | zero | free
    c0 = 1:2,0; 1:0,2; -1:0,0

    [eq.1]                 # h(x) = 0
    c0 = 1:1,0; 1:0,1; -1:0,0

    [box]
    lower = -1, -1         # inf / -inf allowed
    upper = 1, 1

    [solution]             # optional reference point for the suite
    x = -0.7071067811865476, -0.7071067811865476

A term ``c:e0,e1,...`` is the monomial ``c * x0^e0 * x1^e1 ...``.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .cones import BoxSet, ConeSpec
from .fj_solver import EqualityBlock, InequalityBlock, NlpProblem
from .textconfig import ConfigError, read_sections


class ProblemFileError(ConfigError):
    pass


@dataclass(frozen=True)
class Polynomial:
    coefs: np.ndarray  # (terms,)
    exps: np.ndarray  # (terms, dim) nonnegative ints

    @classmethod
    def parse(cls, text: str, dim: int) -> Polynomial:
        coefs, exps = [], []
        for term in text.split(";"):
            term = term.strip()
            if not term:
                continue
            c, _, e = term.partition(":")
            e_list = [int(v) for v in e.split(",")] if e.strip() else [0] * dim
            if len(e_list) != dim or min(e_list) < 0:
                raise ValueError(f"term {term!r} needs {dim} nonnegative exponents")
            coefs.append(float(c))
            exps.append(e_list)
        if not coefs:
            coefs, exps = [0.0], [[0] * dim]
        return cls(np.array(coefs), np.array(exps, dtype=int))

    def __call__(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(np.sum(self.coefs * np.prod(x ** self.exps, axis=1)))

    def grad(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[0])
        for k in range(x.shape[0]):
            e = self.exps.copy()
            mult = e[:, k].astype(float)
            e[:, k] = np.maximum(e[:, k] - 1, 0)
            out[k] = np.sum(self.coefs * mult * np.prod(x ** e, axis=1))
        return out


def _vector_map(polys: list[Polynomial]):
    def fn(x):
        return np.array([p(x) for p in polys]), np.vstack([p.grad(x) for p in polys])

    return fn


def _read_sections(text: str):
    return read_sections(text, ProblemFileError)


def _floats(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",")])


def parse_problem(text: str) -> tuple[NlpProblem, np.ndarray | None]:
    """Parse a problem file; returns the problem and the optional reference solution."""
    sections = _read_sections(text)
    header = next((s for s in sections if s[0] == "problem"), None)
    if header is None or "dim" not in header[2]:
        raise ProblemFileError("missing [problem] section with dim")
    dim = int(header[2]["dim"][0])
    name = header[2].get("name", ("", 0))[0]
    split = int(header[2].get("split", ("0", 0))[0])
    objective = None
    ineqs, eqs = [], []
    box = BoxSet.whole_space(dim)
    solution = None
    for sec, lineno, entries in sections:
        try:
            if sec == "problem":
                unknown = set(entries) - {"name", "dim", "split"}
                if unknown:
                    k = sorted(unknown)[0]
                    raise ProblemFileError("unknown key", entries[k][1], k)
            elif sec == "objective":
                poly = Polynomial.parse(entries["f"][0], dim)
                objective = (lambda p: lambda x: (p(x), p.grad(x)))(poly)
            elif sec.startswith("ineq."):
                comps = _components(entries, dim)
                cone_kind = entries.get("cone", ("orthant", lineno))[0]
                if cone_kind not in ("orthant", "zero", "free"):
                    raise ProblemFileError(f"unsupported cone {cone_kind!r}", entries["cone"][1], "cone")
                cone = ConeSpec(cone_kind, len(comps))
                ineqs.append(InequalityBlock(_vector_map(comps), cone, sec))
            elif sec.startswith("eq."):
                eqs.append(EqualityBlock(_vector_map(_components(entries, dim)), sec))
            elif sec == "box":
                lo = _floats(entries["lower"][0]) if "lower" in entries else np.full(dim, -np.inf)
                hi = _floats(entries["upper"][0]) if "upper" in entries else np.full(dim, np.inf)
                box = BoxSet(lo, hi)
            elif sec == "solution":
                solution = _floats(entries["x"][0])
            else:
                raise ProblemFileError(f"unknown section [{sec}]", lineno)
        except ProblemFileError:
            raise
        except KeyError as exc:
            raise ProblemFileError("missing key", lineno, str(exc.args[0])) from None
        except ValueError as exc:
            raise ProblemFileError(str(exc), lineno) from None
    if objective is None:
        raise ProblemFileError("missing [objective] section")
    return NlpProblem(dim, objective, ineqs, eqs, box, split, name), solution


def _components(entries: dict[str, tuple[str, int]], dim: int) -> list[Polynomial]:
    keys = sorted((k for k in entries if k.startswith("c") and k[1:].isdigit()), key=lambda k: int(k[1:]))
    if not keys:
        raise KeyError("c0")
    return [Polynomial.parse(entries[k][0], dim) for k in keys]


def load_problem(path) -> tuple[NlpProblem, np.ndarray | None]:
    return parse_problem(Path(path).read_text(encoding="utf-8"))


def toy_suite() -> dict[str, tuple[NlpProblem, np.ndarray | None]]:
    """The shipped toy problems, keyed by file stem."""
    root = resources.files("cmfc") / "data" / "toy"
    out = {}
    for entry in sorted(root.iterdir(), key=lambda p: p.name):
        if entry.name.endswith(".fj"):
            out[entry.name[:-3]] = parse_problem(entry.read_text(encoding="utf-8"))
    return out


# constraint-qualification verdicts at the reference point, worked out by hand:
# (LICQ, MFCQ, certificate is abnormal)
HAND_VERDICTS: dict[str, tuple[bool, bool, bool]] = {
    "p1_linear_lower": (True, True, False),
    "p2_sum_equality": (True, True, False),
    "p3_abnormal_square": (False, False, True),  # grad g(0) = 0 and 1 > 0: only r0 = 0 works
    "p4_interior_quadratic": (True, True, False),
    "p5_duplicate_bound": (False, True, False),  # two identical active rows
    "p6_box_and_bound": (True, True, False),
    "p7_disk": (True, True, False),
    "p8_parallel_equalities": (False, False, False),  # rank one equality Jacobian
}


@dataclass
class SuiteEntry:
    name: str
    r0: float
    stationarity: float
    slackness: float
    normalization_error: float
    licq: bool
    mfcq: bool
    verdicts_match: bool

    def passes(self, stat_tol: float = 1e-6, slack_tol: float = 1e-8, norm_tol: float = 1e-10) -> bool:
        return (
            self.stationarity < stat_tol
            and self.slackness < slack_tol
            and self.normalization_error < norm_tol
            and self.verdicts_match
        )


def run_toy_suite() -> list[SuiteEntry]:
    """Recover certificates and CQ verdicts at every shipped reference point."""
    from .fj_solver import check_licq, check_mfcq, evaluate_fj_residual, recover_multipliers

    out = []
    for name, (problem, x) in toy_suite().items():
        cert = recover_multipliers(problem, x)
        rep = evaluate_fj_residual(problem, x, cert)
        licq = bool(check_licq(problem, x).licq)
        mfcq = bool(check_mfcq(problem, x).mfcq)
        hand = HAND_VERDICTS.get(name)
        match = hand is not None and hand == (licq, mfcq, cert.r0 == 0.0)
        out.append(
            SuiteEntry(name, cert.r0, rep.stationarity_residual, max(rep.slackness_residuals, default=0.0),
                       rep.normalization_error, licq, mfcq, match)
        )
    return out
