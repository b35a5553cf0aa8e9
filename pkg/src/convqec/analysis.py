"""Error-rate extraction, fits, failure-mode census and calibration."""

from __future__ import annotations

import csv
import itertools
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, stats

# published comparison values, kept as metadata only
REFERENCE = {
    "lambda": {"conv": 8.4, "mwpm": 5.0, "tesseract": 9.1},
    "gross_exponents": (10.8, 6.4),
    "suppression_m_saturation": 8.0,
}


# --- rate conversions ------------------------------------------------------------------


def block_error_rate(p_l, k: int = 1, rounds: int = 1):
    p_l = np.asarray(p_l, dtype=np.float64)
    # 1 - ((1 + (1-2p)^R)/2)^k, written with log1p/expm1 to keep small rates exact
    with np.errstate(divide="ignore"):
        out = -np.expm1(k * np.log1p(np.expm1(rounds * np.log1p(-2.0 * p_l)) / 2.0))
    return out if out.ndim else float(out)


def per_cycle_error_rate(p_block, k: int = 1, rounds: int = 1):
    """Invert block_error_rate: per-qubit, per-cycle logical error rate.

    Block rates beyond the invertible range (inner base < 0) return 0.5 with
    a warning.
    """
    if k < 1 or rounds < 1:
        raise ValueError("k and rounds must be >= 1")
    p_block = np.asarray(p_block, dtype=np.float64)
    if np.any((p_block < 0) | (p_block > 1)):
        raise ValueError("block error rate must lie in [0, 1]")
    with np.errstate(divide="ignore"):
        # base - 1 where base = 2(1-P_block)^(1/k) - 1
        t = 2.0 * np.expm1(np.log1p(-p_block) / k)
    if np.any(t < -1):
        warnings.warn("block error rate beyond invertible range; clamped to P_L = 0.5", RuntimeWarning, stacklevel=2)
    t = np.maximum(t, -1.0)
    with np.errstate(divide="ignore"):
        out = -np.expm1(np.log1p(t) / rounds) / 2.0
    out = np.where(t <= -1.0, 0.5, out)
    return out if out.ndim else float(out)


def credible_interval(failures: int, shots: int, level: float = 0.95, k: int = 1, rounds: int = 1, block: bool = False):
    """Jeffreys equal-tailed interval on the block rate, mapped to the per-cycle rate.

    block=True returns the interval on the block rate itself.
    """
    if not 0 <= failures <= shots:
        raise ValueError("need 0 <= failures <= shots")
    tail = (1 - level) / 2
    a, b = failures + 0.5, shots - failures + 0.5
    lo = 0.0 if failures == 0 else stats.beta.ppf(tail, a, b)
    hi = 1.0 if failures == shots else stats.beta.ppf(1 - tail, a, b)
    if block:
        return float(lo), float(hi)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return per_cycle_error_rate(lo, k, rounds), per_cycle_error_rate(hi, k, rounds)


@dataclass
class ErrorRatePoint:
    p: float
    P_block: float
    shots: int
    failures: int
    P_L: float
    ci_low: float
    ci_high: float
    d: int | None = None


def make_point(p: float, failures: int, shots: int, k: int = 1, rounds: int = 1, d: int | None = None) -> ErrorRatePoint:
    pb = failures / shots
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        pl = per_cycle_error_rate(pb, k, rounds)
    lo, hi = credible_interval(failures, shots, 0.95, k, rounds)
    return ErrorRatePoint(p, pb, shots, failures, pl, lo, hi, d)


# --- fits --------------------------------------------------------------------------------


@dataclass
class FitResult:
    kind: str
    params: dict
    residual_norm: float
    covariance: list = field(default_factory=list)
    converged: bool = True
    degenerate: bool = False

    def to_json(self) -> dict:
        return asdict(self)


def _log_weights(points) -> np.ndarray:
    w = []
    for pt in points:
        if pt.ci_low and pt.ci_high and pt.ci_high > pt.ci_low > 0:
            sigma = (np.log(pt.ci_high) - np.log(pt.ci_low)) / (2 * 1.959964)
            w.append(1.0 / sigma**2)
        else:
            w.append(1.0)
    return np.asarray(w)


def fit_lambda(points, weighted: bool = True, p_th_from: float | None = None) -> FitResult:
    """Weighted least squares of ln P_L against -floor((d+1)/2); slope is ln(Lambda)."""
    ds = [pt.d for pt in points]
    if any(d is None for d in ds) or len(set(ds)) < 2:
        raise ValueError("need points at >= 2 distinct distances")
    pl = np.array([pt.P_L for pt in points], dtype=np.float64)
    if np.any(pl <= 0):
        raise ValueError("P_L must be positive for a log fit")
    x = -np.floor((np.array(ds) + 1) / 2)
    y = np.log(pl)
    w = _log_weights(points) if weighted else np.ones(len(points))
    X = np.column_stack([x, np.ones_like(x)])
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    resid = (y - X @ coef) * sw
    dof = max(len(y) - 2, 1)
    cov = np.linalg.pinv((X * w[:, None]).T @ X) * (resid @ resid / dof if len(y) > 2 else 1.0)
    lam = float(np.exp(coef[0]))
    params = {"Lambda": lam, "ln_Lambda": float(coef[0]), "intercept": float(coef[1])}
    if p_th_from is not None:
        params["p_th"] = lam * p_th_from
    return FitResult("lambda", params, float(np.linalg.norm(resid)), cov.tolist())


def _powerlaw(p, pl):
    lx, ly = np.log(p), np.log(pl)
    m, c = np.polyfit(lx, ly, 1)
    return float(m), float(c)


def fit_suppression_exponent(points) -> FitResult:
    """Single power law P_L = C p^m in log-log space."""
    if len(points) < 2:
        raise ValueError("need >= 2 points")
    p = np.array([pt.p for pt in points])
    pl = np.array([pt.P_L for pt in points])
    if np.any(pl <= 0) or np.any(p <= 0):
        raise ValueError("p and P_L must be positive for a log fit")
    m, c = _powerlaw(p, pl)
    resid = np.log(pl) - (m * np.log(p) + c)
    return FitResult("single_powerlaw", {"m": m, "C": float(np.exp(c))}, float(np.linalg.norm(resid)))


def fit_two_powerlaw(points, max_nfev: int = 2000) -> FitResult:
    """P_L = A p^a + B p^b (a > b), least squares on log P_L with LM damping.

    Initialization: single power fits on the upper half (steep term) and the
    lower half (floor term) of the p range.
    """
    pts = sorted(points, key=lambda q: q.p)
    if len(pts) < 4:
        raise ValueError("need >= 4 points")
    p = np.array([q.p for q in pts])
    pl = np.array([q.P_L for q in pts])
    if np.any(pl <= 0):
        raise ValueError("P_L must be positive for a log fit")
    if p.max() / p.min() < 10:
        raise ValueError("points must span at least one decade in p")
    lp, lpl = np.log(p), np.log(pl)
    half = len(p) // 2
    a0, ca = _powerlaw(p[half:], pl[half:])
    b0, cb = _powerlaw(p[:half], pl[:half])
    if a0 <= b0:
        a0, b0 = max(a0, b0) + 1.0, min(a0, b0)

    def model(theta):
        la, a, lb, b = theta
        return np.logaddexp(la + a * lp, lb + b * lp)

    def resid(theta):
        return model(theta) - lpl

    best = None
    # the log-prefactors of the halves are biased by the other term; try a few shifts
    for shift in (0.0, -1.0, -2.0, 1.0):
        x0 = np.array([ca + shift, a0, cb + shift, b0])
        try:
            r = optimize.least_squares(resid, x0, method="lm", max_nfev=max_nfev, x_scale="jac")
        except (ValueError, np.linalg.LinAlgError):
            continue
        if best is None or r.cost < best.cost:
            best = r
    if best is None:
        raise RuntimeError("two-power-law fit failed")
    la, a, lb, b = best.x
    if a < b:
        la, a, lb, b = lb, b, la, a
    # degenerate when one term never contributes 1% of the total over the data range
    frac_a = np.exp(la + a * lp - model([la, a, lb, b]))
    # or the two exponents coincide, in which case the split between terms is arbitrary
    degenerate = bool(frac_a.max() < 0.01 or frac_a.min() > 0.99 or abs(a - b) < 1e-3 * max(abs(a), 1.0))
    try:
        jac = best.jac
        cov = np.linalg.pinv(jac.T @ jac) * (2 * best.cost / max(len(p) - 4, 1))
    except np.linalg.LinAlgError:
        cov = np.full((4, 4), np.nan)
    params = {"A": float(np.exp(la)), "a": float(a), "B": float(np.exp(lb)), "b": float(b)}
    return FitResult("two_powerlaw", params, float(np.linalg.norm(best.fun)), cov.tolist(), bool(best.success), degenerate)


# --- failure-mode census -----------------------------------------------------------------


@dataclass
class FailureModeCensus:
    N: dict
    wmax: int
    decoder: str
    complete: bool = True
    modes: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"N": {str(k): v for k, v in self.N.items()}, "wmax": self.wmax, "decoder": self.decoder, "complete": self.complete}


def data_level_locations(code, basis: str = "Z"):
    """Single-qubit fault locations for one error type: (syndrome columns, observable columns)."""
    from convqec.decoders import basis_parts

    h, lo, _ = basis_parts(code, basis)
    return h.T.astype(np.uint8), lo.T.astype(np.uint8)


def enumerate_minimal_failure_modes(loc_synd, loc_obs, decode, wmax: int, decoder: str = "", max_subsets: int = 5_000_000) -> FailureModeCensus:
    """Count subsets S (|S| <= wmax) that fail while no proper subset fails.

    decode maps (batch, checks) syndromes to (batch, observables) predictions.
    If the subset budget would be exceeded the census stops at the last
    complete weight.
    """
    loc_synd = np.asarray(loc_synd, dtype=np.uint8)
    loc_obs = np.asarray(loc_obs, dtype=np.uint8)
    n = loc_synd.shape[0]
    failing: set = set()
    N = {}
    modes = []
    used = 0
    complete = True
    done_w = 0
    for w in range(1, wmax + 1):
        count = int(np.prod([n - i for i in range(w)]) // np.prod(range(1, w + 1)))
        if used + count > max_subsets:
            complete = False
            break
        used += count
        subsets = np.array(list(itertools.combinations(range(n), w)), dtype=np.int64)
        synd = np.bitwise_xor.reduce(loc_synd[subsets], axis=1)
        truth = np.bitwise_xor.reduce(loc_obs[subsets], axis=1)
        pred = np.asarray(decode(synd), dtype=np.uint8)
        fails = (pred != truth).any(axis=1)
        N[w] = 0
        for sub in subsets[fails]:
            key = tuple(int(v) for v in sub)
            failing.add(key)
            # minimal iff no proper subset failed (only smaller failing sets can be inside)
            minimal = not any(
                tuple(c) in failing for r in range(1, w) for c in itertools.combinations(key, r)
            )
            if minimal:
                N[w] += 1
                modes.append(key)
        done_w = w
    census = FailureModeCensus(N, done_w, decoder, complete, modes)
    _assert_minimality(census, failing)
    return census


def _assert_minimality(census, failing):
    for mode in census.modes:
        for sub in itertools.combinations(mode, len(mode) - 1):
            if sub and sub in failing:
                raise AssertionError(f"census mode {mode} has a failing subset {sub}")


def failure_census(code, decoder: str = "ml", p: float = 0.005, wmax: int = 3, basis: str = "Z", **kw) -> FailureModeCensus:
    """Census over single data-qubit faults of the type detected in `basis`.

    Decoders are built for a single round with a bit-flip prior p.
    """
    from convqec.decoders import BPDecoder, ExactML, LookupDecoder

    if decoder == "ml":
        dec = ExactML(code, p, basis, channel="bitflip")
    elif decoder == "lookup":
        dec = LookupDecoder(code, basis)
    elif decoder == "bp":
        dec = BPDecoder(code, p, basis)
    elif decoder == "identity":
        dec = None
    else:
        raise ValueError(f"unknown decoder {decoder!r}")
    loc_s, loc_o = data_level_locations(code, basis)
    if dec is None:
        fn = lambda s: np.zeros((len(s), loc_o.shape[1]), np.uint8)  # noqa: E731
    else:
        fn = lambda s: dec.decode_many(s)[0]  # noqa: E731
    return enumerate_minimal_failure_modes(loc_s, loc_o, fn, wmax, decoder, **kw)


def predicted_pl(census: FailureModeCensus, p: float) -> float:
    return float(sum(n * p**w for w, n in census.N.items()))


# --- calibration and post-selection ------------------------------------------------------


@dataclass
class CalibrationReport:
    bins: list  # (mean predicted, empirical frequency, count)
    ece: float

    def to_json(self) -> dict:
        return asdict(self)


def reliability(preds, labels, bins: int = 15) -> CalibrationReport:
    preds = np.asarray(preds, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if preds.size == 0:
        raise ValueError("empty input")
    if np.any((preds < 0) | (preds > 1)):
        raise ValueError("predictions must lie in [0, 1]")
    idx = np.minimum((preds * bins).astype(np.int64), bins - 1)
    count = np.bincount(idx, minlength=bins)
    sp = np.bincount(idx, preds, minlength=bins)
    sl = np.bincount(idx, labels, minlength=bins)
    out = []
    ece = 0.0
    for i in range(bins):
        if count[i] == 0:
            out.append((float("nan"), float("nan"), 0))
            continue
        mp, fr = sp[i] / count[i], sl[i] / count[i]
        out.append((float(mp), float(fr), int(count[i])))
        ece += count[i] / preds.size * abs(mp - fr)
    return CalibrationReport(out, float(ece))


def confidence(preds) -> np.ndarray:
    """Per-shot confidence max(q, 1-q); minimum across observables."""
    preds = np.asarray(preds, dtype=np.float64)
    c = np.maximum(preds, 1 - preds)
    return c.min(axis=1) if c.ndim == 2 else c


def post_select(preds, labels, thresholds):
    """(threshold, acceptance fraction, block error rate among accepted) per threshold."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels)
    conf = confidence(preds)
    wrong = (preds > 0.5) != labels.astype(bool)
    wrong = wrong.any(axis=1) if wrong.ndim == 2 else wrong
    rows = []
    for tau in thresholds:
        acc = conf >= tau
        n_acc = int(acc.sum())
        err = float(wrong[acc].mean()) if n_acc else float("nan")
        rows.append((float(tau), n_acc / len(conf), err))
    return rows


def discard_rate_per_cycle(acceptance: float, rounds: int) -> float:
    return 1.0 - acceptance ** (1.0 / rounds)


# --- I/O -------------------------------------------------------------------------------------

CURVE_COLUMNS = ["p", "P_block", "P_L", "ci_low", "ci_high", "shots", "failures", "d"]


def write_curve_csv(path, points) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for pt in points:
            w.writerow([repr(pt.p), repr(pt.P_block), repr(pt.P_L), repr(pt.ci_low), repr(pt.ci_high), pt.shots, pt.failures, "" if pt.d is None else pt.d])


def read_curve_csv(path) -> list[ErrorRatePoint]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            d = row.get("d") or None
            out.append(
                ErrorRatePoint(
                    float(row["p"]),
                    float(row["P_block"]),
                    int(row["shots"]),
                    int(row["failures"]),
                    float(row["P_L"]),
                    float(row["ci_low"]),
                    float(row["ci_high"]),
                    int(d) if d else None,
                )
            )
    return out


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
