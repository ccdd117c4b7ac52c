"""Ranked-suggestion metrics and one-way ANOVA."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .models import rank_batch
from .vocab import UNK_ID

TOP_K = 10


class PredictionRecord(NamedTuple):
    target: int
    ranked: tuple[int, ...]


def _check(records):
    if not len(records):
        raise ValueError("no prediction records")


def rank_of(record: PredictionRecord) -> int:
    """1-based position of the target in the ranked list, 0 when absent."""
    try:
        return record.ranked.index(record.target) + 1
    except ValueError:
        return 0


def _ranks(records) -> np.ndarray:
    return np.fromiter((rank_of(r) for r in records), dtype=np.int64, count=len(records))


def topk_accuracy(records: Sequence[PredictionRecord], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    _check(records)
    r = _ranks(records)
    return float(np.mean((r >= 1) & (r <= k)))


def mrr(records: Sequence[PredictionRecord]) -> float:
    _check(records)
    r = _ranks(records).astype(np.float64)
    recip = np.zeros_like(r)
    np.divide(1.0, r, out=recip, where=r > 0)
    return float(recip.mean())


def macro_prf(records: Sequence[PredictionRecord]) -> tuple[float, float, float]:
    """Macro precision/recall over the classes present in the targets, F from those two."""
    _check(records)
    target = np.fromiter((r.target for r in records), dtype=np.int64, count=len(records))
    pred = np.fromiter((r.ranked[0] if r.ranked else -1 for r in records), dtype=np.int64,
                       count=len(records))
    classes = np.unique(target)
    hit = pred == target
    n = int(max(target.max(), pred.max())) + 1
    tp = np.bincount(target[hit], minlength=n)
    pred_count = np.bincount(pred[pred >= 0], minlength=n)
    true_count = np.bincount(target, minlength=n)
    tp, pc, tc = tp[classes], pred_count[classes], true_count[classes]
    prec = np.divide(tp, pc, out=np.zeros(len(classes)), where=pc > 0)
    rec = tp / tc
    P, R = float(prec.mean()), float(rec.mean())
    F = 0.0 if P + R == 0 else 2 * P * R / (P + R)
    return P, R, F


@dataclass
class MetricReport:
    acc_at_1: float
    acc_at_5: float
    acc_at_10: float
    mrr: float
    precision: float
    recall: float
    f_measure: float
    n_records: int = 0
    n_unk_excluded: int = 0

    _KEYS = {"acc_at_1": "acc@1", "acc_at_5": "acc@5", "acc_at_10": "acc@10"}

    def items(self):
        for f in fields(self):
            yield self._KEYS.get(f.name, f.name), getattr(self, f.name)

    def format(self) -> str:
        out = []
        for k, v in self.items():
            out.append(f"{k}={v}\n" if isinstance(v, int) else f"{k}={v:.6f}\n")
        return "".join(out)

    @classmethod
    def parse(cls, text: str) -> "MetricReport":
        raw = dict(line.split("=", 1) for line in text.splitlines() if line)
        inv = {v: k for k, v in cls._KEYS.items()}
        kw = {}
        for f in fields(cls):
            key = next((k for k, name in inv.items() if name == f.name), f.name)
            val = raw[key]
            kw[f.name] = int(val) if f.type in ("int", int) else float(val)
        return cls(**kw)


def metric_report(records: Sequence[PredictionRecord], n_unk: int = 0) -> MetricReport:
    P, R, F = macro_prf(records)
    return MetricReport(
        topk_accuracy(records, 1), topk_accuracy(records, 5), topk_accuracy(records, 10),
        mrr(records), P, R, F, len(records), n_unk,
    )


def predict_records(model, X, y, k: int = TOP_K, batch: int = 256) -> list[PredictionRecord]:
    out = []
    for i in range(0, len(y), batch):
        P = model.forward(X[i:i + batch])
        for t, ranked in zip(y[i:i + batch], rank_batch(P, k)):
            out.append(PredictionRecord(int(t), tuple(int(j) for j in ranked)))
    return out


def evaluate_model(model, X, y, k: int = TOP_K, batch: int = 256):
    """Metrics over test windows; windows whose target is ``<unk>`` are logged but not scored.

    Returns ``(report, records)`` where ``records`` covers every window.
    """
    if len(y) == 0:
        raise ValueError("empty test fold")
    records = predict_records(model, X, y, k, batch)
    scored = [r for r in records if r.target != UNK_ID]
    if not scored:
        raise ValueError("every test target is <unk>")
    return metric_report(scored, len(records) - len(scored)), records


def format_record_log(records: Iterable[PredictionRecord]) -> str:
    return "".join(f"{r.target},{rank_of(r) or -1}\n" for r in records)


# --- F distribution -------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc needs a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def f_cdf(f: float, d1: float, d2: float) -> float:
    if f <= 0:
        return 0.0
    if math.isinf(f):
        return 1.0
    return betainc(d1 / 2.0, d2 / 2.0, d1 * f / (d1 * f + d2))


def f_sf(f: float, d1: float, d2: float) -> float:
    """Upper tail ``1 - CDF``, computed directly to keep small p-values accurate."""
    if f <= 0:
        return 1.0
    if math.isinf(f):
        return 0.0
    return betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))


def f_ppf(q: float, d1: float, d2: float, tol: float = 1e-10) -> float:
    """Inverse CDF by bisection."""
    if not 0.0 < q < 1.0:
        raise ValueError("quantile must be in (0, 1)")
    lo, hi = 0.0, 1.0
    while f_cdf(hi, d1, d2) < q:
        lo, hi = hi, hi * 2.0
        if hi > 1e300:
            raise ArithmeticError("F quantile bracket overflow")
    while hi - lo > tol * max(1.0, lo):
        mid = 0.5 * (lo + hi)
        if f_cdf(mid, d1, d2) < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class AnovaResult:
    ss_between: float
    ss_within: float
    ss_total: float
    df_between: int
    df_within: int
    ms_between: float
    ms_within: float
    f: float
    p_value: float
    f_crit: float
    alpha: float = 0.05

    @property
    def reject(self) -> bool:
        return self.f > self.f_crit and self.p_value < self.alpha

    def format(self) -> str:
        rows = [
            ("Source", "SS", "df", "MS", "F", "P-value", "F-crit"),
            ("Between Groups", f"{self.ss_between:.6g}", str(self.df_between), f"{self.ms_between:.8g}",
             f"{self.f:.7g}", f"{self.p_value:.6g}", f"{self.f_crit:.7g}"),
            ("Within Groups", f"{self.ss_within:.7g}", str(self.df_within), f"{self.ms_within:.8g}", "", "", ""),
            ("Total", f"{self.ss_total:.7g}", str(self.df_between + self.df_within), "", "", "", ""),
        ]
        widths = [max(len(r[i]) for r in rows) for i in range(7)]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip()
                 for r in rows]
        lines.append(f"alpha={self.alpha} reject_null={'yes' if self.reject else 'no'}")
        return "\n".join(lines) + "\n"


def anova_from_sums(ss_between: float, ss_within: float, df_between: int, df_within: int,
                    alpha: float = 0.05) -> AnovaResult:
    ms_b = ss_between / df_between
    ms_w = ss_within / df_within
    if ms_w == 0:
        if ss_between == 0:
            raise ValueError("all observations identical; F is undefined")
        f, p = math.inf, 0.0
    else:
        f = ms_b / ms_w
        p = f_sf(f, df_between, df_within)
    return AnovaResult(ss_between, ss_within, ss_between + ss_within, df_between, df_within,
                       ms_b, ms_w, f, p, f_ppf(1.0 - alpha, df_between, df_within), alpha)


def anova_oneway(groups: Sequence[Sequence[float]], alpha: float = 0.05) -> AnovaResult:
    if len(groups) < 2:
        raise ValueError("one-way ANOVA needs at least two groups")
    arrs = [np.asarray(g, dtype=np.float64) for g in groups]
    if any(a.size < 2 for a in arrs):
        raise ValueError("every group needs at least two observations")
    allv = np.concatenate(arrs)
    grand = allv.mean()
    ss_b = float(sum(a.size * (a.mean() - grand) ** 2 for a in arrs))
    ss_w = float(sum(((a - a.mean()) ** 2).sum() for a in arrs))
    return anova_from_sums(ss_b, ss_w, len(arrs) - 1, allv.size - len(arrs), alpha)


def read_groups(path) -> list[list[float]]:
    """One group per line, comma-separated decimals; blank lines ignored."""
    groups = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                groups.append([float(x) for x in line.split(",")])
            except ValueError:
                raise ValueError(f"{path}:{i}: expected comma-separated numbers, got {line!r}") from None
    return groups
