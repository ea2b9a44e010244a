"""Segmentation/classification metrics, zero-shot prompt ensembles, paired t-tests,
and the leave-one-domain-out runner."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy import integrate
from scipy.ndimage import binary_erosion, distance_transform_edt
from scipy.stats import rankdata

from .errors import ConfigurationError, DegenerateSampleError, DimensionError, InputError, ProtocolError

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


# ---------------------------------------------------------------- segmentation


@dataclass
class SegEntry:
    dice: float
    iou: float
    hd95: float
    asd: float
    flag: str = ""


def boundary(mask):
    """Mask pixels removed by one 4-connected erosion (outside the image counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~binary_erosion(mask, structure=_CROSS, border_value=0)


def _directed_distances(src, dst):
    """Distance from every boundary pixel of ``src`` to the nearest boundary pixel of ``dst``."""
    return distance_transform_edt(~dst)[src]


def overlap(pred, gt):
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    inter = np.logical_and(pred, gt).sum()
    total = pred.sum() + gt.sum()
    union = np.logical_or(pred, gt).sum()
    if total == 0:
        return 100.0, 100.0
    return 200.0 * inter / total, 100.0 * inter / union


def seg_metrics(pred, gt) -> SegEntry:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if not pred.any() and not gt.any():
        return SegEntry(100.0, 100.0, 0.0, 0.0, "both-empty")
    if not pred.any() or not gt.any():
        diag = float(math.hypot(*pred.shape))
        return SegEntry(0.0, 0.0, diag, diag, "one-empty")
    dice, iou = overlap(pred, gt)
    bp, bg = boundary(pred), boundary(gt)
    d_pg = _directed_distances(bp, bg)
    d_gp = _directed_distances(bg, bp)
    hd95 = float(np.percentile(np.hstack([d_pg, d_gp]), 95))
    asd = float((d_pg.mean() + d_gp.mean()) / 2.0)
    return SegEntry(float(dice), float(iou), hd95, asd)


@dataclass
class SegReport:
    entries: list

    def values(self, metric):
        return np.array([getattr(e, metric) for e in self.entries], dtype=float)

    def mean(self, metric):
        return float(self.values(metric).mean())

    def std(self, metric):
        return float(self.values(metric).std())

    def summary(self):
        return {m: (self.mean(m), self.std(m), len(self.entries)) for m in ("dice", "iou", "hd95", "asd")}

    @property
    def flagged(self):
        return [i for i, e in enumerate(self.entries) if e.flag]


def seg_report(preds, gts):
    return SegReport([seg_metrics(p, g) for p, g in zip(preds, gts)])


# ---------------------------------------------------------------- classification


@dataclass
class ClsReport:
    acc: float
    rec: float
    pre: float
    f1: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int
    flags: list = field(default_factory=list)

    def summary(self):
        return {m: getattr(self, m) for m in ("acc", "rec", "pre", "f1", "auc")}


def auc_rank(scores, labels):
    """Mann-Whitney AUC (percent); tied scores are credited one half."""
    scores, labels = np.asarray(scores, dtype=float), np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return 100.0 * u / (n_pos * n_neg)


def cls_metrics(scores, labels, threshold=0.5) -> ClsReport:
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.size == 0:
        raise InputError("no samples")
    if scores.shape != labels.shape:
        raise DimensionError(f"{scores.size} scores vs {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise InputError("labels must be 0 or 1")
    pred = scores >= threshold
    tp = int((pred & (labels == 1)).sum())
    fp = int((pred & (labels == 0)).sum())
    tn = int((~pred & (labels == 0)).sum())
    fn = int((~pred & (labels == 1)).sum())
    flags = []
    acc = 100.0 * (tp + tn) / labels.size
    if tp + fn:
        rec = 100.0 * tp / (tp + fn)
    else:
        rec = 0.0
        flags.append("recall-undefined")
    if tp + fp:
        pre = 100.0 * tp / (tp + fp)
    else:
        pre = 0.0
        flags.append("precision-undefined")
    f1 = 2 * pre * rec / (pre + rec) if pre + rec > 0 else 0.0
    auc = auc_rank(scores, labels)
    if math.isnan(auc):
        flags.append("auc-undefined")
    return ClsReport(acc, rec, pre, f1, auc, tp, fp, tn, fn, flags)


# ---------------------------------------------------------------- zero-shot

PROMPT_FILES = {"lymph_node": "lymph_node.txt", "breast": "breast.txt"}


def parse_prompt_bank(text):
    """``# class: <name>`` headers followed by one prompt per line."""
    bank, current = {}, None
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("# class:"):
            current = line[len("# class:"):].strip()
            bank[current] = []
        elif current is None:
            raise ConfigurationError("prompt line before any '# class:' header")
        else:
            bank[current].append(line)
    return bank


def format_prompt_bank(bank):
    return "".join(f"# class: {cls}\n" + "".join(p + "\n" for p in prompts) for cls, prompts in bank.items())


def load_prompt_bank(name):
    text = resources.files("hybridtune").joinpath("prompts", PROMPT_FILES[name]).read_text(encoding="utf-8")
    return parse_prompt_bank(text)


def zero_shot_scores(img_emb, bank, text_encoder):
    if not bank or any(len(p) == 0 for p in bank.values()):
        raise ConfigurationError("prompt bank is empty or has a class without prompts")
    img = np.asarray(img_emb, dtype=float)
    img = img / np.linalg.norm(img)
    scores = {}
    for cls, prompts in bank.items():
        sims = []
        for prompt in prompts:
            t = np.asarray(text_encoder(prompt), dtype=float)
            sims.append(float(img @ t / np.linalg.norm(t)))
        scores[cls] = float(np.mean(sims))
    return scores


def zero_shot_classify(img_emb, bank, text_encoder):
    """Mean cosine similarity per class; argmax with ties to the lexicographically first name."""
    scores = zero_shot_scores(img_emb, bank, text_encoder)
    best = max(scores.values())
    winner = min(c for c, s in scores.items() if s == best)
    return winner, scores


# ---------------------------------------------------------------- statistics


@dataclass
class TTestResult:
    t: float
    p: float
    df: int


def t_pdf(x, df):
    log_norm = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(log_norm - (df + 1) / 2 * math.log1p(x * x / df))


def t_two_sided_p(t, df):
    tail, _ = integrate.quad(t_pdf, abs(t), math.inf, args=(df,), epsabs=1e-12, epsrel=1e-10)
    return min(1.0, 2.0 * tail)


def paired_t_test(a, b) -> TTestResult:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise InputError("paired t-test needs two equal-length samples of size >= 2")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0:
        raise DegenerateSampleError("paired differences have zero variance")
    n = d.size
    t = d.mean() / (sd / math.sqrt(n))
    return TTestResult(float(t), t_two_sided_p(t, n - 1), n - 1)


# ---------------------------------------------------------------- cross-domain


@dataclass
class CrossDomainResult:
    domains: list
    cells: dict  # (train_domain, test_domain) -> {metric: value}
    aggregates: dict  # scope -> {metric: value}

    def matrix(self, metric):
        return np.array([[self.cells[(tr, te)][metric] for te in self.domains] for tr in self.domains])

    def rows(self):
        """CSV-ready rows: one per cell, then in-domain/cross-domain/overall aggregates."""
        out = [dict(train=tr, test=te, **self.cells[(tr, te)]) for tr in self.domains for te in self.domains]
        for scope in ("in-domain", "cross-domain", "overall"):
            out.append(dict(train=scope, test=scope, **self.aggregates[scope]))
        return out


def cross_dataset_run(domains: dict, train, evaluate) -> CrossDomainResult:
    """Train on each domain with ``train(data)``, score on every domain with ``evaluate(model, data)``."""
    names = list(domains)
    if len(names) < 2:
        raise ProtocolError("leave-one-domain-out needs at least two domains")
    cells = {}
    for tr in names:
        model = train(domains[tr])
        for te in names:
            cells[(tr, te)] = dict(evaluate(model, domains[te]))
    metrics = list(cells[(names[0], names[0])])
    diag = [cells[(d, d)] for d in names]
    off = [cells[(a, b)] for a in names for b in names if a != b]
    every = list(cells.values())
    aggregates = {
        scope: {m: float(np.mean([c[m] for c in group])) for m in metrics}
        for scope, group in (("in-domain", diag), ("cross-domain", off), ("overall", every))
    }
    return CrossDomainResult(names, cells, aggregates)


# ---------------------------------------------------------------- reports


def write_summary_csv(path, summary: dict):
    """``metric,mean,std,n``; ``summary`` maps metric -> (mean, std, n)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "mean", "std", "n"])
        for metric, (m, s, n) in summary.items():
            w.writerow([metric, f"{m:.6f}", f"{s:.6f}", n])


def write_rows_csv(path, rows):
    if not rows:
        return
    keys = list(rows[0])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def mean_std(values):
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std()), int(v.size)
