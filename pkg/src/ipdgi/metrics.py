"""Ranking exposure metrics, FID image quality, and the evaluation report."""

import datetime
import json
from dataclasses import dataclass, field

import numpy as np


def exposure_rate(ranks, k):
    """Fraction of users whose top-k list contains the item, averaged over items.

    `ranks` maps item_id -> 1-based rank of that item for every user
    (array of shape (n_users,)).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not ranks:
        raise ValueError("no items to score")
    per_item = [float(np.mean(np.asarray(r) <= k)) for r in ranks.values()]
    return float(np.mean(per_item))


def ndcg_at_k(ranks, k):
    """Mean over items and users of 1/log2(rank+1) when rank <= k, else 0."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not ranks:
        raise ValueError("no items to score")
    per_item = []
    for r in ranks.values():
        r = np.asarray(r, dtype=np.float64)
        gain = np.where(r <= k, 1.0 / np.log2(r + 1.0), 0.0)
        per_item.append(float(gain.mean()))
    return float(np.mean(per_item))


def _sqrtm_psd(m):
    """Symmetric PSD matrix square root via eigendecomposition.

    Small negative eigenvalues from numerical round-off are clipped to zero.
    """
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def _mean_cov(x, shrink):
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False)
    cov = np.atleast_2d(cov) + shrink * np.eye(x.shape[1])
    return mu, cov


def fid(features_a, features_b, shrink=1e-6):
    """Frechet distance between two gaussian fits of feature matrices.

    ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2), with a
    small diagonal shrinkage on both covariances so few-sample estimates stay
    well conditioned. Identical inputs give (numerically) zero.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature matrices must be 2D with equal width, got {a.shape} vs {b.shape}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least 2 samples per side")
    mu_a, cov_a = _mean_cov(a, shrink)
    mu_b, cov_b = _mean_cov(b, shrink)
    sa = _sqrtm_psd(cov_a)
    covmean = _sqrtm_psd(sa @ cov_b @ sa)
    val = float(((mu_a - mu_b) ** 2).sum()
                + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(covmean))
    return max(val, 0.0)


def improvement(before, after, lower_is_better=False):
    """Relative change in percent, signed so that positive always means better."""
    if before == 0:
        raise ValueError("baseline value is zero; relative improvement undefined")
    if lower_is_better:
        return (before - after) / before * 100.0
    return (after - before) / before * 100.0


def sparsity(n_users, n_items, n_interactions):
    """Percentage of the user-item matrix that is empty."""
    if n_users < 1 or n_items < 1:
        raise ValueError("need at least one user and one item")
    return (1.0 - n_interactions / (n_users * n_items)) * 100.0


def sparsity_of(catalog):
    return sparsity(catalog.n_users, catalog.n_items, len(catalog.interactions))


SCHEMA_VERSION = 1

BASELINE_CONDITION = "none"


@dataclass
class MetricReport:
    """Per-(model, condition, K) attack evaluation grid plus per-condition FID.

    Conditions are attack settings ("none", "aip", "ipdgi", ablation variants);
    FID is condition-level because adversarial images are shared across models.
    """

    ks: list
    seed: int
    corpus: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)
    fids: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    created: str = ""
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if not self.ks:
            raise ValueError("need at least one K")
        self.ks = [int(k) for k in self.ks]
        if not self.created:
            self.created = datetime.datetime.now(datetime.timezone.utc).isoformat()

    def set_cell(self, model, condition, k, er, target_ndcg, overall_ndcg):
        cond = self.models.setdefault(model, {}).setdefault(condition, {})
        cond[str(int(k))] = {"er": er, "target_ndcg": target_ndcg,
                             "overall_ndcg": overall_ndcg}

    def cell(self, model, condition, k):
        return self.models[model][condition][str(int(k))]

    def set_fid(self, condition, value):
        self.fids[condition] = value

    def rows(self):
        """Flat (model, condition, k, metrics...) rows, with improvement vs baseline."""
        out = []
        for model in sorted(self.models):
            base = self.models[model].get(BASELINE_CONDITION, {})
            for condition in sorted(self.models[model]):
                for k in self.ks:
                    rec = self.models[model][condition].get(str(k))
                    if rec is None:
                        continue
                    row = {"model": model, "condition": condition, "k": k, **rec,
                           "fid": self.fids.get(condition)}
                    ref = base.get(str(k))
                    if condition != BASELINE_CONDITION and ref and ref["er"]:
                        row["er_improvement_pct"] = improvement(ref["er"], rec["er"])
                        row["overall_ndcg_change_pct"] = improvement(
                            ref["overall_ndcg"], rec["overall_ndcg"])
                    out.append(row)
        return out

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "created": self.created,
            "ks": self.ks,
            "seed": self.seed,
            "corpus": self.corpus,
            "models": self.models,
            "fids": self.fids,
            "notes": self.notes,
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema_version {doc.get('schema_version')!r}")
        return cls(ks=doc["ks"], seed=doc["seed"], corpus=doc["corpus"],
                   models=doc["models"], fids=doc["fids"], notes=doc["notes"],
                   created=doc["created"])

    def markdown(self):
        def fmt(v, nd=4):
            return "-" if v is None else f"{v:.{nd}f}"

        lines = [f"# Attack evaluation (seed={self.seed})", ""]
        if self.corpus:
            lines.append("Corpus: " + ", ".join(f"{k}={v}" for k, v in sorted(self.corpus.items())))
            lines.append("")
        lines.append("| model | condition | K | ER@K | dER% | target NDCG@K | overall NDCG@K | dNDCG% | FID |")
        lines.append("|---|---|---|---|---|---|---|---|---|")
        for row in self.rows():
            lines.append(
                f"| {row['model']} | {row['condition']} | {row['k']} | {fmt(row['er'])} | "
                f"{fmt(row.get('er_improvement_pct'), 2)} | {fmt(row['target_ndcg'])} | "
                f"{fmt(row['overall_ndcg'])} | {fmt(row.get('overall_ndcg_change_pct'), 2)} | "
                f"{fmt(row.get('fid'), 2)} |")
        for note in self.notes:
            lines += ["", f"- {note}"]
        return "\n".join(lines) + "\n"
