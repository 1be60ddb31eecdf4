"""Trial scoring, EER / minDCF, and the noisy-condition evaluation grid."""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .errors import DiffSVError
from .extractor import SpeakerEmbedding
from .features import (
    DatasetManifest,
    FeatureConfig,
    MixSpec,
    Waveform,
    extract_mel,
    load_samples,
    mix_at_snr,
)


@dataclass(frozen=True)
class Trial:
    label: int  # 1 target, 0 nontarget
    enroll: str
    test: str


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray
    condition: dict

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape:
            raise DiffSVError("scores and labels differ in length", code="shape-mismatch")
        if not np.all(np.isfinite(self.scores)):
            raise DiffSVError("non-finite score", code="non-finite-score")


TrialSet = List[Trial]


def read_trials(path) -> TrialSet:
    trials = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[0] not in ("0", "1"):
                raise DiffSVError(f"{path}:{lineno}: expected '<0|1> <enroll> <test>'", code="bad-trial-list")
            trials.append(Trial(int(parts[0]), parts[1], parts[2]))
    check_trials(trials)
    return trials


def write_trials(path, trials: Iterable[Trial]) -> None:
    with open(path, "w") as fh:
        for t in trials:
            fh.write(f"{t.label} {t.enroll} {t.test}\n")


def check_trials(trials: TrialSet, manifest: Optional[DatasetManifest] = None) -> None:
    labels = {t.label for t in trials}
    if labels != {0, 1}:
        raise DiffSVError("trial list needs at least one target and one nontarget", code="degenerate-trials")
    if manifest is not None:
        known = {e.utt_id for e in manifest}
        missing = sorted({u for t in trials for u in (t.enroll, t.test)} - known)
        if missing:
            raise DiffSVError(f"trial ids not in manifest: {missing[:5]}", code="unknown-utterance")


def make_trials(manifest: DatasetManifest, seed: int, max_targets: int = 2000) -> TrialSet:
    """All same-speaker pairs (capped) plus an equal number of random cross-speaker pairs."""
    rng = np.random.default_rng(seed)
    ids = [e.utt_id for e in manifest]
    spk = [e.speaker for e in manifest]
    targets = [(i, j) for i in range(len(ids)) for j in range(i + 1, len(ids)) if spk[i] == spk[j]]
    if len(targets) > max_targets:
        keep = np.sort(rng.choice(len(targets), max_targets, replace=False))
        targets = [targets[k] for k in keep]
    nontargets = set()
    if len(set(spk)) < 2:
        raise DiffSVError("need at least two speakers for nontarget trials", code="degenerate-corpus")
    while len(nontargets) < len(targets):
        i, j = (int(v) for v in rng.choice(len(ids), 2, replace=False))
        if spk[i] != spk[j]:
            nontargets.add((min(i, j), max(i, j)))
    trials = [Trial(1, ids[i], ids[j]) for i, j in targets]
    trials += [Trial(0, ids[i], ids[j]) for i, j in sorted(nontargets)]
    return trials


# ---------------------------------------------------------------------------
# scoring and metrics


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a / np.linalg.norm(a), b / np.linalg.norm(b)))


def score_trials(trials: TrialSet, enroll: Dict[str, SpeakerEmbedding],
                 test: Optional[Dict[str, SpeakerEmbedding]] = None, condition: Optional[dict] = None) -> ScoreSet:
    """Cosine scores; ``test`` defaults to ``enroll`` (same embeddings on both sides)."""
    test = enroll if test is None else test
    scores = []
    for t in trials:
        for side, table, utt in (("enroll", enroll, t.enroll), ("test", test, t.test)):
            if utt not in table:
                raise DiffSVError(f"no {side} embedding for '{utt}'", code="missing-embedding")
        scores.append(cosine_score(_vec(enroll[t.enroll]), _vec(test[t.test])))
    return ScoreSet(np.clip(scores, -1.0, 1.0), [t.label for t in trials], condition or {"condition": "clean"})


def _vec(e):
    return e.v if isinstance(e, SpeakerEmbedding) else np.asarray(e, dtype=np.float64)


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    tar, non = scores[labels == 1], scores[labels == 0]
    if tar.size == 0 or non.size == 0:
        raise DiffSVError("need at least one target and one nontarget score", code="degenerate-trials")
    return tar, non


def error_rates(scores, labels):
    """Thresholds (sorted unique scores then +inf) with miss and false-alarm rates.

    A trial is accepted when ``score >= threshold``.
    """
    tar, non = _split(scores, labels)
    thresholds = np.append(np.unique(np.concatenate([tar, non])), np.inf)
    p_miss = np.searchsorted(np.sort(tar), thresholds, side="left") / tar.size
    p_fa = 1.0 - np.searchsorted(np.sort(non), thresholds, side="left") / non.size
    return thresholds, p_miss, p_fa


def compute_eer(scores, labels) -> float:
    """Equal error rate, interpolating linearly where ``p_miss - p_fa`` changes sign."""
    _, p_miss, p_fa = error_rates(scores, labels)
    diff = p_miss - p_fa  # non-decreasing from -1 to +1
    k = int(np.argmax(diff >= 0))
    if diff[k] == 0 or k == 0:
        return float(p_miss[k])
    a, b = diff[k - 1], diff[k]
    w = a / (a - b)
    return float(p_miss[k - 1] + w * (p_miss[k] - p_miss[k - 1]))


def rocch_eer(scores, labels) -> float:
    """EER read off the convex hull of the ROC (allows randomised thresholds)."""
    _, p_miss, p_fa = error_rates(scores, labels)
    pts = sorted(set(zip(p_fa.tolist(), p_miss.tolist())))
    hull = []
    for p in pts:  # lower hull in (p_fa, p_miss)
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            if (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1) <= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    eer = 0.0
    for (x1, y1), (x2, y2) in zip(hull[:-1], hull[1:]):
        # segment crossing the line p_miss == p_fa
        d1, d2 = y1 - x1, y2 - x2
        if d1 >= 0 >= d2:
            w = d1 / (d1 - d2) if d1 != d2 else 0.0
            eer = max(eer, x1 + w * (x2 - x1))
    return float(eer)


def compute_min_dcf(scores, labels, p_target: float = 0.01, c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    _, p_miss, p_fa = error_rates(scores, labels)
    cost = c_miss * p_miss * p_target + c_fa * p_fa * (1.0 - p_target)
    return float(cost.min() / min(c_miss * p_target, c_fa * (1.0 - p_target)))


# ---------------------------------------------------------------------------
# full pipeline on utterances


def _stable_seed(*parts) -> int:
    return zlib.crc32("|".join(str(p) for p in parts).encode()) & 0x7FFFFFFF


def corrupt(entry, noise_manifest: DatasetManifest, category: str, snr_db: float, seed: int,
            cfg: FeatureConfig) -> Waveform:
    """Mix a seeded segment of a ``category`` noise into one utterance."""
    pool = [n for n in noise_manifest if n.category == category]
    if not pool:
        raise DiffSVError(f"noise manifest has no '{category}' recordings", code="missing-noise")
    noise = pool[_stable_seed(seed, entry.utt_id, category) % len(pool)]
    speech = Waveform(load_samples(entry.path, cfg.sample_rate), cfg.sample_rate)
    spec = MixSpec(snr_db=snr_db, noise_category=category,
                   seed=_stable_seed(seed, entry.utt_id, noise.utt_id, snr_db))
    return mix_at_snr(speech, Waveform(load_samples(noise.path, cfg.sample_rate), cfg.sample_rate), spec)


def embed_waveforms(model, wavs: Dict[str, Waveform], cfg: Optional[FeatureConfig] = None,
                    steps: Optional[int] = None) -> Dict[str, SpeakerEmbedding]:
    cfg = cfg or model.cfg.features
    dtype = next(model.parameters()).dtype
    out = {}
    for utt, wav in wavs.items():
        x = extract_mel(wav, cfg).to_tensor(dtype)
        out[utt] = SpeakerEmbedding(model.embed(x, steps)[0].double().numpy())
    return out


def embed_condition(model, manifest: DatasetManifest, utt_ids: Sequence[str], noise_manifest=None,
                    category: Optional[str] = None, snr_db: Optional[float] = None, seed: int = 0,
                    steps: Optional[int] = None) -> Dict[str, SpeakerEmbedding]:
    cfg = model.cfg.features
    by_id = {e.utt_id: e for e in manifest}
    wavs = {}
    for utt in utt_ids:
        e = by_id[utt]
        if category is None:
            wavs[utt] = Waveform(load_samples(e.path, cfg.sample_rate), cfg.sample_rate)
        else:
            wavs[utt] = corrupt(e, noise_manifest, category, snr_db, seed, cfg)
    return embed_waveforms(model, wavs, cfg, steps)


def run_condition_grid(model, speech_manifest: DatasetManifest, noise_manifest: DatasetManifest,
                       trials: TrialSet, snrs: Sequence[float] = (), categories: Sequence[str] = (),
                       p_target: float = 0.01, c_miss: float = 1.0, c_fa: float = 1.0, seed: int = 0,
                       steps: Optional[int] = None, include_clean: bool = True, score_sink=None):
    """Evaluate clean trials and every ``(category, snr)`` with only the test side corrupted.

    ``model`` is a :class:`~diffsv.training.DiffSV` or a checkpoint path.
    Returns ``(rows, average)``; ``score_sink(row, scoreset)`` sees every score set.
    """
    if isinstance(model, (str, Path)):
        from .training import load_model

        model = load_model(model)
    check_trials(trials, speech_manifest)
    enroll_ids = sorted({t.enroll for t in trials})
    test_ids = sorted({t.test for t in trials})
    clean = embed_condition(model, speech_manifest, sorted(set(enroll_ids) | set(test_ids)), steps=steps)

    conditions = [("clean", None, None)] if include_clean else []
    conditions += [("noisy", c, float(s)) for c in categories for s in snrs]
    rows = []
    for name, category, snr in conditions:
        try:
            if category is None:
                test = clean
            else:
                test = embed_condition(model, speech_manifest, test_ids, noise_manifest, category, snr,
                                       seed, steps)
            cond = {"condition": name, "category": category, "snr_db": snr}
            ss = score_trials(trials, clean, test, cond)
        except DiffSVError as exc:
            raise DiffSVError(f"condition {name}/{category}/{snr}: {exc}", code=exc.code) from exc
        row = dict(cond, eer=compute_eer(ss.scores, ss.labels),
                   min_dcf=compute_min_dcf(ss.scores, ss.labels, p_target, c_miss, c_fa),
                   num_trials=len(trials))
        rows.append(row)
        if score_sink is not None:
            score_sink(row, ss)
    average = {
        "condition": "average", "category": None, "snr_db": None,
        "eer": float(np.mean([r["eer"] for r in rows])),
        "min_dcf": float(np.mean([r["min_dcf"] for r in rows])),
        "num_trials": len(trials),
    }
    return rows, average


def write_metrics(path, rows) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps({k: r[k] for k in ("condition", "category", "snr_db", "eer", "min_dcf",
                                                    "num_trials")}) + "\n")


def write_scores(path, scoreset: ScoreSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial_index", "score", "label"])
        for i, (s, l) in enumerate(zip(scoreset.scores, scoreset.labels)):
            w.writerow([i, f"{s:.8f}", int(l)])


def format_table(rows, average=None) -> str:
    lines = [f"{'condition':<10} {'category':<10} {'snr_db':>6} {'EER%':>7} {'minDCF':>7} {'trials':>6}"]
    for r in list(rows) + ([average] if average else []):
        snr = "" if r["snr_db"] is None else f"{r['snr_db']:g}"
        lines.append(f"{r['condition']:<10} {r['category'] or '-':<10} {snr:>6} "
                     f"{100 * r['eer']:7.2f} {r['min_dcf']:7.3f} {r['num_trials']:>6}")
    return "\n".join(lines)
