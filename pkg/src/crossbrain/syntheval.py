"""Cross-subject signal synthesis and desk-scale evaluation.

Image quality metrics that would need pretrained networks are replaced by
their embedding-space counterparts: voxel-space Pearson correlation for
reconstructions, cosine similarity to the target embeddings, top-k
retrieval, and two-way identification against random distractors.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as mdl
from .data import Cohort
from .errors import DimensionError, NumericalError, ParameterError, UnknownSubjectError
from .model import ModelState, substream


def synthesize_fmri(state: ModelState, from_subject: str, to_subject: str, voxels) -> np.ndarray:
    """Render one subject's pooled signals in another subject's voxel space.

    v' = builder_to(embedder_from(v)), inference mode (no dropout).
    """
    for sid in (from_subject, to_subject):
        if sid not in state.subjects:
            raise UnknownSubjectError(sid)
    e = mdl.embed(state, from_subject, voxels, training=False)
    out = mdl.build(state, to_subject, e, training=False).value
    if not np.all(np.isfinite(out)):
        raise NumericalError("synthesized signals contain non-finite values")
    return out


def pixcorr(x, y) -> float:
    """Pearson correlation between two equal-length signals."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape or x.size < 2:
        raise DimensionError("pixcorr needs two equal-length vectors with >= 2 entries")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0.0:
        raise NumericalError("pixcorr is undefined for zero-variance input")
    return float((xc * yc).sum() / denom)


def _flat_unit_rows(x: np.ndarray) -> np.ndarray:
    flat = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return flat / norms


def two_way_identification(pred, target, trials: int = 50, seed: int = 0) -> float:
    """Fraction of (true, distractor) comparisons won by the true target.

    For each sample, ``trials`` distractors are drawn uniformly from the
    other targets; ties count one half.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    n = len(pred)
    if n < 2:
        raise ParameterError("two-way identification needs at least 2 samples")
    p = _flat_unit_rows(pred)
    t = _flat_unit_rows(target)
    sims = p @ t.T
    rng = substream(seed, "two-way")
    wins = 0.0
    for i in range(n):
        js = rng.integers(0, n - 1, size=trials)
        js = js + (js >= i)
        own = sims[i, i]
        others = sims[i, js]
        wins += float(np.count_nonzero(own > others)) + 0.5 * float(np.count_nonzero(own == others))
    return wins / (n * trials)


def topk_retrieval(pred, target, k: int = 1) -> float:
    """Fraction of samples whose true target is among the k nearest by cosine."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    n = len(pred)
    if k < 1 or k > n:
        raise ParameterError(f"k must be in [1, {n}], got {k}")
    sims = _flat_unit_rows(pred) @ _flat_unit_rows(target).T
    order = np.argsort(-sims, axis=1, kind="stable")
    hits = (order[:, :k] == np.arange(n)[:, None]).any(axis=1)
    return float(hits.mean())


def mean_cosine(pred, target) -> float:
    """Mean row-wise cosine between flattened prediction and target grids."""
    p = _flat_unit_rows(np.asarray(pred))
    t = _flat_unit_rows(np.asarray(target))
    return float((p * t).sum(axis=1).mean())


@dataclass
class EvalReport:
    per_subject: dict[str, dict[str, float]]
    mean: dict[str, float]
    n_test: int
    seed: int
    fingerprint: str

    FIELDS = ("pixcorr", "cosine_image", "cosine_text", "top1", "two_way")

    def to_json(self) -> str:
        payload = {
            "n_test": self.n_test,
            "seed": self.seed,
            "fingerprint": self.fingerprint,
            "per_subject": {sid: {f: self.per_subject[sid][f] for f in self.FIELDS}
                            for sid in self.per_subject},
            "mean": {f: self.mean[f] for f in self.FIELDS},
        }
        return json.dumps(payload, indent=2)

    def to_csv(self) -> str:
        lines = ["subject," + ",".join(self.FIELDS)]
        for sid, metrics in self.per_subject.items():
            lines.append(sid + "," + ",".join(repr(metrics[f]) for f in self.FIELDS))
        lines.append("mean," + ",".join(repr(self.mean[f]) for f in self.FIELDS))
        return "\n".join(lines) + "\n"

    def save(self, out_dir, stem: str = "eval") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / f"{stem}.json"
        csv_path = out_dir / f"{stem}.csv"
        json_path.write_text(self.to_json() + "\n", encoding="utf-8")
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        return json_path, csv_path


def decode_subject(state: ModelState, cohort: Cohort, subject: str, split: str = "test",
                   aggregation: str = "max") -> dict[str, np.ndarray]:
    """Inference pass: pooled voxels -> embedding -> predicted token grids."""
    if split not in ("train", "test"):
        raise ParameterError(f"split must be 'train' or 'test', got {split!r}")
    voxels = cohort.pooled(subject, state.config.pooled_size, split, aggregation)
    e = mdl.embed(state, subject, voxels, training=False)
    pred_img, pred_txt = mdl.translate(state, e.value, training=False)
    rebuilt = mdl.build(state, subject, e.value, training=False)
    return {
        "voxels": voxels,
        "embedding": e.value,
        "pred_image": pred_img.value,
        "pred_text": pred_txt.value,
        "rebuilt": rebuilt.value,
    }


def evaluate(state: ModelState, cohort: Cohort, split: str = "test",
             subjects: list[str] | None = None, tau: float = 0.125,
             aggregation: str = "max", trials: int = 50, seed: int = 0,
             fingerprint: str = "") -> EvalReport:
    """Per-subject metrics on a split, averaged across subjects.

    Retrieval and two-way identification are computed on the flattened
    image-embedding predictions, matching the contrastive geometry used in
    training. Deterministic for a fixed seed.
    """
    if subjects is None:
        subjects = [sid for sid in state.subjects if sid in cohort.recordings]
    if not subjects:
        raise ParameterError("no overlapping subjects between model and cohort")
    if split == "test":
        stim_ids = cohort.test_ids
    else:
        stim_ids = None  # per subject below
    per_subject: dict[str, dict[str, float]] = {}
    for sid in subjects:
        rec = cohort.recording(sid)
        ids = stim_ids if stim_ids is not None else rec.train_ids
        decoded = decode_subject(state, cohort, sid, split, aggregation)
        img_t = cohort.image_targets[ids]
        txt_t = cohort.text_targets[ids]
        if not (np.all(np.isfinite(decoded["pred_image"])) and np.all(np.isfinite(decoded["pred_text"]))):
            raise NumericalError(f"non-finite predictions for subject {sid}")
        corrs = [pixcorr(decoded["rebuilt"][i], decoded["voxels"][i])
                 for i in range(len(decoded["voxels"]))]
        per_subject[sid] = {
            "pixcorr": float(np.mean(corrs)),
            "cosine_image": mean_cosine(decoded["pred_image"], img_t),
            "cosine_text": mean_cosine(decoded["pred_text"], txt_t),
            "top1": topk_retrieval(decoded["pred_image"], img_t, k=1),
            "two_way": two_way_identification(decoded["pred_image"], img_t,
                                              trials=trials, seed=seed),
        }
    mean = {f: float(np.mean([per_subject[sid][f] for sid in subjects]))
            for f in EvalReport.FIELDS}
    n_test = len(cohort.test_ids) if split == "test" else len(cohort.recording(subjects[0]).train_ids)
    return EvalReport(per_subject=per_subject, mean=mean, n_test=n_test,
                      seed=seed, fingerprint=fingerprint)
