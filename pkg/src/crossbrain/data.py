"""Synthetic multi-subject cohort generation, dataset container I/O, and
deterministic batch iteration.

Each cohort shares one pool of stimulus latents. Target image/text
embeddings are fixed random linear maps of the latents, so a
subject-invariant solution exists exactly. Each subject records voxels
through its own sparse thresholded forward model

    v = relu(G_s z + b_s) + sigma * noise

which makes the signal sparse and threshold-gated, the regime max pooling
is meant for. Train stimuli are disjoint across subjects; test stimuli are
shared, repeat-averaged, and every subject's voxels are z-scored with
statistics fitted on its train split only.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve

from . import container, precision
from .errors import ConfigError, ParameterError, UnknownSubjectError
from .model import substream
from .numerics import adaptive_max_pool_array

AGGREGATIONS = ("max", "avg", "interpolate")


@dataclass(frozen=True)
class CohortSpec:
    n_subjects: int = 3
    voxel_range: tuple[int, int] = (1300, 1600)
    latent_dim: int = 16
    n_train_per_subject: int = 2000
    n_shared_test: int = 64
    noise_std: float = 0.1
    test_repeats: int = 3
    image_dims: tuple[int, int] = (17, 32)
    text_dims: tuple[int, int] = (5, 32)
    sparsity: float = 0.8
    # mimics the small numeric range of real text-embedding targets, which is
    # what makes a large text-loss weight meaningful
    text_scale: float = 0.01
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: dict) -> "CohortSpec":
        raw = dict(raw)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown cohort config keys: {sorted(unknown)}")
        for key in ("voxel_range", "image_dims", "text_dims"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)

    def validate(self) -> None:
        lo, hi = self.voxel_range
        if self.n_subjects < 1:
            raise ConfigError("n_subjects must be >= 1")
        if hi - lo + 1 < self.n_subjects:
            raise ConfigError(
                f"voxel_range {self.voxel_range} cannot host {self.n_subjects} distinct sizes"
            )
        if self.latent_dim < 1 or self.n_train_per_subject < 1 or self.n_shared_test < 1:
            raise ConfigError("latent_dim, n_train_per_subject, n_shared_test must be >= 1")
        if self.test_repeats < 1:
            raise ConfigError("test_repeats must be >= 1")
        if not 0.0 <= self.sparsity < 1.0:
            raise ConfigError("sparsity must be in [0, 1)")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")


@dataclass
class SubjectRecordings:
    """One subject's recordings plus its generative ground truth (if synthetic)."""

    subject: str
    train_ids: np.ndarray          # (n_train,) stimulus indices
    train_voxels: np.ndarray       # (n_train, F_s), z-scored
    test_voxels: np.ndarray        # (n_test, F_s), repeat-averaged then z-scored
    mixing: np.ndarray | None = None    # G_s, (F_s, d_z)
    bias: np.ndarray | None = None      # b_s, (F_s,)

    @property
    def n_voxels(self) -> int:
        return self.train_voxels.shape[1]


@dataclass
class Batch:
    subject: str
    voxels: np.ndarray        # (n, m) pooled
    image_targets: np.ndarray  # (n, T_I, C)
    text_targets: np.ndarray   # (n, T_T, C)
    stimulus_ids: np.ndarray   # (n,)


@dataclass
class Cohort:
    subjects: list[str]
    latents: np.ndarray | None      # (S, d_z); None for ingested real data
    image_targets: np.ndarray       # (S, T_I, C)
    text_targets: np.ndarray        # (S, T_T, C)
    test_ids: np.ndarray            # (n_test,) shared across subjects
    recordings: dict[str, SubjectRecordings]
    spec: CohortSpec | None = None
    _pool_cache: dict = field(default_factory=dict, repr=False)

    def recording(self, subject: str) -> SubjectRecordings:
        try:
            return self.recordings[subject]
        except KeyError:
            raise UnknownSubjectError(subject) from None

    def pooled(self, subject: str, m: int, split: str = "train", mode: str = "max") -> np.ndarray:
        """Pooled voxel matrix for one subject and split, memoized."""
        key = (subject, m, split, mode)
        if key not in self._pool_cache:
            rec = self.recording(subject)
            voxels = rec.train_voxels if split == "train" else rec.test_voxels
            self._pool_cache[key] = pool_voxels(voxels, m, mode)
        return self._pool_cache[key]


def pool_voxels(voxels: np.ndarray, m: int, mode: str = "max") -> np.ndarray:
    """Aggregate variable-length voxel rows to a fixed width m."""
    voxels = np.asarray(voxels)
    length = voxels.shape[-1]
    if m < 1 or m > length:
        raise ParameterError(f"pooled size must satisfy 1 <= m <= {length}, got {m}")
    if mode == "max":
        return adaptive_max_pool_array(voxels, m)
    if mode == "avg":
        return _avg_pool(voxels, m)
    if mode == "interpolate":
        return _interpolate(voxels, m)
    raise ParameterError(f"unknown aggregation {mode!r}; choose from {AGGREGATIONS}")


def _avg_pool(voxels: np.ndarray, m: int) -> np.ndarray:
    from .numerics import pool_windows

    squeeze = voxels.ndim == 1
    v2 = voxels[None, :] if squeeze else voxels
    starts, ends = pool_windows(v2.shape[1], m)
    sizes = ends - starts
    out = np.empty((v2.shape[0], m), dtype=v2.dtype)
    for size in np.unique(sizes):
        sel = np.nonzero(sizes == size)[0]
        idx = starts[sel][:, None] + np.arange(size)[None, :]
        out[:, sel] = v2[:, idx].mean(axis=2)
    return out[0] if squeeze else out


def _interpolate(voxels: np.ndarray, m: int) -> np.ndarray:
    """Linear resampling at window centers (align to sample midpoints)."""
    squeeze = voxels.ndim == 1
    v2 = voxels[None, :] if squeeze else voxels
    length = v2.shape[1]
    pos = (np.arange(m) + 0.5) * (length / m) - 0.5
    pos = np.clip(pos, 0.0, length - 1.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, length - 1)
    frac = (pos - lo).astype(v2.dtype)
    out = v2[:, lo] * (1.0 - frac) + v2[:, hi] * frac
    return out[0] if squeeze else out


def generate_cohort(spec: CohortSpec) -> Cohort:
    """Sample a synthetic cohort (deterministic for a fixed seed)."""
    spec.validate()
    dt = precision.dtype()
    n_total = spec.n_shared_test + spec.n_subjects * spec.n_train_per_subject
    rng_latent = substream(spec.seed, "cohort", "latents")
    latents = rng_latent.standard_normal((n_total, spec.latent_dim)).astype(dt)

    t_img, c_img = spec.image_dims
    t_txt, c_txt = spec.text_dims
    rng_targets = substream(spec.seed, "cohort", "targets")
    map_img = (rng_targets.standard_normal((spec.latent_dim, t_img * c_img))
               / np.sqrt(spec.latent_dim)).astype(dt)
    map_txt = (rng_targets.standard_normal((spec.latent_dim, t_txt * c_txt))
               / np.sqrt(spec.latent_dim) * spec.text_scale).astype(dt)
    image_targets = (latents @ map_img).reshape(n_total, t_img, c_img)
    text_targets = (latents @ map_txt).reshape(n_total, t_txt, c_txt)

    rng_sizes = substream(spec.seed, "cohort", "sizes")
    lo, hi = spec.voxel_range
    sizes = rng_sizes.choice(np.arange(lo, hi + 1), size=spec.n_subjects, replace=False)

    test_ids = np.arange(spec.n_shared_test, dtype=np.int64)
    recordings: dict[str, SubjectRecordings] = {}
    subjects = [f"s{i}" for i in range(spec.n_subjects)]
    for i, sid in enumerate(subjects):
        n_vox = int(sizes[i])
        rng = substream(spec.seed, "cohort", "subject", sid)
        mixing = rng.standard_normal((n_vox, spec.latent_dim))
        mixing *= rng.random((n_vox, spec.latent_dim)) >= spec.sparsity
        mixing = mixing.astype(dt)
        bias = rng.standard_normal(n_vox).astype(dt)

        start = spec.n_shared_test + i * spec.n_train_per_subject
        train_ids = np.arange(start, start + spec.n_train_per_subject, dtype=np.int64)

        clean_train = np.maximum(latents[train_ids] @ mixing.T + bias, 0.0)
        train = clean_train + spec.noise_std * rng.standard_normal(clean_train.shape).astype(dt)

        clean_test = np.maximum(latents[test_ids] @ mixing.T + bias, 0.0)
        trials = [clean_test + spec.noise_std * rng.standard_normal(clean_test.shape).astype(dt)
                  for _ in range(spec.test_repeats)]
        test = np.mean(trials, axis=0, dtype=np.float64).astype(dt)

        train64 = train.astype(np.float64)
        test64 = test.astype(np.float64)
        mu = train64.mean(axis=0)
        sd = np.maximum(train64.std(axis=0), 1e-8)
        train = ((train64 - mu) / sd).astype(dt)
        test = ((test64 - mu) / sd).astype(dt)
        recordings[sid] = SubjectRecordings(
            subject=sid, train_ids=train_ids, train_voxels=train, test_voxels=test,
            mixing=mixing, bias=bias,
        )

    return Cohort(
        subjects=subjects, latents=latents, image_targets=image_targets,
        text_targets=text_targets, test_ids=test_ids, recordings=recordings, spec=spec,
    )


def batch_iter(cohort: Cohort, subject: str, batch_size: int, pooled_size: int,
               seed: int, epoch: int, mode: str = "max", subset: int | None = None):
    """Yield one epoch of batches for a subject.

    Pooling happens at load time (memoized per subject); the shuffle is a
    pure function of (seed, epoch, subject). The last partial batch is
    emitted. ``subset`` restricts to the first N train rows, the
    limited-data protocol.
    """
    if batch_size < 1:
        raise ParameterError("batch_size must be >= 1")
    rec = cohort.recording(subject)
    pooled = cohort.pooled(subject, pooled_size, "train", mode)
    n = pooled.shape[0]
    if subset is not None:
        if not 1 <= subset <= n:
            raise ParameterError(f"subset must be in [1, {n}], got {subset}")
        n = subset
    order = substream(seed, "shuffle", subject, epoch).permutation(n)
    ids = rec.train_ids
    for lo in range(0, n, batch_size):
        rows = order[lo:lo + batch_size]
        stim = ids[rows]
        yield Batch(
            subject=subject,
            voxels=pooled[rows],
            image_targets=cohort.image_targets[stim],
            text_targets=cohort.text_targets[stim],
            stimulus_ids=stim,
        )


# -- learnability oracle ------------------------------------------------------


def ridge_latent_r2(cohort: Cohort, subject: str, pooled_size: int | None = None,
                    lam: float = 10.0, mode: str = "max") -> float:
    """Closed-form ridge regression from voxels to stimulus latents, test R^2.

    Independent of the trained model; certifies that the synthetic task is
    learnable before any model results are judged. ``pooled_size`` switches
    between raw and pooled voxels.
    """
    if cohort.latents is None:
        raise ConfigError("ridge oracle needs ground-truth latents (synthetic cohorts only)")
    rec = cohort.recording(subject)
    if pooled_size is None:
        x_train, x_test = rec.train_voxels, rec.test_voxels
    else:
        x_train = cohort.pooled(subject, pooled_size, "train", mode)
        x_test = cohort.pooled(subject, pooled_size, "test", mode)
    x_train = x_train.astype(np.float64)
    x_test = x_test.astype(np.float64)
    z_train = cohort.latents[rec.train_ids].astype(np.float64)
    z_test = cohort.latents[cohort.test_ids].astype(np.float64)
    gram = x_train.T @ x_train + lam * np.eye(x_train.shape[1])
    weights = solve(gram, x_train.T @ z_train, assume_a="pos")
    pred = x_test @ weights
    ss_res = ((pred - z_test) ** 2).sum()
    ss_tot = ((z_test - z_test.mean(axis=0)) ** 2).sum()
    return float(1.0 - ss_res / ss_tot)


# -- container mapping --------------------------------------------------------


def save_cohort(cohort: Cohort, path) -> None:
    """Serialize a cohort with the reserved container names.

    Ingestable layout: voxels/<subject>/{train,test}, targets/{image,text},
    ids/<subject>/train, ids/test; plus optional latents/z and per-subject
    generator arrays when the cohort is synthetic.
    """
    arrays: dict[str, np.ndarray] = {
        "targets/image": cohort.image_targets,
        "targets/text": cohort.text_targets,
        "ids/test": cohort.test_ids.astype(np.float64),
    }
    if cohort.latents is not None:
        arrays["latents/z"] = cohort.latents
    for sid in cohort.subjects:
        rec = cohort.recordings[sid]
        arrays[f"voxels/{sid}/train"] = rec.train_voxels
        arrays[f"voxels/{sid}/test"] = rec.test_voxels
        arrays[f"ids/{sid}/train"] = rec.train_ids.astype(np.float64)
        if rec.mixing is not None:
            arrays[f"gen/{sid}/mixing"] = rec.mixing
            arrays[f"gen/{sid}/bias"] = rec.bias
    container.save_container(path, arrays, magic=container.DATASET_MAGIC)


def load_cohort(path) -> Cohort:
    """Load a cohort container (synthetic or externally prepared)."""
    arrays = container.load_container(path, magic=container.DATASET_MAGIC)
    subjects = []
    for name in arrays:
        parts = name.split("/")
        if parts[0] == "voxels" and parts[-1] == "train":
            subjects.append(parts[1])
    if not subjects:
        raise ConfigError(f"container {path} holds no voxels/<subject>/train arrays")
    recordings = {}
    for sid in subjects:
        recordings[sid] = SubjectRecordings(
            subject=sid,
            train_ids=arrays[f"ids/{sid}/train"].astype(np.int64),
            train_voxels=arrays[f"voxels/{sid}/train"],
            test_voxels=arrays[f"voxels/{sid}/test"],
            mixing=arrays.get(f"gen/{sid}/mixing"),
            bias=arrays.get(f"gen/{sid}/bias"),
        )
    return Cohort(
        subjects=subjects,
        latents=arrays.get("latents/z"),
        image_targets=arrays["targets/image"],
        text_targets=arrays["targets/text"],
        test_ids=arrays["ids/test"].astype(np.int64),
        recordings=recordings,
    )
