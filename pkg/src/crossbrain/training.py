"""Cross-subject pretraining, reset-tuning adaptation, optimizer, checkpoints.

Every stochastic choice (shuffles, partner picks, dropout masks, eval
distractors) is drawn from a named substream of the single run seed, keyed
by epoch and step. Training is therefore a pure function of
(config, cohort, seed), which is what makes identical runs byte-identical
and checkpoint resume exact.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import container, model as mdl, numerics as nm, syntheval
from .data import AGGREGATIONS, Batch, Cohort, batch_iter
from .errors import ConfigError
from .losses import LossReport, LossWeights, cycle_loss, modality_loss, recon_loss, total_loss
from .model import ModelConfig, ModelState, substream

CSV_HEADER = "epoch,split,image,text,rec,cyc,total,two_way,top1"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 600
    batch_size: int = 50
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    tau: float = 0.125
    seed: int = 0
    eval_every: int = 0
    eval_trials: int = 50
    # ablation switches
    enable_mse: bool = True
    enable_rec_cyc: bool = True
    aggregation: str = "max"
    normalize_contrastive: bool = True
    symmetric_cycle: bool = False
    stop_gradient_cycle: bool = False
    pseudo_augment: bool = True
    pseudo_supervised: bool = False

    @classmethod
    def adaptation(cls, **overrides) -> "TrainConfig":
        base = dict(epochs=200)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        if "weights" in raw:
            raw["weights"] = LossWeights(**raw["weights"])
        return cls(**raw)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")
        self.weights.validate()


@dataclass
class OptimState:
    """Adam moment accumulators with per-parameter step counters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: dict[str, int]


def create_optim_state(params: dict[str, np.ndarray]) -> OptimState:
    return OptimState(
        m={name: np.zeros_like(p) for name, p in params.items()},
        v={name: np.zeros_like(p) for name, p in params.items()},
        step={name: 0 for name in params},
    )


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray | None],
    optim: OptimState,
    lr: float,
    wd: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    frozen: frozenset = frozenset(),
) -> tuple[dict[str, np.ndarray], OptimState]:
    """Adam update with decoupled weight decay and bias-corrected moments.

    Parameters that are frozen or received no gradient this step are left
    untouched (moments included). Arrays are never mutated in place: updated
    parameters are new objects and the optimizer state swaps in new arrays.
    """
    b1, b2 = betas
    new_params = dict(params)
    for name, g in grads.items():
        if name in frozen or g is None:
            continue
        t = optim.step[name] + 1
        m = b1 * optim.m[name] + (1.0 - b1) * g
        v = b2 * optim.v[name] + (1.0 - b2) * (g * g)
        m_hat = m * (1.0 / (1.0 - b1**t))
        v_hat = v * (1.0 / (1.0 - b2**t))
        p = params[name]
        new_params[name] = p - lr * (m_hat / (np.sqrt(v_hat) + eps) + wd * p)
        optim.m[name] = m
        optim.v[name] = v
        optim.step[name] = t
    return new_params, optim


def config_fingerprint(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    train_dict = asdict(train_cfg)
    # run length is not part of the step semantics: a resumed run may extend it
    del train_dict["epochs"]
    blob = json.dumps(
        {"model": asdict(model_cfg), "train": train_dict},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    return hashlib.blake2s(blob, digest_size=16).hexdigest()


# -- loss graphs ---------------------------------------------------------------


def _frozen_names(state: ModelState, extra_frozen_subjects=()) -> frozenset:
    names = []
    if state.translator_frozen:
        names.extend(state.translator_param_names())
    for sid in extra_frozen_subjects:
        names.extend(state.subject_param_names(sid))
    return frozenset(names)


def _supervised_terms(state, leaves, batch: Batch, cfg: TrainConfig, rng):
    e = mdl.embed(state, batch.subject, batch.voxels, training=True, rng=rng, leaves=leaves)
    pred_img, pred_txt = mdl.translate(state, e, training=True, rng=rng, leaves=leaves)
    image = modality_loss(pred_img, batch.image_targets, cfg.tau,
                          include_mse=cfg.enable_mse, normalize=cfg.normalize_contrastive)
    text = modality_loss(pred_txt, batch.text_targets, cfg.tau,
                         include_mse=cfg.enable_mse, normalize=cfg.normalize_contrastive)
    return e, image, text


def _cycle_term(state, leaves, e_src, partner: str, cfg: TrainConfig, rng):
    """One cycle leg: rebuild the source embedding through the partner's voxel space."""
    anchor = nm.detach(e_src) if cfg.stop_gradient_cycle else e_src
    v_partner = mdl.build(state, partner, anchor, training=True, rng=rng, leaves=leaves)
    e_partner = mdl.embed(state, partner, v_partner, training=True, rng=rng, leaves=leaves)
    return cycle_loss(anchor, e_partner)


def pretrain_step(
    state: ModelState,
    optim: OptimState,
    batch: Batch,
    partner: str,
    cfg: TrainConfig,
    rng: np.random.Generator,
    step_index: int = 0,
    partner_batch: Batch | None = None,
) -> tuple[ModelState, OptimState, LossReport]:
    """One optimizer update on the full training objective.

    The batch's subject is the cycle source; ``partner`` is the second
    subject of the cycle (may equal the source in single-subject runs).
    ``partner_batch`` feeds the reverse leg when symmetric cycling is on.
    """
    leaves = mdl.param_leaves(state)
    e_a, image, text = _supervised_terms(state, leaves, batch, cfg, rng)
    rec = cyc = None
    want_rec = cfg.enable_rec_cyc and cfg.weights.w_rec > 0
    want_cyc = cfg.enable_rec_cyc and cfg.weights.w_cyc > 0
    if want_rec:
        v_hat = mdl.build(state, batch.subject, e_a, training=True, rng=rng, leaves=leaves)
        rec = recon_loss(v_hat, batch.voxels)
    if want_cyc:
        cyc = _cycle_term(state, leaves, e_a, partner, cfg, rng)
        if cfg.symmetric_cycle and partner_batch is not None:
            e_b = mdl.embed(state, partner, partner_batch.voxels, training=True, rng=rng, leaves=leaves)
            back = _cycle_term(state, leaves, e_b, batch.subject, cfg, rng)
            cyc = (cyc + back) * 0.5
    loss, report = total_loss(image, text, rec, cyc, cfg.weights, step=step_index)
    loss.backward()
    grads = {name: leaf.grad for name, leaf in leaves.items()}
    params, optim = optimizer_step(
        state.params, grads, optim, cfg.lr, cfg.weight_decay,
        betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps, frozen=_frozen_names(state),
    )
    return replace(state, params=params), optim, report


def adapt_step(
    state: ModelState,
    optim: OptimState,
    real_batch: Batch,
    cycle_partner: str | None,
    pseudo_batch: Batch | None,
    cfg: TrainConfig,
    rng: np.random.Generator,
    frozen: frozenset,
    step_index: int = 0,
) -> tuple[ModelState, OptimState, LossReport]:
    """One adaptation update: real-batch losses plus pseudo-augmented losses.

    The pseudo batch comes from a previously trained subject p; its trusted
    embedding is rebuilt in the new subject's voxel space (v' = builder of
    the new subject applied to embed_p) and the converted sample is
    regulated by the reconstruction and cycle terms.
    """
    new_subject = real_batch.subject
    leaves = mdl.param_leaves(state)
    e_new, image, text = _supervised_terms(state, leaves, real_batch, cfg, rng)
    rec = cyc = None
    want_rec = cfg.enable_rec_cyc and cfg.weights.w_rec > 0
    want_cyc = cfg.enable_rec_cyc and cfg.weights.w_cyc > 0
    if want_rec:
        v_hat = mdl.build(state, new_subject, e_new, training=True, rng=rng, leaves=leaves)
        rec = recon_loss(v_hat, real_batch.voxels)
    if want_cyc:
        partner = cycle_partner if cycle_partner is not None else new_subject
        cyc = _cycle_term(state, leaves, e_new, partner, cfg, rng)
    if pseudo_batch is not None and (want_rec or want_cyc):
        e_p = mdl.embed(state, pseudo_batch.subject, pseudo_batch.voxels,
                        training=True, rng=rng, leaves=leaves)
        anchor = nm.detach(e_p) if cfg.stop_gradient_cycle else e_p
        v_conv = mdl.build(state, new_subject, anchor, training=True, rng=rng, leaves=leaves)
        e_conv = mdl.embed(state, new_subject, v_conv, training=True, rng=rng, leaves=leaves)
        if want_cyc:
            pseudo_cyc = cycle_loss(anchor, e_conv)
            cyc = pseudo_cyc if cyc is None else cyc + pseudo_cyc
        if want_rec:
            v_rebuilt = mdl.build(state, new_subject, e_conv, training=True, rng=rng, leaves=leaves)
            pseudo_rec = recon_loss(v_rebuilt, v_conv)
            rec = pseudo_rec if rec is None else rec + pseudo_rec
        if cfg.pseudo_supervised:
            p_img, p_txt = mdl.translate(state, e_conv, training=True, rng=rng, leaves=leaves)
            image = image + modality_loss(p_img, pseudo_batch.image_targets, cfg.tau,
                                          include_mse=cfg.enable_mse,
                                          normalize=cfg.normalize_contrastive)
            text = text + modality_loss(p_txt, pseudo_batch.text_targets, cfg.tau,
                                        include_mse=cfg.enable_mse,
                                        normalize=cfg.normalize_contrastive)
    loss, report = total_loss(image, text, rec, cyc, cfg.weights, step=step_index)
    loss.backward()
    grads = {name: leaf.grad for name, leaf in leaves.items()}
    params, optim = optimizer_step(
        state.params, grads, optim, cfg.lr, cfg.weight_decay,
        betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps, frozen=frozen,
    )
    return replace(state, params=params), optim, report


# -- checkpoints ---------------------------------------------------------------


def _encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _decode_text(array: np.ndarray) -> str:
    return array.astype(np.uint8).tobytes().decode("utf-8")


def save_checkpoint(path, state: ModelState, optim: OptimState, train_cfg: TrainConfig,
                    epoch: int, best_metric: float = -1.0) -> None:
    """Serialize model + optimizer + run position into an MBCK container."""
    cfg = state.config
    fingerprint = config_fingerprint(cfg, train_cfg)
    arrays: dict[str, np.ndarray] = {}
    meta_scalars = {
        "meta/epoch": float(epoch),
        "meta/seed_lo": float(int(state.seed) & 0xFFFFFFFF),
        "meta/seed_hi": float(int(state.seed) >> 32),
        "meta/frozen": float(state.translator_frozen),
        "meta/best_metric": float(best_metric),
        "meta/model/pooled_size": float(cfg.pooled_size),
        "meta/model/hidden_size": float(cfg.hidden_size),
        "meta/model/adapter_rank": float(cfg.adapter_rank),
        "meta/model/n_translator_blocks": float(cfg.n_translator_blocks),
        "meta/model/image_tokens": float(cfg.image_head_dims[0]),
        "meta/model/image_channels": float(cfg.image_head_dims[1]),
        "meta/model/text_tokens": float(cfg.text_head_dims[0]),
        "meta/model/text_channels": float(cfg.text_head_dims[1]),
        "meta/model/dropout_embedder": float(cfg.dropout_embedder),
        "meta/model/dropout_translator": float(cfg.dropout_translator),
        "meta/model/residual": float(cfg.residual),
        "meta/model/layer_norm_eps": float(cfg.layer_norm_eps),
        "meta/train/tau": float(train_cfg.tau),
        "meta/train/aggregation": float(AGGREGATIONS.index(train_cfg.aggregation)),
        "meta/train/normalize_contrastive": float(train_cfg.normalize_contrastive),
        "meta/train/eval_trials": float(train_cfg.eval_trials),
    }
    for name, value in meta_scalars.items():
        arrays[name] = np.asarray(value, dtype=np.float64)
    arrays["meta/fingerprint"] = _encode_text(fingerprint)
    for i, sid in enumerate(state.subjects):
        arrays[f"meta/subjects/{i:03d}"] = _encode_text(sid)
    for name, p in state.params.items():
        arrays[f"param/{name}"] = p
    for name in state.params:
        arrays[f"optim/m/{name}"] = optim.m[name]
        arrays[f"optim/v/{name}"] = optim.v[name]
        arrays[f"optim/step/{name}"] = np.asarray(float(optim.step[name]), dtype=np.float64)
    container.save_container(path, arrays, magic=container.CHECKPOINT_MAGIC)


def load_checkpoint(path) -> tuple[ModelState, OptimState, dict]:
    """Rebuild model + optimizer state; meta carries run position and eval config."""
    arrays = container.load_container(path, magic=container.CHECKPOINT_MAGIC)

    def scalar(name):
        return float(arrays[name])

    cfg = ModelConfig(
        pooled_size=int(scalar("meta/model/pooled_size")),
        hidden_size=int(scalar("meta/model/hidden_size")),
        adapter_rank=int(scalar("meta/model/adapter_rank")),
        n_translator_blocks=int(scalar("meta/model/n_translator_blocks")),
        image_head_dims=(int(scalar("meta/model/image_tokens")), int(scalar("meta/model/image_channels"))),
        text_head_dims=(int(scalar("meta/model/text_tokens")), int(scalar("meta/model/text_channels"))),
        dropout_embedder=scalar("meta/model/dropout_embedder"),
        dropout_translator=scalar("meta/model/dropout_translator"),
        residual=bool(scalar("meta/model/residual")),
        layer_norm_eps=scalar("meta/model/layer_norm_eps"),
    )
    subjects = []
    i = 0
    while f"meta/subjects/{i:03d}" in arrays:
        subjects.append(_decode_text(arrays[f"meta/subjects/{i:03d}"]))
        i += 1
    params = {name[len("param/"):]: arr for name, arr in arrays.items() if name.startswith("param/")}
    optim = OptimState(
        m={name: arrays[f"optim/m/{name}"] for name in params},
        v={name: arrays[f"optim/v/{name}"] for name in params},
        step={name: int(float(arrays[f"optim/step/{name}"])) for name in params},
    )
    seed = int(scalar("meta/seed_lo")) | (int(scalar("meta/seed_hi")) << 32)
    state = ModelState(
        config=cfg, params=params, subjects=subjects,
        translator_frozen=bool(scalar("meta/frozen")), seed=seed,
    )
    meta = {
        "epoch": int(scalar("meta/epoch")),
        "seed": seed,
        "best_metric": scalar("meta/best_metric"),
        "fingerprint": _decode_text(arrays["meta/fingerprint"]),
        "tau": scalar("meta/train/tau"),
        "aggregation": AGGREGATIONS[int(scalar("meta/train/aggregation"))],
        "normalize_contrastive": bool(scalar("meta/train/normalize_contrastive")),
        "eval_trials": int(scalar("meta/train/eval_trials")),
    }
    return state, optim, meta


# -- training loops ------------------------------------------------------------


@dataclass
class TrainResult:
    state: ModelState
    optim: OptimState
    history: list[dict]
    csv_path: Path | None = None
    final_path: Path | None = None
    best_path: Path | None = None
    rows_used: int = 0


def _epoch_schedule(cohort: Cohort, subjects: list[str], cfg: TrainConfig,
                    pooled_size: int, epoch: int, subset: int | None) -> list[Batch]:
    """Round-robin interleave of each subject's shuffled batches."""
    lists = {}
    for sid in subjects:
        lists[sid] = list(batch_iter(cohort, sid, cfg.batch_size, pooled_size,
                                     cfg.seed, epoch, cfg.aggregation, subset))
    longest = max(len(v) for v in lists.values())
    schedule = []
    for j in range(longest):
        for sid in subjects:
            if j < len(lists[sid]):
                schedule.append(lists[sid][j])
    return schedule


def _mean_report(reports: list[LossReport], epoch: int) -> dict:
    def mean(attr):
        return float(np.mean([getattr(r, attr) for r in reports])) if reports else 0.0

    return {
        "epoch": epoch, "split": "train",
        "image": mean("image"), "text": mean("text"), "rec": mean("rec"),
        "cyc": mean("cyc"), "total": mean("total"), "two_way": None, "top1": None,
    }


def _csv_row(row: dict) -> str:
    def fmt(x):
        return "" if x is None else repr(float(x))

    return (f"{row['epoch']},{row['split']},{fmt(row['image'])},{fmt(row['text'])},"
            f"{fmt(row['rec'])},{fmt(row['cyc'])},{fmt(row['total'])},"
            f"{fmt(row['two_way'])},{fmt(row['top1'])}")


def _write_csv(path: Path, history: list[dict]) -> None:
    lines = [CSV_HEADER] + [_csv_row(row) for row in history]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _run_eval(state: ModelState, cohort: Cohort, subjects: list[str], cfg: TrainConfig,
              epoch: int, fingerprint: str) -> dict:
    report = syntheval.evaluate(
        state, cohort, split="test", subjects=subjects, tau=cfg.tau,
        aggregation=cfg.aggregation, trials=cfg.eval_trials, seed=cfg.seed,
        fingerprint=fingerprint,
    )
    return {
        "epoch": epoch, "split": "test", "image": None, "text": None, "rec": None,
        "cyc": None, "total": None,
        "two_way": report.mean["two_way"], "top1": report.mean["top1"],
    }


def pretrain(
    state: ModelState,
    cohort: Cohort,
    cfg: TrainConfig,
    subjects: list[str] | None = None,
    out_dir=None,
    subset: int | None = None,
    log_name: str = "pretrain",
    resume=None,
) -> TrainResult:
    """Full pretraining loop over randomly paired subjects.

    Per step, the source subject rotates round-robin and the cycle partner
    is drawn uniformly from the remaining subjects. Writes a per-epoch CSV
    plus best-by-validation and final checkpoints when ``out_dir`` is given.
    Pass ``resume`` (a checkpoint path) to continue a run bit-exactly; the
    stored config fingerprint must match.
    """
    cfg.validate()
    subjects = list(subjects) if subjects is not None else list(state.subjects)
    for sid in subjects:
        if sid not in state.subjects:
            raise ConfigError(f"subject {sid!r} not registered in the model")
    fingerprint = config_fingerprint(state.config, cfg)
    optim = create_optim_state(state.params)
    start_epoch = 0
    best_metric = -1.0
    history: list[dict] = []
    if resume is not None:
        state, optim, meta = load_checkpoint(resume)
        if meta["fingerprint"] != fingerprint:
            raise ConfigError(
                "resume refused: config fingerprint mismatch "
                f"(checkpoint {meta['fingerprint']}, current {fingerprint})"
            )
        start_epoch = meta["epoch"]
        best_metric = meta["best_metric"]

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{log_name}.csv" if out_dir is not None else None
    best_path = out_dir / "best.mbck" if out_dir is not None else None
    final_path = out_dir / "final.mbck" if out_dir is not None else None

    rows_used = 0
    want_symmetric = cfg.symmetric_cycle and cfg.enable_rec_cyc and cfg.weights.w_cyc > 0
    for epoch in range(start_epoch, cfg.epochs):
        schedule = _epoch_schedule(cohort, subjects, cfg, state.config.pooled_size, epoch, subset)
        rows_used = sum(len(b.stimulus_ids) for b in schedule)
        reports = []
        # the reverse cycle leg draws the partner's data from an independent shuffle
        partner_iters: dict[str, object] = {}
        for step, batch in enumerate(schedule):
            others = [s for s in subjects if s != batch.subject]
            partner_rng = substream(cfg.seed, "partner", epoch, step)
            partner = others[partner_rng.integers(len(others))] if others else batch.subject
            partner_batch = None
            if want_symmetric and partner != batch.subject:
                if partner not in partner_iters:
                    partner_iters[partner] = batch_iter(
                        cohort, partner, cfg.batch_size, state.config.pooled_size,
                        cfg.seed + 1, epoch, cfg.aggregation)
                partner_batch = next(partner_iters[partner], None)
                if partner_batch is None:
                    partner_iters[partner] = batch_iter(
                        cohort, partner, cfg.batch_size, state.config.pooled_size,
                        cfg.seed + 1, epoch, cfg.aggregation)
                    partner_batch = next(partner_iters[partner])
            rng = substream(cfg.seed, "dropout", epoch, step)
            state, optim, report = pretrain_step(
                state, optim, batch, partner, cfg, rng, step_index=step,
                partner_batch=partner_batch,
            )
            reports.append(report)
        history.append(_mean_report(reports, epoch))
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            row = _run_eval(state, cohort, subjects, cfg, epoch, fingerprint)
            history.append(row)
            if row["two_way"] >= best_metric:
                best_metric = row["two_way"]
                if best_path is not None:
                    save_checkpoint(best_path, state, optim, cfg, epoch + 1, best_metric)
    if final_path is not None:
        save_checkpoint(final_path, state, optim, cfg, cfg.epochs, best_metric)
        if best_path is not None and not best_path.exists():
            save_checkpoint(best_path, state, optim, cfg, cfg.epochs, best_metric)
    if csv_path is not None:
        _write_csv(csv_path, history)
    return TrainResult(state, optim, history, csv_path, final_path, best_path,
                       rows_used=rows_used // max(len(subjects), 1))


def adapt_new_subject(
    checkpoint_path,
    cohort: Cohort,
    new_subject: str,
    cfg: TrainConfig,
    subset: int | None = None,
    out_dir=None,
    log_name: str = "adapt",
    freeze_translator: bool = True,
) -> TrainResult:
    """Reset-tuning adaptation of a pretrained model to one new subject.

    The shared translator is frozen (bit-exact across the run) and the new
    subject's embedder/builder start from reset parameters. Each step uses
    one real batch of the new subject plus, when pseudo augmentation is on,
    one equal-size batch from a previously trained subject (sources cycle
    round-robin), converted into the new subject's voxel space and
    regulated by the reconstruction and cycle terms. Old subjects' modules
    stay frozen throughout. ``freeze_translator=False`` gives the
    full-tuning ablation (translator keeps training).
    """
    cfg.validate()
    state, _, meta = load_checkpoint(checkpoint_path)
    old_subjects = [s for s in state.subjects if s != new_subject]
    if cfg.pseudo_augment and cfg.enable_rec_cyc and not old_subjects:
        raise ConfigError("pseudo augmentation needs previously trained subjects in the checkpoint")
    state = mdl.set_translator_frozen(state, freeze_translator)
    state = mdl.reset_subject(state, new_subject, cfg.seed)
    optim = create_optim_state(state.params)
    frozen = _frozen_names(state, extra_frozen_subjects=old_subjects)
    fingerprint = config_fingerprint(state.config, cfg)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{log_name}.csv" if out_dir is not None else None
    best_path = out_dir / "adapted_best.mbck" if out_dir is not None else None
    final_path = out_dir / "adapted_final.mbck" if out_dir is not None else None

    m = state.config.pooled_size
    best_metric = -1.0
    history: list[dict] = []
    rows_used = 0
    use_pseudo = cfg.pseudo_augment and cfg.enable_rec_cyc and bool(old_subjects)
    for epoch in range(cfg.epochs):
        real_batches = list(batch_iter(cohort, new_subject, cfg.batch_size, m,
                                       cfg.seed, epoch, cfg.aggregation, subset))
        rows_used = sum(len(b.stimulus_ids) for b in real_batches)
        pseudo_iters = {
            sid: batch_iter(cohort, sid, cfg.batch_size, m, cfg.seed + 1, epoch, cfg.aggregation)
            for sid in old_subjects
        }
        reports = []
        for step, batch in enumerate(real_batches):
            partner = None
            if old_subjects:
                partner_rng = substream(cfg.seed, "adapt-partner", epoch, step)
                partner = old_subjects[partner_rng.integers(len(old_subjects))]
            pseudo_batch = None
            if use_pseudo:
                source = old_subjects[step % len(old_subjects)]
                pseudo_batch = next(pseudo_iters[source], None)
                if pseudo_batch is None:
                    pseudo_iters[source] = batch_iter(cohort, source, cfg.batch_size, m,
                                                      cfg.seed + 1, epoch, cfg.aggregation)
                    pseudo_batch = next(pseudo_iters[source])
                if len(pseudo_batch.stimulus_ids) > len(batch.stimulus_ids):
                    pseudo_batch = Batch(
                        subject=pseudo_batch.subject,
                        voxels=pseudo_batch.voxels[: len(batch.stimulus_ids)],
                        image_targets=pseudo_batch.image_targets[: len(batch.stimulus_ids)],
                        text_targets=pseudo_batch.text_targets[: len(batch.stimulus_ids)],
                        stimulus_ids=pseudo_batch.stimulus_ids[: len(batch.stimulus_ids)],
                    )
            rng = substream(cfg.seed, "adapt-dropout", epoch, step)
            state, optim, report = adapt_step(
                state, optim, batch, partner, pseudo_batch, cfg, rng, frozen, step_index=step,
            )
            reports.append(report)
        history.append(_mean_report(reports, epoch))
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            row = _run_eval(state, cohort, [new_subject], cfg, epoch, fingerprint)
            history.append(row)
            if row["two_way"] >= best_metric:
                best_metric = row["two_way"]
                if best_path is not None:
                    save_checkpoint(best_path, state, optim, cfg, epoch + 1, best_metric)
    if final_path is not None:
        save_checkpoint(final_path, state, optim, cfg, cfg.epochs, best_metric)
        if best_path is not None and not best_path.exists():
            save_checkpoint(best_path, state, optim, cfg, cfg.epochs, best_metric)
    if csv_path is not None:
        _write_csv(csv_path, history)
    return TrainResult(state, optim, history, csv_path, final_path, best_path, rows_used=rows_used)
