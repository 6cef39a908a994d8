"""The cross-subject decoding network.

Per-subject modules (embedder, builder) surround one shared translator:

    embedder:   v -> adapter -> linear(m->h) -> layer_norm -> gelu -> dropout
    builder:    e -> linear(h->m) -> layer_norm -> gelu -> adapter
    translator: e -> [residual block: linear(h->h), norm, gelu, dropout] x n
                  -> image head (h -> tokens*channels), text head likewise

The adapter is a residual low-rank map a(x) = x + Up(Down(x)) with Up
initialized to zero, so it starts as the identity. Parameters live in a
flat name->array dict; forward functions optionally take pre-lifted graph
leaves so a training step can read the gradients afterwards.
"""

import hashlib
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nm
from . import precision
from .errors import ConfigError, DimensionError, UnknownSubjectError
from .numerics import Var


def substream(seed: int, *tags) -> np.random.Generator:
    """Derive a named RNG stream from the root seed.

    String tags hash to stable 32-bit ints; integer tags pass through. The
    derivation is a pure function, so any stream can be reconstructed from
    (seed, tags) alone - this is what makes checkpoint resume bit-exact.
    """
    entropy = [int(seed)]
    for tag in tags:
        if isinstance(tag, (int, np.integer)):
            entropy.append(int(tag))
        else:
            entropy.append(zlib.crc32(str(tag).encode("utf-8")))
    return np.random.default_rng(entropy)


@dataclass(frozen=True)
class ModelConfig:
    pooled_size: int = 8192
    hidden_size: int = 2048
    adapter_rank: int = 128
    n_translator_blocks: int = 4
    image_head_dims: tuple[int, int] = (257, 768)
    text_head_dims: tuple[int, int] = (77, 768)
    dropout_embedder: float = 0.5
    dropout_translator: float = 0.15
    residual: bool = True
    layer_norm_eps: float = 1e-5

    @classmethod
    def desk_scale(cls, **overrides) -> "ModelConfig":
        """Small profile preserving all shape relationships at laptop cost."""
        base = dict(
            pooled_size=256,
            hidden_size=128,
            adapter_rank=16,
            image_head_dims=(17, 32),
            text_head_dims=(5, 32),
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        profile = raw.pop("profile", None)
        if profile not in (None, "desk", "full"):
            raise ConfigError(f"unknown model profile {profile!r}")
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        for key in ("image_head_dims", "text_head_dims"):
            if key in raw:
                raw[key] = tuple(raw[key])
        if profile == "desk":
            return cls.desk_scale(**raw)
        return cls(**raw)

    def validate(self) -> None:
        for name in ("pooled_size", "hidden_size", "adapter_rank", "n_translator_blocks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("image_head_dims", "text_head_dims"):
            tokens, channels = getattr(self, name)
            if tokens < 1 or channels < 1:
                raise ConfigError(f"{name} entries must be >= 1")
        if self.adapter_rank > self.pooled_size:
            raise ConfigError("adapter_rank must not exceed pooled_size")


@dataclass
class SubjectModules:
    """View of one subject's embedder + builder parameter arrays."""

    subject: str
    embedder_adapter_down: np.ndarray
    embedder_adapter_up: np.ndarray
    embedder_linear_w: np.ndarray
    embedder_linear_b: np.ndarray
    embedder_ln_gamma: np.ndarray
    embedder_ln_beta: np.ndarray
    builder_linear_w: np.ndarray
    builder_linear_b: np.ndarray
    builder_ln_gamma: np.ndarray
    builder_ln_beta: np.ndarray
    builder_adapter_down: np.ndarray
    builder_adapter_up: np.ndarray


@dataclass
class TranslatorModules:
    """View of the shared translator's parameter arrays."""

    blocks: list[dict[str, np.ndarray]]
    image_head_w: np.ndarray
    image_head_b: np.ndarray
    text_head_w: np.ndarray
    text_head_b: np.ndarray
    frozen: bool


@dataclass
class ModelState:
    """Whole-model parameter store plus the subject registry."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    subjects: list[str]
    translator_frozen: bool = False
    seed: int = 0

    def subject_param_names(self, subject: str) -> list[str]:
        prefix = f"subject/{subject}/"
        return [name for name in self.params if name.startswith(prefix)]

    def translator_param_names(self) -> list[str]:
        return [name for name in self.params if name.startswith("translator/")]

    def subject_modules(self, subject: str) -> SubjectModules:
        if subject not in self.subjects:
            raise UnknownSubjectError(subject)
        p = self.params
        s = f"subject/{subject}"
        return SubjectModules(
            subject=subject,
            embedder_adapter_down=p[f"{s}/embedder/adapter_down"],
            embedder_adapter_up=p[f"{s}/embedder/adapter_up"],
            embedder_linear_w=p[f"{s}/embedder/linear_w"],
            embedder_linear_b=p[f"{s}/embedder/linear_b"],
            embedder_ln_gamma=p[f"{s}/embedder/ln_gamma"],
            embedder_ln_beta=p[f"{s}/embedder/ln_beta"],
            builder_linear_w=p[f"{s}/builder/linear_w"],
            builder_linear_b=p[f"{s}/builder/linear_b"],
            builder_ln_gamma=p[f"{s}/builder/ln_gamma"],
            builder_ln_beta=p[f"{s}/builder/ln_beta"],
            builder_adapter_down=p[f"{s}/builder/adapter_down"],
            builder_adapter_up=p[f"{s}/builder/adapter_up"],
        )

    def translator_modules(self) -> TranslatorModules:
        p = self.params
        blocks = []
        for k in range(self.config.n_translator_blocks):
            b = f"translator/block{k}"
            blocks.append({
                "linear_w": p[f"{b}/linear_w"],
                "linear_b": p[f"{b}/linear_b"],
                "ln_gamma": p[f"{b}/ln_gamma"],
                "ln_beta": p[f"{b}/ln_beta"],
            })
        return TranslatorModules(
            blocks=blocks,
            image_head_w=p["translator/image_head_w"],
            image_head_b=p["translator/image_head_b"],
            text_head_w=p["translator/text_head_w"],
            text_head_b=p["translator/text_head_b"],
            frozen=self.translator_frozen,
        )


def _uniform_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(precision.dtype())


def _zeros(*shape) -> np.ndarray:
    return np.zeros(shape, dtype=precision.dtype())


def _ones(*shape) -> np.ndarray:
    return np.ones(shape, dtype=precision.dtype())


def _init_subject_params(config: ModelConfig, subject: str, seed: int) -> dict[str, np.ndarray]:
    m, h, r = config.pooled_size, config.hidden_size, config.adapter_rank
    rng = substream(seed, "init", "subject", subject)
    s = f"subject/{subject}"
    return {
        f"{s}/embedder/adapter_down": _uniform_linear(rng, m, r),
        f"{s}/embedder/adapter_up": _zeros(r, m),
        f"{s}/embedder/linear_w": _uniform_linear(rng, m, h),
        f"{s}/embedder/linear_b": _zeros(h),
        f"{s}/embedder/ln_gamma": _ones(h),
        f"{s}/embedder/ln_beta": _zeros(h),
        f"{s}/builder/linear_w": _uniform_linear(rng, h, m),
        f"{s}/builder/linear_b": _zeros(m),
        f"{s}/builder/ln_gamma": _ones(m),
        f"{s}/builder/ln_beta": _zeros(m),
        f"{s}/builder/adapter_down": _uniform_linear(rng, m, r),
        f"{s}/builder/adapter_up": _zeros(r, m),
    }


def _init_translator_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    h = config.hidden_size
    rng = substream(seed, "init", "translator")
    params: dict[str, np.ndarray] = {}
    for k in range(config.n_translator_blocks):
        b = f"translator/block{k}"
        params[f"{b}/linear_w"] = _uniform_linear(rng, h, h)
        params[f"{b}/linear_b"] = _zeros(h)
        params[f"{b}/ln_gamma"] = _ones(h)
        params[f"{b}/ln_beta"] = _zeros(h)
    t_img, c_img = config.image_head_dims
    t_txt, c_txt = config.text_head_dims
    params["translator/image_head_w"] = _uniform_linear(rng, h, t_img * c_img)
    params["translator/image_head_b"] = _zeros(t_img * c_img)
    params["translator/text_head_w"] = _uniform_linear(rng, h, t_txt * c_txt)
    params["translator/text_head_b"] = _zeros(t_txt * c_txt)
    return params


def init_model(config: ModelConfig, subjects: list[str], seed: int) -> ModelState:
    """Fresh model: one embedder/builder per subject, one shared translator."""
    config.validate()
    subjects = [str(s) for s in subjects]
    if not subjects:
        raise ConfigError("at least one subject is required")
    if len(set(subjects)) != len(subjects):
        raise ConfigError(f"duplicate subject ids: {subjects}")
    for sid in subjects:
        if "/" in sid:
            raise ConfigError(f"subject id may not contain '/': {sid!r}")
    params: dict[str, np.ndarray] = {}
    for sid in subjects:
        params.update(_init_subject_params(config, sid, seed))
    params.update(_init_translator_params(config, seed))
    return ModelState(config=config, params=params, subjects=list(subjects), seed=seed)


def param_leaves(state: ModelState, names=None) -> dict[str, Var]:
    """Lift parameters to graph leaves (once per training step)."""
    if names is None:
        names = state.params.keys()
    return {name: Var(state.params[name]) for name in names}


def _get(leaves, state: ModelState, name: str) -> Var:
    if leaves is not None:
        return leaves[name]
    return Var(state.params[name])


def _adapter(x: Var, down: Var, up: Var) -> Var:
    return x + nm.matmul(nm.matmul(x, down), up)


def _check_subject(state: ModelState, subject: str) -> None:
    if subject not in state.subjects:
        raise UnknownSubjectError(subject)


def embed(state: ModelState, subject: str, v, training: bool = False,
          rng: np.random.Generator | None = None, leaves=None) -> Var:
    """Subject-specific embedder: pooled voxels (n x m) -> embedding (n x h)."""
    _check_subject(state, subject)
    cfg = state.config
    v = nm.as_var(v)
    if v.value.ndim != 2 or v.value.shape[1] != cfg.pooled_size:
        raise DimensionError(
            f"embed expects (n, {cfg.pooled_size}) input, got {v.value.shape}"
        )
    s = f"subject/{subject}/embedder"
    x = _adapter(v, _get(leaves, state, f"{s}/adapter_down"), _get(leaves, state, f"{s}/adapter_up"))
    x = nm.affine(x, _get(leaves, state, f"{s}/linear_w"), _get(leaves, state, f"{s}/linear_b"))
    x = nm.layer_norm(x, _get(leaves, state, f"{s}/ln_gamma"), _get(leaves, state, f"{s}/ln_beta"),
                      cfg.layer_norm_eps)
    x = nm.gelu(x)
    return nm.dropout(x, cfg.dropout_embedder, training, rng)


def build(state: ModelState, subject: str, e, training: bool = False,
          rng: np.random.Generator | None = None, leaves=None) -> Var:
    """Subject-specific builder, the embedder's reverse: (n x h) -> (n x m)."""
    _check_subject(state, subject)
    cfg = state.config
    e = nm.as_var(e)
    if e.value.ndim != 2 or e.value.shape[1] != cfg.hidden_size:
        raise DimensionError(
            f"build expects (n, {cfg.hidden_size}) input, got {e.value.shape}"
        )
    s = f"subject/{subject}/builder"
    x = nm.affine(e, _get(leaves, state, f"{s}/linear_w"), _get(leaves, state, f"{s}/linear_b"))
    x = nm.layer_norm(x, _get(leaves, state, f"{s}/ln_gamma"), _get(leaves, state, f"{s}/ln_beta"),
                      cfg.layer_norm_eps)
    x = nm.gelu(x)
    return _adapter(x, _get(leaves, state, f"{s}/adapter_down"), _get(leaves, state, f"{s}/adapter_up"))


def translate(state: ModelState, e, training: bool = False,
              rng: np.random.Generator | None = None, leaves=None) -> tuple[Var, Var]:
    """Shared translator: embedding -> predicted (image, text) token grids."""
    cfg = state.config
    e = nm.as_var(e)
    if e.value.ndim != 2 or e.value.shape[1] != cfg.hidden_size:
        raise DimensionError(
            f"translate expects (n, {cfg.hidden_size}) input, got {e.value.shape}"
        )
    x = e
    for k in range(cfg.n_translator_blocks):
        b = f"translator/block{k}"
        y = nm.affine(x, _get(leaves, state, f"{b}/linear_w"), _get(leaves, state, f"{b}/linear_b"))
        y = nm.layer_norm(y, _get(leaves, state, f"{b}/ln_gamma"), _get(leaves, state, f"{b}/ln_beta"),
                          cfg.layer_norm_eps)
        y = nm.gelu(y)
        y = nm.dropout(y, cfg.dropout_translator, training, rng)
        x = x + y if cfg.residual else y
    n = e.value.shape[0]
    t_img, c_img = cfg.image_head_dims
    t_txt, c_txt = cfg.text_head_dims
    img = nm.affine(x, _get(leaves, state, "translator/image_head_w"),
                    _get(leaves, state, "translator/image_head_b"))
    txt = nm.affine(x, _get(leaves, state, "translator/text_head_w"),
                    _get(leaves, state, "translator/text_head_b"))
    return nm.reshape(img, (n, t_img, c_img)), nm.reshape(txt, (n, t_txt, c_txt))


def reset_subject(state: ModelState, subject: str, seed: int) -> ModelState:
    """Re-initialize (or add) one subject's modules; everything else is shared.

    Returns a new state; arrays of untouched modules are shared bit-identically.
    """
    subject = str(subject)
    if "/" in subject:
        raise ConfigError(f"subject id may not contain '/': {subject!r}")
    params = dict(state.params)
    fresh = _init_subject_params(state.config, subject, seed)
    params.update(fresh)
    subjects = list(state.subjects)
    if subject not in subjects:
        subjects.append(subject)
    return replace(state, params=params, subjects=subjects)


def set_translator_frozen(state: ModelState, frozen: bool) -> ModelState:
    """Toggle the optimizer freeze on translator parameters.

    Forward and backward passes are unaffected; gradients are still
    computed through the translator, just never applied.
    """
    return replace(state, translator_frozen=bool(frozen))


def params_hash(state: ModelState, names: list[str]) -> str:
    """Order-stable content hash of the named parameter arrays."""
    digest = hashlib.blake2s()
    for name in sorted(names):
        digest.update(name.encode("utf-8"))
        digest.update(state.params[name].tobytes())
    return digest.hexdigest()


def translator_hash(state: ModelState) -> str:
    return params_hash(state, state.translator_param_names())
