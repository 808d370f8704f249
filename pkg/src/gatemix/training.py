"""Desk-scale alignment pretraining of the connector.

Only the connector parameters train; everything else is a frozen stand-in:
a fixed random linear pooling map plays the decoder, a fixed random readout
produces token logits over a tiny vocabulary, and synthetic feature/text
pairs share a per-item latent so that alignment is actually learnable. The
optimizer is plain gradient descent, which keeps the update rule exactly
testable (params - lr * grad).

Configs for the later supervised stages are accepted and validated here as
schemas only; nothing in this package executes them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .connector import ConnectorConfig, EncoderFeatures, GateMixerParams, forward, init_params
from .objectives import (
    BatchRepresentations,
    creg_loss,
    generation_loss,
    similarity_matrix,
    stage1_objective,
)
from .tensor import (
    Graph,
    Tensor,
    backward,
    concat,
    finite_diff_check,
    make_rng,
    matmul,
    mean_pool,
)

__all__ = [
    "DivergenceError",
    "SyntheticBatch",
    "TrainConfig",
    "TrainingReport",
    "GDState",
    "FrozenStandins",
    "synth_batch",
    "stage1_loss",
    "train_step",
    "train_stage1",
    "validate_stage_config",
    "STAGE2_REFERENCE_CONFIG",
    "STAGE3_REFERENCE_CONFIG",
]

VOCAB_SIZE = 16
TARGET_LEN = 6

# Seeds for the frozen stand-ins and the fixed latent-to-feature maps. These
# are constants, not knobs: the stand-ins must be identical across runs so
# the freezing contract is checkable bitwise.
_STANDIN_SEED = 7919
_FEATURE_MAP_SEED = 104729

GRAD_CHECK_TOL = 1e-4


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class SyntheticBatch:
    """Paired synthetic features and text representations.

    ``latents[i]`` is the hidden vector that generated both ``feats[i]`` and
    ``txt_reps`` row i; it is exposed so tests can check the pairing.
    """

    feats: list
    target_tokens: list
    txt_reps: Tensor
    latents: np.ndarray


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 4
    lr: float = 0.5
    lam: float = 1.0
    seed: int = 0
    frozen: tuple = ("encoders", "decoder", "readout")

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        frozen = tuple(self.frozen)
        if "gatemixer" in frozen:
            raise ValueError("the connector is the trainable module; it cannot be frozen")
        for required in ("encoders", "decoder", "readout"):
            if required not in frozen:
                raise ValueError(f"stage-1 runs with {required!r} frozen; add it to frozen")
        object.__setattr__(self, "frozen", frozen)


@dataclass
class GDState:
    step: int = 0


@dataclass
class TrainingReport:
    loss_curve: list
    initial_loss: float
    final_loss: float
    grad_check_rel_err: float
    wall_time_s: float

    def to_dict(self) -> dict:
        # wall_time_s stays out of the serialized artifact so repeated runs
        # with the same seed emit byte-identical files.
        return {
            "loss_curve": self.loss_curve,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "grad_check_rel_err": self.grad_check_rel_err,
        }


class FrozenStandins:
    """Frozen decoder/readout stand-ins shared by every training step.

    ``pool_map`` maps the mean-pooled connector output to the pooled image
    representation; ``readout`` maps that representation to vocabulary
    logits. Both are constants drawn once from a fixed seed.
    """

    def __init__(self, d_llm: int, vocab_size: int = VOCAB_SIZE):
        rng = make_rng(_STANDIN_SEED)
        self.pool_map = Tensor(rng.standard_normal((d_llm, d_llm)) / np.sqrt(d_llm))
        self.readout = Tensor(rng.standard_normal((d_llm, vocab_size)) / np.sqrt(d_llm))
        self.vocab_size = vocab_size

    def image_rep(self, h_img0: Tensor) -> Tensor:
        """Pooled image representation as a 1 x d_llm row."""
        pooled = mean_pool(h_img0).reshape((1, h_img0.shape[1]))
        return matmul(pooled, self.pool_map)

    def token_logits(self, rep_row: Tensor, n_tokens: int) -> Tensor:
        """Tile the readout logits across the target positions."""
        row = matmul(rep_row, self.readout)               # 1 x V
        ones = Tensor(np.ones((n_tokens, 1)))
        return matmul(ones, row)                          # T x V


def _feature_maps(cfg: ConnectorConfig) -> tuple:
    rng = make_rng(_FEATURE_MAP_SEED)
    scale = 1.0 / np.sqrt(cfg.d_llm)
    map_v = rng.standard_normal((cfg.d_llm, cfg.n_tokens * cfg.d_v)) * scale
    map_c = rng.standard_normal((cfg.d_llm, cfg.n_tokens * cfg.d_c)) * scale
    map_t = rng.standard_normal((cfg.d_llm, cfg.d_llm)) * scale
    map_k = rng.standard_normal((cfg.d_llm, VOCAB_SIZE)) * scale
    return map_v, map_c, map_t, map_k


def synth_batch(seed: int, b: int, cfg: ConnectorConfig) -> SyntheticBatch:
    """Draw b paired items, each a fixed linear image of a shared latent.

    The latent of item i generates its feature streams, its text
    representation, and its target token (the argmax of a fixed latent
    projection, repeated across positions), so both loss terms have true
    structure to recover; the maps themselves never change between calls.
    """
    if b < 1:
        raise ValueError("batch size must be >= 1")
    map_v, map_c, map_t, map_k = _feature_maps(cfg)
    rng = make_rng(seed)
    latents = rng.standard_normal((b, cfg.d_llm))
    feats = []
    targets = []
    for i in range(b):
        z = latents[i]
        feats.append(
            EncoderFeatures(
                v_v=Tensor((z @ map_v).reshape(cfg.n_tokens, cfg.d_v)),
                v_c=Tensor((z @ map_c).reshape(cfg.n_tokens, cfg.d_c)),
            )
        )
        targets.append([int(np.argmax(z @ map_k))] * TARGET_LEN)
    txt_reps = Tensor(latents @ map_t)
    return SyntheticBatch(feats=feats, target_tokens=targets, txt_reps=txt_reps, latents=latents)


def stage1_loss(
    params: GateMixerParams,
    batch: SyntheticBatch,
    standins: FrozenStandins,
    lam: float = 1.0,
) -> Tensor:
    """Full alignment objective for one batch: mean token loss plus the
    contrastive term over pooled image/text representations."""
    rep_rows = []
    gen_terms = []
    for feats, targets in zip(batch.feats, batch.target_tokens):
        out = forward(feats, params)
        rep = standins.image_rep(out.h_img0)
        rep_rows.append(rep)
        gen_terms.append(generation_loss(standins.token_logits(rep, len(targets)), targets))
    gen = gen_terms[0]
    for term in gen_terms[1:]:
        gen = gen + term
    gen = gen * (1.0 / len(gen_terms))
    img = concat(rep_rows, axis=0)
    creg = creg_loss(similarity_matrix(BatchRepresentations(img=img, txt=batch.txt_reps)))
    return stage1_objective(gen, creg, lam)


def train_step(
    params: GateMixerParams,
    batch: SyntheticBatch,
    opt_state: GDState,
    cfg: TrainConfig,
    standins: FrozenStandins | None = None,
) -> tuple:
    """One gradient-descent step on the connector parameters only.

    Returns (loss value, params, new opt state); params update in place to
    exactly ``p - lr * grad``.
    """
    if standins is None:
        standins = FrozenStandins(params.W2.shape[1])
    params.zero_grads()
    try:
        with Graph() as g:
            loss = stage1_loss(params, batch, standins, lam=cfg.lam)
        value = loss.item()
    except (ValueError, FloatingPointError) as exc:
        # domain guards (log/sqrt/div) fire once parameters explode
        raise DivergenceError(
            f"loss computation failed at step {opt_state.step} "
            f"(batch of {len(batch.feats)}): {exc}"
        ) from exc
    if not np.isfinite(value):
        raise DivergenceError(
            f"non-finite loss at step {opt_state.step} (batch of {len(batch.feats)})"
        )
    backward(g, loss)
    for p in params.tensors():
        p.data -= cfg.lr * p.grad
    return value, params, GDState(step=opt_state.step + 1)


def train_stage1(
    cfg: TrainConfig,
    connector_cfg: ConnectorConfig | None = None,
    checkpoint_path=None,
) -> TrainingReport:
    """Run the alignment stage at desk scale.

    Deterministic under ``cfg.seed``: the same seed reproduces the whole
    loss curve bit for bit. A finite-difference check of the composed
    objective runs at step 0 and must pass before any update. When
    ``checkpoint_path`` is given, the trained connector is saved there in
    the binary checkpoint format.
    """
    ccfg = connector_cfg or ConnectorConfig()
    params = init_params(ccfg, cfg.seed)
    standins = FrozenStandins(ccfg.d_llm)
    batch = synth_batch(cfg.seed, cfg.batch_size, ccfg)

    def objective(ts) -> Tensor:
        return stage1_loss(params, batch, standins, lam=cfg.lam)

    start = time.perf_counter()
    rel_err = finite_diff_check(objective, params.tensors(), eps=1e-5)
    if rel_err > GRAD_CHECK_TOL:
        raise RuntimeError(
            f"gradient check failed at initialization: {rel_err:.3e} > {GRAD_CHECK_TOL:.0e}"
        )

    initial_loss = stage1_loss(params, batch, standins, lam=cfg.lam).item()
    curve = []
    state = GDState()
    for step in range(cfg.steps):
        try:
            value, params, state = train_step(params, batch, state, cfg, standins)
        except DivergenceError as exc:
            raise DivergenceError(f"diverged at step {step}: {exc}") from exc
        curve.append(value)
    final_loss = stage1_loss(params, batch, standins, lam=cfg.lam).item()
    if checkpoint_path is not None:
        from .connector import save_checkpoint

        save_checkpoint(checkpoint_path, ccfg, params)
    return TrainingReport(
        loss_curve=curve,
        initial_loss=initial_loss,
        final_loss=final_loss,
        grad_check_rel_err=rel_err,
        wall_time_s=time.perf_counter() - start,
    )


# ---------------------------------------------------------------------------
# Validation-only schemas for the later (not executable here) training stages.

_STAGE_FIELDS = {
    "stage": int,
    "batch_size": int,
    "peak_learning_rate": float,
    "lr_schedule": str,
    "warmup_ratio": float,
    "weight_decay": float,
    "epochs": int,
    "optimizer": str,
    "precision": str,
    "training_modules": list,
    "data_size": int,
}

_KNOWN_MODULES = {"connector", "llm"}

STAGE2_REFERENCE_CONFIG = {
    "stage": 2,
    "batch_size": 256,
    "peak_learning_rate": 2e-5,
    "lr_schedule": "cosine",
    "warmup_ratio": 0.03,
    "weight_decay": 0.0,
    "epochs": 1,
    "optimizer": "adamw",
    "precision": "bfloat16",
    "training_modules": ["connector", "llm"],
    "data_size": 1_000_000,
}

STAGE3_REFERENCE_CONFIG = {
    "stage": 3,
    "batch_size": 128,
    "peak_learning_rate": 2e-6,
    "lr_schedule": "cosine",
    "warmup_ratio": 0.03,
    "weight_decay": 0.0,
    "epochs": 3,
    "optimizer": "adamw",
    "precision": "bfloat16",
    "training_modules": ["llm"],
    "data_size": 320_000,
}


def validate_stage_config(mapping: dict) -> dict:
    """Check a stage-2/3 config against the schema and return it normalized.

    These configs are declarative only; there is deliberately no way to run
    them from this package.
    """
    out = {}
    for name, typ in _STAGE_FIELDS.items():
        if name not in mapping:
            raise ValueError(f"stage config missing field {name!r}")
        value = mapping[name]
        if typ is float and isinstance(value, int):
            value = float(value)
        if not isinstance(value, typ):
            raise ValueError(f"stage config field {name!r} must be {typ.__name__}")
        out[name] = value
    extra = set(mapping) - set(_STAGE_FIELDS)
    if extra:
        raise ValueError(f"stage config has unknown fields: {sorted(extra)}")
    if out["stage"] not in (2, 3):
        raise ValueError("stage must be 2 or 3 (stage 1 is executable, not a schema)")
    if out["batch_size"] < 1 or out["epochs"] < 1 or out["data_size"] < 1:
        raise ValueError("batch_size, epochs and data_size must be >= 1")
    if out["peak_learning_rate"] <= 0:
        raise ValueError("peak_learning_rate must be positive")
    if not (0.0 <= out["warmup_ratio"] <= 1.0):
        raise ValueError("warmup_ratio must be in [0, 1]")
    if out["weight_decay"] < 0:
        raise ValueError("weight_decay must be >= 0")
    if out["lr_schedule"] != "cosine":
        raise ValueError("lr_schedule must be 'cosine'")
    if out["optimizer"] != "adamw":
        raise ValueError("optimizer must be 'adamw'")
    if out["precision"] not in ("bfloat16", "float32"):
        raise ValueError("precision must be 'bfloat16' or 'float32'")
    modules = set(out["training_modules"])
    if not modules or not modules <= _KNOWN_MODULES:
        raise ValueError(f"training_modules must be a non-empty subset of {sorted(_KNOWN_MODULES)}")
    if out["stage"] == 3 and modules != {"llm"}:
        raise ValueError("stage 3 trains the llm only")
    return out
