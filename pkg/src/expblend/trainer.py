"""Experience Blending training loop and the FTF / replay-only baselines.

Per stream batch the full method inserts the batch into R and then runs one
blending step: two clones of M are trained (one on R and E, one on E only)
and their parameters are averaged with weight ``alpha``. The encoder and the
attention layer learn only during the first task; afterwards they are frozen
and every later SBD batch is produced by the frozen pair.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .memory import ReplayMemory, SBDMemory
from .nets import (
    EncoderParams,
    ExtractorParams,
    ModelState,
    Params,
    SAParams,
    classify_e_path,
    classify_r_path,
    encode,
    self_attention,
)
from .sbd import NoiseConfig, generate_sbd

log = logging.getLogger(__name__)

METHODS = ("ours", "replay-only", "ftf-only")


@dataclass
class TrainConfig:
    alpha: float = 0.5
    lr: float = 0.01
    epochs_per_task: int = 10
    batch_size: int = 128
    inner_steps: int = 1
    lam: float = 0.005
    beta: float = 0.1
    per_channel_noise: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        for name in ("lr", "lam", "beta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("epochs_per_task", "batch_size", "inner_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.beta > 1:
            raise ValueError("beta must be <= 1")

    @property
    def noise(self) -> NoiseConfig:
        return NoiseConfig(self.lam, per_channel=self.per_channel_noise)


@dataclass
class TrainerState:
    p_r: EncoderParams
    sa: SAParams
    p_e: ExtractorParams
    m: ModelState
    r: ReplayMemory | None
    e: SBDMemory | None
    rng: np.random.Generator
    noise_rng: np.random.Generator
    task_index: int = 0
    first_task_raw_cache: list = field(default_factory=list)
    step: int = 0
    warnings: list[str] = field(default_factory=list)

    def named_parameters(self) -> dict[str, T.Tensor]:
        from .nets import named_parameters

        return dict(named_parameters(self.p_r, self.sa, self.p_e, self.m))


def init_state(
    seed: int,
    input_shape=(16, 16, 1),
    channels=(8, 16),
    hidden: int = 64,
    num_classes: int = 10,
    extractor: str = "identity",
    sa_residual: bool = False,
    replay_capacity: int | None = 500,
    sbd_budget: int | None = None,
    use_sbd: bool = True,
) -> TrainerState:
    """Fresh networks and memories; every random stream derives from ``seed``."""
    init_ss, train_ss, noise_ss = np.random.SeedSequence(seed).spawn(3)
    init_rng = np.random.default_rng(init_ss)
    p_r = EncoderParams.init(init_rng, input_shape, channels)
    w, h, d = p_r.output_shape
    sa = SAParams.init(init_rng, d, sa_residual)
    p_e = ExtractorParams.init(init_rng, d, extractor)
    m = ModelState.init(init_rng, w * h * d, hidden, num_classes)
    r = ReplayMemory(replay_capacity, input_shape) if replay_capacity else None
    e = SBDMemory(sbd_budget) if use_sbd else None
    return TrainerState(p_r, sa, p_e, m, r, e, np.random.default_rng(train_ss), np.random.default_rng(noise_ss))


def blend_params(pa: Params, pb: Params, alpha: float) -> Params:
    if list(pa) != list(pb) or any(pa[k].shape != pb[k].shape for k in pa):
        raise ValueError("cannot blend structurally different parameter sets")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    # the endpoints return a branch verbatim; the formula would turn -0.0 into +0.0
    if alpha == 0.0:
        return pa.clone()
    if alpha == 1.0:
        return pb.clone()
    return Params(
        (k, T.Tensor._wrap((1.0 - alpha) * pa[k].data + alpha * pb[k].data, pa[k].requires_grad)) for k in pa
    )


def blend(ma: ModelState, mb: ModelState, alpha: float) -> ModelState:
    """(1 - alpha) * ma + alpha * mb, parameter by parameter."""
    return ModelState(blend_params(ma.params, mb.params, alpha))


def _draw(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    return rng.integers(0, n, size=min(batch_size, n))


def _encoder_params(state: TrainerState) -> list[T.Tensor]:
    if not state.p_r.trainable:
        return []
    return [*state.p_r.params.values(), *state.sa.params.values()]


def _r_logits(state: TrainerState, m: ModelState, images) -> T.Tensor:
    return classify_r_path(m, self_attention(state.sa, encode(state.p_r, images)))


def _r_losses(state: TrainerState, images, labels) -> np.ndarray:
    with T.no_grad():
        logits = _r_logits(state, state.m, images).data
    return T.per_sample_cross_entropy(logits, labels)


def _first_occurrence(idx: np.ndarray, values: np.ndarray, into: dict[int, float]) -> None:
    for k, v in zip(idx.tolist(), values.tolist()):
        into.setdefault(k, v)


def experience_blending_step(state: TrainerState, cfg: TrainConfig, history: list | None = None) -> TrainerState:
    """One ExperienceBlending call on the current memories.

    Draw order per inner step (all uniform with replacement from
    ``state.rng``): R batch, E batch for the mixed loss, E batch for the
    E-only loss. If ``history`` is a list, ``(loss_before, loss_after)`` of
    the mixed loss on each inner step's own batch is appended to it.
    """
    r, e = state.r, state.e
    if r is None or e is None or len(r) == 0 or len(e) == 0:
        msg = f"step {state.step}: skipped blending, empty memory (|R|={0 if r is None else len(r)}, |E|={0 if e is None else len(e)})"
        log.warning(msg)
        state.warnings.append(msg)
        return state

    enc = _encoder_params(state)
    m_re, m_e = state.m.clone(), state.m.clone()
    pe_re, pe_e = state.p_e.clone(), state.p_e.clone()
    r_before: dict[int, float] = {}
    e_before: dict[int, float] = {}
    for _ in range(cfg.inner_steps):
        ri = _draw(state.rng, len(r), cfg.batch_size)
        ei = _draw(state.rng, len(e), cfg.batch_size)
        ei2 = _draw(state.rng, len(e), cfg.batch_size)

        # M_{R u E}: replay samples through P_R/SA and F_R, SBD through P_E and F_E
        wrt = [*m_re.params.values(), *pe_re.params.values(), *enc]
        with T.Tape() as tape:
            logits_r = _r_logits(state, m_re, r.images[ri])
            logits_e = classify_e_path(m_re, pe_re, e.features[ei])
            loss = T.add(T.cross_entropy(logits_r, r.labels[ri]), T.cross_entropy(logits_e, e.labels[ei]))
        grads = tape.backward(loss, wrt)
        _first_occurrence(ri, T.per_sample_cross_entropy(logits_r.data, r.labels[ri]), r_before)
        T.sgd_step(wrt, grads, cfg.lr)
        if history is not None:
            with T.no_grad():
                after = T.add(T.cross_entropy(_r_logits(state, m_re, r.images[ri]), r.labels[ri]),
                              T.cross_entropy(classify_e_path(m_re, pe_re, e.features[ei]), e.labels[ei]))
            history.append((loss.item(), after.item()))

        # M_E: SBD only
        wrt = [*m_e.params.values(), *pe_e.params.values()]
        with T.Tape() as tape:
            logits = classify_e_path(m_e, pe_e, e.features[ei2])
            loss = T.cross_entropy(logits, e.labels[ei2])
        grads = tape.backward(loss, wrt)
        if e.budget is not None:
            _first_occurrence(ei2, T.per_sample_cross_entropy(logits.data, e.labels[ei2]), e_before)
        T.sgd_step(wrt, grads, cfg.lr)

    state.m = blend(m_re, m_e, cfg.alpha)
    if state.p_e.trainable:
        state.p_e = ExtractorParams(state.p_e.kind, blend_params(pe_re.params, pe_e.params, cfg.alpha))

    idx = np.fromiter(r_before, dtype=np.int64)
    after = _r_losses(state, r.images[idx], r.labels[idx])
    r.update_importance(idx, np.fromiter(r_before.values(), dtype=np.float64), after, cfg.beta)
    if e_before:
        idx = np.fromiter(e_before, dtype=np.int64)
        with T.no_grad():
            logits = classify_e_path(state.m, state.p_e, e.features[idx]).data
        e.update_importance(idx, np.fromiter(e_before.values(), dtype=np.float64),
                            T.per_sample_cross_entropy(logits, e.labels[idx]), cfg.beta)
    return state


def replay_step(state: TrainerState, cfg: TrainConfig) -> TrainerState:
    """Replay-only baseline: one SGD step of the r-path on an R batch."""
    r = state.r
    if r is None or len(r) == 0:
        state.warnings.append(f"step {state.step}: skipped replay, empty memory")
        return state
    ri = _draw(state.rng, len(r), cfg.batch_size)
    wrt = [*state.m.params.values(), *_encoder_params(state)]
    with T.Tape() as tape:
        logits = _r_logits(state, state.m, r.images[ri])
        loss = T.cross_entropy(logits, r.labels[ri])
    grads = tape.backward(loss, wrt)
    before: dict[int, float] = {}
    _first_occurrence(ri, T.per_sample_cross_entropy(logits.data, r.labels[ri]), before)
    T.sgd_step(wrt, grads, cfg.lr)
    idx = np.fromiter(before, dtype=np.int64)
    after = _r_losses(state, r.images[idx], r.labels[idx])
    r.update_importance(idx, np.fromiter(before.values(), dtype=np.float64), after, cfg.beta)
    return state


def finetune_step(state: TrainerState, images, labels, cfg: TrainConfig) -> TrainerState:
    """FTF-only baseline: one SGD step of the r-path directly on the stream batch."""
    wrt = [*state.m.params.values(), *_encoder_params(state)]
    with T.Tape() as tape:
        loss = T.cross_entropy(_r_logits(state, state.m, images), labels)
    T.sgd_step(wrt, tape.backward(loss, wrt), cfg.lr)
    return state


def _sbd_for(state: TrainerState, batches, cfg: TrainConfig, epoch_tag: int):
    return [
        generate_sbd(state.p_r, state.sa, images, labels, cfg.noise, state.noise_rng, state.task_index, epoch_tag)
        for images, labels in batches
    ]


def train_task(state: TrainerState, batches, cfg: TrainConfig, method: str = "ours", on_epoch_end=None) -> TrainerState:
    """Train on one task of the stream.

    ``on_epoch_end(state, epoch)`` is called after every epoch, once any
    first-task SBD refresh for that epoch has happened.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    first = state.task_index == 0
    state.p_r.set_trainable(first)
    state.sa.set_trainable(first)
    if method == "ours":
        if first:
            state.first_task_raw_cache = [(np.array(x, copy=True), np.array(y, copy=True)) for x, y in batches]
        for sbd in _sbd_for(state, batches, cfg, 0):
            state.e.append(sbd)

    for epoch in range(cfg.epochs_per_task):
        for images, labels in batches:
            if method == "ftf-only":
                finetune_step(state, images, labels, cfg)
            else:
                for x, y in zip(images, labels):
                    state.r.insert(x, int(y))
                if method == "ours":
                    experience_blending_step(state, cfg)
                else:
                    replay_step(state, cfg)
            state.step += 1
        if first and method == "ours":
            state.e.replace_task_entries(0, _sbd_for(state, state.first_task_raw_cache, cfg, epoch + 1))
        if on_epoch_end is not None:
            on_epoch_end(state, epoch)

    if first:
        state.p_r.set_trainable(False)
        state.sa.set_trainable(False)
        state.first_task_raw_cache = []
    state.task_index += 1
    return state
