"""Training procedures: forward multimodal, backward unimodal, and cyclic.

The cyclic procedure chains two registration networks. The trainable forward
network warps the moving image onto the fixed one. A frozen, pretrained
backward network then tries to warp that result back onto the original moving
image. How well the round trip recovers the moving image serves as the forward
network's regularizer, with gradients flowing through the frozen network's
operations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter, zoom

from . import tensor as T
from .evaluation import ORGANS, dice, warp_labels
from .losses import REGULARIZERS, MindConfig, field_regularizer, mind_loss
from .net import NetWidths, RegNetParams, init_params, regnet_forward
from .synthdata import Pair
from .tensor import NonFiniteError, ShapeError, Tensor
from .warp import Volume, warp_image

logger = logging.getLogger(__name__)

__all__ = [
    "REG_KINDS",
    "DEFAULT_SWEEP_WEIGHTS",
    "TrainConfig",
    "TrainingError",
    "TrainResult",
    "Adam",
    "forward_loss",
    "backward_pretrain_loss",
    "cyclic_loss",
    "loss_terms",
    "train",
    "train_forward_cyclic",
    "predict_field",
    "ClassicalOptions",
    "ClassicalResult",
    "CLASSICAL_VARIANTS",
    "classical_register",
    "make_pretraining_pairs",
    "SweepResult",
    "sweep",
]

REG_KINDS = ("none",) + REGULARIZERS + ("cyclic",)
DEFAULT_SWEEP_WEIGHTS = (0.1, 0.5, 1.0, 1.5, 2.0, 2.5)


class TrainingError(RuntimeError):
    """Training hit a non-finite loss or an unusable configuration."""


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.5
    beta: float = 0.5
    reg_kind: str = "none"
    reg_weight: float = 0.0
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 1
    batch: int = 1
    seed: int = 0
    mind: MindConfig = MindConfig()

    def __post_init__(self):
        if self.reg_kind not in REG_KINDS:
            raise ValueError(f"reg_kind must be one of {REG_KINDS}, got '{self.reg_kind}'")
        for name in ("alpha", "beta", "reg_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch != 1:
            raise ValueError("only batch size 1 is supported")


def _image(x) -> Tensor:
    """Volumes and bare spatial arrays gain a channel axis; tensors pass through."""
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Volume):
        return x.as_tensor()
    return Tensor(np.asarray(x, dtype=np.float64)[None])


def _field(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(getattr(x, "data", x))


def _terms_forward(fixed, moving, fld, cfg: TrainConfig) -> Tuple[Tensor, Optional[Tensor]]:
    if cfg.reg_kind == "cyclic":
        raise ValueError("forward_loss does not handle reg_kind 'cyclic'; use cyclic_loss")
    sim = mind_loss(_image(fixed), warp_image(_image(moving), fld), cfg.mind)
    if cfg.reg_kind == "none":
        return sim, None
    return sim, T.scale(field_regularizer(cfg.reg_kind, fld), cfg.reg_weight)


def forward_loss(fixed, moving, field, cfg: TrainConfig) -> Tensor:
    """MIND(fixed, moving warped by field) + reg_weight * hand-crafted regularizer."""
    sim, reg = _terms_forward(fixed, moving, _field(field), cfg)
    return sim if reg is None else T.add(sim, reg)


def _terms_backward(m_ct, w_ct, fld, cfg: TrainConfig):
    sim = mind_loss(_image(m_ct), warp_image(_image(w_ct), fld), cfg.mind)
    return sim, T.scale(field_regularizer("l2_grad", fld), cfg.beta)


def backward_pretrain_loss(m_ct, w_ct, field, cfg: TrainConfig) -> Tensor:
    """MIND(mCT, wCT warped by field') + beta * L2 gradient penalty."""
    sim, reg = _terms_backward(m_ct, w_ct, _field(field), cfg)
    return T.add(sim, reg)


def _check_frozen(params: RegNetParams):
    if any(t.requires_grad for t in params.tensors()):
        raise ValueError("backward network parameters must be frozen (see RegNetParams.frozen)")


def _terms_cyclic(f_mr, m_ct, f_params, b_params, cfg: TrainConfig):
    _check_frozen(b_params)
    f_mr, m_ct = _image(f_mr), _image(m_ct)
    fwd = regnet_forward(m_ct, f_mr, f_params)
    w_ct = warp_image(m_ct, fwd)
    sim = mind_loss(f_mr, w_ct, cfg.mind)
    back = regnet_forward(w_ct, m_ct, b_params)
    cyc_ct = warp_image(w_ct, back)
    return sim, T.scale(mind_loss(m_ct, cyc_ct, cfg.mind), cfg.alpha)


def cyclic_loss(f_mr, m_ct, f_params: RegNetParams, frozen_b_params: RegNetParams, cfg: TrainConfig) -> Tensor:
    """MIND(fMR, wCT) + alpha * MIND(mCT, cycCT) through the frozen backward network."""
    sim, reg = _terms_cyclic(f_mr, m_ct, f_params, frozen_b_params, cfg)
    return T.add(sim, reg)


def loss_terms(role: str, pair: Pair, params: RegNetParams, cfg: TrainConfig, frozen=None):
    """(similarity, regularizer or None) for one training pair."""
    if role == "backward":
        fld = regnet_forward(_image(pair.moving), _image(pair.fixed), params)
        return _terms_backward(pair.fixed, pair.moving, fld, cfg)
    if role != "forward":
        raise ValueError(f"unknown network role '{role}'")
    if cfg.reg_kind == "cyclic":
        return _terms_cyclic(pair.fixed, pair.moving, params, frozen, cfg)
    fld = regnet_forward(_image(pair.moving), _image(pair.fixed), params)
    return _terms_forward(pair.fixed, pair.moving, fld, cfg)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else 0.0
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


@dataclass
class TrainResult:
    params: RegNetParams
    epoch_losses: List[float]
    history: List[dict] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1]


def train(
    role: str,
    data: Sequence[Pair],
    cfg: TrainConfig,
    frozen: Optional[RegNetParams] = None,
    widths: NetWidths = NetWidths(),
    init: Optional[RegNetParams] = None,
) -> TrainResult:
    """Adam, one pair per step, seeded shuffling each epoch.

    ``history`` holds one row per step with keys epoch, step, total, sim_term
    and reg_term. A non-finite value aborts with a :class:`TrainingError`
    naming the epoch, step and term.
    """
    if len(data) == 0:
        raise TrainingError("cannot train on an empty pair set")
    if role == "forward" and cfg.reg_kind == "cyclic":
        if frozen is None:
            raise TrainingError("cyclic regularization needs frozen backward-network parameters")
        _check_frozen(frozen)
    ndim = data[0].moving.ndim
    init_seed, shuffle_seed = np.random.SeedSequence(cfg.seed).generate_state(2)
    params = init.copy() if init is not None else init_params(ndim, widths, int(init_seed))
    rng = np.random.default_rng(int(shuffle_seed))
    opt = Adam(params.tensors(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    epoch_losses, history = [], []
    for epoch in range(1, cfg.epochs + 1):
        totals = []
        for step, i in enumerate(rng.permutation(len(data)), start=1):
            try:
                sim, reg = loss_terms(role, data[i], params, cfg, frozen)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch} step {step} (op '{exc.op}')") from exc
            total = sim if reg is None else T.add(sim, reg)
            for name, term in (("sim_term", sim), ("reg_term", reg), ("total", total)):
                if term is not None and not math.isfinite(term.item()):
                    raise TrainingError(f"non-finite {name} at epoch {epoch} step {step}")
            T.backward(total)
            opt.step()
            history.append(
                {
                    "epoch": epoch,
                    "step": step,
                    "total": total.item(),
                    "sim_term": sim.item(),
                    "reg_term": 0.0 if reg is None else reg.item(),
                }
            )
            totals.append(total.item())
        epoch_losses.append(float(np.mean(totals)))
        logger.info("%s epoch %d/%d loss %.5f", role, epoch, cfg.epochs, epoch_losses[-1])
    return TrainResult(params, epoch_losses, history)


def train_forward_cyclic(
    data: Sequence[Pair], frozen_b_params: RegNetParams, cfg: TrainConfig, widths: NetWidths = NetWidths()
) -> TrainResult:
    """Forward network trained with the frozen backward network as regularizer."""
    return train("forward", data, replace(cfg, reg_kind="cyclic"), frozen=frozen_b_params, widths=widths)


def predict_field(params: RegNetParams, moving, fixed) -> np.ndarray:
    return regnet_forward(_image(moving), _image(fixed), params.frozen()).data


# -- classical stand-in registrar --------------------------------------------


@dataclass(frozen=True)
class ClassicalOptions:
    steps: int = 150
    step_size: float = 0.5
    smooth_weight: float = 0.5
    field_presmooth_sigma: float = 1.5
    levels: int = 3
    patience: int = 10


@dataclass
class ClassicalResult:
    field: np.ndarray
    losses: List[float]
    best_losses: List[float]
    diverged: bool = False

    @property
    def best_loss(self) -> float:
        return self.best_losses[-1]


# Two presets standing in for the two classical registration methods used to
# manufacture pretraining pairs: a sharper, more elastic one and a smoother one.
CLASSICAL_VARIANTS = (
    ClassicalOptions(steps=150, step_size=0.25, smooth_weight=0.5, field_presmooth_sigma=2.5),
    ClassicalOptions(steps=150, step_size=0.5, smooth_weight=1.0, field_presmooth_sigma=2.0),
)


def _classical_objective(moving: Tensor, fixed: Tensor, u: Tensor, opts: ClassicalOptions, mind: MindConfig):
    loss = mind_loss(fixed, warp_image(moving, u), mind)
    if opts.smooth_weight > 0:
        loss = T.add(loss, T.scale(field_regularizer("l2_grad", u), opts.smooth_weight))
    return loss


def _downsample(a: np.ndarray) -> np.ndarray:
    """2x block mean over the spatial axes of a channel-first array."""
    shape = [a.shape[0]]
    for n in a.shape[1:]:
        shape += [n // 2, 2]
    return a.reshape(shape).mean(axis=tuple(range(2, 2 * a.ndim - 1, 2)))


def _upsample_field(u: np.ndarray) -> np.ndarray:
    """Linear 2x upsampling consistent with block-mean cell centres; doubles magnitudes."""
    return 2.0 * np.stack([zoom(c, 2, order=1, mode="nearest", grid_mode=True) for c in u])


def _descend(mov, fix, u, opts, mind, losses, best_losses):
    """Max-normalized smoothed gradient steps at one resolution level.

    Returns the best field seen and whether the patience limit was hit.
    """
    step = opts.step_size
    best_u, best = u.copy(), math.inf
    prev, rises = math.inf, 0
    for it in range(opts.steps + 1):
        ut = Tensor(u, requires_grad=True)
        loss = _classical_objective(mov, fix, ut, opts, mind)
        value = loss.item()
        losses.append(value)
        if value < best:
            best, best_u = value, u.copy()
        best_losses.append(best)
        if value > prev:
            rises += 1
            step *= 0.5
            if rises >= opts.patience:
                return best_u, True
        else:
            rises = 0
        prev = value
        if it == opts.steps:
            break
        T.backward(loss)
        g = ut.grad
        if opts.field_presmooth_sigma > 0:
            g = np.stack([gaussian_filter(c, opts.field_presmooth_sigma, mode="nearest") for c in g])
        peak = np.abs(g).max()
        if peak == 0:
            break
        u = u - step * g / peak
    return best_u, False


def classical_register(
    moving, fixed, opts: ClassicalOptions = ClassicalOptions(), mind: MindConfig = MindConfig()
) -> ClassicalResult:
    """Coarse-to-fine gradient descent on a dense displacement field.

    Each level halves the resolution by block averaging. Within a level every
    step moves the field by at most ``step_size`` voxels along its
    Gaussian-smoothed gradient; a step that raises the objective halves the
    step size. After ``patience`` consecutive rises the level stops, keeps its
    best field, and the result is flagged ``diverged``. The returned field is
    never worse than the zero field in the full-resolution objective.
    ``losses``/``best_losses`` trace the full-resolution level.
    """
    if opts.steps < 1:
        raise ValueError("classical_register needs steps >= 1")
    mov, fix = _image(moving), _image(fixed)
    if mov.shape != fix.shape:
        raise ShapeError(f"classical_register: moving {mov.shape} vs fixed {fix.shape}")
    min_extent = 2 * mind.patch_radius + 3
    pyramid = [(mov, fix)]
    while len(pyramid) < opts.levels:
        m, f = pyramid[-1]
        if any(n % 2 or n // 2 < min_extent for n in m.shape[1:]):
            break
        pyramid.append((Tensor(_downsample(m.data)), Tensor(_downsample(f.data))))

    u = np.zeros((mov.ndim - 1,) + pyramid[-1][0].shape[1:])
    diverged = False
    for level, (m, f) in enumerate(reversed(pyramid)):
        if level:
            u = _upsample_field(u)
        losses, best_losses = [], []
        u, hit = _descend(m, f, u, opts, mind, losses, best_losses)
        if hit:
            diverged = True
            logger.warning("classical_register: objective kept rising at level %d; keeping best so far", level)

    zero = np.zeros_like(u)
    if _classical_objective(mov, fix, Tensor(zero), opts, mind).item() < best_losses[-1]:
        u = zero
    return ClassicalResult(u, losses, best_losses, diverged)


def make_pretraining_pairs(
    raw: Sequence[Pair], variants: Sequence[ClassicalOptions] = CLASSICAL_VARIANTS, mind: MindConfig = MindConfig()
) -> List[Pair]:
    """(wCT, mCT) pairs from classical registration, then the same with roles swapped.

    wCT is the moving image warped by each variant's field onto the fixed
    image. The result holds ``len(raw) * len(variants) * 2`` entries.
    """
    if len(variants) < 1:
        raise ValueError("make_pretraining_pairs needs at least one registrar variant")
    forward = []
    for pair in raw:
        for opts in variants:
            res = classical_register(pair.moving, pair.fixed, opts, mind)
            w_ct = warp_image(pair.moving[None], res.field).data[0]
            w_labels = None if pair.moving_labels is None else warp_labels(pair.moving_labels, res.field)
            forward.append(
                Pair(moving=w_ct, fixed=pair.moving, moving_labels=w_labels, fixed_labels=pair.moving_labels, spacing=pair.spacing)
            )
    swapped = [
        Pair(moving=p.fixed, fixed=p.moving, moving_labels=p.fixed_labels, fixed_labels=p.moving_labels, spacing=p.spacing)
        for p in forward
    ]
    return forward + swapped


# -- weight sweep -------------------------------------------------------------


@dataclass
class SweepResult:
    cells: List[dict]
    models: Dict[tuple, RegNetParams] = field(default_factory=dict)

    def table(self) -> Dict[tuple, float]:
        return {(c["kind"], c["weight"]): c["mean_dice"] for c in self.cells}

    def _ranked(self, cells):
        ok = [c for c in cells if c["error"] is None]
        if not ok:
            raise TrainingError("every sweep cell failed")
        # highest Dice first; ties go to the smaller weight
        return sorted(ok, key=lambda c: (-c["mean_dice"], c["weight"]))[0]

    def argmax(self) -> dict:
        return self._ranked(self.cells)

    def best(self, kind: str) -> dict:
        return self._ranked([c for c in self.cells if c["kind"] == kind])


def mean_dice(params: RegNetParams, pairs: Sequence[Pair], labels=ORGANS) -> float:
    scores = []
    for p in pairs:
        warped = warp_labels(p.moving_labels, predict_field(params, p.moving, p.fixed))
        scores += [dice(warped, p.fixed_labels, lab) for lab in labels]
    return float(np.mean(scores))


def sweep(
    reg_kinds: Sequence[str],
    weights: Sequence[float],
    train_data: Sequence[Pair],
    eval_data: Sequence[Pair],
    cfg: TrainConfig,
    frozen: Optional[RegNetParams] = None,
    widths: NetWidths = NetWidths(),
) -> SweepResult:
    """Train one forward model per (kind, weight) cell and score its mean organ Dice.

    For ``cyclic`` the swept weight is alpha. A failing cell is recorded with
    its error message and NaN Dice instead of aborting the sweep.
    """
    if len(weights) == 0:
        raise ValueError("sweep needs at least one weight")
    result = SweepResult(cells=[])
    for kind in reg_kinds:
        for w in weights:
            if kind == "cyclic":
                cell_cfg = replace(cfg, reg_kind=kind, alpha=float(w))
            else:
                cell_cfg = replace(cfg, reg_kind=kind, reg_weight=float(w))
            cell = {"kind": kind, "weight": float(w), "mean_dice": math.nan, "final_loss": math.nan, "error": None}
            try:
                res = train("forward", train_data, cell_cfg, frozen=frozen, widths=widths)
                cell["final_loss"] = res.final_loss
                cell["mean_dice"] = mean_dice(res.params, eval_data)
                result.models[(kind, float(w))] = res.params
            except TrainingError as exc:
                cell["error"] = str(exc)
                logger.warning("sweep cell %s/%s failed: %s", kind, w, exc)
            result.cells.append(cell)
    return result


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d.pop("mind")
    return d
