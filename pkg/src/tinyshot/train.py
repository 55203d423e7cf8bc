"""Distillation training for nested (prefix-usable) embeddings.

The loss stack combines a symmetric InfoNCE contrastive term, a projected
MSE alignment to frozen teacher embeddings, and a nested-prefix term that
re-applies InfoNCE to independently re-normalized embedding prefixes so
truncated embeddings stay usable. A small two-tower student trained on a
synthetic frozen teacher exercises the whole stack end to end on a desk
machine in seconds; every run is a pure function of its config seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .encoder import LayerGraph, LinearLayer, TanhLayer
from .errors import BadTemperature, DimensionTooLarge, NonFiniteLoss, ShapeMismatch

DEFAULT_DIMS = (16, 32, 64, 128, 256)


# -- losses ------------------------------------------------------------------

def _as_var(x) -> Var:
    return x if isinstance(x, Var) else ad.const(np.asarray(x, dtype=np.float64))


def _check_pair(z_img: Var, z_txt: Var):
    if z_img.value.ndim != 2 or z_txt.value.ndim != 2:
        raise ShapeMismatch("embeddings must be N x d matrices")
    if z_img.value.shape != z_txt.value.shape:
        raise ShapeMismatch(
            f"image {z_img.value.shape} and text {z_txt.value.shape} batches disagree"
        )
    if z_img.value.shape[0] < 1:
        raise ShapeMismatch("need at least one pair")


def _check_temperature(temperature: float):
    if not math.isfinite(temperature) or temperature <= 0.0:
        raise BadTemperature(f"temperature must be finite and positive, got {temperature}")


def infonce(z_img, z_txt, temperature: float = 0.07) -> Var:
    """Symmetric InfoNCE with matched pairs on the diagonal.

    Both batches are L2-normalized per row, scored as a similarity matrix
    scaled by 1/temperature, and cross-entropy is averaged over both the
    image->text and text->image directions (the 1/(2N) convention). A single
    pair gives exactly zero; uniform similarities give exactly log N.
    """
    z_img, z_txt = _as_var(z_img), _as_var(z_txt)
    _check_pair(z_img, z_txt)
    _check_temperature(temperature)
    zi = ad.row_normalize(z_img)
    zt = ad.row_normalize(z_txt)
    s = ad.mul_scalar(ad.matmul(zi, ad.transpose(zt)), 1.0 / temperature)
    return ad.mul_scalar(ad.add(ad.ce_diag(s), ad.ce_diag(ad.transpose(s))), 0.5)


def embedding_distill(z_student, z_teacher, w_align) -> Var:
    """Batch-mean squared error between projected student and teacher rows.

    ``w_align`` is the trainable d_student x d_teacher projection shared by
    both modalities of the total loss.
    """
    z_student, w_align = _as_var(z_student), _as_var(w_align)
    teacher = np.asarray(z_teacher, dtype=np.float64)
    if z_student.value.ndim != 2 or teacher.ndim != 2:
        raise ShapeMismatch("student and teacher batches must be N x d matrices")
    if w_align.value.shape != (z_student.value.shape[1], teacher.shape[1]):
        raise ShapeMismatch(
            f"alignment matrix {w_align.value.shape} does not map "
            f"{z_student.value.shape[1]} -> {teacher.shape[1]}"
        )
    if z_student.value.shape[0] != teacher.shape[0]:
        raise ShapeMismatch("student and teacher batch sizes differ")
    n = z_student.value.shape[0]
    diff = ad.sub(ad.matmul(z_student, w_align), ad.const(teacher))
    return ad.mul_scalar(ad.sum_all(ad.mul(diff, diff)), 1.0 / n)


def _check_dims(dims, width: int) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if not dims:
        raise ValueError("dimension ladder is empty")
    if sorted(set(dims)) != list(dims):
        raise ValueError("dimension ladder must be strictly increasing")
    if dims[0] < 1:
        raise ValueError("dimensions must be >= 1")
    if dims[-1] > width:
        raise DimensionTooLarge(f"ladder top {dims[-1]} exceeds embedding width {width}")
    return dims


def matryoshka_loss(z_img, z_txt, dims=DEFAULT_DIMS, temperature: float = 0.07) -> Var:
    """Uniformly weighted InfoNCE over re-normalized embedding prefixes.

    Each ladder dimension d contributes infonce(z[:, :d], ...) at weight
    1/len(dims); normalization happens inside infonce, per prefix.
    """
    z_img, z_txt = _as_var(z_img), _as_var(z_txt)
    _check_pair(z_img, z_txt)
    _check_temperature(temperature)
    dims = _check_dims(dims, z_img.value.shape[1])
    w = 1.0 / len(dims)
    total = None
    for d in dims:
        term = infonce(ad.prefix(z_img, d), ad.prefix(z_txt, d), temperature)
        total = term if total is None else ad.add(total, term)
    return ad.mul_scalar(total, w)


def enhanced_distill(z_student, z_teacher, w_align,
                     lambda_mse: float = 1.0, lambda_cos: float = 1.0) -> Var:
    """Projected MSE plus a direct cosine term on un-projected embeddings.

    The cosine term compares student and teacher rows element-for-element,
    so it is only defined when the two embedding widths are literally equal;
    otherwise ShapeMismatch is raised.
    """
    z_student, w_align = _as_var(z_student), _as_var(w_align)
    teacher = np.asarray(z_teacher, dtype=np.float64)
    if z_student.value.ndim != 2 or teacher.ndim != 2:
        raise ShapeMismatch("student and teacher batches must be N x d matrices")
    if z_student.value.shape[1] != teacher.shape[1]:
        raise ShapeMismatch(
            f"cosine term needs equal widths, got student {z_student.value.shape[1]} "
            f"vs teacher {teacher.shape[1]}"
        )
    mse = embedding_distill(z_student, teacher, w_align)
    n = teacher.shape[0]
    cos_rows = ad.mul(ad.row_normalize(z_student), ad.row_normalize(ad.const(teacher)))
    mean_cos = ad.mul_scalar(ad.sum_all(cos_rows), 1.0 / n)
    cos_loss = ad.add_scalar(ad.mul_scalar(mean_cos, -1.0), 1.0)
    return ad.add(ad.mul_scalar(mse, lambda_mse), ad.mul_scalar(cos_loss, lambda_cos))


@dataclass(frozen=True)
class MatryoshkaConfig:
    """Loss-combination settings (contrastive + alignment + nested prefixes)."""

    dims: tuple[int, ...] = DEFAULT_DIMS
    temperature: float = 0.07
    alpha_emb: float = 1.0
    alpha_mat: float = 0.5


def total_loss(z_img, z_txt, teacher_img, teacher_txt, w_align,
               cfg: MatryoshkaConfig) -> tuple[Var, dict]:
    """Contrastive + alpha_emb * alignment(both sides) + alpha_mat * nested.

    Returns the scalar graph node and a float breakdown whose parts
    recombine to the total exactly as computed.
    """
    z_img, z_txt = _as_var(z_img), _as_var(z_txt)
    contrastive = infonce(z_img, z_txt, cfg.temperature)
    emb = ad.add(
        embedding_distill(z_img, teacher_img, w_align),
        embedding_distill(z_txt, teacher_txt, w_align),
    )
    total = ad.add(contrastive, ad.mul_scalar(emb, cfg.alpha_emb))
    if cfg.dims:
        mat = matryoshka_loss(z_img, z_txt, cfg.dims, cfg.temperature)
        total = ad.add(total, ad.mul_scalar(mat, cfg.alpha_mat))
        mat_value = float(mat.value)
    else:
        mat_value = 0.0
    breakdown = {
        "contrastive": float(contrastive.value),
        "embedding": float(emb.value),
        "matryoshka": mat_value,
        "total": float(total.value),
    }
    return total, breakdown


# -- optimizer and schedule --------------------------------------------------

@dataclass
class AdamWState:
    m: dict
    v: dict
    step: int = 0


def adamw_init(params: dict) -> AdamWState:
    return AdamWState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float,
               weight_decay: float = 0.01, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    state.step += 1
    t = state.step
    for k, p in params.items():
        g = grads[k]
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        m_hat = state.m[k] / (1.0 - beta1**t)
        v_hat = state.v[k] / (1.0 - beta2**t)
        params[k] = p - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p)


def cosine_lr(step: int, total_steps: int, base_lr: float,
              warmup_steps: int = 0, min_lr: float = 0.0) -> float:
    """Linear warmup then half-cosine decay; a pure function of the step."""
    if step < 0 or total_steps <= 0:
        raise ValueError("step must be >= 0 and total_steps > 0")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    t = min(1.0, (step - warmup_steps) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * t))


# -- synthetic teacher and student -------------------------------------------

@dataclass(frozen=True)
class BatchPair:
    """One aligned batch: student inputs plus frozen teacher targets."""

    images: np.ndarray       # (N, d_img_in) student image-tower inputs
    texts: np.ndarray        # (N, d_teacher) teacher text embeddings; these
                             # double as the student text-tower input
    teacher_img: np.ndarray  # (N, d_teacher) teacher image embeddings


@dataclass(frozen=True)
class ToyDataset:
    train: BatchPair
    eval: BatchPair


def make_toy_dataset(seed: int = 42, n_train: int = 512, n_eval: int = 128,
                     latent_dim: int = 32, d_img_in: int = 48,
                     d_teacher: int = 512, noise: float = 0.1) -> ToyDataset:
    """Paired modalities from a shared latent through a frozen random teacher.

    One frozen linear map lifts each latent Gaussian sample to the teacher
    width; modality-specific noise then yields the (unit-norm) teacher image
    and text embeddings, and a separate map produces the raw student
    image-tower input.
    """
    rng = np.random.default_rng(seed)
    teacher = rng.standard_normal((latent_dim, d_teacher)) / np.sqrt(latent_dim)
    lift = rng.standard_normal((latent_dim, d_img_in)) / np.sqrt(latent_dim)

    def draw(n: int) -> BatchPair:
        u = rng.standard_normal((n, latent_dim))
        core = u @ teacher
        teacher_img = core + noise * rng.standard_normal((n, d_teacher))
        texts = core + noise * rng.standard_normal((n, d_teacher))
        teacher_img /= np.linalg.norm(teacher_img, axis=1, keepdims=True)
        texts /= np.linalg.norm(texts, axis=1, keepdims=True)
        images = u @ lift + noise * rng.standard_normal((n, d_img_in))
        return BatchPair(images=images, texts=texts, teacher_img=teacher_img)

    return ToyDataset(train=draw(n_train), eval=draw(n_eval))


def init_student(rng: np.random.Generator, d_img_in: int, d_txt_in: int,
                 hidden: int, d_out: int, d_teacher: int) -> dict:
    """Two Linear-tanh-Linear towers plus the shared alignment projection."""

    def dense(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)

    return {
        "img_w1": dense(d_img_in, hidden), "img_b1": np.zeros(hidden),
        "img_w2": dense(hidden, d_out), "img_b2": np.zeros(d_out),
        "txt_w1": dense(d_txt_in, hidden), "txt_b1": np.zeros(hidden),
        "txt_w2": dense(hidden, d_out), "txt_b2": np.zeros(d_out),
        "w_align": dense(d_out, d_teacher),
    }


def _tower(x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var:
    h = ad.tanh(ad.add(ad.matmul(x, w1), b1))
    return ad.add(ad.matmul(h, w2), b2)


def student_forward(pvars: dict, images, texts) -> tuple[Var, Var]:
    z_img = _tower(_as_var(images), pvars["img_w1"], pvars["img_b1"],
                   pvars["img_w2"], pvars["img_b2"])
    z_txt = _tower(_as_var(texts), pvars["txt_w1"], pvars["txt_b1"],
                   pvars["txt_w2"], pvars["txt_b2"])
    return z_img, z_txt


def student_embed(params: dict, images: np.ndarray, texts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Plain numpy forward of both towers (no graph recording)."""
    def tower(x, w1, b1, w2, b2):
        return np.tanh(x @ w1 + b1) @ w2 + b2

    z_img = tower(np.asarray(images, dtype=np.float64), params["img_w1"],
                  params["img_b1"], params["img_w2"], params["img_b2"])
    z_txt = tower(np.asarray(texts, dtype=np.float64), params["txt_w1"],
                  params["txt_b1"], params["txt_w2"], params["txt_b2"])
    return z_img, z_txt


def retrieval_accuracy(z_img: np.ndarray, z_txt: np.ndarray, d: int) -> float:
    """Image->text top-1 retrieval over prefix d, matched pairs on the diagonal."""
    a = np.asarray(z_img, dtype=np.float64)[:, :d]
    b = np.asarray(z_txt, dtype=np.float64)[:, :d]
    a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    pred = np.argmax(a @ b.T, axis=1)
    return float(np.mean(pred == np.arange(a.shape[0])))


# -- toy training loop -------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Everything a toy run depends on; two runs with equal configs are
    bitwise identical."""

    seed: int = 42
    steps: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_steps: int = 20
    min_lr: float = 0.0
    temperature: float = 0.07
    alpha_emb: float = 1.0
    alpha_mat: float = 0.5
    dims: tuple[int, ...] = (16, 32, 64)
    hidden: int = 128
    d_out: int = 64
    d_teacher: int = 512
    d_img_in: int = 48
    latent_dim: int = 32
    n_train: int = 64
    n_eval: int = 128
    noise: float = 0.1


@dataclass
class TrainResult:
    config: TrainConfig
    loss_history: list
    breakdown_history: list
    lr_history: list
    epoch_loss_before: float
    epoch_loss_after: float
    eval_accuracy: dict
    params: dict

    @property
    def reduction(self) -> float:
        """Fractional drop of the whole-train-set loss over the run."""
        return (self.epoch_loss_before - self.epoch_loss_after) / self.epoch_loss_before


def _loss_cfg(cfg: TrainConfig) -> MatryoshkaConfig:
    return MatryoshkaConfig(dims=cfg.dims, temperature=cfg.temperature,
                            alpha_emb=cfg.alpha_emb, alpha_mat=cfg.alpha_mat)


def epoch_loss(params: dict, batch: BatchPair, cfg: TrainConfig) -> float:
    """Total loss over one full pass (single whole-set batch)."""
    pvars = {k: ad.var(p) for k, p in params.items()}
    z_img, z_txt = student_forward(pvars, batch.images, batch.texts)
    loss, _ = total_loss(z_img, z_txt, batch.teacher_img, batch.texts,
                         pvars["w_align"], _loss_cfg(cfg))
    return float(loss.value)


def train_toy(cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Train the two-tower student against the frozen synthetic teacher.

    Deterministic for a fixed config: dataset, init, batch order, and all
    arithmetic derive from cfg.seed.
    """
    data = make_toy_dataset(seed=cfg.seed, n_train=cfg.n_train, n_eval=cfg.n_eval,
                            latent_dim=cfg.latent_dim, d_img_in=cfg.d_img_in,
                            d_teacher=cfg.d_teacher, noise=cfg.noise)
    rng = np.random.default_rng(cfg.seed + 1)
    params = init_student(rng, d_img_in=cfg.d_img_in, d_txt_in=cfg.d_teacher,
                          hidden=cfg.hidden, d_out=cfg.d_out,
                          d_teacher=cfg.d_teacher)
    state = adamw_init(params)
    loss_cfg = _loss_cfg(cfg)
    before = epoch_loss(params, data.train, cfg)

    loss_history, breakdown_history, lr_history = [], [], []
    for step in range(cfg.steps):
        if cfg.batch_size >= cfg.n_train:
            batch = data.train  # full-batch when the fixture fits in one step
        else:
            idx = rng.integers(0, cfg.n_train, size=cfg.batch_size)
            batch = BatchPair(images=data.train.images[idx],
                              texts=data.train.texts[idx],
                              teacher_img=data.train.teacher_img[idx])
        pvars = {k: ad.var(p) for k, p in params.items()}
        z_img, z_txt = student_forward(pvars, batch.images, batch.texts)
        loss, breakdown = total_loss(z_img, z_txt, batch.teacher_img, batch.texts,
                                     pvars["w_align"], loss_cfg)
        if not math.isfinite(float(loss.value)):
            raise NonFiniteLoss(f"loss diverged at step {step}")
        ad.backward(loss)
        grads = {k: v.grad for k, v in pvars.items()}
        lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup_steps, cfg.min_lr)
        adamw_step(params, grads, state, lr, cfg.weight_decay)
        loss_history.append(float(loss.value))
        breakdown_history.append(breakdown)
        lr_history.append(lr)

    after = epoch_loss(params, data.train, cfg)
    z_img, z_txt = student_embed(params, data.eval.images, data.eval.texts)
    eval_accuracy = {d: retrieval_accuracy(z_img, z_txt, d) for d in cfg.dims}
    return TrainResult(config=cfg, loss_history=loss_history,
                       breakdown_history=breakdown_history, lr_history=lr_history,
                       epoch_loss_before=before, epoch_loss_after=after,
                       eval_accuracy=eval_accuracy, params=params)


def export_vision_tower(params: dict) -> LayerGraph:
    """Package the trained image tower as a serializable two-layer graph."""
    w1 = np.asarray(params["img_w1"], dtype=np.float32)
    b1 = np.asarray(params["img_b1"], dtype=np.float32)
    w2 = np.asarray(params["img_w2"], dtype=np.float32)
    b2 = np.asarray(params["img_b2"], dtype=np.float32)
    layers = (
        LinearLayer(weight=w1, bias=b1),
        TanhLayer(),
        LinearLayer(weight=w2, bias=b2),
    )
    return LayerGraph(layers=layers, input_shape=(1, 1, w1.shape[0]),
                      output_dim=int(w2.shape[1]))


# -- gradient checking -------------------------------------------------------

GRADCHECK_LOSSES = ("infonce", "embedding", "matryoshka", "enhanced", "total")


def _gradcheck_instance(loss_name: str, seed: int):
    """(params dict, loss_fn over Var dict) for one small random instance."""
    rng = np.random.default_rng(seed)
    n = 4
    if loss_name == "infonce":
        params = {"z_img": rng.standard_normal((n, 6)),
                  "z_txt": rng.standard_normal((n, 6))}
        return params, lambda pv: infonce(pv["z_img"], pv["z_txt"], 0.07)
    if loss_name == "embedding":
        teacher = rng.standard_normal((n, 8))
        params = {"z_s": rng.standard_normal((n, 6)),
                  "w": rng.standard_normal((6, 8))}
        return params, lambda pv: embedding_distill(pv["z_s"], teacher, pv["w"])
    if loss_name == "matryoshka":
        params = {"z_img": rng.standard_normal((n, 8)),
                  "z_txt": rng.standard_normal((n, 8))}
        return params, lambda pv: matryoshka_loss(pv["z_img"], pv["z_txt"],
                                                  (2, 4, 8), 0.07)
    if loss_name == "enhanced":
        teacher = rng.standard_normal((n, 6))
        params = {"z_s": rng.standard_normal((n, 6)),
                  "w": rng.standard_normal((6, 6))}
        return params, lambda pv: enhanced_distill(pv["z_s"], teacher, pv["w"],
                                                   1.0, 0.5)
    if loss_name == "total":
        d_img_in, d_teacher, hidden, d_out = 7, 6, 8, 8
        params = init_student(rng, d_img_in, d_teacher, hidden, d_out, d_teacher)
        images = rng.standard_normal((n, d_img_in))
        texts = rng.standard_normal((n, d_teacher))
        teacher_img = rng.standard_normal((n, d_teacher))
        cfg = MatryoshkaConfig(dims=(2, 4, 8), temperature=0.07,
                               alpha_emb=1.0, alpha_mat=0.5)

        def fn(pv):
            z_img, z_txt = student_forward(pv, images, texts)
            loss, _ = total_loss(z_img, z_txt, teacher_img, texts, pv["w_align"], cfg)
            return loss

        return params, fn
    raise ValueError(f"unknown loss {loss_name!r}")


def analytic_grads(loss_fn, params: dict) -> tuple[float, dict]:
    pvars = {k: ad.var(p) for k, p in params.items()}
    loss = loss_fn(pvars)
    ad.backward(loss)
    return float(loss.value), {k: v.grad.copy() for k, v in pvars.items()}


def finite_difference_grads(loss_fn, params: dict, step: float = 1e-5) -> dict:
    """Central differences, element by element, on copies of the params."""
    grads = {}
    for key, p in params.items():
        g = np.zeros_like(np.asarray(p, dtype=np.float64))
        flat = g.ravel()
        base = np.asarray(p, dtype=np.float64).copy()
        for i in range(base.size):
            for sign in (+1.0, -1.0):
                bumped = dict(params)
                pb = base.copy()
                pb.flat[i] += sign * step
                bumped[key] = pb
                pvars = {k: ad.var(v) for k, v in bumped.items()}
                val = float(loss_fn(pvars).value)
                flat[i] += sign * val
        g = (g / (2.0 * step)).reshape(np.shape(p))
        grads[key] = g
    return grads


def max_relative_error(analytic: dict, numeric: dict) -> float:
    """max over elements of |a - n| / max(|a|, |n|, 1)."""
    worst = 0.0
    for key in analytic:
        a, b = analytic[key], numeric[key]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
        worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    return worst


def gradient_check(loss_name: str, seed: int = 42, step: float = 1e-5) -> float:
    """Max relative error between backprop and central differences."""
    params, loss_fn = _gradcheck_instance(loss_name, seed)
    _, analytic = analytic_grads(loss_fn, params)
    numeric = finite_difference_grads(loss_fn, params, step)
    return max_relative_error(analytic, numeric)


def run_gradient_checks(seeds=(42, 123, 456), losses=GRADCHECK_LOSSES) -> dict:
    """{(loss, seed): max relative error} across the whole suite."""
    return {(name, seed): gradient_check(name, seed)
            for name in losses for seed in seeds}
