"""Stage II objectives on pseudo labels.

The classifier is an additive-angular-margin softmax head: cosine logits
between the embedding and unit-normalized class rows, margin m added to the
target angle, everything scaled by s. The per-sample negative log-likelihood
is the loss that the gate thresholds.

Samples below the gate threshold train on their pseudo label. Samples at or
above it train on the model's own sharpened clean-view prediction, but only
when that prediction is confident.
"""
from dataclasses import dataclass

import numpy as np

from .dino import encoder_backward, encoder_forward
from .numerics import (
    clamped_log,
    l2_normalize,
    l2_normalize_backward,
    soft_cross_entropy_from_logits,
    softmax_with_temperature,
)

_SIN_FLOOR = 1e-12


@dataclass(frozen=True)
class ObjectiveConfig:
    margin: float = 0.2
    scale: float = 32.0
    tau2: float = 0.5
    eps_c: float = 0.1
    reduction: str = "mean"  # "sum" gives the plain summed form

    def __post_init__(self):
        if not 0 <= self.margin < np.pi / 2:
            raise ValueError("margin must lie in [0, pi/2)")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not 0 < self.tau2 < 1:
            raise ValueError("tau2 must lie in (0, 1)")
        if not self.eps_c > 0:
            raise ValueError("eps_c must be positive")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")


def init_classifier(rng, n_classes, d_emb):
    w = rng.standard_normal((n_classes, d_emb))
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def cosine_matrix(emb, w):
    eh, en = l2_normalize(np.atleast_2d(emb))
    wh, wn = l2_normalize(w)
    return eh @ wh.T, (eh, en, wh, wn)


def cosine_matrix_backward(cache, dcos):
    eh, en, wh, wn = cache
    return l2_normalize_backward(dcos @ wh, eh, en), l2_normalize_backward(dcos.T @ eh, wh, wn)


def margin_logits(cos, labels, margin, scale):
    """s*cos everywhere except s*cos(theta_y + m) in the target column.

    Returns (logits, d target logit / d target cosine).
    """
    rows = np.arange(len(cos))
    c = np.clip(cos[rows, labels], -1.0, 1.0)
    sin = np.sqrt(np.maximum(1.0 - c * c, 0.0))
    logits = scale * cos
    logits[rows, labels] = scale * (c * np.cos(margin) - sin * np.sin(margin))
    # the floor only guards the derivative at cos = +-1
    dtarget = scale * (np.cos(margin) + c * np.sin(margin) / np.maximum(sin, _SIN_FLOOR))
    return logits, dtarget


def nll_from_logits(logits, labels):
    """-log softmax(logits)[label], computed as log1p(sum_j!=y exp(z_j - z_y)) so it stays > 0."""
    rows = np.arange(len(logits))
    diff = logits - logits[rows, labels][:, None]
    diff[rows, labels] = -np.inf
    return np.log1p(np.exp(diff).sum(axis=1))


def aam_forward(emb, w, labels, margin, scale):
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= len(w)):
        raise ValueError("label out of range for the classifier head")
    cos, ccache = cosine_matrix(emb, w)
    logits, dtarget = margin_logits(cos, labels, margin, scale)
    losses = nll_from_logits(logits, labels)
    return losses, logits, (ccache, labels, dtarget, scale)


def aam_backward(cache, dlogits):
    """Backprop d loss / d margin-logits into (d emb, d W)."""
    ccache, labels, dtarget, scale = cache
    rows = np.arange(len(labels))
    dcos = scale * dlogits
    dcos[rows, labels] = dlogits[rows, labels] * dtarget
    return cosine_matrix_backward(ccache, dcos)


def aam_logit_grad(logits, labels, weights):
    """weights[i] * d(-log softmax_y) / d logits for each row."""
    p = softmax_with_temperature(logits)
    p[np.arange(len(labels)), labels] -= 1.0
    return p * weights[:, None]


def aam_per_sample_loss(embedding, w, label, margin=0.2, scale=32.0):
    """Loss and logits for a single embedding."""
    if np.linalg.norm(embedding) == 0:
        raise ValueError("zero-norm embedding")
    losses, logits, _ = aam_forward(np.asarray(embedding, dtype=np.float64)[None, :], w, [label], margin, scale)
    return float(losses[0]), logits[0]


def _reduce_weights(mask, reduction):
    n = int(mask.sum())
    if n == 0:
        return np.zeros(len(mask))
    return mask / n if reduction == "mean" else mask.astype(np.float64)


def dlg_loss(losses, tau, reduction="mean"):
    """Gated classification loss and d loss / d l_i.

    Only samples with l_i < tau count; with none retained the loss is 0.
    """
    losses = np.asarray(losses, dtype=np.float64)
    keep = losses < tau
    w = _reduce_weights(keep, reduction)
    return float((w * losses).sum()), w


def sharpen(p_hat, eps_c):
    return softmax_with_temperature(clamped_log(np.asarray(p_hat, dtype=np.float64)), eps_c)


def lc_mask(losses, p_hat, tau, tau2):
    """High-loss samples whose raw clean-view prediction is confident."""
    return (np.asarray(losses) >= tau) & (np.asarray(p_hat).max(axis=1) > tau2)


def lc_loss(aug_logits, p_hat, losses, tau, tau2, eps_c, reduction="mean"):
    """Label-correction loss on augmented-view logits.

    `p_hat` is the clean-view prediction, a constant. Confidence is tested on
    it before sharpening. Returns (value, d value / d aug_logits, mask).
    """
    mask = lc_mask(losses, p_hat, tau, tau2)
    w = _reduce_weights(mask, reduction)
    target = sharpen(p_hat, eps_c)
    ce, dlogits = soft_cross_entropy_from_logits(target, aug_logits)
    return float((w * ce).sum()), dlogits * w[:, None], mask


def predict_proba(params, x, cfg):
    """Margin-free class posteriors softmax(s*cos) for raw features x."""
    e, _ = encoder_forward(params, np.asarray(x, dtype=np.float64))
    cos, _ = cosine_matrix(e, params["cls.W"])
    return softmax_with_temperature(cfg.scale * cos)


def total_stage2_loss(params, x_aug, labels, p_hat, tau, cfg, use_lc=True):
    """L_DLG + L_LC for one batch.

    params holds the encoder (``enc.*``) and the classifier rows ``cls.W``.
    p_hat is the constant clean-view prediction (ignored when use_lc is
    False). Returns (loss, grads, info) where info carries the per-sample
    losses and the DLG / LC membership masks.
    """
    labels = np.asarray(labels, dtype=np.int64)
    e, enc_cache = encoder_forward(params, np.asarray(x_aug, dtype=np.float64))
    losses, logits, acache = aam_forward(e, params["cls.W"], labels, cfg.margin, cfg.scale)
    l_dlg, w_dlg = dlg_loss(losses, tau, cfg.reduction)
    dlogits = aam_logit_grad(logits, labels, w_dlg)
    de, dw = aam_backward(acache, dlogits)

    l_lc = 0.0
    lc = np.zeros(len(labels), dtype=bool)
    if use_lc:
        ccache = acache[0]
        plain = cfg.scale * (ccache[0] @ ccache[2].T)
        l_lc, dplain, lc = lc_loss(plain, p_hat, losses, tau, cfg.tau2, cfg.eps_c, cfg.reduction)
        de2, dw2 = cosine_matrix_backward(ccache, cfg.scale * dplain)
        de, dw = de + de2, dw + dw2

    grads = encoder_backward(params, enc_cache, de)
    grads["cls.W"] = dw
    grads = {k: grads[k] for k in params}
    info = {"losses": losses, "dlg_mask": losses < tau, "lc_mask": lc, "loss_dlg": l_dlg, "loss_lc": l_lc}
    return l_dlg + l_lc, grads, info
