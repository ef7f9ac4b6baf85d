"""Primitives de couches différentiables du réseau Tiramisu"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import as_strided

from app.core.errors import (
    ConfigurationError, DegenerateError, EmptyLossError, ShapeError
)
from app.core.tensor import Tensor, as_tensor, record_op

MODES = ('train', 'eval')


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ConfigurationError(f"Mode inconnu: {mode!r} (attendu: train ou eval)")
    return mode


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, H, W) -> colonnes (N, C*kh*kw, ho*wo)"""
    n, c = x.shape[:2]
    s_n, s_c, s_h, s_w = x.strides
    patches = as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s_n, s_c, s_h, s_w, stride * s_h, stride * s_w),
        writeable=False
    )
    return patches.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, shape: Tuple[int, ...], kh: int, kw: int,
            stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint de _im2col: accumule les colonnes dans une image de forme `shape`"""
    n, c = shape[:2]
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


def conv2d(input, kernel, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Convolution 2D (corrélation croisée) via im2col

    Args:
        input: Tenseur [N, Cin, H, W]
        kernel: Poids [Cout, Cin, kH, kW]
        bias: Biais [Cout] ou None
        stride: Pas (>= 1)
        pad: Remplissage de zéros symétrique

    Returns:
        Tenseur [N, Cout, H', W']
    """
    x, w = as_tensor(input), as_tensor(kernel)
    b = as_tensor(bias) if bias is not None else None
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d attend des tenseurs 4D: entrée {x.shape}, noyau {w.shape}")
    n, c_in, h, wd = x.shape
    c_out, k_cin, kh, kw = w.shape
    if k_cin != c_in:
        raise ShapeError(f"Canaux incompatibles: entrée {x.shape}, noyau {w.shape}")
    if stride < 1:
        raise ConfigurationError(f"stride doit être >= 1 (reçu {stride})")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(f"Noyau {w.shape} plus grand que l'entrée {x.shape} (pad={pad})")

    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(wd, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = w.data.reshape(c_out, -1)
    out = np.matmul(w2, cols).reshape(n, c_out, ho, wo)
    if b is not None:
        out = out + b.data.reshape(1, c_out, 1, 1)

    def grad_fn(g):
        g2 = g.reshape(n, c_out, ho * wo)
        grad_w = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        grad_cols = np.matmul(w2.T, g2)
        grad_xp = _col2im(grad_cols, xp.shape, kh, kw, stride, ho, wo)
        grad_x = grad_xp[:, :, pad:pad + h, pad:pad + wd] if pad else grad_xp
        grad_b = g.sum(axis=(0, 2, 3), dtype=np.float64) if b is not None else None
        return grad_x, grad_w, grad_b

    inputs = (x, w, b) if b is not None else (x, w)
    return record_op('conv2d', inputs, out, lambda g: grad_fn(g)[:len(inputs)])


def transposed_conv2d(input, kernel, stride: int = 1, bias=None) -> Tensor:
    """Convolution transposée, adjointe de conv2d sans remplissage

    Le noyau a la même disposition que celui de la convolution dont on prend
    l'adjoint: [Cin, Cout, kH, kW] où Cin est le nombre de canaux de l'entrée.
    Taille de sortie: (H - 1) * stride + kH.
    """
    x, w = as_tensor(input), as_tensor(kernel)
    b = as_tensor(bias) if bias is not None else None
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"transposed_conv2d attend des tenseurs 4D: entrée {x.shape}, noyau {w.shape}")
    n, c_in, h, wd = x.shape
    k_cin, c_out, kh, kw = w.shape
    if k_cin != c_in:
        raise ShapeError(f"Canaux incompatibles: entrée {x.shape}, noyau {w.shape}")
    if stride < 1:
        raise ConfigurationError(f"stride doit être >= 1 (reçu {stride})")

    ho, wo = (h - 1) * stride + kh, (wd - 1) * stride + kw
    w2 = w.data.reshape(c_in, -1)
    x2 = x.data.reshape(n, c_in, h * wd)
    cols = np.matmul(w2.T, x2)
    out = _col2im(cols, (n, c_out, ho, wo), kh, kw, stride, h, wd)
    if b is not None:
        out = out + b.data.reshape(1, c_out, 1, 1)

    def grad_fn(g):
        grad_cols = _im2col(np.ascontiguousarray(g), kh, kw, stride, h, wd)
        grad_x = np.matmul(w2, grad_cols).reshape(x.shape)
        grad_w = np.tensordot(x2, grad_cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        grad_b = g.sum(axis=(0, 2, 3), dtype=np.float64) if b is not None else None
        return grad_x, grad_w, grad_b

    inputs = (x, w, b) if b is not None else (x, w)
    return record_op('transposed_conv2d', inputs, out, lambda g: grad_fn(g)[:len(inputs)])


@dataclass
class RunningStats:
    """Statistiques glissantes d'une normalisation par lot"""
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> 'RunningStats':
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(input, gamma, beta, running_stats: RunningStats, mode: str = 'train',
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Normalisation par lot sur les axes (N, H, W), canal par canal

    En mode train, normalise avec les statistiques du lot et met à jour
    `running_stats`; en mode eval, utilise les statistiques glissantes.
    """
    x, gm, bt = as_tensor(input), as_tensor(gamma), as_tensor(beta)
    check_mode(mode)
    n, c, h, w = x.shape
    count = n * h * w
    shape = (1, c, 1, 1)

    if mode == 'train':
        if count < 2:
            raise DegenerateError(f"Variance dégénérée: un seul élément par canal (shape={x.shape})")
        x64 = x.data.astype(np.float64)
        mean = x64.mean(axis=(0, 2, 3))
        var = x64.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x64 - mean.reshape(shape)) * inv_std.reshape(shape)

        unbiased = var * count / (count - 1)
        running_stats.mean[...] = (1 - momentum) * running_stats.mean + momentum * mean
        running_stats.var[...] = (1 - momentum) * running_stats.var + momentum * unbiased
    else:
        inv_std = 1.0 / np.sqrt(running_stats.var.astype(np.float64) + eps)
        x_hat = (x.data - running_stats.mean.reshape(shape)) * inv_std.reshape(shape)

    out = x_hat * gm.data.reshape(shape) + bt.data.reshape(shape)

    def grad_fn(g):
        g64 = g.astype(np.float64)
        grad_gamma = (g64 * x_hat).sum(axis=(0, 2, 3))
        grad_beta = g64.sum(axis=(0, 2, 3))
        d_xhat = g64 * gm.data.reshape(shape)
        if mode == 'train':
            grad_x = (inv_std.reshape(shape) / count) * (
                count * d_xhat
                - d_xhat.sum(axis=(0, 2, 3), keepdims=True)
                - x_hat * (d_xhat * x_hat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            grad_x = d_xhat * inv_std.reshape(shape)
        return grad_x, grad_gamma, grad_beta

    return record_op('batch_norm', (x, gm, bt), out, grad_fn)


def relu(input) -> Tensor:
    x = as_tensor(input)
    mask = x.data > 0

    def grad_fn(g):
        return (g * mask,)

    return record_op('relu', (x,), x.data * mask, grad_fn)


def max_pool2d(input, k: int = 2, stride: int = 2) -> Tensor:
    """Max-pooling; le gradient va au premier maximum (ordre ligne)"""
    x = as_tensor(input)
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"Fenêtre {k}x{k} plus grande que l'entrée {x.shape}")
    ho, wo = conv_output_size(h, k, stride, 0), conv_output_size(w, k, stride, 0)
    data = np.ascontiguousarray(x.data)
    s_n, s_c, s_h, s_w = data.strides
    windows = as_strided(
        data,
        shape=(n, c, ho, wo, k, k),
        strides=(s_n, s_c, stride * s_h, stride * s_w, s_h, s_w),
        writeable=False
    ).reshape(n, c, ho, wo, k * k)
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        grad_x = np.zeros(x.shape, dtype=g.dtype)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            grad_x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * (argmax == idx)
        return (grad_x,)

    return record_op('max_pool2d', (x,), out, grad_fn)


def concat_channels(a, b, *more) -> Tensor:
    """Concaténation selon l'axe des canaux"""
    tensors = [as_tensor(t) for t in (a, b) + more]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"Concaténation impossible: {ref} et {t.shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=1)

    def grad_fn(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return record_op('concat_channels', tuple(tensors), out, grad_fn)


def crop_spatial(input, height: int, width: int) -> Tensor:
    """Recadre (coin supérieur gauche) à height x width"""
    x = as_tensor(input)
    if height > x.shape[2] or width > x.shape[3]:
        raise ShapeError(f"Recadrage {height}x{width} impossible sur {x.shape}")
    if (height, width) == x.shape[2:]:
        return x

    def grad_fn(g):
        grad_x = np.zeros(x.shape, dtype=g.dtype)
        grad_x[:, :, :height, :width] = g
        return (grad_x,)

    return record_op('crop', (x,), x.data[:, :, :height, :width], grad_fn)


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    """Softmax stabilisé (calcul en float64)"""
    shifted = np.asarray(logits, dtype=np.float64)
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, labels: np.ndarray, ignore_value: int = 255) -> Tensor:
    """Entropie croisée moyenne sur les pixels non ignorés

    Args:
        logits: Tenseur [N, C, H, W]
        labels: Entiers [N, H, W] dans [0, C-1] ou égaux à ignore_value
        ignore_value: Valeur des pixels exclus de la perte

    Returns:
        Tenseur scalaire
    """
    z = as_tensor(logits)
    labels = np.asarray(labels)
    n, c, h, w = z.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"Étiquettes {labels.shape} incompatibles avec les logits {z.shape}")
    valid = labels != ignore_value
    count = int(valid.sum())
    if count == 0:
        raise EmptyLossError("Tous les pixels sont ignorés: perte vide")
    out_of_range = valid & ((labels < 0) | (labels >= c))
    if out_of_range.any():
        bad = int(labels[out_of_range][0])
        raise ConfigurationError(f"Classe {bad} présente dans les étiquettes mais absente de la configuration ({c} classes)")

    shifted = z.data.astype(np.float64)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(shifted, safe[:, None], axis=1)[:, 0]
    nll = (log_norm - picked) * valid
    loss = np.asarray(nll.sum() / count)

    def grad_fn(g):
        probs = np.exp(shifted - log_norm[:, None])
        np.put_along_axis(probs, safe[:, None], np.take_along_axis(probs, safe[:, None], axis=1) - 1.0, axis=1)
        probs *= valid[:, None]
        return (probs * (float(g) / count),)

    return record_op('softmax_cross_entropy', (z,), loss, grad_fn)
