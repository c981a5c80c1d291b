"""Differentiable SO(3)/SE(3) kernels on torch tensors (float64)."""
import torch

_SMALL = 1e-8


def hat(w):
    z = torch.zeros_like(w[..., 0])
    return torch.stack(
        [
            torch.stack([z, -w[..., 2], w[..., 1]], -1),
            torch.stack([w[..., 2], z, -w[..., 0]], -1),
            torch.stack([-w[..., 1], w[..., 0], z], -1),
        ],
        -2,
    )


def so3_exp(w):
    # series branch keeps the derivative finite at zero
    theta2 = (w * w).sum(-1)[..., None, None]
    small = theta2 < _SMALL
    theta = torch.sqrt(torch.where(small, torch.ones_like(theta2), theta2))
    a = torch.where(small, 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0, (1.0 - torch.cos(theta)) / (theta * theta))
    K = hat(w)
    eye = torch.eye(3, dtype=w.dtype, device=w.device).expand(K.shape)
    return eye + a * K + b * (K @ K)


def retract(R, t, xi):
    """Batched right retraction; ``xi`` is (..., 6) = (omega, v)."""
    R_new = R @ so3_exp(xi[..., :3])
    t_new = t + (R @ xi[..., 3:, None])[..., 0]
    return R_new, t_new


def safe_norm(x):
    sq = (x * x).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))
