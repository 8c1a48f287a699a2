"""Loss terms for distillation, detector training and baselines."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TYPE_LOG_EPS = 1e-12


KD_DIRECTIONS = ("teacher_student", "student_teacher")


def kd_loss(student_logits: Tensor, teacher_logits, tau: float = 1.0,
            direction: str = "teacher_student") -> Tensor:
    """``tau^2 * KL(softmax(teacher/tau) || softmax(student/tau))``, batch mean.

    The teacher is the reference distribution (mass-covering direction).
    ``direction="student_teacher"`` swaps the arguments of the divergence.
    """
    if direction not in KD_DIRECTIONS:
        raise ValueError(f"direction must be one of {KD_DIRECTIONS}")
    teacher_logits = ad.as_tensor(teacher_logits)
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"student {student_logits.shape} vs teacher {teacher_logits.shape}")
    if tau <= 0:
        raise ValueError("tau must be positive")
    if direction == "student_teacher":
        return tau**2 * ad.kl_div(student_logits / tau, teacher_logits / tau)
    return tau**2 * ad.kl_div(teacher_logits / tau, student_logits / tau)


def type_loss(p_type: Tensor, type_labels) -> Tensor:
    """Binary cross-entropy of the clean probability against y' (1 clean, 0 adv).

    Logs are guarded by 1e-12 so exact 0/1 probabilities stay finite.
    """
    p_type = ad.as_tensor(p_type)
    y = np.broadcast_to(np.asarray(type_labels, dtype=np.float64), p_type.shape)
    pos = ad.log(p_type + TYPE_LOG_EPS) * y
    neg = ad.log(1.0 - p_type + TYPE_LOG_EPS) * (1.0 - y)
    return -(pos + neg).mean()


def total_loss(p_type: Tensor, type_labels, l_adv: Tensor, l_nat: Tensor,
               alpha1: float, alpha2: float) -> Tensor:
    return type_loss(p_type, type_labels) + alpha1 * l_adv + alpha2 * l_nat


def trades_kl(clean_logits: Tensor, adv_logits: Tensor) -> Tensor:
    """KL(p(x) || p(x_adv)), batch mean."""
    return ad.kl_div(clean_logits, adv_logits)
