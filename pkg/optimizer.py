"""Normalized gradient descent on pixel prompts (plain descent on prompt tokens)."""
import logging
import math
from typing import Optional

import torch

from backbone import TokenPrompts
from errors import NumericError, ShapeError
from prompt_geometry import PromptTemplate
from schemas import NormalizationKind, NormalizationMode, Schedule, UpdateRule

logger = logging.getLogger(__name__)


def gradient_norm(grad: torch.Tensor, kind: NormalizationKind) -> torch.Tensor:
    if kind == NormalizationKind.L1:
        return grad.abs().sum()
    if kind == NormalizationKind.LINF:
        return grad.abs().max()
    return torch.linalg.vector_norm(grad)


def normalize_gradient(grad_full: torch.Tensor, mask: torch.Tensor, mode: NormalizationMode) -> torch.Tensor:
    """Masked update direction.

    L2_PARTIAL takes the norm over the prompt region only; every other
    normalized kind takes it over the whole input gradient.
    """
    if grad_full.shape != mask.shape:
        raise ShapeError("gradient and mask shapes differ", {"grad": tuple(grad_full.shape), "mask": tuple(mask.shape)})
    mask = mask.to(grad_full.dtype)
    masked = grad_full * mask
    if mode.kind == NormalizationKind.NONE:
        return masked
    source = masked if mode.kind == NormalizationKind.L2_PARTIAL else grad_full
    return masked / (gradient_norm(source, mode.kind) + mode.epsilon)


def learning_rate_at(rule: UpdateRule, iteration: int, total_iterations: int) -> float:
    if rule.schedule == Schedule.CONSTANT or total_iterations <= 1:
        return rule.learning_rate
    progress = min(iteration, total_iterations) / total_iterations
    return rule.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def descend(prompt: PromptTemplate, direction: torch.Tensor, lr: float) -> PromptTemplate:
    with torch.no_grad():
        keep = prompt.mask.bool()
        updated = torch.where(keep, prompt.weight - lr * direction.to(prompt.weight.dtype), prompt.weight)
        if not torch.isfinite(updated).all():
            raise NumericError(
                "non-finite prompt update",
                {"lr": lr, "direction_finite": bool(torch.isfinite(direction).all())},
            )
        prompt.weight.copy_(updated)
    return prompt


def step(
    prompt: PromptTemplate,
    grad_full: torch.Tensor,
    rule: UpdateRule,
    iteration: int = 0,
    total_iterations: int = 1,
) -> PromptTemplate:
    direction = normalize_gradient(grad_full, prompt.mask, rule.normalization)
    return descend(prompt, direction, learning_rate_at(rule, iteration, total_iterations))


def descend_tokens(prompts: TokenPrompts, grad: torch.Tensor, lr: float) -> TokenPrompts:
    with torch.no_grad():
        updated = prompts.tokens - lr * grad.to(prompts.tokens.dtype)
        if not torch.isfinite(updated).all():
            raise NumericError("non-finite token-prompt update", {"lr": lr})
        prompts.tokens.copy_(updated)
    return prompts


class PromptOptimizer:
    """Single writer for a run's pixel prompt and token prompts."""

    def __init__(
        self,
        rule: UpdateRule,
        total_iterations: int,
        prompt: Optional[PromptTemplate] = None,
        token_prompts: Optional[TokenPrompts] = None,
    ):
        self.rule = rule
        self.total_iterations = total_iterations
        self.prompt = prompt
        self.token_prompts = token_prompts
        self.iteration = 0

    @property
    def current_lr(self) -> float:
        return learning_rate_at(self.rule, self.iteration, self.total_iterations)

    def step(self, grad_full: Optional[torch.Tensor], token_grad: Optional[torch.Tensor] = None) -> None:
        lr = self.current_lr
        if self.prompt is not None and grad_full is not None:
            step(self.prompt, grad_full, self.rule, self.iteration, self.total_iterations)
        if self.token_prompts is not None and token_grad is not None:
            descend_tokens(self.token_prompts, token_grad, lr)
        logger.debug("step %d lr=%.6g", self.iteration, lr)
        self.iteration += 1
