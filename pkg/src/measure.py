import copy
import logging
from typing import Dict, List, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InputError
from .utils import make_rng, torch_generator

logger = logging.getLogger(__name__)

MAX_CHECK_BATCH = 8


def param_vector(model) -> torch.Tensor:
    """
    Given a model, return a vector of weights.
    """
    x0 = None
    for p in model.parameters():
        if x0 is None:
            x0 = p.data.view(-1)
        else:
            x0 = torch.cat((x0, p.data.view(-1)))
    return torch.zeros(0) if x0 is None else x0.detach().cpu()


def l2_norm(model) -> float:
    return float(param_vector(model).double().norm())


def _activation_pattern(net: nn.Module, run) -> List[torch.Tensor]:
    """Which side of every ReLU kink (and which max-pool winner) each unit is on."""
    pattern, hooks = [], []

    def relu_hook(module, inputs, output):
        pattern.append(inputs[0] > 0)

    def pool_hook(module, inputs, output):
        _, idx = F.max_pool2d(inputs[0], module.kernel_size, module.stride, module.padding, return_indices=True)
        pattern.append(idx)

    for m in net.modules():
        if isinstance(m, nn.ReLU):
            hooks.append(m.register_forward_hook(relu_hook))
        elif isinstance(m, nn.MaxPool2d):
            hooks.append(m.register_forward_hook(pool_hook))
    try:
        value = run()
    finally:
        for h in hooks:
            h.remove()
    return value, pattern


def _same_pattern(a, b) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def gradient_check(
    model,
    samples: torch.Tensor,
    targets: torch.Tensor = None,
    eps: float = 1e-4,
    max_params: int = 2000,
    seed: int = 0,
    return_details: bool = False,
):
    """
    Compare autograd parameter gradients with central finite differences
    (f(theta + eps) - f(theta - eps)) / 2 eps on a float64 copy of the model in eval mode.

    VAEs use one fixed draw of the sampling noise for every evaluation. At most
    `max_params` coordinates are checked, drawn with `seed` across all tensors.
    Coordinates whose perturbation moves a ReLU or max-pool across a kink are
    skipped. The relative error is |a - n| / max(|a|, |n|, 1e-4).
    """
    if samples.shape[0] > MAX_CHECK_BATCH:
        raise InputError(f"gradient_check takes at most {MAX_CHECK_BATCH} samples", "samples")
    shadow = copy.deepcopy(model.net).double()
    shadow.eval()
    x = samples.detach().double()
    y = None if targets is None else targets.detach().clone()
    if y is not None and y.is_floating_point():
        y = y.double()
    noise = None
    if getattr(shadow, "kind", None) == "vae":
        noise = torch.randn(x.shape[0], shadow.latent_dim, generator=torch_generator(seed), dtype=torch.float64)

    objective = lambda: model.objective(x, y, noise, net=shadow)
    params = [p for p in shadow.parameters() if p.requires_grad]
    shadow.zero_grad()
    objective().backward()
    analytic = [p.grad.detach().clone() for p in params]

    coords: List[Tuple[int, int]] = [(t, i) for t, p in enumerate(params) for i in range(p.numel())]
    if len(coords) > max_params:
        rng = make_rng(seed)
        coords = [coords[j] for j in np.sort(rng.choice(len(coords), max_params, replace=False))]

    errors, skipped = [], 0
    with torch.no_grad():
        for t, i in coords:
            flat = params[t].view(-1)
            original = flat[i].item()
            flat[i] = original + eps
            f_plus, pat_plus = _activation_pattern(shadow, objective)
            flat[i] = original - eps
            f_minus, pat_minus = _activation_pattern(shadow, objective)
            flat[i] = original
            if not _same_pattern(pat_plus, pat_minus):
                skipped += 1
                continue
            numeric = (f_plus.item() - f_minus.item()) / (2 * eps)
            a = analytic[t].view(-1)[i].item()
            errors.append(abs(a - numeric) / max(abs(a), abs(numeric), 1e-4))

    max_error = max(errors) if errors else 0.0
    logger.debug("gradient check: %d coordinates, %d skipped at kinks, max relative error %.3e",
                 len(errors), skipped, max_error)
    if return_details:
        return max_error, {"checked": len(errors), "skipped": skipped}
    return max_error
