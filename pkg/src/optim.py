import inspect
import re
from typing import Dict, Tuple

from torch import optim

from .errors import ConfigError

_FLOAT = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")


def get_params_from_string(s: str, separator: str = ",") -> Tuple[str, Dict]:
    """`adam,lr=0.001,beta1=0.9` to ("adam", {"lr": 0.001, "beta1": 0.9})"""
    method, *pairs = s.split(separator)
    params = {}
    for pair in pairs:
        key, eq, value = pair.partition("=")
        if not eq or not key:
            raise ConfigError(f"expected key=value, got {pair!r}", "training.opt")
        params[key] = float(value) if _FLOAT.match(value) else value
    return method, params


def _as_bool(v) -> bool:
    return v if isinstance(v, bool) else str(v).lower() in {"on", "true", "1"}


def get_optimizer(parameters, s: str):
    """
    Build an optimizer from a string such as "sgd,lr=0.01,momentum=0.9",
    "adam,lr=0.001,beta1=0.9" or "adamw,lr=0.001,weight_decay=0.01".
    """
    method, params = get_params_from_string(s)
    if method in ("adam", "adamw"):
        params["betas"] = (params.pop("beta1", 0.9), params.pop("beta2", 0.999))
        params["amsgrad"] = _as_bool(params.get("amsgrad", False))
    elif method == "sgd":
        params["nesterov"] = _as_bool(params.get("nesterov", False))
        if "lr" not in params:
            raise ConfigError("sgd needs an explicit lr", "training.opt")

    optim_fn = {"adam": optim.Adam, "adamw": optim.AdamW, "sgd": optim.SGD}.get(method)
    if optim_fn is None:
        raise ConfigError(f'Unknown optimization method: "{method}"', "training.opt")

    expected = inspect.getfullargspec(optim_fn.__init__)[0][2:]
    unexpected = sorted(set(params) - set(expected))
    if unexpected:
        raise ConfigError(f"Unexpected parameters for {method}: {unexpected}, expected a subset of {expected}",
                          "training.opt")
    return optim_fn(parameters, **params)


def configure_optimizer(parameters, opt: str, lr: float, weight_decay: float, momentum: float = 0.9):
    """
    `adam`: plain Adam; the caller adds the 1/2*lambda*sum(theta^2) penalty to the loss.
    `adamw`: decoupled decay inside torch's AdamW. `sgd`: momentum SGD, penalty in the loss.
    Anything else is parsed as an optimizer string.
    """
    if opt == "adam":
        return optim.Adam(parameters, lr=lr)
    if opt == "adamw":
        return optim.AdamW(parameters, lr=lr, weight_decay=weight_decay)
    if opt == "sgd":
        return optim.SGD(parameters, lr=lr, momentum=momentum)
    if "," not in opt:
        opt = f"{opt},lr={lr}"
    return get_optimizer(parameters, opt)


def penalty_in_loss(opt: str) -> bool:
    """Whether the L2 penalty belongs in the loss (everything but decoupled decay)."""
    return not opt.startswith("adamw")
