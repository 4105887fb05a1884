import argparse
import hashlib
import json
import logging
import os

import numpy as np
import torch
import wandb

logger = logging.getLogger(__name__)

wandb_id = None

FALSY_STRINGS = {'off', 'false', '0'}
TRUTHY_STRINGS = {'on', 'true', '1'}

SEED_ENV_VAR = "PSEUDOREP_SEED"

def bool_flag(s):
    """
    Parse boolean arguments from the command line.
    """
    if isinstance(s, bool):
        return s
    if s.lower() in FALSY_STRINGS:
        return False
    elif s.lower() in TRUTHY_STRINGS:
        return True
    else:
        raise argparse.ArgumentTypeError("Invalid value for a boolean flag!")

def init_wandb(hparams, resume=False):
    global wandb_id
    if not hparams.get("use_wandb", False):
        return None
    logger.info("init wandb (project=%s, group=%s)", hparams.wandb_project, hparams.group_name)
    group_vars = ["alpha", "n_per_class", "k", "max_iterations", "confidence_metric", "seed", "use_representation"]
    notes = ''
    for var in group_vars:
        notes = notes + '_' + var + str(hparams.get(var))
    run = wandb.init(
        project=hparams.wandb_project,
        entity=hparams.get("wandb_entity"),
        group=hparams.group_name,
        notes=notes,
        resume=True if resume else None,
        id = wandb_id if resume else None
    )
    if wandb_id is None : wandb_id = run.id
    for var in group_vars:
        # https://github.com/wandb/wandb/issues/1737
        wandb.config.update({var:hparams.get(var)}, allow_val_change=True)
    return run

class AttrDict(dict):
    def __init__(self, *args, **kwargs):
        super(AttrDict, self).__init__(*args, **kwargs)
        self.__dict__ = self

def to_attr_dict(d):
    """Recursively turn nested dicts into AttrDicts."""
    if isinstance(d, dict):
        return AttrDict({k: to_attr_dict(v) for k, v in d.items()})
    return d

def to_none(a):
    return None if not a or a == "_None_" else a

def str2dic_all(s) :
    """`a=int(0),b=str(y),c=float(0.1)` to {a:0, b:y, c:0.1}"""
    all_class = {"int" : int, "str" : str, "float" : float, 'bool' : bool_flag}
    s = to_none(s)
    if s is None :
        return s
    params = {}
    for x in s.split(","):
        split = x.split('=')
        if len(split) != 2:
            raise argparse.ArgumentTypeError(f"Expected key=type(value), got {x!r}")
        _class = split[1].split("(")[0]
        if _class not in all_class:
            raise argparse.ArgumentTypeError(f"Unknown type {_class!r} in {x!r}")
        val = split[1][len(_class)+1:][:-1]
        params[split[0]] = all_class[_class](val)
    return AttrDict(params)

def str2list(s):
    """`a,b` to [a, b]"""
    s = to_none(s)
    return s if s is None else s.split(",")

def str2floats(s):
    """`0.1,0.25` to [0.1, 0.25]"""
    s = str2list(s)
    return s if s is None else [float(x) for x in s]

def str2ints(s):
    s = str2list(s)
    return s if s is None else [int(x) for x in s]

def resolve_seed(seed=None, default=0):
    """Explicit seed, then the PSEUDOREP_SEED env var, then `default`."""
    if seed is not None and seed != -1:
        return int(seed)
    env = os.environ.get(SEED_ENV_VAR)
    if env not in (None, ""):
        return int(env)
    return default

def make_rng(seed):
    return np.random.default_rng(seed)

def torch_generator(seed):
    g = torch.Generator()
    g.manual_seed(int(seed) % (2**63))
    return g

def sha256_arrays(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        if a is None:
            h.update(b"<none>")
            continue
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()

def state_fingerprint(module):
    """SHA-256 over a module's state_dict, in key order."""
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()

def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, torch.Tensor):
        return obj.detach().cpu().tolist()
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    return obj

def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(to_jsonable(obj), fh, indent=2, sort_keys=True)

def read_json(path):
    with open(path) as fh:
        return json.load(fh)

def write_jsonl(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(to_jsonable(r), sort_keys=True) + "\n")

def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
