"""
Parameters for `train.py run` / `train.py experiment`: defaults, JSON config files,
validation with dotted field paths, and the builders that turn a parameter bag into
the dataclasses the library works with.
"""
import copy
import json
import logging
import os
from typing import Dict, Optional, Tuple

from .data import MANIFEST_FILE as DATASET_MANIFEST
from .dataset import AUGMENTATION_OPS, SplitSpec
from .errors import ConfigError
from .experiments import DatasetSpec, ExperimentSpec
from .mixup import DEFAULT_FEATURE_LAYER, MixupSpec
from .modeling import TrainingConfig
from .pseudo_loop import EarlyStopSpec, LoopConfig
from .utils import AttrDict, read_json, resolve_seed, to_attr_dict

logger = logging.getLogger(__name__)

TRAINING_SECTIONS = ("training", "representation_training", "head_training")

# parameter -> accepted python types; nested dicts are sections
SCHEMA = {
    "alpha": (int, float),
    "n_per_class": (int,),
    "k": (int,),
    "max_iterations": (int,),
    "confidence_metric": (str,),
    "use_representation": (str,),
    "latent_dim": (int,),
    "embedding_layer": (str,),
    "augmentation_ops": (list, tuple),
    "reaugment_pseudo": (bool,),
    "scoring": (str,),
    "vae_augment": (int,),
    "seed": (int,),
    "use_wandb": (bool,),
    "group_name": (str,),
    "wandb_project": (str,),
    "wandb_entity": (str,),
    "training": {
        "preset": (str,),
        "learning_rate": (int, float),
        "weight_decay": (int, float),
        "dropout": (int, float),
        "batch_size": (int,),
        "epochs": (int,),
        "opt": (str,),
        "momentum": (int, float),
        "architecture": (str,),
        "zero_init_head": (bool,),
        "logdir": (str,),
    },
    "mixup": {"mode": (str,), "layer": (str,), "beta_a": (int, float)},
    "early_stop": {"enabled": (bool,), "patience": (int,), "validation_fraction": (int, float)},
    "split": {"n_labeled": (int,), "n_test": (int,), "stratified": (bool,)},
    "dataset": {"generator": (str,), "params": (dict,), "seed": (int,), "path": (str,)},
    "experiment": {"name": (str,), "grid": (list, tuple), "seeds": (list, tuple), "subset_fraction": (int, float)},
}
SCHEMA["representation_training"] = SCHEMA["training"]
SCHEMA["head_training"] = SCHEMA["training"]


def _training_defaults(epochs: int) -> Dict:
    return {
        "preset": "default",
        "learning_rate": None,
        "weight_decay": 5e-4,
        "dropout": 0.2,
        "batch_size": 64,
        "epochs": epochs,
        "opt": "adam",
        "momentum": 0.9,
        "architecture": "auto",
        "zero_init_head": False,
        "logdir": None,
    }


def get_default_params() -> AttrDict:
    """Every parameter with its default. `alpha` has none and must be given for `run`."""
    seed = None
    params = {
        "alpha": None,
        "n_per_class": None,
        "k": 5,
        "max_iterations": 10,
        "confidence_metric": "max_prob",
        "use_representation": "autoencoder",
        "latent_dim": 32,
        "embedding_layer": "flatten",
        "augmentation_ops": list(AUGMENTATION_OPS),
        "reaugment_pseudo": False,
        "scoring": "fused",
        "vae_augment": 0,
        "seed": seed,
        "training": _training_defaults(10),
        "representation_training": {**_training_defaults(10), "dropout": 0.0},
        "head_training": {**_training_defaults(20), "dropout": 0.0},
        "mixup": {"mode": "off", "layer": None, "beta_a": 1.0},
        "early_stop": {"enabled": True, "patience": 2, "validation_fraction": 0.2},
        "split": {"n_labeled": None, "n_test": None, "stratified": True},
        "dataset": {"generator": "wafer", "params": None, "seed": None, "path": None},
        "experiment": {"name": None, "grid": None, "seeds": [0, 1, 2, 3, 4], "subset_fraction": 0.1},
        ### wandb ###
        "use_wandb": False,
        "group_name": "pseudorep",
        "wandb_project": "pseudo_representation_labeling",
        "wandb_entity": None,
    }
    return to_attr_dict(params)


def deep_merge(base: Dict, override: Dict, path: str = "") -> Dict:
    out = copy.deepcopy(dict(base))
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError("unknown parameter", where)
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError("expected a section (object)", where)
            out[key] = deep_merge(out[key], value, f"{where}.")
        else:
            out[key] = value
    return out


def load_config(path: Optional[str] = None, overrides: Optional[Dict] = None) -> AttrDict:
    """Defaults, then the JSON file at `path`, then `overrides` (command-line flags)."""
    params = dict(get_default_params())
    if path:
        if not os.path.isfile(path):
            raise ConfigError(f"no such config file {path!r}", "config")
        with open(path) as fh:
            try:
                loaded = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"not valid JSON: {e}", "config") from e
        if not isinstance(loaded, dict):
            raise ConfigError("a config file must hold a JSON object", "config")
        params = deep_merge(params, loaded)
    if overrides:
        params = deep_merge(params, {k: v for k, v in overrides.items() if v is not None})
    return to_attr_dict(params)


def _check_types(params: Dict, schema: Dict, path: str = "") -> None:
    for key, rule in schema.items():
        value = params.get(key)
        where = f"{path}{key}"
        if isinstance(rule, dict):
            if not isinstance(value, dict):
                raise ConfigError("expected a section (object)", where)
            _check_types(value, rule, f"{where}.")
        elif value is not None and (not isinstance(value, rule) or (bool not in rule and isinstance(value, bool))):
            names = "/".join(t.__name__ for t in rule)
            raise ConfigError(f"expected {names}, got {type(value).__name__} {value!r}", where)


def validate_config(params: Dict, require_alpha: bool = True) -> AttrDict:
    """
    Type checks here, range checks in the dataclass constructors; either way the first
    violation raises ConfigError naming its dotted field path.
    """
    _check_types(params, SCHEMA)
    if require_alpha and params.get("alpha") is None:
        raise ConfigError("missing required field", "alpha")
    params = to_attr_dict(dict(params))
    params.seed = resolve_seed(params.get("seed"))
    build_split_spec(params)
    for section in TRAINING_SECTIONS:
        build_training_config(params, section)
    build_dataset_spec(params)
    if require_alpha:
        build_loop_config(params, derive_n_per_class(params, num_classes_hint(params))[0])
    return params


def build_training_config(params: Dict, section: str = "training", seed: int = None) -> TrainingConfig:
    values = {k: v for k, v in params[section].items() if v is not None}
    preset = values.pop("preset", "default")
    try:
        seed = resolve_seed(params.get("seed")) if seed is None else seed
        return TrainingConfig.from_preset(preset, seed=seed, **values)
    except ConfigError as e:
        raise ConfigError(e.message, (e.field or "").replace("training", section, 1)) from e
    except TypeError as e:
        raise ConfigError(str(e), section) from e


def build_mixup_spec(params: Dict, seed: int) -> MixupSpec:
    m = params.mixup
    layer = m.get("layer")
    if m["mode"] == "feature" and not layer:
        layer = DEFAULT_FEATURE_LAYER
    return MixupSpec(m["mode"], layer=layer, beta_a=float(m.get("beta_a", 1.0)), seed=seed)


def split_sizes(params: Dict) -> Tuple[int, int]:
    """Configured split sizes; unset ones come from the dataset (a smaller split for the crack set)."""
    s = params.split
    n_labeled, n_test = build_dataset_spec(params).default_split()
    return (n_labeled if s.get("n_labeled") is None else s["n_labeled"],
            n_test if s.get("n_test") is None else s["n_test"])


def build_split_spec(params: Dict) -> SplitSpec:
    s = params.split
    n_labeled, n_test = split_sizes(params)
    return SplitSpec(n_labeled, n_test, seed=resolve_seed(params.get("seed")),
                     stratified=s.get("stratified", True))


def build_dataset_spec(params: Dict) -> DatasetSpec:
    d = params.dataset
    seed = d.get("seed")
    return DatasetSpec(
        generator=d.get("generator"),
        params=None if d.get("params") is None else dict(d["params"]),
        seed=resolve_seed(params.get("seed")) if seed is None else seed,
        path=d.get("path"),
    )


def num_classes_hint(params: Dict) -> int:
    """Class count a generated dataset will have, or the one its directory manifest records."""
    d = build_dataset_spec(params)
    if d.path:
        manifest = os.path.join(d.path, DATASET_MANIFEST)
        return int(read_json(manifest).get("num_classes", 7)) if os.path.isfile(manifest) else 7
    return 3 if d.generator == "crack" else int(d.params.get("num_classes", 7))


def derive_n_per_class(params: Dict, num_classes: int) -> Tuple[int, str]:
    """Explicit n_per_class, else the seed-pool size spread evenly over the classes."""
    if params.get("n_per_class"):
        return int(params["n_per_class"]), "given"
    return max(1, split_sizes(params)[0] // num_classes), "n_labeled // num_classes"


def _augmentation_ops(params: Dict) -> Tuple[str, ...]:
    return build_dataset_spec(params).augmentation_ops(params.augmentation_ops)


def build_loop_config(params: Dict, n_per_class: int, alpha: float = None, seed: int = None) -> LoopConfig:
    seed = resolve_seed(params.get("seed")) if seed is None else seed
    alpha = params.alpha if alpha is None else alpha
    es = params.early_stop
    return LoopConfig(
        alpha=float(alpha),
        n_per_class=int(n_per_class),
        k=params.k,
        max_iterations=params.max_iterations,
        confidence_metric=params.confidence_metric,
        early_stop=EarlyStopSpec(es["enabled"], es["patience"], float(es["validation_fraction"])),
        classifier=build_training_config(params, "training", seed),
        representation=build_training_config(params, "representation_training", seed),
        head=build_training_config(params, "head_training", seed),
        mixup=build_mixup_spec(params, seed),
        use_representation=params.use_representation,
        latent_dim=params.latent_dim,
        embedding_layer=params.embedding_layer,
        augmentation_ops=_augmentation_ops(params),
        reaugment_pseudo=params.reaugment_pseudo,
        scoring=params.scoring,
        vae_augment=params.vae_augment,
        seed=seed,
    )


def build_experiment_spec(params: Dict, name: str = None, num_classes: int = None) -> ExperimentSpec:
    ex = params.experiment
    name = name or ex.get("name")
    if not name:
        raise ConfigError("missing experiment name", "experiment.name")
    dataset = build_dataset_spec(params)
    if num_classes is None:
        num_classes = num_classes_hint(params)
    n_per_class, _ = derive_n_per_class(params, num_classes)
    n_labeled, n_test = split_sizes(params)
    # the loop alpha is a placeholder for experiments that sweep it
    alpha = params.alpha if params.alpha is not None else 1.0
    return ExperimentSpec(
        experiment=name,
        dataset=dataset,
        grid=tuple(ex.get("grid") or ()),
        seeds=tuple(ex.get("seeds") or ()),
        loop=build_loop_config(params, n_per_class, alpha=alpha),
        training=build_training_config(params, "training"),
        n_labeled=n_labeled,
        n_test=n_test,
        subset_fraction=float(ex.get("subset_fraction", 0.1)),
    )
