"""Versioned checkpoint container for the scorer and optimizer state.

A checkpoint is a numpy ``.npz`` archive holding

* ``__meta__``: a JSON string with ``format_version``, the scorer config,
  optimizer hyperparameters (when present), and caller metadata;
* one ``param/<name>`` array per parameter;
* ``opt_m/<name>`` and ``opt_v/<name>`` moment arrays when optimizer state
  is saved.

Files with an unknown ``format_version`` are rejected outright so stale
artifacts fail loudly instead of mis-loading.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..errors import DataError
from .model import ScorerConfig, WideDeepScorer
from .optim import AdamWState

FORMAT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    scorer: WideDeepScorer,
    opt_state: AdamWState | None = None,
    extra: dict | None = None,
) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "config": asdict(scorer.cfg),
        "extra": extra or {},
    }
    arrays: dict[str, np.ndarray] = {}
    for name, value in scorer.params.items():
        arrays[f"param/{name}"] = value
    if opt_state is not None:
        meta["optimizer"] = {
            "lr": opt_state.lr,
            "beta1": opt_state.beta1,
            "beta2": opt_state.beta2,
            "eps": opt_state.eps,
            "weight_decay": opt_state.weight_decay,
            "step": opt_state.step,
        }
        for name in scorer.params:
            arrays[f"opt_m/{name}"] = opt_state.m[name]
            arrays[f"opt_v/{name}"] = opt_state.v[name]
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    np.savez(path, **arrays)


def load_checkpoint(path: str | Path) -> tuple[WideDeepScorer, AdamWState | None, dict]:
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    with archive:
        if "__meta__" not in archive.files:
            raise DataError(f"{path}: not a scorer checkpoint (missing metadata)")
        meta = json.loads(str(archive["__meta__"][()]))
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise DataError(
                f"{path}: unsupported checkpoint format version {version!r}; "
                f"this build reads version {FORMAT_VERSION}"
            )
        cfg_dict = dict(meta["config"])
        cfg_dict["mlp_dims"] = tuple(cfg_dict["mlp_dims"])
        cfg = ScorerConfig(**cfg_dict)
        params = {
            name[len("param/") :]: np.array(archive[name])
            for name in archive.files
            if name.startswith("param/")
        }
        scorer = WideDeepScorer(cfg, params)
        opt_state = None
        if "optimizer" in meta:
            hyper = meta["optimizer"]
            opt_state = AdamWState(
                lr=hyper["lr"],
                beta1=hyper["beta1"],
                beta2=hyper["beta2"],
                eps=hyper["eps"],
                weight_decay=hyper["weight_decay"],
                step=hyper["step"],
            )
            opt_state.m = {
                name[len("opt_m/") :]: np.array(archive[name])
                for name in archive.files
                if name.startswith("opt_m/")
            }
            opt_state.v = {
                name[len("opt_v/") :]: np.array(archive[name])
                for name in archive.files
                if name.startswith("opt_v/")
            }
        expected = set(params)
        if opt_state is not None and (set(opt_state.m) != expected or set(opt_state.v) != expected):
            raise DataError(f"{path}: optimizer state does not match parameters")
    return scorer, opt_state, meta.get("extra", {})
