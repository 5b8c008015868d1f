"""Versioned ``.npz`` checkpoints for generator/discriminator pairs."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .disc import DiscParams
from .errors import SchemaError
from .policy import GeneratorParams

FORMAT = "milgan-model-v1"


def save_model(path: str | Path, gen: GeneratorParams, disc: DiscParams | None = None,
               config_text: str = "") -> None:
    meta = {"dim": gen.dim, "hidden": gen.hidden, "config": config_text}
    arrays = {f"gen.{k}": v for k, v in gen.params.items()}
    if disc is not None:
        meta["disc"] = {"dim": disc.dim, "n_maps": disc.n_maps, "widths": list(disc.widths)}
        arrays.update({f"disc.{k}": v for k, v in disc.params.items()})
    with open(path, "wb") as fh:
        np.savez(fh, __format__=np.array(FORMAT), __meta__=np.array(json.dumps(meta)), **arrays)


def load_model(path: str | Path):
    """Returns ``(gen, disc or None, config_text)``."""
    with np.load(path, allow_pickle=False) as z:
        if "__format__" not in z.files or str(z["__format__"]) != FORMAT:
            raise SchemaError(f"{path}: not a {FORMAT} checkpoint")
        meta = json.loads(str(z["__meta__"]))
        gen = GeneratorParams(meta["dim"], meta["hidden"],
                              {k[4:]: z[k] for k in z.files if k.startswith("gen.")})
        disc = None
        if "disc" in meta:
            dm = meta["disc"]
            disc = DiscParams(dm["dim"], dm["n_maps"], tuple(dm["widths"]),
                              {k[5:]: z[k] for k in z.files if k.startswith("disc.")})
    return gen, disc, meta.get("config", "")
