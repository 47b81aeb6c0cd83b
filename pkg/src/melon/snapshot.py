"""Named-tensor snapshots: ``tensors.bin`` (float64 little-endian) + ``manifest.json``."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "melon-tensors/1"


def save_tensors(out_dir: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(out / "tensors.bin", "wb") as fh:
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(data.tobytes())
            entries.append({"name": name, "shape": list(data.shape), "offset": offset})
            offset += data.size
    manifest = {"format": FORMAT, "tensors": entries, "meta": meta or {}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_tensors(in_dir: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{src}: unsupported snapshot format {manifest.get('format')!r}")
    flat = np.fromfile(src / "tensors.bin", dtype="<f8")
    tensors = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        tensors[e["name"]] = flat[e["offset"] : e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return tensors, manifest["meta"]
