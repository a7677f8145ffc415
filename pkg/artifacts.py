"""Deterministic single-file array containers.

``numpy.savez`` stamps every zip member with the current time, so two saves of the same
arrays differ byte-wise. Models are written here with a fixed member timestamp instead;
the result is still an ordinary ``.npz`` that ``numpy.load`` reads.
"""
import json
import zipfile
from pathlib import Path

import numpy as np

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)
HEADER_KEY = "header"


def write_npz(path: Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Writes a JSON header plus named arrays to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    members = {HEADER_KEY: np.array(json.dumps(header, sort_keys=True))}
    members.update(arrays)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(members):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asarray(members[name]), allow_pickle=False)


def read_npz(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Reads a file written by ``write_npz``; returns (header, arrays)."""
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data[HEADER_KEY].item()))
        arrays = {name: data[name] for name in data.files if name != HEADER_KEY}
    return header, arrays
