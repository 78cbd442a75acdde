"""Checkpoint container: one zip per trained model.

The zip holds ``manifest.json`` and one ``.npy`` member per array. Member
order, timestamps and permissions are fixed, so the same model always
serializes to the same bytes.
"""

from __future__ import annotations

import dataclasses
import io
import json
import zipfile
from pathlib import Path

import numpy as np

from . import crf
from .config import model_config_from_dict, to_plain
from .features import FV_LAYOUT_VERSION
from .models import HYBRIDS, NeuralModel, TrainedModel
from .neuralnet.encoders import Vocabulary
from .recommenders import KnnIndex, SoftmaxHead

FORMAT = "topicsuggest-checkpoint-1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    info.create_system = 3
    zf.writestr(info, data)


def to_bytes(model: TrainedModel) -> bytes:
    arrays: dict = {}
    manifest = {
        "format": FORMAT,
        "variant": model.variant,
        "seed": model.config.seed,
        "config_hash": model.config.digest(),
        "fv_layout_version": FV_LAYOUT_VERSION,
        "train_corpus_hash": model.corpus_digest,
        "config": to_plain(model.config),
        "history": model.history,
        "components": {},
    }
    comp = manifest["components"]
    if model.knn is not None:
        comp["knn"] = {"ids": list(model.knn.ids), "k": model.knn.k}
        arrays["knn/vectors"] = model.knn.vectors
        arrays["knn/scores"] = model.knn.scores
    if model.crf_model is not None:
        m = model.crf_model
        comp["crf"] = {"use_cf": m.use_cf, "converged": bool(m.converged), "fv_layout_version": m.fv_layout_version,
                       "labels": [str(lab) for lab in crf.LABELS], "n_attributes": m.n_attr}
        arrays["crf/weights"] = m.weights
    if model.head is not None:
        comp["head"] = {"n_in": model.head.n_in, "hidden": model.head.hidden, "losses": model.head.losses}
        arrays.update({f"head/{k}": v for k, v in model.head.state().items()})
    if model.neural is not None:
        nm = model.neural
        comp["neural"] = {"kind": nm.kind, "hybrid": nm.hybrid, "vocab": nm.vocab.itos[2:]}
        arrays.update({f"neural/{k}": v for k, v in nm.params.items()})
    manifest["arrays"] = sorted(arrays)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _write_member(zf, "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
        for name in sorted(arrays):
            _write_member(zf, name + ".npy", _npy_bytes(arrays[name]))
    return buf.getvalue()


def save(model: TrainedModel, path) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(model))
    return path


def read_manifest(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("manifest.json"))


def load(path, expected_variant: str | None = None) -> TrainedModel:
    """Rebuild a model; refuses checkpoints whose feature layout differs from this build."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile:
        raise CheckpointError(f"{path} is not a checkpoint archive") from None
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError:
            raise CheckpointError(f"{path} has no manifest") from None
        if manifest.get("format") != FORMAT:
            raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
        if manifest.get("fv_layout_version") != FV_LAYOUT_VERSION:
            raise CheckpointError(
                f"feature layout mismatch: checkpoint has {manifest.get('fv_layout_version')!r}, "
                f"this build uses {FV_LAYOUT_VERSION!r}")
        if expected_variant is not None and manifest["variant"] != expected_variant:
            raise CheckpointError(f"checkpoint holds {manifest['variant']}, not {expected_variant}")
        arrays = {name: np.load(io.BytesIO(zf.read(name + ".npy")), allow_pickle=False)
                  for name in manifest["arrays"]}
    config = model_config_from_dict(manifest["config"])
    if config.digest() != manifest["config_hash"]:
        raise CheckpointError("config hash does not match the stored config")
    model = TrainedModel(config, history=manifest["history"], corpus_digest=manifest["train_corpus_hash"])
    comp = manifest["components"]
    if "knn" in comp:
        model.knn = KnnIndex(comp["knn"]["ids"], arrays["knn/vectors"], arrays["knn/scores"], comp["knn"]["k"])
    if "crf" in comp:
        c = comp["crf"]
        if c["fv_layout_version"] != FV_LAYOUT_VERSION:
            raise CheckpointError("CRF weights were trained on a different feature layout")
        if c["labels"] != [str(lab) for lab in crf.LABELS] or c["n_attributes"] != crf.n_attributes(c["use_cf"]):
            raise CheckpointError("CRF label set or attribute layout differs from this build")
        model.crf_model = crf.CrfModel(arrays["crf/weights"], c["use_cf"], c["fv_layout_version"], c["converged"])
    if "head" in comp:
        h = comp["head"]
        model.head = SoftmaxHead(h["n_in"], h["hidden"]).load_state(
            {k[len("head/"):]: v for k, v in arrays.items() if k.startswith("head/")})
        model.head.losses = list(h["losses"])
    if "neural" in comp:
        n = comp["neural"]
        # embeddings come from the stored arrays, never from the original text file
        build_cfg = dataclasses.replace(config, neural=dataclasses.replace(config.neural, embedding_path=None))
        nm = NeuralModel(n["kind"], Vocabulary(n["vocab"]), build_cfg, n["hybrid"])
        params = nm.params
        for name, arr in params.items():
            stored = arrays.get("neural/" + name)
            if stored is None or stored.shape != arr.shape:
                raise CheckpointError(f"neural parameter {name} missing or mis-shaped")
            arr[...] = stored
        nm.config = config
        model.neural = nm
    expected = {"cts-crf": "crf", "cts-crf-cf": "crf", "cf": "head", "contextual-cf": "head"}.get(config.variant)
    if expected is None and config.variant not in ("popularity", "oracle"):
        expected = "neural"
    if expected and expected not in comp:
        raise CheckpointError(f"checkpoint for {config.variant} lacks its {expected} component")
    if config.variant in HYBRIDS and "knn" not in comp:
        raise CheckpointError("hybrid checkpoint lacks its CF index")
    return model
