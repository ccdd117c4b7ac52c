"""Training loops, early stopping and the on-disk model bundle."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import neural as nn
from .corpus import FoldAssignment, load_corpus, split_folds, target_folds
from .models import BaseLM, BaseLMConfig, Encoder, TransferModel, build_transfer
from .vocab import Vocabulary, build_vocabulary

log = logging.getLogger(__name__)

MAGIC = b"CSLM"
FORMAT_VERSION = 1
MANIFEST = "manifest.txt"
WEIGHTS = "weights.bin"
HISTORY = "history.json"
BUNDLE_FILES = (MANIFEST, WEIGHTS)


class TrainingError(RuntimeError):
    pass


class BundleError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 3
    dropout_rate: float = 0.5
    seed: int = 0
    clip_norm: float | None = None
    eval_batch: int = 512

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    frozen_grad_norm: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    stop_reason: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


class EarlyStopping:
    """Stops after ``patience`` consecutive epochs without a strict improvement."""

    def __init__(self, patience: int = 3):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record ``loss`` for 1-based ``epoch``; True when training should stop."""
        if loss < self.best:
            self.best = loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def _trainable(model) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.trainable]


def mean_loss(model, X, y, batch: int = 512) -> float:
    """Per-token mean cross entropy over a window set."""
    total = 0.0
    for i in range(0, len(y), batch):
        total += model.loss(X[i:i + batch], y[i:i + batch]) * len(y[i:i + batch])
    return total / len(y)


def fit(model, train, valid, cfg: TrainConfig,
        on_epoch: Callable[[int, float, float], None] | None = None) -> TrainHistory:
    """Mini-batch Adam with early stopping; restores the best validation epoch."""
    X, y = train
    Xv, yv = valid
    if len(y) == 0 or len(yv) == 0:
        raise TrainingError("fit needs non-empty training and validation windows")
    rng = np.random.default_rng(cfg.seed)
    params = _trainable(model)
    frozen = [p for p in model.parameters() if not p.trainable]
    opt = nn.Adam(params, lr=cfg.lr)
    stopper = EarlyStopping(cfg.patience)
    hist = TrainHistory()
    best = {p.name: p.value.copy() for p in params}

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(y))
        total = 0.0
        for b, start in enumerate(range(0, len(y), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            for p in params:
                p.zero_grad()
            loss = model.loss_and_grad(X[idx], y[idx], training=True, rng=rng)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch {b}")
            if cfg.clip_norm is not None:
                nn.clip_global_norm(params, cfg.clip_norm)
            opt.step()
            total += loss * len(idx)
        train_loss = total / len(y)
        valid_loss = mean_loss(model, Xv, yv, cfg.eval_batch)
        if not math.isfinite(valid_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        hist.train_loss.append(train_loss)
        hist.valid_loss.append(valid_loss)
        hist.seconds.append(time.perf_counter() - t0)
        hist.frozen_grad_norm.append(math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in frozen)))
        hist.stopped_epoch = epoch
        log.info("epoch %d train %.4f valid %.4f", epoch, train_loss, valid_loss)
        if on_epoch:
            on_epoch(epoch, train_loss, valid_loss)
        stop = stopper.update(epoch, valid_loss)
        if stopper.best_epoch == epoch:
            best = {p.name: p.value.copy() for p in params}
        if stop:
            hist.stop_reason = "patience"
            break
    else:
        hist.stop_reason = "max_epochs"

    for p in params:
        p.value[...] = best[p.name]
    hist.best_epoch = stopper.best_epoch
    return hist


# --- weights blob -------------------------------------------------------------


def encode_weights(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2:
            raise BundleError(f"tensor {name!r} must be 1-D or 2-D")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<II", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def decode_weights(blob: bytes, source: str = "weights.bin") -> dict[str, np.ndarray]:
    if len(blob) < 8:
        raise BundleError(f"{source}: truncated header ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise BundleError(f"{source}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise BundleError(f"{source}: unsupported format version {version}, expected {FORMAT_VERSION}")
    pos, out = 8, {}
    while pos < len(blob):
        if pos + 4 > len(blob):
            raise BundleError(f"{source}: truncated record header at byte {pos}")
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if pos + n + 8 > len(blob):
            raise BundleError(f"{source}: truncated record at byte {pos}")
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        rows, cols = struct.unpack_from("<II", blob, pos)
        pos += 8
        size = 4 * rows * cols
        if pos + size > len(blob):
            raise BundleError(f"{source}: tensor {name!r} truncated ({rows}x{cols})")
        if name in out:
            raise BundleError(f"{source}: duplicate tensor {name!r}")
        out[name] = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=pos).reshape(rows, cols)
        pos += size
    return out


def weights_blob_size(shapes: dict[str, tuple[int, int]]) -> int:
    """Expected byte length of a blob holding tensors of the given 2-D shapes."""
    return 8 + sum(12 + len(n.encode("utf-8")) + 4 * r * c for n, (r, c) in shapes.items())


def tensors_sha256(tensors: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(encode_weights(tensors)).hexdigest()


# --- manifest -------------------------------------------------------------------


def format_manifest(entries: dict[str, object]) -> str:
    lines = []
    for k in sorted(entries):
        v = str(entries[k])
        if "\n" in v or "=" in k:
            raise BundleError(f"manifest entry {k!r} is not representable")
        lines.append(f"{k}={v}\n")
    return "".join(lines)


def parse_manifest(text: str) -> dict[str, str]:
    out = {}
    for i, line in enumerate(text.splitlines(), 1):
        if not line:
            continue
        if "=" not in line:
            raise BundleError(f"manifest line {i} is not key=value: {line!r}")
        k, v = line.split("=", 1)
        out[k] = v
    return out


def bundle_sha256(path: str | os.PathLike) -> str:
    """Content hash over the manifest, every vocabulary file it names, and the weights."""
    path = Path(path)
    man = parse_manifest((path / MANIFEST).read_text(encoding="utf-8"))
    names = sorted({MANIFEST, WEIGHTS, *(v for k, v in man.items() if k.endswith("vocab_file"))})
    h = hashlib.sha256()
    for n in names:
        data = (path / n).read_bytes()
        h.update(n.encode() + b"\0" + struct.pack("<Q", len(data)) + data)
    return h.hexdigest()


def model_tensors(model) -> dict[str, np.ndarray]:
    return {p.name: p.value for p in model.parameters()}


def branch_tensors(model, branch: str | None = None) -> dict[str, np.ndarray]:
    """Encoder weights under their base-model names (``embedding``, ``gru.W_z``...)."""
    if isinstance(model, BaseLM):
        return {p.name: p.value for p in model.encoder.parameters()}
    i = TransferModel.branch_names.index(branch)
    prefix = f"{branch}_branch."
    return {p.name[len(prefix):]: p.value for p in model.branches[i].parameters()}


def save_bundle(model, path: str | os.PathLike, extra: dict[str, object] | None = None,
                history: TrainHistory | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    # Carried-over keys (pipeline metadata, or a loaded manifest) yield to recomputed ones.
    man: dict[str, object] = dict(getattr(model, "manifest_extra", None) or {})
    man.update({"format_version": FORMAT_VERSION, "model_kind": model.kind,
                "context": model.context, "seed": model.seed,
                "parameter_count": model.parameter_count()})
    if isinstance(model, BaseLM):
        c = model.config
        man.update(unit=c.unit, vocab_size=c.vocab_size, embed_dim=c.embed_dim,
                   hidden_dim=c.hidden_dim, dropout_rate=c.dropout_rate,
                   min_count=model.vocab.min_count, vocab_file="vocab.txt")
        model.vocab.save(path / "vocab.txt")
    else:
        man.update(units="rnn,gru", dropout_rate=model.dropout_rate, attn_dim=model.attn_dim,
                   vocab_size=len(model.vocab), min_count=model.vocab.min_count, vocab_file="vocab.txt")
        model.vocab.save(path / "vocab.txt")
        for name, enc, voc in zip(model.branch_names, model.branches, model.branch_vocabs):
            fname = f"{name}_vocab.txt"
            voc.save(path / fname)
            man.update({
                f"{name}_branch.vocab_file": fname,
                f"{name}_branch.vocab_size": len(voc),
                f"{name}_branch.min_count": voc.min_count,
                f"{name}_branch.embed_dim": enc.embed_dim,
                f"{name}_branch.hidden_dim": enc.hidden_dim,
                f"{name}_branch.weights_sha256": tensors_sha256(branch_tensors(model, name)),
            })
    if extra:
        man.update(extra)
    (path / WEIGHTS).write_bytes(encode_weights(model_tensors(model)))
    (path / MANIFEST).write_text(format_manifest(man), encoding="utf-8", newline="\n")
    if history is not None:
        (path / HISTORY).write_text(history.to_json(), encoding="utf-8", newline="\n")
    return path


def read_manifest(path: str | os.PathLike) -> dict[str, str]:
    f = Path(path) / MANIFEST
    if not f.is_file():
        raise BundleError(f"{path}: not a model bundle (missing {MANIFEST})")
    man = parse_manifest(f.read_text(encoding="utf-8"))
    if man.get("format_version") != str(FORMAT_VERSION):
        raise BundleError(f"{f}: unsupported format_version {man.get('format_version')!r}")
    return man


def _assign(params: dict[str, nn.Parameter], tensors: dict[str, np.ndarray], dtype, source: str):
    if set(params) != set(tensors):
        missing = sorted(set(params) - set(tensors))
        extra = sorted(set(tensors) - set(params))
        raise BundleError(f"{source}: tensor set mismatch (missing {missing}, unexpected {extra})")
    for name, p in params.items():
        arr = tensors[name]
        want = p.value.shape if p.value.ndim == 2 else (1, p.value.size)
        if arr.shape != want:
            raise BundleError(f"{source}: tensor {name!r} has shape {arr.shape}, manifest implies {want}")
        p.value = arr.reshape(p.value.shape).astype(dtype)
        p.grad = np.zeros_like(p.value)


def load_bundle(path: str | os.PathLike, dtype=nn.COMPUTE_DTYPE):
    """Rebuild a model from a bundle directory, validating manifest, shapes and blob."""
    path = Path(path)
    man = read_manifest(path)
    tensors = decode_weights((path / WEIGHTS).read_bytes(), str(path / WEIGHTS))
    try:
        kind = man["model_kind"]
        min_count = int(man.get("min_count", 1))
        vocab = Vocabulary.load(path / man["vocab_file"], min_count)
        if kind == "base":
            cfg = BaseLMConfig(man["unit"], int(man["vocab_size"]), int(man["embed_dim"]),
                               int(man["hidden_dim"]), int(man["context"]), float(man["dropout_rate"]))
            if len(vocab) != cfg.vocab_size:
                raise BundleError(f"{path}: vocab file has {len(vocab)} entries, manifest says {cfg.vocab_size}")
            model = BaseLM(cfg, vocab, seed=int(man["seed"]))
        elif kind == "transfer":
            encoders, vocabs = [], []
            rng = np.random.default_rng(0)
            for name in TransferModel.branch_names:
                key = f"{name}_branch."
                bv = Vocabulary.load(path / man[key + "vocab_file"], int(man.get(key + "min_count", 1)))
                enc = Encoder(name, len(bv), int(man[key + "embed_dim"]), int(man[key + "hidden_dim"]),
                              rng, prefix=key)
                for p in enc.parameters():
                    p.freeze()
                encoders.append(enc)
                vocabs.append(bv)
            model = TransferModel(encoders[0], encoders[1], tuple(vocabs), vocab, int(man["context"]),
                                  float(man["dropout_rate"]), int(man["attn_dim"]), seed=int(man["seed"]))
        else:
            raise BundleError(f"{path}: unknown model_kind {kind!r}")
    except KeyError as e:
        raise BundleError(f"{path}: manifest lacks key {e.args[0]!r}") from None
    _assign(model.named_parameters(), tensors, dtype, str(path / WEIGHTS))
    if isinstance(model, TransferModel):
        for name in model.branch_names:
            want = man.get(f"{name}_branch.weights_sha256")
            if want and tensors_sha256(branch_tensors(model, name)) != want:
                raise BundleError(f"{path}: {name} branch weights do not match their recorded hash")
    model.manifest = man
    model.manifest_extra = dict(man)
    return model


def verify_frozen(transfer_bundle, rnn_bundle, gru_bundle) -> None:
    """Raise unless both branches of a saved transfer bundle equal the source encoders bit for bit."""
    tm = load_bundle(transfer_bundle, dtype=np.float32)
    for name, src in zip(TransferModel.branch_names, (rnn_bundle, gru_bundle)):
        base = load_bundle(src, dtype=np.float32)
        want = tensors_sha256(branch_tensors(base))
        got = tensors_sha256(branch_tensors(tm, name))
        if got != want or tm.manifest.get(f"{name}_branch.weights_sha256") != want:
            raise TrainingError(f"{transfer_bundle}: {name} branch differs from {src}")


# --- pipelines -------------------------------------------------------------------


def windows_by_fold(model, seqs, folds: FoldAssignment):
    """All windows of ``seqs`` plus the fold of each window's target line."""
    X, y = model.windows(seqs)
    line_folds = folds.line_folds()
    fold_ids = np.concatenate([target_folds(s, line_folds) for s in seqs]) if seqs else np.zeros(0, int)
    return X, y, fold_ids


def _literals(preprocess: str) -> bool:
    if preprocess not in ("normalize", "strip-comments"):
        raise ValueError(f"unknown preprocessing mode {preprocess!r}")
    return preprocess == "normalize"


def pretrain(corpus_dir, unit: str, cfg: TrainConfig, *, min_count: int = 3, context: int = 20,
             embed_dim: int = 300, hidden_dim: int = 300, folds: int = 10,
             preprocess: str = "normalize"):
    """Corpus directory to a trained base LM; fold 1 of a LOC split drives early stopping."""
    seqs = load_corpus(corpus_dir, literals=_literals(preprocess))
    if not seqs:
        raise TrainingError(f"{corpus_dir}: no non-empty .java files")
    vocab = build_vocabulary(seqs, min_count)
    model = BaseLM(BaseLMConfig(unit, len(vocab), embed_dim, hidden_dim, context, cfg.dropout_rate),
                   vocab, seed=cfg.seed)
    assignment = split_folds(seqs, folds, cfg.seed)
    X, y, f = windows_by_fold(model, seqs, assignment)
    if len(y) == 0:
        raise TrainingError(f"{corpus_dir}: corpus yields no training windows")
    valid = f == FoldAssignment.VALID
    if cfg.clip_norm is None and unit == "rnn":
        cfg = TrainConfig(**{**asdict(cfg), "clip_norm": 5.0})
    hist = fit(model, (X[~valid], y[~valid]), (X[valid], y[valid]), cfg)
    model.manifest_extra = {"preprocess": preprocess, "folds": folds}
    if cfg.clip_norm is not None:
        model.manifest_extra["clip_norm"] = cfg.clip_norm
    return model, hist


def finetune(rnn_bundle, gru_bundle, project_dir, cfg: TrainConfig, *, min_count: int = 2,
             folds: int = 10, attn_dim: int | None = None, preprocess: str = "normalize"):
    """Freeze two pre-trained bundles and fit the attention head on a project's training folds."""
    rnn, gru = load_bundle(rnn_bundle), load_bundle(gru_bundle)
    for m, want, src in ((rnn, "rnn", rnn_bundle), (gru, "gru", gru_bundle)):
        if not isinstance(m, BaseLM) or m.config.unit != want:
            raise TrainingError(f"{src}: expected a pre-trained {want} bundle")
    seqs = load_corpus(project_dir, literals=_literals(preprocess))
    if not seqs:
        raise TrainingError(f"{project_dir}: no non-empty .java files")
    vocab = build_vocabulary(seqs, min_count)
    model = build_transfer(rnn, gru, vocab, cfg.dropout_rate, attn_dim, seed=cfg.seed)
    assignment = split_folds(seqs, folds, cfg.seed)
    X, y, f = windows_by_fold(model, seqs, assignment)
    train = f >= 2
    valid = f == FoldAssignment.VALID
    if not train.any() or not valid.any():
        raise TrainingError(f"{project_dir}: too small to fill training and validation folds")
    hist = fit(model, (X[train], y[train]), (X[valid], y[valid]), cfg)
    model.manifest_extra = {
        "preprocess": preprocess, "folds": folds, "fold_seed": cfg.seed,
        "rnn_branch.source_sha256": bundle_sha256(rnn_bundle),
        "gru_branch.source_sha256": bundle_sha256(gru_bundle),
    }
    return model, hist
