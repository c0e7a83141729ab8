"""Dataset loading and generation: IDX image files, UTF-8 character corpora,
and seeded synthetic classification data at desk scale."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class IdxParseError(ValueError):
    """Malformed IDX file; message includes the byte offset."""


_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def read_idx(path) -> np.ndarray:
    """Read one IDX file (big-endian magic, dims, raw values) into an array."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxParseError(f"{path}: truncated magic at byte 0")
    zero1, zero2, dcode, ndim = struct.unpack(">BBBB", raw[:4])
    if zero1 != 0 or zero2 != 0:
        raise IdxParseError(f"{path}: bad magic bytes at byte 0")
    if dcode not in _IDX_DTYPES:
        raise IdxParseError(f"{path}: unknown dtype code 0x{dcode:02x} at byte 2")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxParseError(f"{path}: truncated dimension header at byte {len(raw)}")
    dims = struct.unpack(f">{ndim}i", raw[4:header_end])
    if any(d < 0 for d in dims):
        raise IdxParseError(f"{path}: negative dimension at byte 4")
    dtype = _IDX_DTYPES[dcode]
    count = int(np.prod(dims)) if dims else 1
    expected = header_end + count * dtype.itemsize
    if len(raw) != expected:
        raise IdxParseError(
            f"{path}: expected {expected} bytes, got {len(raw)} (data at byte {header_end})"
        )
    arr = np.frombuffer(raw, dtype=dtype, offset=header_end, count=count)
    return arr.reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, arr: np.ndarray):
    """Inverse of read_idx, for fixtures and synthetic exports."""
    codes = {np.dtype("u1"): 0x08, np.dtype("i1"): 0x09, np.dtype("i2"): 0x0B,
             np.dtype("i4"): 0x0C, np.dtype("f4"): 0x0D, np.dtype("f8"): 0x0E}
    code = codes[np.dtype(arr.dtype)]
    with open(path, "wb") as f:
        f.write(struct.pack(">BBBB", 0, 0, code, arr.ndim))
        for d in arr.shape:
            f.write(struct.pack(">i", d))
        f.write(arr.astype(np.dtype(arr.dtype).newbyteorder(">")).tobytes())


@dataclass
class Splits:
    """Train/dev/test splits.  For classification: (x, y) arrays per split.
    For character corpora: integer-coded arrays plus the vocabulary."""

    train: tuple
    dev: tuple
    test: tuple
    vocab: list[str] | None = None
    meta: dict = field(default_factory=dict)

    def get(self, name: str) -> tuple:
        return getattr(self, name)


def split_indices(n: int, fractions=(0.9, 0.05, 0.05)):
    """Sizes by floor rule, remainder to train."""
    n_dev = int(n * fractions[1])
    n_test = int(n * fractions[2])
    n_train = n - n_dev - n_test
    return n_train, n_dev, n_test


def synthetic_clusters(n_samples: int, n_classes: int, dim: int, seed: int,
                       spread: float = 1.0, fractions=(0.7, 0.15, 0.15)) -> Splits:
    """Seeded Gaussian-cluster classification data, shuffled then split."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 1.0, size=(n_classes, dim))
    y = rng.integers(0, n_classes, size=n_samples)
    x = centers[y] + rng.normal(0.0, spread, size=(n_samples, dim))
    order = rng.permutation(n_samples)
    x, y = x[order], y[order]
    n_train, n_dev, n_test = split_indices(n_samples, fractions)
    return Splits(
        train=(x[:n_train], y[:n_train]),
        dev=(x[n_train : n_train + n_dev], y[n_train : n_train + n_dev]),
        test=(x[n_train + n_dev :], y[n_train + n_dev :]),
        meta={"dim": dim, "classes": n_classes},
    )


def synthetic_digit_images(n_samples: int, n_classes: int, seed: int,
                           size: int = 8, noise: float = 0.25,
                           fractions=(0.7, 0.15, 0.15)) -> Splits:
    """Digit-style images: one random blocky template per class plus noise."""
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0.0, 1.0, size=(n_classes, size // 2, size // 2))
    templates = coarse.repeat(2, axis=1).repeat(2, axis=2)
    y = rng.integers(0, n_classes, size=n_samples)
    x = templates[y] + rng.normal(0.0, noise, size=(n_samples, size, size))
    x = x[:, None, :, :]  # channel axis
    order = rng.permutation(n_samples)
    x, y = x[order], y[order]
    n_train, n_dev, n_test = split_indices(n_samples, fractions)
    return Splits(
        train=(x[:n_train], y[:n_train]),
        dev=(x[n_train : n_train + n_dev], y[n_train : n_train + n_dev]),
        test=(x[n_train + n_dev :], y[n_train + n_dev :]),
        meta={"size": size, "classes": n_classes},
    )


def load_idx_classification(images_path, labels_path, fractions=(0.7, 0.15, 0.15),
                            seed: int = 0) -> Splits:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise IdxParseError(f"{images_path}: expected 3-d image file, got {images.ndim}-d")
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise IdxParseError(
            f"{labels_path}: label count {labels.shape} does not match images {images.shape[0]}"
        )
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    y = labels.astype(np.int64)
    rng = np.random.default_rng(seed)
    order = rng.permutation(x.shape[0])
    x, y = x[order], y[order]
    n_train, n_dev, n_test = split_indices(x.shape[0], fractions)
    return Splits(
        train=(x[:n_train], y[:n_train]),
        dev=(x[n_train : n_train + n_dev], y[n_train : n_train + n_dev]),
        test=(x[n_train + n_dev :], y[n_train + n_dev :]),
        meta={"classes": int(y.max()) + 1},
    )


def encode_text(text: str):
    vocab = sorted(set(text))
    index = {c: i for i, c in enumerate(vocab)}
    codes = np.fromiter((index[c] for c in text), dtype=np.int64, count=len(text))
    return codes, vocab


def load_text_corpus(path, fractions=(0.9, 0.05, 0.05)) -> Splits:
    """UTF-8 character corpus split contiguously train/dev/test (floor rule,
    remainder to train)."""
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    if not text:
        raise ValueError(f"{path}: empty corpus")
    codes, vocab = encode_text(text)
    n = len(codes)
    n_dev = int(n * fractions[1])
    n_test = int(n * fractions[2])
    n_train = n - n_dev - n_test
    return Splits(
        train=(codes[:n_train],),
        dev=(codes[n_train : n_train + n_dev],),
        test=(codes[n_train + n_dev :],),
        vocab=vocab,
        meta={"vocab_size": len(vocab)},
    )


def synthetic_text(n_chars: int, seed: int, vocab_size: int = 26, order: int = 2) -> str:
    """Seeded Markov-chain text with nontrivial but learnable structure.

    Each state maps to a sparse next-character distribution, so a small model
    can beat the unigram entropy but not reach zero.
    """
    rng = np.random.default_rng(seed)
    chars = [chr(ord("a") + i) for i in range(min(vocab_size, 26))]
    v = len(chars)
    n_states = v ** order
    k = min(4, v)  # successors per state
    succ = rng.integers(0, v, size=(n_states, k))
    weights = rng.dirichlet(np.ones(k) * 0.5, size=n_states)
    out = list(rng.integers(0, v, size=order))
    state = 0
    for c in out:
        state = state * v + int(c)
    state %= n_states
    for _ in range(n_chars - order):
        j = rng.choice(k, p=weights[state])
        c = int(succ[state, j])
        out.append(c)
        state = (state * v + c) % n_states
    return "".join(chars[c] for c in out)


def load_dataset(cfg: dict) -> Splits:
    """Dispatch on cfg['kind']: clusters | digit-images | idx | text | synthetic-text."""
    kind = cfg["kind"]
    if kind == "clusters":
        return synthetic_clusters(
            cfg["n_samples"], cfg["classes"], cfg["dim"], cfg["seed"],
            spread=cfg.get("spread", 1.0),
            fractions=tuple(cfg.get("fractions", (0.7, 0.15, 0.15))),
        )
    if kind == "digit-images":
        return synthetic_digit_images(
            cfg["n_samples"], cfg["classes"], cfg["seed"],
            size=cfg.get("size", 8), noise=cfg.get("noise", 0.25),
            fractions=tuple(cfg.get("fractions", (0.7, 0.15, 0.15))),
        )
    if kind == "idx":
        return load_idx_classification(
            cfg["images"], cfg["labels"],
            fractions=tuple(cfg.get("fractions", (0.7, 0.15, 0.15))),
            seed=cfg.get("seed", 0),
        )
    if kind == "text":
        return load_text_corpus(
            cfg["path"], fractions=tuple(cfg.get("fractions", (0.9, 0.05, 0.05)))
        )
    if kind == "synthetic-text":
        text = synthetic_text(
            cfg["n_chars"], cfg["seed"],
            vocab_size=cfg.get("vocab_size", 26), order=cfg.get("order", 2),
        )
        codes, vocab = encode_text(text)
        n = len(codes)
        fr = tuple(cfg.get("fractions", (0.9, 0.05, 0.05)))
        n_dev, n_test = int(n * fr[1]), int(n * fr[2])
        n_train = n - n_dev - n_test
        return Splits(
            train=(codes[:n_train],),
            dev=(codes[n_train : n_train + n_dev],),
            test=(codes[n_train + n_dev :],),
            vocab=vocab,
            meta={"vocab_size": len(vocab)},
        )
    raise ValueError(f"unknown dataset kind {kind!r}")
