"""Synthetic four-task "dialect" families and dataset persistence.

Task structure mirrors a main/rest split of two dialect groups: A-main,
B-main, A-rest, B-rest (learned in that order). The rest task of each group
shares its group's feature transform up to a perturbation scaled by
(1 - similarity), so tasks 0 and 2 are close while group B is an independent
shift. Each token emits 2-4 frames: rotated-and-shifted prototype plus noise.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .seqmodel import Utterance

TASK_NAMES = ("A-main", "B-main", "A-rest", "B-rest")

DATA_MAGIC = "SEQCL-DATA v1"


class DataFormatError(Exception):
    pass


@dataclass
class TaskSpec:
    task_id: int
    rotation: np.ndarray        # [d, d] orthonormal feature transform
    bias: np.ndarray            # [d]
    bigram: np.ndarray          # [n_content, n_content], rows sum to 1
    init_dist: np.ndarray       # [n_content]
    proto_offsets: np.ndarray   # [n_content, d] per-token prototype offsets
    prototype_jitter: float
    sizes: tuple[int, int, int]
    seed: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.bigram = np.asarray(self.bigram, dtype=np.float64)
        self.init_dist = np.asarray(self.init_dist, dtype=np.float64)
        self.proto_offsets = np.asarray(self.proto_offsets, dtype=np.float64)
        d = self.rotation.shape[0]
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(d), atol=1e-9):
            raise ValueError("feature transform is not orthonormal")
        if not np.allclose(self.bigram.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("bigram rows must sum to 1")


@dataclass
class TaskDataset:
    spec: TaskSpec
    train: list[Utterance] = field(default_factory=list)
    valid: list[Utterance] = field(default_factory=list)
    test: list[Utterance] = field(default_factory=list)

    def splits(self) -> dict[str, list[Utterance]]:
        return {"train": self.train, "valid": self.valid, "test": self.test}


@dataclass(frozen=True)
class GenParams:
    d: int = 6
    o: int = 8                      # blank, start/end, o-2 content tokens
    w_range: tuple[int, int] = (2, 6)
    reps_range: tuple[int, int] = (2, 4)
    noise: float = 0.35
    prototype_jitter: float = 0.3
    bias_scale: float = 0.4
    rot_perturb: float = 0.9        # radians of transform drift at similarity 0


def _random_rotation(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _perturb_rotation(rng: np.random.Generator, base: np.ndarray,
                      amount: float) -> np.ndarray:
    if amount == 0.0:
        return base.copy()
    d = base.shape[0]
    s = rng.normal(size=(d, d))
    skew = (s - s.T) / 2.0
    skew *= amount / max(np.linalg.norm(skew), 1e-12)
    return base @ expm(skew)


def _dirichlet_rows(rng: np.random.Generator, n: int) -> np.ndarray:
    """Transition rows with a zero diagonal: adjacent repeats of a token are
    indistinguishable from one long token at the frame level, so they are
    excluded by construction."""
    rows = rng.gamma(1.0, size=(n, n))
    np.fill_diagonal(rows, 0.0)
    return rows / rows.sum(axis=1, keepdims=True)


def _renorm(rows: np.ndarray) -> np.ndarray:
    return rows / rows.sum(axis=-1, keepdims=True)


def _sample_utterance(rng: np.random.Generator, spec: TaskSpec,
                      prototypes: np.ndarray, gp: GenParams) -> Utterance:
    n_content = prototypes.shape[0]
    w = int(rng.integers(gp.w_range[0], gp.w_range[1] + 1))
    toks = np.empty(w, dtype=np.int64)
    toks[0] = rng.choice(n_content, p=spec.init_dist)
    for i in range(1, w):
        toks[i] = rng.choice(n_content, p=spec.bigram[toks[i - 1]])
    frames = []
    for t in toks:
        center = spec.rotation @ (prototypes[t] + spec.proto_offsets[t]) + spec.bias
        reps = int(rng.integers(gp.reps_range[0], gp.reps_range[1] + 1))
        frames.append(center + gp.noise * rng.normal(size=(reps, gp.d)))
    return Utterance(np.vstack(frames), toks + 2)  # content ids start at 2


def _materialize(spec: TaskSpec, prototypes: np.ndarray, gp: GenParams,
                 split_seeds) -> TaskDataset:
    ds = TaskDataset(spec)
    for (name, n), seq in zip(zip(("train", "valid", "test"), spec.sizes), split_seeds):
        rng = np.random.default_rng(seq)
        getattr(ds, name).extend(
            _sample_utterance(rng, spec, prototypes, gp) for _ in range(n))
    return ds


def generate_family(master_seed: int, similarity: float,
                    sizes: tuple[int, int, int] = (200, 50, 50),
                    gp: GenParams = GenParams()) -> list[TaskDataset]:
    """Four tasks A-main, B-main, A-rest, B-rest with tunable A/rest closeness."""
    if not 0.0 <= similarity <= 1.0:
        raise ValueError(f"similarity outside [0, 1]: {similarity}")
    root = np.random.SeedSequence(master_seed)
    proto_seq, struct_seq, *task_seqs = root.spawn(2 + 4)
    n_content = gp.o - 2
    prototypes = np.random.default_rng(proto_seq).normal(size=(n_content, gp.d))
    srng = np.random.default_rng(struct_seq)

    def group(main_id: int, rest_id: int) -> list[TaskSpec]:
        rot = _random_rotation(srng, gp.d)
        bias = gp.bias_scale * srng.normal(size=gp.d)
        bigram = _dirichlet_rows(srng, n_content)
        init = _renorm(srng.gamma(1.0, size=n_content))
        offsets = gp.prototype_jitter * srng.normal(size=(n_content, gp.d))
        drift = 1.0 - similarity
        rot_rest = _perturb_rotation(srng, rot, gp.rot_perturb * drift)
        bias_rest = bias + drift * gp.bias_scale * srng.normal(size=gp.d)
        bigram_rest = _renorm(similarity * bigram + drift * _dirichlet_rows(srng, n_content))
        init_rest = _renorm(similarity * init + drift * _renorm(srng.gamma(1.0, size=n_content)))
        offsets_rest = offsets + drift * gp.prototype_jitter * srng.normal(
            size=(n_content, gp.d))
        mk = lambda tid, r, b, bg, ini, off: TaskSpec(
            tid, r, b, bg, ini, off, gp.prototype_jitter, tuple(sizes), master_seed)
        return [mk(main_id, rot, bias, bigram, init, offsets),
                mk(rest_id, rot_rest, bias_rest, bigram_rest, init_rest, offsets_rest)]

    a_main, a_rest = group(0, 2)
    b_main, b_rest = group(1, 3)
    specs = [a_main, b_main, a_rest, b_rest]
    return [_materialize(spec, prototypes, gp, task_seqs[spec.task_id].spawn(3))
            for spec in specs]


# ---------------------------------------------------------------------------
# SEQCL-DATA v1 container: ASCII header, then named arrays and length-prefixed
# utterance records in raw little-endian payload. Shared by datasets and the
# exemplar memory.

def write_container(path, meta: dict, arrays: dict[str, np.ndarray],
                    splits: dict[str, list[tuple[Utterance, int]]]) -> None:
    header = [DATA_MAGIC, "meta " + json.dumps(meta, sort_keys=True)]
    for name, arr in arrays.items():
        dims = " ".join(str(x) for x in np.asarray(arr).shape)
        header.append(f"arr {name} f64 {dims}".rstrip())
    for name, entries in splits.items():
        header.append(f"split {name} {len(entries)}")
    header.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        for arr in arrays.values():
            fh.write(np.asarray(arr, dtype="<f8").tobytes())
        for entries in splits.values():
            for utt, task_id in entries:
                l, w = utt.frames.shape[0], utt.tokens.shape[0]
                fh.write(np.array([l, w], dtype="<u4").tobytes())
                fh.write(np.array([task_id], dtype="<i4").tobytes())
                fh.write(utt.frames.astype("<f8").tobytes())
                fh.write(utt.tokens.astype("<u4").tobytes())


def read_container(path):
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii", errors="replace").rstrip("\n")
        if magic != DATA_MAGIC:
            raise DataFormatError(f"bad or unsupported data header: {magic!r}")
        meta: dict = {}
        array_decl: list[tuple[str, tuple]] = []
        split_decl: list[tuple[str, int]] = []
        while True:
            line = fh.readline().decode("ascii", errors="replace").rstrip("\n")
            if line == "end":
                break
            if line.startswith("meta "):
                meta = json.loads(line[5:])
            elif line.startswith("arr "):
                fields = line.split()
                array_decl.append((fields[1], tuple(int(x) for x in fields[3:])))
            elif line.startswith("split "):
                _, name, count = line.split()
                split_decl.append((name, int(count)))
            else:
                raise DataFormatError(f"corrupt container record: {line!r}")

        def take(nbytes: int) -> bytes:
            buf = fh.read(nbytes)
            if len(buf) != nbytes:
                raise DataFormatError("truncated container payload")
            return buf

        arrays = {}
        for name, shape in array_decl:
            n = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).copy()
        if "d" not in meta:
            raise DataFormatError("container meta missing feature dim 'd'")
        d = int(meta["d"])
        splits = {}
        for name, count in split_decl:
            entries = []
            for _ in range(count):
                l, w = np.frombuffer(take(8), dtype="<u4")
                task_id = int(np.frombuffer(take(4), dtype="<i4")[0])
                frames = np.frombuffer(take(8 * int(l) * d), dtype="<f8").reshape(int(l), d)
                tokens = np.frombuffer(take(4 * int(w)), dtype="<u4").astype(np.int64)
                entries.append((Utterance(frames.copy(), tokens), task_id))
            splits[name] = entries
        if fh.read(1):
            raise DataFormatError("trailing bytes after declared payload")
        return meta, arrays, splits


def save_dataset(ds: TaskDataset, path) -> None:
    spec = ds.spec
    meta = {
        "kind": "task_dataset",
        "task_id": spec.task_id,
        "d": int(spec.rotation.shape[0]),
        "prototype_jitter": spec.prototype_jitter,
        "sizes": list(spec.sizes),
        "seed": spec.seed,
    }
    arrays = {
        "rotation": spec.rotation, "bias": spec.bias, "bigram": spec.bigram,
        "init_dist": spec.init_dist, "proto_offsets": spec.proto_offsets,
    }
    splits = {name: [(u, spec.task_id) for u in lst]
              for name, lst in ds.splits().items()}
    write_container(path, meta, arrays, splits)


def load_dataset(path) -> TaskDataset:
    meta, arrays, splits = read_container(path)
    if meta.get("kind") != "task_dataset":
        raise DataFormatError(f"container is not a task dataset: {meta.get('kind')!r}")
    spec = TaskSpec(
        task_id=int(meta["task_id"]),
        rotation=arrays["rotation"], bias=arrays["bias"], bigram=arrays["bigram"],
        init_dist=arrays["init_dist"], proto_offsets=arrays["proto_offsets"],
        prototype_jitter=float(meta["prototype_jitter"]),
        sizes=tuple(meta["sizes"]), seed=int(meta["seed"]),
    )
    ds = TaskDataset(spec)
    for name in ("train", "valid", "test"):
        getattr(ds, name).extend(u for u, _ in splits.get(name, []))
    return ds
