"""Erasable ensemble: neighbor seed repository, lambda-weighted ensemble
prediction, exact unlearning by seed removal, and the versioned binary wire
format for seed exchange."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (ConfigError, ConflictError, DimensionError, NotFoundError,
                     ParseError, ValidationError)
from .numeric import MlpModel, MlpSpec, mlp_forward, softmax_temp

SEED_MAGIC = b"HDUS"
SEED_FORMAT_VERSION = 1


@dataclass
class EnsembleConfig:
    lam: float = 0.3            # weight on the neighbor-seed ensemble
    combine: str = "proba"      # "proba" (default) or "logits"

    def __post_init__(self):
        if not 0.0 <= self.lam < 1.0:
            raise ConfigError(f"lambda must be in [0, 1), got {self.lam}")
        if self.combine not in ("proba", "logits"):
            raise ConfigError(f"combine must be 'proba' or 'logits', got {self.combine!r}")


@dataclass
class SeedRepository:
    """Ordered collection of neighbor seed models. Never holds an entry for
    the owning client itself."""

    owner_id: int
    entries: list[tuple[int, MlpModel]] = field(default_factory=list)

    def neighbor_ids(self) -> list[int]:
        return [nid for nid, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, neighbor_id: int) -> bool:
        return any(nid == neighbor_id for nid, _ in self.entries)


def add_neighbor_seed(repo: SeedRepository, neighbor_id: int,
                      seed: MlpModel) -> SeedRepository:
    """Append a neighbor's seed. Replacement requires an explicit remove first."""
    if neighbor_id == repo.owner_id:
        raise ValidationError(f"client {repo.owner_id} cannot store its own seed")
    if neighbor_id in repo:
        raise ConflictError(f"neighbor {neighbor_id} already present")
    if repo.entries:
        ref_spec = repo.entries[0][1].spec
        if (seed.spec.in_dim, seed.spec.out_dim) != (ref_spec.in_dim, ref_spec.out_dim):
            raise ValidationError(
                f"seed from neighbor {neighbor_id} has dims "
                f"({seed.spec.in_dim}, {seed.spec.out_dim}), repository holds "
                f"({ref_spec.in_dim}, {ref_spec.out_dim})")
    repo.entries.append((neighbor_id, seed))
    return repo


def unlearn_neighbor(repo: SeedRepository, neighbor_id: int) -> SeedRepository:
    """Delete a neighbor's seed entry; O(K), no retraining, no other state touched."""
    for i, (nid, _) in enumerate(repo.entries):
        if nid == neighbor_id:
            del repo.entries[i]
            return repo
    raise NotFoundError(f"neighbor {neighbor_id} not in repository of "
                        f"client {repo.owner_id}")


def ensemble_predict(main: MlpModel, repo: SeedRepository, cfg: EnsembleConfig,
                     batch: np.ndarray) -> np.ndarray:
    """(1 - lambda) * p_main + (lambda / K) * sum_k p_seed_k.

    Model outputs are converted to probabilities by a standard softmax before
    averaging (set cfg.combine = "logits" to average raw logits instead). An
    empty repository degenerates to the main model alone.
    """
    batch = np.asarray(batch, dtype=np.float64)

    def out(model: MlpModel, who: str) -> np.ndarray:
        try:
            logits = mlp_forward(model, batch)
        except DimensionError as e:
            raise DimensionError(f"{who}: {e}") from e
        return logits if cfg.combine == "logits" else softmax_temp(logits, 1.0)

    main_out = out(main, "main model")
    if len(repo) == 0 or cfg.lam == 0.0:
        return main_out
    seed_sum = np.zeros_like(main_out)
    for nid, seed in repo.entries:
        seed_sum += out(seed, f"seed of neighbor {nid}")
    k = len(repo)
    return (1.0 - cfg.lam) * main_out + (cfg.lam / k) * seed_sum


# ---------------------------------------------------------------------------
# Wire format: magic "HDUS" | u16 version | u16 layer count | u32 layer dims |
# f64 parameters (per layer: weights row-major, then biases) | u32 CRC32 of
# everything preceding. All integers and floats little-endian.
# ---------------------------------------------------------------------------

def serialize_seed(model: MlpModel) -> bytes:
    head = SEED_MAGIC + struct.pack("<HH", SEED_FORMAT_VERSION,
                                    len(model.spec.layer_dims))
    head += struct.pack(f"<{len(model.spec.layer_dims)}I", *model.spec.layer_dims)
    body = model.flatten().astype("<f8").tobytes()
    payload = head + body
    return payload + struct.pack("<I", zlib.crc32(payload))


def deserialize_seed(blob: bytes) -> MlpModel:
    if len(blob) < 12:
        raise ParseError("blob too short for header", offset=len(blob))
    if blob[:4] != SEED_MAGIC:
        raise ParseError(f"bad magic {blob[:4]!r}", offset=0)
    version, n_layers = struct.unpack_from("<HH", blob, 4)
    if version != SEED_FORMAT_VERSION:
        raise ParseError(f"unsupported format version {version}", offset=4)
    dims_end = 8 + 4 * n_layers
    if len(blob) < dims_end + 4:
        raise ParseError("truncated layer dims", offset=len(blob))
    dims = struct.unpack_from(f"<{n_layers}I", blob, 8)
    spec = MlpSpec(dims)
    n_params = spec.param_count()
    body_end = dims_end + 8 * n_params
    if len(blob) != body_end + 4:
        raise ParseError(
            f"expected {body_end + 4} bytes for {n_params} parameters, got "
            f"{len(blob)}", offset=min(len(blob), body_end))
    (crc,) = struct.unpack_from("<I", blob, body_end)
    if crc != zlib.crc32(blob[:body_end]):
        raise ParseError("CRC mismatch", offset=body_end)
    flat = np.frombuffer(blob, dtype="<f8", count=n_params, offset=dims_end)
    model = init_skeleton(spec)
    model.load_flat(flat.astype(np.float64))
    return model


def init_skeleton(spec: MlpSpec) -> MlpModel:
    """Zero-parameter model of the given shape (deserialization target)."""
    dims = spec.layer_dims
    weights = [np.zeros((dims[i], dims[i + 1])) for i in range(len(dims) - 1)]
    biases = [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)]
    return MlpModel(spec, weights, biases)
