"""Precomputed clinical-text embeddings: storage, file format, optional
remote provider, and projection into the fusion width."""

from __future__ import annotations

import base64
import hashlib
import json
import urllib.error
import urllib.request
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
from torch import nn

from medfuse.ehr_data import TEXT_SECTIONS, DataError
from medfuse.utils import atomic_write_text

EMB_MAGIC = "MEDFUSE-EMB"
EMB_VERSION = "v1"


class EmbeddingFormatError(DataError):
    pass


@dataclass
class RejectedRow:
    line: int
    reason: str


@dataclass
class EmbeddingStore:
    """Immutable-after-load mapping (visit_id, section) -> float32 vector."""

    d_text: int
    provenance: str = ""
    entries: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)
    rejected: list[RejectedRow] = field(default_factory=list)

    def add(self, visit_id: str, section: str, vector) -> None:
        if section not in TEXT_SECTIONS:
            raise EmbeddingFormatError(f"unknown section {section!r}")
        vec = np.asarray(vector, dtype="<f4").reshape(-1)
        if vec.shape[0] != self.d_text:
            raise EmbeddingFormatError(
                f"dimension mismatch for ({visit_id}, {section}): expected {self.d_text}, got {vec.shape[0]}"
            )
        if not np.all(np.isfinite(vec)):
            raise EmbeddingFormatError(f"non-finite entry for ({visit_id}, {section})")
        vec.setflags(write=False)
        self.entries[(visit_id, section)] = vec

    def get(self, visit_id: str, section: str) -> np.ndarray | None:
        return self.entries.get((visit_id, section))

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key) -> bool:
        return key in self.entries


def _encode_vector(vec: np.ndarray) -> str:
    return base64.b64encode(np.asarray(vec, dtype="<f4").tobytes()).decode("ascii")


def save_embedding_store(store: EmbeddingStore, path: str | Path) -> None:
    lines = [f"{EMB_MAGIC} {EMB_VERSION} {store.d_text}"]
    for (visit_id, section), vec in sorted(store.entries.items()):
        lines.append(f"{visit_id}\t{section}\t{_encode_vector(vec)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_embedding_store(path: str | Path, provenance: str | None = None) -> EmbeddingStore:
    """Read a ``MEDFUSE-EMB v1`` file.

    Rows with an unknown section are skipped and reported in ``store.rejected``;
    any dimension inconsistency fails the whole load.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != EMB_MAGIC:
            raise EmbeddingFormatError(f"{path}: not an embedding file")
        if header[1] != EMB_VERSION:
            raise EmbeddingFormatError(f"{path}: unsupported version {header[1]!r}")
        try:
            d_text = int(header[2])
        except ValueError:
            raise EmbeddingFormatError(f"{path}: bad dimension {header[2]!r}") from None
        if d_text < 1:
            raise EmbeddingFormatError(f"{path}: bad dimension {d_text}")
        store = EmbeddingStore(d_text=d_text, provenance=provenance or str(path))
        for line_no, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                store.rejected.append(RejectedRow(line_no, "expected 3 tab-separated fields"))
                continue
            visit_id, section, payload = parts
            if section not in TEXT_SECTIONS:
                store.rejected.append(RejectedRow(line_no, f"unknown section {section!r}"))
                continue
            try:
                raw = base64.b64decode(payload, validate=True)
            except ValueError:
                store.rejected.append(RejectedRow(line_no, "invalid base64 payload"))
                continue
            if len(raw) % 4:
                raise EmbeddingFormatError(f"{path}:{line_no}: payload for ({visit_id}, {section}) is not float32")
            vec = np.frombuffer(raw, dtype="<f4")
            if vec.shape[0] != d_text:
                raise EmbeddingFormatError(
                    f"{path}:{line_no}: dimension mismatch for ({visit_id}, {section}): "
                    f"expected {d_text}, got {vec.shape[0]}"
                )
            store.add(visit_id, section, vec)
    return store


# -- remote provider ---------------------------------------------------------

class ProviderError(RuntimeError):
    """Retriable provider failure (timeout, unavailable, malformed reply)."""

    retriable = True


class ProviderDimensionError(RuntimeError):
    retriable = False


def http_transport(endpoint: str, timeout: float = 30.0) -> Callable[[dict], dict]:
    """JSON-over-HTTP POST transport: ``{"request_id", "text"}`` in,
    ``{"request_id", "vector"}`` out."""

    def send(request: dict) -> dict:
        body = json.dumps(request).encode("utf-8")
        req = urllib.request.Request(endpoint, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise ProviderError(f"provider unavailable at {endpoint}: {exc}") from exc
        except ValueError as exc:
            raise ProviderError(f"malformed provider response: {exc}") from exc

    return send


class EmbeddingProvider:
    """Text -> vector with a content-hash cache in front of a transport.

    Without a transport only cached texts can be served.
    """

    def __init__(self, d_text: int, transport: Callable[[dict], dict] | None = None):
        self.d_text = d_text
        self.transport = transport
        self.cache: dict[str, np.ndarray] = {}
        self.requests_sent = 0

    @staticmethod
    def content_key(text: str) -> str:
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def request(self, text: str) -> np.ndarray:
        key = self.content_key(text)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        if self.transport is None:
            raise ProviderError("no provider configured and text not in cache")
        request_id = uuid.uuid4().hex
        self.requests_sent += 1
        reply = self.transport({"request_id": request_id, "text": text})
        if not isinstance(reply, Mapping) or reply.get("request_id") != request_id or "vector" not in reply:
            raise ProviderError("malformed provider response")
        try:
            vec = np.asarray(reply["vector"], dtype="<f4").reshape(-1)
        except (TypeError, ValueError) as exc:
            raise ProviderError(f"malformed provider vector: {exc}") from exc
        if vec.shape[0] != self.d_text:
            raise ProviderDimensionError(f"provider vector dimension: expected {self.d_text}, got {vec.shape[0]}")
        if not np.all(np.isfinite(vec)):
            raise ProviderError("provider returned non-finite values")
        vec.setflags(write=False)
        self.cache[key] = vec
        return vec

    def embed_into(self, store: EmbeddingStore, visit_id: str, section: str, text: str) -> None:
        store.add(visit_id, section, self.request(text))


# -- projection --------------------------------------------------------------

class TextProjection(nn.Module):
    """Feed-forward map from the embedding width to the fusion width."""

    def __init__(self, d_text: int, d_model: int, hidden: int = 0):
        super().__init__()
        if hidden > 0:
            self.net = nn.Sequential(nn.Linear(d_text, hidden), nn.GELU(), nn.Linear(hidden, d_model))
        else:
            self.net = nn.Linear(d_text, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def gather_text_embeddings(
    visit_ids, store: EmbeddingStore, sections=TEXT_SECTIONS
) -> tuple[np.ndarray, np.ndarray]:
    """Stack per-visit section vectors into ``(n, len(sections), d_text)`` plus
    a validity mask, in fixed section order."""
    n = len(visit_ids)
    out = np.zeros((n, len(sections), store.d_text), dtype=np.float32)
    valid = np.zeros((n, len(sections)), dtype=bool)
    for i, vid in enumerate(visit_ids):
        for s, name in enumerate(sections):
            vec = store.get(vid, name)
            if vec is not None:
                out[i, s] = vec
                valid[i, s] = True
    return out, valid


def masked_mean(tokens: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Mean over valid rows; all-invalid sequences pool to zero."""
    w = valid.to(tokens.dtype).unsqueeze(-1)
    count = w.sum(dim=-2).clamp_min(1.0)
    return (tokens * w).sum(dim=-2) / count


@dataclass
class TextTokens:
    tokens: torch.Tensor  # (a_tokens, d_model)
    valid: torch.Tensor  # (a_tokens,)
    pooled: torch.Tensor  # (d_model,)

    @property
    def any_valid(self) -> bool:
        return bool(self.valid.any())


def assemble_text_tokens(visit, store: EmbeddingStore, projection: nn.Module, sections=TEXT_SECTIONS[:4]) -> TextTokens:
    """Project each stored section embedding of ``visit`` into one token.

    Absent sections become zero padding rows with validity False.
    """
    raw, valid = gather_text_embeddings([visit.visit_id], store, sections)
    dtype = next(projection.parameters()).dtype
    x = torch.from_numpy(raw[0]).to(dtype)
    valid_t = torch.from_numpy(valid[0])
    tokens = projection(x) * valid_t.unsqueeze(-1).to(dtype)
    return TextTokens(tokens, valid_t, masked_mean(tokens, valid_t))

