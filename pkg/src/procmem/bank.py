"""Persistent procedural-memory bank.

A bank directory holds one human-readable ``bank.json`` manifest with the
embedded state sequences, adapter containers under ``adapters/``, and an
embedding cache directory. The manifest is rewritten atomically, so a
crash between write steps leaves the previous valid manifest readable.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .container import AdapterSet, read_adapter
from .embed import CachedEmbedder, Embedder, EmbeddingVector
from .errors import BankError, DuplicateTaskId, EmbedModelMismatch, ProcmemError
from .schema import (
    MATCHED_FIELDS,
    StateSequence,
    canonical_field_text,
    state_to_dict,
    validate_state,
)

MANIFEST_NAME = "bank.json"
ADAPTER_DIR = "adapters"
MANIFEST_VERSION = 1


@dataclass
class MemoryEntry:
    """One stored memory: its state sequence and adapter reference.

    ``precomputed`` holds field-text embeddings in memory after
    pre-encoding; persistence lives in the embedding cache, not in the
    manifest.
    """

    task_id: str
    states: StateSequence
    adapter_ref: str
    precomputed: dict[str, EmbeddingVector] = field(default_factory=dict)


@dataclass
class BankManifest:
    version: int
    embed_model_id: str
    memories: list[MemoryEntry]
    base_adapter_ref: Optional[str] = None


@dataclass
class BankReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    factor_fusable: bool = True
    memory_count: int = 0

    @property
    def ok(self) -> bool:
        return not self.errors

    def render(self) -> str:
        lines = [f"memories: {self.memory_count}"]
        for err in self.errors:
            lines.append(f"error: {err}")
        for warning in self.warnings:
            lines.append(f"warning: {warning}")
        if self.factor_fusable:
            lines.append("factor-fusable: yes")
        else:
            lines.append("factor-fusable: no; delta-only")
        return "\n".join(lines)


class Bank:
    """Read-mostly memory bank over one directory.

    Mutations (register, precompute) take a single-writer lock and persist
    before returning; loaded state is safe to share across reader threads.
    """

    def __init__(self, root: str | os.PathLike, manifest: BankManifest):
        self.root = Path(root)
        self.manifest = manifest
        self._write_lock = threading.Lock()
        self._adapter_cache: dict[str, AdapterSet] = {}

    # -- lifecycle -----------------------------------------------------------

    @classmethod
    def init(cls, root: str | os.PathLike, embed_model_id: str) -> "Bank":
        root = Path(root)
        if (root / MANIFEST_NAME).exists():
            raise BankError(f"bank already initialized at {root}")
        root.mkdir(parents=True, exist_ok=True)
        (root / ADAPTER_DIR).mkdir(exist_ok=True)
        bank = cls(root, BankManifest(MANIFEST_VERSION, embed_model_id, []))
        bank._persist()
        return bank

    @classmethod
    def load(cls, root: str | os.PathLike) -> "Bank":
        root = Path(root)
        manifest_path = root / MANIFEST_NAME
        try:
            with open(manifest_path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise BankError(f"cannot read manifest {manifest_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise BankError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc
        if raw.get("version") != MANIFEST_VERSION:
            raise BankError(f"unsupported manifest version: {raw.get('version')!r}")

        memories = []
        seen_ids = set()
        for item in raw.get("memories", []):
            task_id = item["task_id"]
            if task_id in seen_ids:
                raise BankError(f"manifest lists duplicate task id {task_id!r}")
            seen_ids.add(task_id)
            states = tuple(validate_state(s) for s in item["states"])
            memories.append(
                MemoryEntry(
                    task_id=task_id,
                    states=StateSequence(task_id, states),
                    adapter_ref=item["adapter_ref"],
                )
            )
        manifest = BankManifest(
            version=raw["version"],
            embed_model_id=raw.get("embed_model_id", ""),
            memories=memories,
            base_adapter_ref=raw.get("base_adapter_ref"),
        )
        return cls(root, manifest)

    def _persist(self) -> None:
        payload = {
            "version": self.manifest.version,
            "embed_model_id": self.manifest.embed_model_id,
            "base_adapter_ref": self.manifest.base_adapter_ref,
            "memories": [
                {
                    "task_id": entry.task_id,
                    "states": [state_to_dict(s) for s in entry.states.states],
                    "adapter_ref": entry.adapter_ref,
                }
                for entry in self.manifest.memories
            ],
        }
        data = json.dumps(payload, indent=2).encode("utf-8")
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, self.root / MANIFEST_NAME)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)

    # -- accessors -----------------------------------------------------------

    def __len__(self) -> int:
        return len(self.manifest.memories)

    def entry(self, task_id: str) -> MemoryEntry:
        for entry in self.manifest.memories:
            if entry.task_id == task_id:
                return entry
        raise BankError(f"no memory registered for task {task_id!r}")

    def adapter_path(self, entry: MemoryEntry) -> Path:
        path = Path(entry.adapter_ref)
        return path if path.is_absolute() else self.root / path

    def adapter_set(self, task_id: str) -> AdapterSet:
        if task_id not in self._adapter_cache:
            entry = self.entry(task_id)
            self._adapter_cache[task_id] = read_adapter(self.adapter_path(entry))
        return self._adapter_cache[task_id]

    def base_adapter(self) -> Optional[AdapterSet]:
        ref = self.manifest.base_adapter_ref
        if ref is None:
            return None
        path = Path(ref)
        return read_adapter(path if path.is_absolute() else self.root / path)

    # -- mutations -----------------------------------------------------------

    def register_memory(
        self,
        task_id: str,
        states: StateSequence,
        adapter_path: str | os.PathLike,
    ) -> None:
        """Validate the adapter, copy it into the bank, persist the manifest.

        Any failure leaves the manifest unchanged.
        """
        with self._write_lock:
            if any(e.task_id == task_id for e in self.manifest.memories):
                raise DuplicateTaskId(task_id)
            read_adapter(adapter_path)  # must be readable and valid before we touch anything

            dest_rel = f"{ADAPTER_DIR}/{task_id}.lora"
            dest = self.root / dest_rel
            dest.parent.mkdir(exist_ok=True)
            if Path(adapter_path).resolve() != dest.resolve():
                shutil.copyfile(adapter_path, dest)

            entry = MemoryEntry(task_id=task_id, states=states, adapter_ref=dest_rel)
            self.manifest.memories.append(entry)
            try:
                self._persist()
            except Exception:
                self.manifest.memories.pop()
                raise

    def set_base_adapter(self, adapter_path: str | os.PathLike) -> None:
        with self._write_lock:
            read_adapter(adapter_path)
            dest_rel = f"{ADAPTER_DIR}/__base__.lora"
            dest = self.root / dest_rel
            dest.parent.mkdir(exist_ok=True)
            if Path(adapter_path).resolve() != dest.resolve():
                shutil.copyfile(adapter_path, dest)
            self.manifest.base_adapter_ref = dest_rel
            self._persist()

    def canonical_texts(self) -> list[str]:
        """Every distinct canonical field text across all memories, sorted."""
        texts = set()
        for entry in self.manifest.memories:
            for state in entry.states.states:
                for name in MATCHED_FIELDS:
                    texts.add(canonical_field_text(state, name))
        return sorted(texts)

    def precompute_embeddings(self, embedder: Embedder) -> int:
        """Embed every distinct canonical field text exactly once.

        Vectors land in the entries and, when the embedder is cache-backed,
        in the persistent cache. Returns the number of texts that actually
        required a backend call; re-running over a warm cache returns 0.
        Progress persists per text, so a failure partway keeps what was done.
        """
        with self._write_lock:
            if self.manifest.embed_model_id and embedder.model_id != self.manifest.embed_model_id:
                raise EmbedModelMismatch(
                    f"bank expects embeddings from {self.manifest.embed_model_id!r}, "
                    f"got {embedder.model_id!r}"
                )
            known: dict[str, EmbeddingVector] = {}
            for entry in self.manifest.memories:
                known.update(entry.precomputed)

            fresh = 0
            for text in self.canonical_texts():
                if text in known:
                    continue
                vector = None
                if isinstance(embedder, CachedEmbedder):
                    vector = embedder.peek(text)
                if vector is None:
                    vector = embedder.embed(text)
                    fresh += 1
                known[text] = vector

            for entry in self.manifest.memories:
                for state in entry.states.states:
                    for name in MATCHED_FIELDS:
                        text = canonical_field_text(state, name)
                        entry.precomputed[text] = known[text]
            return fresh

    # -- validation ----------------------------------------------------------

    def validate(self) -> BankReport:
        """Manifest invariants, adapter readability, fusion compatibility."""
        report = BankReport(memory_count=len(self.manifest.memories))
        if self.manifest.version != MANIFEST_VERSION:
            report.errors.append(f"unsupported manifest version {self.manifest.version}")

        seen_ids = set()
        adapters: list[tuple[str, AdapterSet]] = []
        for entry in self.manifest.memories:
            if entry.task_id in seen_ids:
                report.errors.append(f"duplicate task id {entry.task_id!r}")
                continue
            seen_ids.add(entry.task_id)
            path = self.adapter_path(entry)
            if not path.exists():
                report.errors.append(f"{entry.task_id}: dangling adapter_ref {entry.adapter_ref!r}")
                continue
            try:
                adapters.append((entry.task_id, read_adapter(path)))
            except ProcmemError as exc:
                report.errors.append(f"{entry.task_id}: unreadable adapter: {exc}")

        if self.manifest.base_adapter_ref is not None:
            base_path = Path(self.manifest.base_adapter_ref)
            base_path = base_path if base_path.is_absolute() else self.root / base_path
            if not base_path.exists():
                report.errors.append(f"dangling base_adapter_ref {self.manifest.base_adapter_ref!r}")

        if len(adapters) >= 2:
            ref_id, ref = adapters[0]
            ref_shapes = {name: t.shape for name, t in ref.tensors.items()}
            for task_id, other in adapters[1:]:
                if other.rank != ref.rank:
                    report.warnings.append(
                        f"{task_id}: rank {other.rank} differs from {ref_id}'s {ref.rank}"
                    )
                    report.factor_fusable = False
                shapes = {name: t.shape for name, t in other.tensors.items()}
                if set(shapes) != set(ref_shapes):
                    report.warnings.append(
                        f"{task_id}: tensor name set differs from {ref_id}'s"
                    )
                    report.factor_fusable = False
                else:
                    mismatched = [n for n in shapes if shapes[n] != ref_shapes[n]]
                    if mismatched:
                        report.warnings.append(
                            f"{task_id}: tensor shapes differ from {ref_id}'s: {mismatched}"
                        )
                        report.factor_fusable = False
        return report
