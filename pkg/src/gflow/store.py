"""Directory-backed object store with bucket semantics.

Buckets are directories under a store root; object keys map to file paths
beneath them. Writes go to a temporary name and are renamed into place, so
concurrent writers to the same key are last-write-wins with no torn reads.
URIs render as `store://<bucket>/<key>`.
"""

from __future__ import annotations

import hashlib
import os
import re
import shutil
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .errors import DiskFull, IoFailure, NoSuchBucket, NoSuchPrefix

_BUCKET_RE = re.compile(r"^[a-z0-9-]{3,63}$")

HASH_ALGORITHM = "sha256"

GIB = 1 << 30


@dataclass(frozen=True)
class StoreUri:
    bucket: str
    key: str = ""

    def __post_init__(self):
        if not _BUCKET_RE.match(self.bucket):
            raise ValueError(f"invalid bucket name {self.bucket!r} (want [a-z0-9-]{{3,63}})")
        parts = self.key.split("/")
        if ".." in parts:
            raise ValueError(f"key {self.key!r} contains a '..' segment")
        if self.key.startswith("/"):
            raise ValueError(f"key {self.key!r} must be relative")

    def __str__(self) -> str:
        return f"store://{self.bucket}/{self.key}" if self.key else f"store://{self.bucket}"

    def join(self, *segments: str) -> "StoreUri":
        key = "/".join(s.strip("/") for s in (self.key, *segments) if s)
        return StoreUri(self.bucket, key)

    @classmethod
    def parse(cls, text: str) -> "StoreUri":
        if not text.startswith("store://"):
            raise ValueError(f"not a store URI: {text!r}")
        rest = text[len("store://"):]
        bucket, _, key = rest.partition("/")
        return cls(bucket, key)


@dataclass(frozen=True)
class ObjectMeta:
    size: int
    content_hash: str
    algorithm: str = HASH_ALGORITHM


@dataclass(frozen=True)
class StagingManifest:
    entries: tuple[tuple[StoreUri, str, int], ...]  # (source, relative destination, bytes)

    @property
    def total_bytes(self) -> int:
        return sum(size for _, _, size in self.entries)


@dataclass(frozen=True)
class CopyReport:
    copied: int
    skipped: int


class ObjectStore:
    """Object store rooted at a local directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    # -- buckets ------------------------------------------------------------

    def _bucket_dir(self, bucket: str) -> Path:
        if not _BUCKET_RE.match(bucket):
            raise ValueError(f"invalid bucket name {bucket!r}")
        return self.root / bucket

    def create_bucket(self, bucket: str) -> None:
        self._bucket_dir(bucket).mkdir(parents=True, exist_ok=True)

    def bucket_exists(self, bucket: str) -> bool:
        return self._bucket_dir(bucket).is_dir()

    def _object_path(self, uri: StoreUri, *, must_have_bucket: bool = True) -> Path:
        bucket_dir = self._bucket_dir(uri.bucket)
        if must_have_bucket and not bucket_dir.is_dir():
            raise NoSuchBucket(f"bucket {uri.bucket!r} does not exist")
        return bucket_dir / uri.key

    # -- objects ------------------------------------------------------------

    def put(self, uri: StoreUri, data: bytes) -> ObjectMeta:
        """Write an object (overwrite allowed). Returns size and content hash."""
        path = self._object_path(uri)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.parent / f".{path.name}.tmp.{os.getpid()}"
            tmp.write_bytes(data)
            os.replace(tmp, path)
        except OSError as exc:
            raise IoFailure(f"cannot write {uri}: {exc}") from exc
        return ObjectMeta(size=len(data), content_hash=hashlib.sha256(data).hexdigest())

    def put_if_absent(self, uri: StoreUri, data: bytes) -> tuple[ObjectMeta, bool]:
        """No-clobber put: keep any existing object untouched.

        Returns (meta of the stored object, created?). Used for result
        writes so redelivered tasks cannot produce duplicate results.
        """
        path = self._object_path(uri)
        if path.is_file():
            existing = path.read_bytes()
            return ObjectMeta(len(existing), hashlib.sha256(existing).hexdigest()), False
        return self.put(uri, data), True

    def get(self, uri: StoreUri) -> bytes:
        path = self._object_path(uri)
        try:
            return path.read_bytes()
        except OSError as exc:
            raise IoFailure(f"cannot read {uri}: {exc}") from exc

    def exists(self, uri: StoreUri) -> bool:
        return self._object_path(uri).is_file()

    def upload_file(self, local: str | Path, uri: StoreUri) -> ObjectMeta:
        return self.put(uri, Path(local).read_bytes())

    def upload_tree(self, local_dir: str | Path, prefix: StoreUri) -> int:
        """Upload every file under local_dir beneath the prefix; returns count."""
        local_dir = Path(local_dir)
        count = 0
        for path in sorted(p for p in local_dir.rglob("*") if p.is_file()):
            rel = path.relative_to(local_dir).as_posix()
            self.put(prefix.join(rel), path.read_bytes())
            count += 1
        return count

    def list_prefix(self, prefix: StoreUri) -> list[StoreUri]:
        """Objects under a prefix, sorted by key for deterministic iteration."""
        bucket_dir = self._bucket_dir(prefix.bucket)
        if not bucket_dir.is_dir():
            raise NoSuchBucket(f"bucket {prefix.bucket!r} does not exist")
        base = bucket_dir / prefix.key if prefix.key else bucket_dir
        if base.is_file():
            return [prefix]
        if not base.is_dir():
            return []
        out = []
        for path in sorted(base.rglob("*")):
            if path.is_file() and not path.name.startswith("."):
                out.append(StoreUri(prefix.bucket, path.relative_to(bucket_dir).as_posix()))
        return out

    # -- bulk operations ----------------------------------------------------

    def stage_references(
        self,
        ref_root: StoreUri,
        task_disk: str | Path,
        disk_gb: int | Fraction | None = None,
    ) -> StagingManifest:
        """Copy everything under ref_root to `<task_disk>/reference/`.

        Relative layout under the prefix is preserved. When `disk_gb` is
        given, staging refuses to start if the total staged bytes would
        exceed the provisioned disk.
        """
        task_disk = Path(task_disk)
        objects = self.list_prefix(ref_root)
        if not objects:
            raise NoSuchPrefix(f"no reference objects under {ref_root}")
        prefix_key = ref_root.key
        entries: list[tuple[StoreUri, str, int]] = []
        for obj in objects:
            rel = obj.key[len(prefix_key):].lstrip("/") if prefix_key else obj.key
            rel = rel or Path(obj.key).name  # ref_root may name a single object
            size = self._object_path(obj).stat().st_size
            entries.append((obj, f"reference/{rel}", size))
        total = sum(size for _, _, size in entries)
        if disk_gb is not None and total > Fraction(disk_gb) * GIB:
            raise DiskFull(
                f"staging {total} bytes of references exceeds the provisioned {disk_gb} GB disk"
            )
        staged_root = (task_disk / "reference").resolve()
        for obj, rel, _ in entries:
            dest = (task_disk / rel).resolve()
            if not dest.is_relative_to(staged_root):
                raise IoFailure(f"staging path {rel!r} escapes the task disk")
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(self._object_path(obj), dest)
        return StagingManifest(entries=tuple(entries))

    def copy_no_clobber(self, src_prefix: StoreUri, dst: str | Path) -> CopyReport:
        """Recursive copy that never overwrites an existing destination file."""
        dst = Path(dst)
        try:
            dst.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IoFailure(f"cannot create destination {dst}: {exc}") from exc
        copied = skipped = 0
        prefix_key = src_prefix.key
        for obj in self.list_prefix(src_prefix):
            rel = obj.key[len(prefix_key):].lstrip("/") if prefix_key else obj.key
            rel = rel or Path(obj.key).name
            target = dst / rel
            if target.exists():
                skipped += 1
                continue
            try:
                target.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(self._object_path(obj), target)
            except OSError as exc:
                raise IoFailure(f"cannot copy {obj} to {target}: {exc}") from exc
            copied += 1
        return CopyReport(copied=copied, skipped=skipped)
