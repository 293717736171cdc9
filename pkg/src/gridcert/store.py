"""Filesystem persistence, freshness checks and the marker-directory handshake.

Handshake: the portal creates a fresh directory ``L`` holding a marker file
with a random secret ``K`` and hands ``(L, K)`` to the browser as cookies.
A credential endpoint may write into ``L`` only after reading ``K`` back from
the marker and removing it, so it can be tricked into writing only where the
caller could already write.
"""

from __future__ import annotations

import hashlib
import hmac
import logging
import os
import re
import secrets
import stat
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

from .errors import HandshakeRejected, PrefixViolation, StorageFailed

log = logging.getLogger(__name__)

MARKER_NAME = ".gridcert-marker"
META_SUFFIX = ".meta"
CERT_NAME = "usercert.pem"
KEY_NAME = "userkey.pem"
PASSPHRASE_NAME = "passphrase"
PROXY_NAME = "proxy.pem"

_SAFE_USER = re.compile(r"^[A-Za-z0-9_][A-Za-z0-9._-]{0,63}$")


def default_user_subdir(user_id: str) -> str:
    if _SAFE_USER.match(user_id) and user_id not in (".", ".."):
        return user_id
    return "u-" + hashlib.sha256(user_id.encode()).hexdigest()[:32]


def meta_path(path: os.PathLike | str) -> Path:
    return Path(str(path) + META_SUFFIX)


def sidecar_text(not_after: int) -> bytes:
    return f"not-after={int(not_after)}\n".encode()


def read_sidecar(path: os.PathLike | str) -> int:
    text = meta_path(path).read_text().strip()
    key, _, value = text.partition("=")
    if key != "not-after":
        raise ValueError(f"bad sidecar {text!r}")
    return int(value)


# --------------------------------------------------------------------------
# Freshness


def freshness_check(path: os.PathLike | str, min_remaining: int, now: int) -> bool:
    """Cheap validity test: one ``stat`` and one tiny sidecar read, no X.509 parsing.

    The file's mtime is its write time; the sidecar records the not-after it
    was written with, hence the lifetime it had at write time.
    """
    try:
        written_at = int(os.stat(path).st_mtime)
        lifetime = read_sidecar(path) - written_at
    except (OSError, ValueError):
        return False
    return (now - written_at) < (lifetime - min_remaining)


# --------------------------------------------------------------------------
# Handshake


@dataclass(frozen=True)
class MarkerHandshake:
    location: Path
    secret: str = field(repr=False)
    prefix_allowlist: Path | None = None


@dataclass(frozen=True)
class WriteAuthorization:
    """Permission to write files directly inside one handshake directory."""

    location: Path

    def path(self, name: str) -> Path:
        if not name or "/" in name or name in (".", "..") or name == MARKER_NAME:
            raise ValueError(f"bad file name {name!r}")
        return self.location / name


def prepare_handshake(
    root: os.PathLike | str,
    user_id: str,
    prefix_allowlist: os.PathLike | str | None = None,
    user_subdir: Callable[[str], str] = default_user_subdir,
) -> MarkerHandshake:
    try:
        parent = Path(root) / user_subdir(user_id)
        parent.mkdir(parents=True, exist_ok=True, mode=0o700)
        location = parent / secrets.token_hex(8)
        location.mkdir(mode=0o700)
        secret = secrets.token_urlsafe(32)
        fd = os.open(location / MARKER_NAME, os.O_WRONLY | os.O_CREAT | os.O_EXCL | os.O_NOFOLLOW, 0o600)
        with os.fdopen(fd, "w") as fh:
            fh.write(secret)
    except OSError as exc:
        raise StorageFailed(f"cannot prepare handshake under {root}: {exc}") from exc
    return MarkerHandshake(location, secret, Path(prefix_allowlist) if prefix_allowlist else None)


def _within(path: str, prefix: str) -> bool:
    return os.path.commonpath([path, prefix]) == prefix


def check_prefix(path: os.PathLike | str, prefix_allowlist: os.PathLike | str) -> str:
    """Resolved ``path``; PrefixViolation unless it and its target sit under the prefix."""
    path = os.fspath(path)
    if not path or not os.path.isabs(path) or "\x00" in path:
        raise HandshakeRejected(f"{path!r} is not an absolute path")
    real = os.path.realpath(path)
    prefix = os.path.realpath(os.fspath(prefix_allowlist))
    if not _within(os.path.normpath(path), prefix) or not _within(real, prefix):
        raise PrefixViolation(f"{path} is outside {prefix}")
    return real


def consume_handshake(
    location: os.PathLike | str,
    secret: str,
    prefix_allowlist: os.PathLike | str | None = None,
) -> WriteAuthorization:
    location = os.fspath(location)
    if not location or not os.path.isabs(location) or "\x00" in location:
        raise HandshakeRejected("handshake location must be an absolute path")
    real = os.path.realpath(location)
    if prefix_allowlist is not None:
        check_prefix(location, prefix_allowlist)

    marker = os.path.join(real, MARKER_NAME)
    try:
        fd = os.open(marker, os.O_RDONLY | os.O_NOFOLLOW)
    except OSError:
        raise HandshakeRejected("no marker in handshake location") from None
    try:
        if not stat.S_ISREG(os.fstat(fd).st_mode):
            raise HandshakeRejected("marker is not a regular file")
        expected = os.read(fd, 512)
    finally:
        os.close(fd)
    if not hmac.compare_digest(expected, str(secret).encode()):
        # Leave the marker in place: a wrong guess must not burn the handshake.
        raise HandshakeRejected("marker secret mismatch")

    # Claim by rename: exactly one concurrent caller can move the marker away.
    claimed = os.path.join(real, f".consumed-{secrets.token_hex(8)}")
    try:
        os.rename(marker, claimed)
    except FileNotFoundError:
        raise HandshakeRejected("handshake already consumed") from None
    os.unlink(claimed)
    return WriteAuthorization(Path(real))


# --------------------------------------------------------------------------
# Store


class CredentialStore:
    """All-or-nothing writes of credential files under a root directory."""

    def __init__(self, root: os.PathLike | str, user_subdir: Callable[[str], str] = default_user_subdir):
        self.root = Path(root)
        self.user_subdir = user_subdir
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def user_dir(self, user_id: str) -> Path:
        return self.root / self.user_subdir(user_id)

    def _lock_for(self, path: Path) -> threading.Lock:
        key = os.path.abspath(path)
        with self._locks_guard:
            return self._locks.setdefault(key, threading.Lock())

    def write_files(self, files: Mapping[Path, tuple[bytes, int]], mtime: int | None = None) -> None:
        """Write every file or none; a failure restores the previous state."""
        files = {Path(p): v for p, v in files.items()}
        targets = sorted(files, key=str)
        locks = [self._lock_for(t) for t in targets]
        for lock in locks:
            lock.acquire()
        try:
            self._write_locked(files, targets, mtime)
        finally:
            for lock in reversed(locks):
                lock.release()

    def _write_locked(self, files, targets, mtime):
        temps: dict[Path, str] = {}
        placed: list[tuple[Path, Path | None]] = []
        created_dirs: list[Path] = []
        try:
            for target in targets:
                data, mode = files[target]
                missing = []
                parent = target.parent
                while not parent.exists():
                    missing.append(parent)
                    parent = parent.parent
                for d in reversed(missing):
                    d.mkdir(mode=0o700)
                    created_dirs.append(d)
                fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=".tmp-")
                temps[target] = tmp
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                    fh.flush()
                    os.fsync(fh.fileno())
                os.chmod(tmp, mode)
                if mtime is not None:
                    os.utime(tmp, (mtime, mtime))
            for target in targets:
                backup = None
                if os.path.lexists(target):
                    backup = target.with_name(f".bak-{secrets.token_hex(6)}-{target.name}")
                    os.link(target, backup)
                os.replace(temps.pop(target), target)
                placed.append((target, backup))
        except OSError as exc:
            for target, backup in reversed(placed):
                if backup is not None:
                    os.replace(backup, target)
                else:
                    target.unlink(missing_ok=True)
            for tmp in temps.values():
                Path(tmp).unlink(missing_ok=True)
            for d in reversed(created_dirs):
                try:
                    d.rmdir()
                except OSError:
                    log.warning("could not remove %s during rollback", d)
            raise StorageFailed(f"could not store credential files: {exc}") from exc
        for _, backup in placed:
            if backup is not None:
                backup.unlink(missing_ok=True)

    def write_credential(
        self,
        certificate_path: Path,
        key_path: Path,
        certificate_pem: bytes,
        key_pem: bytes,
        not_after: int,
        written_at: int,
        passphrase: str | None = None,
    ) -> None:
        """Certificate, encrypted key, sidecar and optionally a passphrase file."""
        files = {
            Path(certificate_path): (certificate_pem, 0o644),
            meta_path(certificate_path): (sidecar_text(not_after), 0o644),
            Path(key_path): (key_pem, 0o600),
            meta_path(key_path): (sidecar_text(not_after), 0o644),
        }
        if passphrase is not None:
            files[Path(key_path).parent / PASSPHRASE_NAME] = (passphrase.encode(), 0o600)
        self.write_files(files, mtime=written_at)

    def write_proxy(self, path: Path, bundle_pem: bytes, not_after: int, written_at: int) -> None:
        self.write_files(
            {Path(path): (bundle_pem, 0o600), meta_path(path): (sidecar_text(not_after), 0o644)},
            mtime=written_at,
        )

    # -- per-user pointers ------------------------------------------------

    def pointer(self, user_id: str, kind: str) -> Path:
        return self.user_dir(user_id) / f"current-{kind}"

    def point(self, user_id: str, kind: str, location: Path) -> None:
        """Atomically repoint ``current-<kind>`` at a credential directory."""
        link = self.pointer(user_id, kind)
        link.parent.mkdir(parents=True, exist_ok=True, mode=0o700)
        tmp = link.with_name(f".link-{secrets.token_hex(6)}")
        try:
            os.symlink(os.path.relpath(location, link.parent), tmp)
            os.replace(tmp, link)
        except OSError as exc:
            Path(tmp).unlink(missing_ok=True)
            raise StorageFailed(f"cannot update {link}: {exc}") from exc

    def prepare_handshake(self, user_id: str, prefix_allowlist=None) -> MarkerHandshake:
        return prepare_handshake(self.root, user_id, prefix_allowlist, self.user_subdir)
