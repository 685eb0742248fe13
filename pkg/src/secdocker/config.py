"""YAML security profiles: loading, validation and live reload.

Schema::

    docker:
      ports: [int]
      users: [string]
      mounts: [string]
      environment: [string]   # KEY or KEY=VAL
      capabilities: [string]
      images: [string]
      privileged: bool
    restrictions:
      memory: string          # "512m", "2g"; suffixes b/k/m/g, base 1024
      cpu: float
      user: string
      environment: [string]   # KEY=VAL

Unknown keys are rejected so that a misspelled rule cannot silently vanish.
"""
from __future__ import annotations

import enum
import hashlib
import logging
import re
import threading
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable

import yaml

from .policy import OptionRules, Restrictions, SecurityProfile, normalize_capability

log = logging.getLogger(__name__)

DEBOUNCE_SECONDS = 0.25
POLL_SECONDS = 2.0

_DOCKER_KEYS = ("ports", "users", "mounts", "environment", "capabilities", "images", "privileged")
_RESTRICTION_KEYS = ("memory", "cpu", "user", "environment")
_MEMORY = re.compile(r"^\s*(\d+)\s*([bkmg]?)\s*$", re.IGNORECASE)
_UNITS = {"": 1, "b": 1, "k": 1024, "m": 1024**2, "g": 1024**3}


class ConfigErrorKind(enum.Enum):
    IO_ERROR = "IoError"
    YAML_SYNTAX = "YamlSyntax"
    SCHEMA_VIOLATION = "SchemaViolation"


class ConfigError(Exception):
    def __init__(
        self,
        kind: ConfigErrorKind,
        detail: str,
        location: tuple[int, int] | None = None,
    ) -> None:
        self.kind = kind
        self.detail = detail
        self.location = location
        where = f" at line {location[0]}, column {location[1]}" if location else ""
        super().__init__(f"{kind.value}: {detail}{where}")


def _schema(detail: str) -> ConfigError:
    return ConfigError(ConfigErrorKind.SCHEMA_VIOLATION, detail)


def parse_memory(value: Any) -> int:
    """``"512m"`` -> 536870912. Bare integers are byte counts."""
    if isinstance(value, int) and not isinstance(value, bool):
        amount = value
    else:
        match = _MEMORY.match(str(value)) if isinstance(value, str) else None
        if not match:
            raise _schema(f"restrictions.memory: cannot parse {value!r}")
        amount = int(match.group(1)) * _UNITS[match.group(2).lower()]
    if amount <= 0:
        raise _schema(f"restrictions.memory: must be positive, got {value!r}")
    return amount


def format_memory(amount: int) -> str:
    for suffix in ("g", "m", "k"):
        unit = _UNITS[suffix]
        if amount % unit == 0:
            return f"{amount // unit}{suffix}"
    return f"{amount}b"


def _mapping(value: Any, where: str, allowed: tuple[str, ...]) -> dict[str, Any]:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise _schema(f"{where}: expected a mapping, got {type(value).__name__}")
    for key in value:
        if key not in allowed:
            raise _schema(f"unknown key {key!r} in {where}")
    return value


def _string_list(value: Any, where: str, allow_int: bool = False) -> list[str]:
    if value is None:
        return []
    if not isinstance(value, list):
        raise _schema(f"{where}: expected a list")
    out = []
    for item in value:
        if allow_int and isinstance(item, int) and not isinstance(item, bool):
            item = str(item)
        if not isinstance(item, str) or not item.strip():
            raise _schema(f"{where}: entries must be non-empty strings, got {item!r}")
        out.append(item.strip())
    return out


def _env_entries(value: Any, where: str, require_value: bool) -> list[str]:
    entries = _string_list(value, where)
    for entry in entries:
        key, sep, _ = entry.partition("=")
        if not key or (require_value and not sep):
            raise _schema(f"{where}: malformed entry {entry!r}")
    return entries


def _ports(value: Any) -> frozenset[int]:
    if value is None:
        return frozenset()
    if not isinstance(value, list):
        raise _schema("docker.ports: expected a list")
    for port in value:
        if isinstance(port, bool) or not isinstance(port, int) or not 1 <= port <= 65535:
            raise _schema(f"docker.ports: {port!r} is not a port number")
    return frozenset(value)


def _capabilities(value: Any) -> frozenset[str]:
    caps = frozenset(normalize_capability(c) for c in _string_list(value, "docker.capabilities"))
    for cap in caps:
        if not re.fullmatch(r"[A-Z][A-Z0-9_]*", cap):
            raise _schema(f"docker.capabilities: {cap!r} is not a capability name")
    return caps


def _cpu(value: Any) -> Fraction | None:
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise _schema(f"restrictions.cpu: expected a number, got {value!r}")
    if value <= 0:
        raise _schema(f"restrictions.cpu: must be positive, got {value!r}")
    return Fraction(str(value))


def _user(value: Any) -> str | None:
    if value is None:
        return None
    if isinstance(value, int) and not isinstance(value, bool):
        return str(value)
    if not isinstance(value, str) or not value.strip():
        raise _schema(f"restrictions.user: expected a non-empty string, got {value!r}")
    return value.strip()


def profile_from_mapping(document: Any) -> SecurityProfile:
    top = _mapping(document, "document", ("docker", "restrictions"))
    docker = _mapping(top.get("docker"), "docker", _DOCKER_KEYS)
    limits = _mapping(top.get("restrictions"), "restrictions", _RESTRICTION_KEYS)

    privileged = docker.get("privileged", False)
    if privileged is None:
        privileged = False
    if not isinstance(privileged, bool):
        raise _schema(f"docker.privileged: expected true/false, got {privileged!r}")

    rules = OptionRules(
        ports=_ports(docker.get("ports")),
        users=frozenset(_string_list(docker.get("users"), "docker.users", allow_int=True)),
        mounts=frozenset(_string_list(docker.get("mounts"), "docker.mounts")),
        environment=frozenset(_env_entries(docker.get("environment"), "docker.environment", False)),
        capabilities=_capabilities(docker.get("capabilities")),
        images=frozenset(_string_list(docker.get("images"), "docker.images")),
        privileged=privileged,
    )
    memory = limits.get("memory")
    restrictions = Restrictions(
        memory=None if memory is None else parse_memory(memory),
        cpu=_cpu(limits.get("cpu")),
        user=_user(limits.get("user")),
        environment=tuple(_env_entries(limits.get("environment"), "restrictions.environment", True)),
    )
    return SecurityProfile(rules, restrictions)


def load_profile(source: bytes | str) -> SecurityProfile:
    """Parse and validate a YAML profile. Raises :class:`ConfigError`."""
    try:
        document = yaml.safe_load(source)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        location = (mark.line + 1, mark.column + 1) if mark else None
        raise ConfigError(ConfigErrorKind.YAML_SYNTAX, str(exc.problem or exc), location) from None
    except yaml.YAMLError as exc:
        raise ConfigError(ConfigErrorKind.YAML_SYNTAX, str(exc)) from None
    return profile_from_mapping(document)


def load_profile_file(path: str | Path) -> SecurityProfile:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(ConfigErrorKind.IO_ERROR, f"{path}: {exc.strerror or exc}") from None
    return load_profile(data)


def render_profile(profile: SecurityProfile) -> str:
    """Inverse of :func:`load_profile` for valid profiles."""
    rules, limits = profile.option_rules, profile.restrictions
    docker: dict[str, Any] = {}
    if rules.ports:
        docker["ports"] = sorted(rules.ports)
    for name in ("users", "mounts", "environment", "capabilities", "images"):
        values = getattr(rules, name)
        if values:
            docker[name] = sorted(values)
    if rules.privileged:
        docker["privileged"] = True
    restrictions: dict[str, Any] = {}
    if limits.memory is not None:
        restrictions["memory"] = format_memory(limits.memory)
    if limits.cpu is not None:
        restrictions["cpu"] = float(limits.cpu)
    if limits.user is not None:
        restrictions["user"] = limits.user
    if limits.environment:
        restrictions["environment"] = list(limits.environment)
    document: dict[str, Any] = {}
    if docker:
        document["docker"] = docker
    if restrictions:
        document["restrictions"] = restrictions
    return yaml.safe_dump(document, sort_keys=False) if document else ""


@dataclass(frozen=True)
class _Snapshot:
    profile: SecurityProfile
    generation: int
    digest: str


class ProfileStore:
    """Holds the live profile; one writer, any number of lock-free readers.

    Readers get a complete :class:`SecurityProfile` by attribute access; the
    writer replaces a single immutable snapshot reference.
    """

    def __init__(
        self,
        source_path: str | Path,
        on_event: Callable[[str, str], None] | None = None,
    ) -> None:
        self.source_path = Path(source_path)
        self._on_event = on_event
        self._write_lock = threading.Lock()
        data = self._read()
        self._snap = _Snapshot(load_profile(data), 0, _digest(data))

    @classmethod
    def from_profile(cls, profile: SecurityProfile) -> "ProfileStore":
        """A store that is never reloaded (used where no file backs the profile)."""
        store = cls.__new__(cls)
        store.source_path = Path("")
        store._on_event = None
        store._write_lock = threading.Lock()
        store._snap = _Snapshot(profile, 0, "")
        return store

    @property
    def current(self) -> SecurityProfile:
        return self._snap.profile

    @property
    def generation(self) -> int:
        return self._snap.generation

    def _read(self) -> bytes:
        try:
            return self.source_path.read_bytes()
        except OSError as exc:
            raise ConfigError(
                ConfigErrorKind.IO_ERROR, f"{self.source_path}: {exc.strerror or exc}"
            ) from None

    def reload(self) -> bool:
        """Re-read the source file; swap in the result if it is valid and changed.

        Returns True when a new profile was installed. Errors are reported
        through ``on_event`` and leave the current profile in place.
        """
        with self._write_lock:
            try:
                data = self._read()
                digest = _digest(data)
                if digest == self._snap.digest:
                    return False
                profile = load_profile(data)
            except ConfigError as exc:
                log.warning("profile reload rejected: %s", exc)
                self._emit("warning", f"profile reload rejected, keeping generation {self._snap.generation}: {exc}")
                return False
            self._snap = _Snapshot(profile, self._snap.generation + 1, digest)
        log.info("profile reloaded (generation %d)", self._snap.generation)
        self._emit("info", f"profile reloaded from {self.source_path} (generation {self._snap.generation})")
        return True

    def _emit(self, level: str, message: str) -> None:
        if self._on_event is not None:
            try:
                self._on_event(level, message)
            except Exception:  # reporting must never break reloads
                log.exception("profile event handler failed")


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class ProfileWatcher:
    """Reloads a :class:`ProfileStore` when its file changes.

    Uses filesystem notifications with a short debounce; if the notification
    backend cannot be started it falls back to polling.
    """

    def __init__(
        self,
        store: ProfileStore,
        debounce: float = DEBOUNCE_SECONDS,
        poll_interval: float = POLL_SECONDS,
        use_events: bool = True,
    ) -> None:
        self.store = store
        self.debounce = debounce
        self.poll_interval = poll_interval
        self.use_events = use_events
        self.mode: str | None = None
        self._stop = threading.Event()
        self._timer: threading.Timer | None = None
        self._timer_lock = threading.Lock()
        self._observer = None
        self._poller: threading.Thread | None = None

    def start(self) -> "ProfileWatcher":
        if self.use_events and self._start_observer():
            self.mode = "events"
        else:
            self.mode = "polling"
            self._poller = threading.Thread(target=self._poll, name="profile-poll", daemon=True)
            self._poller.start()
        return self

    def _start_observer(self) -> bool:
        try:
            from watchdog.events import FileSystemEventHandler
            from watchdog.observers import Observer
        except ImportError:
            return False
        target = self.store.source_path.resolve()
        watcher = self

        class _Handler(FileSystemEventHandler):
            def on_any_event(self, event) -> None:
                paths = {getattr(event, "src_path", None), getattr(event, "dest_path", None)}
                if any(p and Path(p).resolve() == target for p in paths):
                    watcher._schedule()

        observer = Observer()
        try:
            observer.schedule(_Handler(), str(target.parent), recursive=False)
            observer.start()
        except Exception as exc:  # inotify limits, unsupported filesystems
            log.warning("file notifications unavailable (%s); polling every %.1fs", exc, self.poll_interval)
            return False
        self._observer = observer
        return True

    def _schedule(self) -> None:
        with self._timer_lock:
            if self._stop.is_set():
                return
            if self._timer is not None:
                self._timer.cancel()
            self._timer = threading.Timer(self.debounce, self.store.reload)
            self._timer.daemon = True
            self._timer.start()

    def _poll(self) -> None:
        while not self._stop.wait(self.poll_interval):
            self.store.reload()

    def stop(self) -> None:
        self._stop.set()
        with self._timer_lock:
            if self._timer is not None:
                self._timer.cancel()
        if self._observer is not None:
            self._observer.stop()
            self._observer.join(timeout=2)
        if self._poller is not None:
            self._poller.join(timeout=self.poll_interval + 1)

    def __enter__(self) -> "ProfileWatcher":
        return self.start()

    def __exit__(self, *exc: object) -> None:
        self.stop()


def watch_and_swap(store: ProfileStore, **kwargs: Any) -> None:
    """Block forever, keeping ``store`` in sync with its source file."""
    watcher = ProfileWatcher(store, **kwargs).start()
    try:
        threading.Event().wait()
    finally:
        watcher.stop()
