"""Pre-admission hooks consulted before the security profile.

Hooks are plain callables ``(ContainerRequestSpec) -> PluginVerdict``. The two
stubs below stand in for an image scanner and an image-signature checker; both
read local fixture files with one entry per line::

    image[@digest] <pass|deny> [reason]
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .docker_model import ContainerRequestSpec
from .policy import normalize_image

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 5.0


@dataclass(frozen=True)
class PluginVerdict:
    plugin_name: str
    passed: bool
    reason: str = ""
    # Individual hook verdicts, filled only on an aggregate verdict.
    verdicts: tuple["PluginVerdict", ...] = ()

    def __post_init__(self) -> None:
        if not self.passed and not self.reason:
            raise ValueError("a Deny verdict needs a reason")

    @classmethod
    def ok(cls, name: str) -> "PluginVerdict":
        return cls(name, True)

    @classmethod
    def deny(cls, name: str, reason: str) -> "PluginVerdict":
        return cls(name, False, reason)

    def to_dict(self) -> dict[str, str]:
        out = {"plugin": self.plugin_name, "verdict": "pass" if self.passed else "deny"}
        if self.reason:
            out["reason"] = self.reason
        return out


Hook = Callable[[ContainerRequestSpec], PluginVerdict]


@dataclass
class _Registration:
    name: str
    hook: Hook
    timeout: float
    lock: threading.Lock | None = None


@dataclass
class PluginRegistry:
    _hooks: list[_Registration] = field(default_factory=list)

    def register(
        self,
        name: str,
        hook: Hook,
        timeout: float = DEFAULT_TIMEOUT,
        serialized: bool = False,
    ) -> None:
        """Add a hook. ``serialized`` hooks never run concurrently with themselves."""
        if any(r.name == name for r in self._hooks):
            raise ValueError(f"plugin {name!r} already registered")
        if timeout <= 0:
            raise ValueError("timeout must be positive")
        self._hooks.append(_Registration(name, hook, timeout, threading.Lock() if serialized else None))

    @property
    def names(self) -> list[str]:
        return [r.name for r in self._hooks]

    def __len__(self) -> int:
        return len(self._hooks)


def _call(reg: _Registration, spec: ContainerRequestSpec, out: list[PluginVerdict], done: threading.Event) -> None:
    try:
        if reg.lock is not None:
            with reg.lock:
                verdict = reg.hook(spec)
        else:
            verdict = reg.hook(spec)
        if not isinstance(verdict, PluginVerdict):
            verdict = PluginVerdict.deny(reg.name, f"error: hook returned {type(verdict).__name__}")
        elif verdict.plugin_name != reg.name:
            verdict = PluginVerdict(reg.name, verdict.passed, verdict.reason)
    except Exception as exc:
        log.warning("plugin %s failed: %s", reg.name, exc)
        verdict = PluginVerdict.deny(reg.name, f"error: {exc}")
    out.append(verdict)
    done.set()


def run_pre_admission(registry: PluginRegistry, spec: ContainerRequestSpec) -> PluginVerdict:
    """Run all hooks concurrently; Deny if any hook denies, errors or times out.

    The aggregate carries the first denier's reason (in registration order) and
    every individual verdict in ``verdicts``.
    """
    pending = []
    for reg in registry._hooks:
        out: list[PluginVerdict] = []
        done = threading.Event()
        thread = threading.Thread(target=_call, args=(reg, spec, out, done), name=f"plugin-{reg.name}", daemon=True)
        thread.start()
        pending.append((reg, out, done))

    verdicts = []
    for reg, out, done in pending:
        if done.wait(reg.timeout) and out:
            verdicts.append(out[0])
        else:
            # The thread is abandoned; it is a daemon and cannot block exit.
            verdicts.append(PluginVerdict.deny(reg.name, "timeout"))

    deniers = [v for v in verdicts if not v.passed]
    if deniers:
        first = deniers[0]
        return PluginVerdict("pre-admission", False, f"{first.plugin_name}: {first.reason}", tuple(verdicts))
    return PluginVerdict("pre-admission", True, verdicts=tuple(verdicts))


@dataclass(frozen=True)
class FixtureEntry:
    image: str
    digest: str | None
    passed: bool
    reason: str


def parse_fixture(text: str) -> list[FixtureEntry]:
    entries = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 2)
        if len(parts) < 2 or parts[1] not in ("pass", "deny"):
            raise ValueError(f"fixture line {lineno}: expected 'image[@digest] pass|deny [reason]'")
        ref = parts[0]
        image, _, digest = ref.partition("@")
        entries.append(
            FixtureEntry(normalize_image(image), digest or None, parts[1] == "pass", parts[2] if len(parts) > 2 else "")
        )
    return entries


def _split_reference(ref: str) -> tuple[str, str | None]:
    image, _, digest = ref.partition("@")
    return normalize_image(image), digest or None


def _load(path: Path) -> list[FixtureEntry] | None:
    try:
        return parse_fixture(path.read_text(encoding="utf-8"))
    except (OSError, ValueError, UnicodeDecodeError) as exc:
        log.warning("fixture %s unusable: %s", path, exc)
        return None


class StubImageScan:
    """Image scanner stand-in: listed ``deny`` images are flagged, others pass."""

    name = "image-scan"

    def __init__(self, fixture: str | Path) -> None:
        self.fixture = Path(fixture)

    def __call__(self, spec: ContainerRequestSpec) -> PluginVerdict:
        entries = _load(self.fixture)
        if entries is None:
            return PluginVerdict.deny(self.name, "scan unavailable")
        image, digest = _split_reference(spec.image)
        for entry in entries:
            if entry.image == image and entry.digest in (None, digest) and not entry.passed:
                return PluginVerdict.deny(self.name, f"policy: {entry.reason or 'image flagged'}")
        return PluginVerdict.ok(self.name)


class StubSignatureVerify:
    """Trust-list stand-in: only listed ``pass`` references are admitted.

    An entry with a digest trusts exactly that (image, digest) pair; an entry
    without one trusts the tag reference itself.
    """

    name = "signature-verify"

    def __init__(self, fixture: str | Path, enabled: bool = True) -> None:
        self.fixture = Path(fixture)
        self.enabled = enabled

    def __call__(self, spec: ContainerRequestSpec) -> PluginVerdict:
        if not self.enabled:
            return PluginVerdict.ok(self.name)
        entries = _load(self.fixture)
        if entries is None:
            return PluginVerdict.deny(self.name, "trust data unavailable")
        image, digest = _split_reference(spec.image)
        for entry in entries:
            if entry.image == image and entry.digest == digest:
                if entry.passed:
                    return PluginVerdict.ok(self.name)
                return PluginVerdict.deny(self.name, entry.reason or "untrusted image")
        return PluginVerdict.deny(self.name, "untrusted image")


def stub_image_scan(spec: ContainerRequestSpec, fixture: str | Path) -> PluginVerdict:
    return StubImageScan(fixture)(spec)


def stub_signature_verify(spec: ContainerRequestSpec, fixture: str | Path, enabled: bool = True) -> PluginVerdict:
    return StubSignatureVerify(fixture, enabled)(spec)
