"""Evaluation of container create requests against a security profile.

Everything here is pure: no I/O, no clocks, immutable inputs. The proxy calls
:func:`evaluate` once per intercepted create with the profile snapshot that was
current when the request arrived.
"""
from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field, replace
from fractions import Fraction

from .docker_model import NANO, ContainerRequestSpec

RULE_KINDS = ("ports", "users", "mounts", "environment", "capabilities", "privileged")

_CAPABILITY = re.compile(r"^[A-Z][A-Z0-9_]*$")
_ROOT_ALIASES = frozenset({"root", "0"})


def normalize_capability(name: str) -> str:
    """Docker accepts ``sys_admin``, ``SYS_ADMIN`` and ``CAP_SYS_ADMIN`` alike."""
    name = name.strip().upper()
    return name[4:] if name.startswith("CAP_") else name


def normalize_image(image: str) -> str:
    """Append ``:latest`` to references that carry neither tag nor digest."""
    if "@" in image:
        return image
    last = image.rsplit("/", 1)[-1]
    return image if ":" in last else f"{image}:latest"


@dataclass(frozen=True)
class OptionRules:
    """Deny rules. A match on any of them rejects the request."""

    ports: frozenset[int] = frozenset()
    users: frozenset[str] = frozenset()
    mounts: frozenset[str] = frozenset()
    environment: frozenset[str] = frozenset()
    capabilities: frozenset[str] = frozenset()
    images: frozenset[str] = frozenset()
    privileged: bool = False

    def __post_init__(self) -> None:
        for port in self.ports:
            if isinstance(port, bool) or not isinstance(port, int) or not 1 <= port <= 65535:
                raise ValueError(f"port out of range: {port!r}")
        for cap in self.capabilities:
            if not _CAPABILITY.match(cap):
                raise ValueError(f"capability must be an uppercase token: {cap!r}")
        for name in ("users", "mounts", "environment", "images"):
            if any(not item for item in getattr(self, name)):
                raise ValueError(f"{name}: empty entry")


@dataclass(frozen=True)
class Restrictions:
    """Values forced onto requests that pass the deny rules."""

    memory: int | None = None
    cpu: Fraction | None = None
    user: str | None = None
    environment: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.memory is not None and (isinstance(self.memory, bool) or self.memory <= 0):
            raise ValueError(f"memory must be a positive byte count: {self.memory!r}")
        if self.cpu is not None and self.cpu <= 0:
            raise ValueError(f"cpu must be positive: {self.cpu!r}")
        if self.user is not None and not self.user:
            raise ValueError("user must be non-empty")
        for entry in self.environment:
            key, sep, _ = entry.partition("=")
            if not key or not sep:
                raise ValueError(f"environment entry must be KEY=VAL: {entry!r}")


@dataclass(frozen=True)
class SecurityProfile:
    option_rules: OptionRules = field(default_factory=OptionRules)
    restrictions: Restrictions = field(default_factory=Restrictions)


@dataclass(frozen=True)
class Violation:
    rule_kind: str
    offending_value: str

    def __str__(self) -> str:
        return f"{self.rule_kind}={self.offending_value}"


@dataclass(frozen=True)
class MutationRecord:
    field: str
    before: object
    after: object

    def __str__(self) -> str:
        return self.field


class Verdict(enum.Enum):
    ALLOW = "allow"
    ALLOW_WITH_MUTATIONS = "allow-with-mutations"
    DENY = "deny"


@dataclass(frozen=True)
class Decision:
    """Outcome of :func:`evaluate`.

    ``spec`` is what should be forwarded: the original request for ALLOW and
    DENY, the rewritten one for ALLOW_WITH_MUTATIONS.
    """

    verdict: Verdict
    spec: ContainerRequestSpec
    violations: tuple[Violation, ...] = ()
    mutations: tuple[MutationRecord, ...] = ()

    def __post_init__(self) -> None:
        if self.verdict is Verdict.DENY and (not self.violations or self.mutations):
            raise ValueError("DENY needs violations and no mutations")
        if self.verdict is Verdict.ALLOW_WITH_MUTATIONS and (not self.mutations or self.violations):
            raise ValueError("ALLOW_WITH_MUTATIONS needs mutations and no violations")
        if self.verdict is Verdict.ALLOW and (self.violations or self.mutations):
            raise ValueError("ALLOW carries neither violations nor mutations")

    @property
    def denied(self) -> bool:
        return self.verdict is Verdict.DENY


def in_scope(rules: OptionRules, image: str) -> bool:
    if not rules.images:
        return True
    wanted = normalize_image(image)
    return any(normalize_image(ref) == wanted for ref in rules.images)


def _user_matches(rules: frozenset[str], user: str) -> bool:
    name = user.split(":", 1)[0]
    if user in rules or name in rules:
        return True
    return name in _ROOT_ALIASES and not rules.isdisjoint(_ROOT_ALIASES)


def _path_covered(pattern: str, source: str) -> bool:
    if pattern == "/":
        return source.startswith("/")
    pattern = pattern.rstrip("/")
    return source == pattern or source.startswith(pattern + "/")


def _env_matches(rules: frozenset[str], entry: str) -> bool:
    return entry in rules or entry.split("=", 1)[0] in rules


def find_violations(rules: OptionRules, spec: ContainerRequestSpec) -> list[Violation]:
    """All deny-rule matches, grouped in :data:`RULE_KINDS` order."""
    if not in_scope(rules, spec.image):
        return []
    found: list[Violation] = []
    found += [Violation("ports", str(p)) for p in sorted(spec.ports) if p in rules.ports]
    if spec.user is not None and _user_matches(rules.users, spec.user):
        found.append(Violation("users", spec.user))
    found += [
        Violation("mounts", m.source)
        for m in spec.mounts
        if m.is_host_bind and any(_path_covered(p, m.source) for p in rules.mounts)
    ]
    found += [Violation("environment", e) for e in spec.env if _env_matches(rules.environment, e)]
    if rules.capabilities:
        for cap in spec.cap_add:
            norm = normalize_capability(cap)
            if norm in rules.capabilities or norm == "ALL":
                found.append(Violation("capabilities", cap))
    if rules.privileged and spec.privileged:
        found.append(Violation("privileged", "true"))
    return found


def _cpu_grid(value: Fraction) -> Fraction:
    # The daemon takes whole nano-CPUs.
    return Fraction(max(1, math.floor(value * NANO)), NANO)


def apply_restrictions(
    restrictions: Restrictions, spec: ContainerRequestSpec
) -> tuple[ContainerRequestSpec, list[MutationRecord]]:
    changes: dict[str, object] = {}
    mutations: list[MutationRecord] = []

    if restrictions.memory is not None:
        capped = restrictions.memory if spec.memory is None else min(spec.memory, restrictions.memory)
        if capped != spec.memory:
            changes["memory"] = capped
            mutations.append(MutationRecord("memory", spec.memory, capped))

    if restrictions.cpu is not None:
        cap = _cpu_grid(restrictions.cpu)
        capped = cap if spec.cpu is None else min(spec.cpu, cap)
        if capped != spec.cpu:
            changes["cpu"] = capped
            mutations.append(MutationRecord("cpu", spec.cpu, capped))

    if restrictions.user is not None and spec.user is None:
        changes["user"] = restrictions.user
        mutations.append(MutationRecord("user", None, restrictions.user))

    present = set(spec.env_keys)
    injected: list[str] = []
    for entry in restrictions.environment:
        key = entry.split("=", 1)[0]
        if key not in present:
            injected.append(entry)
            present.add(key)
    if injected:
        changes["env"] = spec.env + tuple(injected)
        mutations.append(MutationRecord("env", spec.env, changes["env"]))

    return (replace(spec, **changes) if changes else spec), mutations


def evaluate(profile: SecurityProfile, spec: ContainerRequestSpec) -> Decision:
    violations = find_violations(profile.option_rules, spec)
    if violations:
        return Decision(Verdict.DENY, spec, violations=tuple(violations))
    mutated, mutations = apply_restrictions(profile.restrictions, spec)
    if mutations:
        return Decision(Verdict.ALLOW_WITH_MUTATIONS, mutated, mutations=tuple(mutations))
    return Decision(Verdict.ALLOW, spec)
