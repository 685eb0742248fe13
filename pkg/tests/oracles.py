"""Deliberately naive reference implementations the real code is checked against."""
from __future__ import annotations

import math
from fractions import Fraction
from pathlib import PurePosixPath

from secdocker.docker_model import ContainerRequestSpec
from secdocker.policy import OptionRules


def _tagged(ref: str) -> str:
    name = ref.split("/")[-1]
    if "@" in ref or ":" in name:
        return ref
    return ref + ":latest"


def _port_set(spec: ContainerRequestSpec) -> set[int]:
    ports = set()
    for key in list(spec.exposed_ports) + list(spec.port_bindings):
        number = key.split("/")[0]
        if "-" in number:
            lo, hi = number.split("-")
            ports.update(range(int(lo), int(hi) + 1))
        elif number.isdigit():
            ports.add(int(number))
    return ports


def _is_root(user: str) -> bool:
    return user in ("root", "0")


def _under(rule: str, source: str) -> bool:
    rule_parts = PurePosixPath(rule).parts
    return PurePosixPath(source).parts[: len(rule_parts)] == rule_parts


def oracle_violations(rules: OptionRules, spec: ContainerRequestSpec) -> set[tuple[str, str]]:
    """Each rule kind checked on its own, against the spec's raw fields."""
    if rules.images and _tagged(spec.image) not in {_tagged(i) for i in rules.images}:
        return set()
    found = set()
    for port in _port_set(spec):
        if port in rules.ports:
            found.add(("ports", str(port)))
    if spec.user is not None:
        name = spec.user.split(":")[0]
        for rule in rules.users:
            if rule in (spec.user, name) or (_is_root(rule) and _is_root(name)):
                found.add(("users", spec.user))
    for mount in spec.mounts:
        if mount.kind == "bind":
            for rule in rules.mounts:
                if _under(rule, mount.source):
                    found.add(("mounts", mount.source))
    for entry in spec.env:
        key = entry.split("=")[0]
        for rule in rules.environment:
            if rule == entry or ("=" not in rule and rule == key):
                found.add(("environment", entry))
    for cap in spec.cap_add:
        plain = cap.upper()
        if plain.startswith("CAP_"):
            plain = plain[4:]
        for rule in rules.capabilities:
            if plain in (rule, "ALL"):
                found.add(("capabilities", cap))
    if rules.privileged and spec.privileged:
        found.add(("privileged", "true"))
    return found


def oracle_stats(samples: list[float]) -> dict[str, float]:
    """Textbook formulas with exact rational arithmetic where it matters."""
    xs = sorted(Fraction(s) for s in samples)
    n = len(xs)
    mean = sum(xs) / n
    variance = sum((x - mean) ** 2 for x in xs) / n

    def quantile(p: Fraction) -> Fraction:
        pos = (n - 1) * p
        lo = math.floor(pos)
        hi = min(lo + 1, n - 1)
        return xs[lo] + (xs[hi] - xs[lo]) * (pos - lo)

    counts: dict[float, int] = {}
    for s in samples:
        key = round(s, 3)
        counts[key] = counts.get(key, 0) + 1
    best = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
    sd = math.sqrt(variance)
    return {
        "mean": float(mean),
        "variance": float(variance),
        "standard_deviation": sd,
        "standard_error": sd / math.sqrt(n),
        "median": float(quantile(Fraction(1, 2))),
        "first_quartile": float(quantile(Fraction(1, 4))),
        "third_quartile": float(quantile(Fraction(3, 4))),
        "mode": best,
        "minimum": float(xs[0]),
        "maximum": float(xs[-1]),
    }
