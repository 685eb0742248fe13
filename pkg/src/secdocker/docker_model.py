"""Translation between Docker Engine API payloads and :class:`ContainerRequestSpec`.

Only the create-container endpoint is interpreted. Field names follow Engine
API v1.41; anything the firewall does not police is carried in ``raw_extra``
untouched so that re-rendering does not change what the daemon sees.
"""
from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Mapping
from urllib.parse import parse_qs

NANO = 10**9

_VERSION_PREFIX = re.compile(r"^/v\d+\.\d+(?=/)")

# Keys of the create payload that are mapped onto spec fields.
_TOP_KEYS = ("Image", "User", "Env", "ExposedPorts")
_HOST_KEYS = ("Privileged", "Binds", "Mounts", "CapAdd", "CapDrop", "Memory", "NanoCpus", "PortBindings")


class ParseError(ValueError):
    """A create-container body that cannot be inspected."""


class EndpointClass(enum.Enum):
    CREATE_CONTAINER = "create-container"
    PASSTHROUGH = "passthrough"


@dataclass(frozen=True)
class Mount:
    """One filesystem mapping requested for the container.

    ``via`` records which payload field it came from (``"binds"`` for
    ``HostConfig.Binds`` strings, ``"mounts"`` for ``HostConfig.Mounts``
    objects) so rendering puts it back in the same place.
    """

    source: str
    target: str
    read_only: bool = False
    kind: str = "bind"
    via: str = "binds"
    # Binds mode flags other than ro/rw, e.g. ("z", "rslave").
    options: tuple[str, ...] = ()
    # Mounts-object keys beyond Type/Source/Target/ReadOnly.
    extra: Mapping[str, Any] = field(default_factory=dict)

    @property
    def is_host_bind(self) -> bool:
        return self.kind == "bind"


@dataclass(frozen=True)
class ContainerRequestSpec:
    image: str
    privileged: bool = False
    user: str | None = None
    env: tuple[str, ...] = ()
    mounts: tuple[Mount, ...] = ()
    # ExposedPorts keys in payload order, e.g. ("80/tcp",).
    exposed_ports: tuple[str, ...] = ()
    # HostConfig.PortBindings, kept verbatim.
    port_bindings: Mapping[str, Any] = field(default_factory=dict)
    cap_add: tuple[str, ...] = ()
    cap_drop: tuple[str, ...] = ()
    memory: int | None = None
    cpu: Fraction | None = None
    container_name: str | None = None
    raw_extra: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.image:
            raise ValueError("image must be non-empty")

    @property
    def ports(self) -> frozenset[int]:
        """Container ports that are exposed or published."""
        found: set[int] = set()
        for key in (*self.exposed_ports, *self.port_bindings):
            found.update(_port_numbers(key))
        return frozenset(found)

    @property
    def env_keys(self) -> frozenset[str]:
        return frozenset(entry.split("=", 1)[0] for entry in self.env)


def _port_numbers(key: str) -> list[int]:
    number = key.split("/", 1)[0].strip()
    lo, sep, hi = number.partition("-")
    try:
        if sep:
            return list(range(int(lo), int(hi) + 1))
        return [int(number)]
    except ValueError:
        return []


def strip_version(path: str) -> str:
    """Drop the query string and an optional ``/vX.Y`` prefix."""
    path = path.split("?", 1)[0]
    return _VERSION_PREFIX.sub("", path, count=1)


def classify_endpoint(method: str, path: str) -> EndpointClass:
    if method.upper() == "POST" and strip_version(path).rstrip("/") == "/containers/create":
        return EndpointClass.CREATE_CONTAINER
    return EndpointClass.PASSTHROUGH


def _expect(value: Any, kind: type | tuple[type, ...], name: str) -> Any:
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise ParseError(f"{name}: unexpected JSON type {type(value).__name__}")
    return value


def _default(value: Any, fallback: Any) -> Any:
    # JSON null means "not set", as it does for the daemon.
    return fallback if value is None else value


def _string_list(value: Any, name: str) -> tuple[str, ...]:
    if value is None:
        return ()
    _expect(value, list, name)
    return tuple(_expect(item, str, name) for item in value)


def _parse_bind(entry: str) -> Mount:
    parts = entry.split(":")
    if len(parts) == 1:
        source, target, mode = "", parts[0], ""
    else:
        source, target, mode = parts[0], parts[1], ":".join(parts[2:])
    flags = [f for f in mode.split(",") if f]
    return Mount(
        source=source,
        target=target,
        read_only="ro" in flags,
        kind="bind" if source.startswith("/") else "volume",
        via="binds",
        options=tuple(f for f in flags if f not in ("ro", "rw")),
    )


def _parse_mount_object(obj: Any) -> Mount:
    _expect(obj, dict, "HostConfig.Mounts[]")
    extra = {k: v for k, v in obj.items() if k not in ("Type", "Source", "Target", "ReadOnly")}
    return Mount(
        source=_expect(obj.get("Source", ""), str, "Mounts.Source"),
        target=_expect(obj.get("Target", ""), str, "Mounts.Target"),
        read_only=bool(obj.get("ReadOnly", False)),
        kind=_expect(obj.get("Type", "volume"), str, "Mounts.Type"),
        via="mounts",
        extra=extra,
    )


def _container_name(query: str) -> str | None:
    names = parse_qs(query.lstrip("?"), keep_blank_values=True).get("name")
    return names[0] if names else None


def parse_create_request(body: bytes, query: str = "") -> ContainerRequestSpec:
    """Build a spec from a de-chunked create-container entity."""
    try:
        payload = json.loads(body)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"body is not JSON: {exc}") from None
    if not isinstance(payload, dict):
        raise ParseError("body is not a JSON object")
    image = payload.get("Image")
    if not isinstance(image, str) or not image:
        raise ParseError("missing Image")

    host = _default(payload.get("HostConfig"), {})
    _expect(host, dict, "HostConfig")

    user = _expect(_default(payload.get("User"), ""), str, "User") or None

    mounts = [_parse_bind(b) for b in _string_list(host.get("Binds"), "HostConfig.Binds")]
    for obj in _expect(_default(host.get("Mounts"), []), list, "HostConfig.Mounts"):
        mounts.append(_parse_mount_object(obj))

    exposed = _expect(_default(payload.get("ExposedPorts"), {}), dict, "ExposedPorts")
    bindings = _expect(_default(host.get("PortBindings"), {}), dict, "HostConfig.PortBindings")

    memory = _expect(_default(host.get("Memory"), 0), int, "HostConfig.Memory") or None
    nano = _expect(_default(host.get("NanoCpus"), 0), int, "HostConfig.NanoCpus")

    extra = {k: v for k, v in payload.items() if k not in _TOP_KEYS and k != "HostConfig"}
    host_extra = {k: v for k, v in host.items() if k not in _HOST_KEYS}
    if host_extra:
        extra["HostConfig"] = host_extra

    return ContainerRequestSpec(
        image=image,
        privileged=_expect(_default(host.get("Privileged"), False), bool, "HostConfig.Privileged"),
        user=user,
        env=_string_list(payload.get("Env"), "Env"),
        mounts=tuple(mounts),
        exposed_ports=tuple(exposed),
        port_bindings=bindings,
        cap_add=_string_list(host.get("CapAdd"), "HostConfig.CapAdd"),
        cap_drop=_string_list(host.get("CapDrop"), "HostConfig.CapDrop"),
        memory=memory,
        cpu=Fraction(nano, NANO) if nano else None,
        container_name=_container_name(query),
        raw_extra=extra,
    )


def _render_mount(mount: Mount) -> str | dict[str, Any]:
    if mount.via == "binds":
        flags = (["ro"] if mount.read_only else []) + list(mount.options)
        head = f"{mount.source}:{mount.target}" if mount.source else mount.target
        return f"{head}:{','.join(flags)}" if flags else head
    obj: dict[str, Any] = {"Type": mount.kind}
    if mount.source:
        obj["Source"] = mount.source
    obj["Target"] = mount.target
    if mount.read_only:
        obj["ReadOnly"] = True
    obj.update(mount.extra)
    return obj


def render_payload(spec: ContainerRequestSpec) -> dict[str, Any]:
    """The create payload as a JSON-ready dict."""
    extra = dict(spec.raw_extra)
    host = dict(extra.pop("HostConfig", None) or {})
    payload: dict[str, Any] = {"Image": spec.image}
    if spec.user is not None:
        payload["User"] = spec.user
    if spec.env:
        payload["Env"] = list(spec.env)
    if spec.exposed_ports:
        payload["ExposedPorts"] = {key: {} for key in spec.exposed_ports}
    payload.update(extra)

    if spec.privileged:
        host["Privileged"] = True
    binds = [_render_mount(m) for m in spec.mounts if m.via == "binds"]
    objects = [_render_mount(m) for m in spec.mounts if m.via != "binds"]
    if binds:
        host["Binds"] = binds
    if objects:
        host["Mounts"] = objects
    if spec.port_bindings:
        host["PortBindings"] = dict(spec.port_bindings)
    if spec.cap_add:
        host["CapAdd"] = list(spec.cap_add)
    if spec.cap_drop:
        host["CapDrop"] = list(spec.cap_drop)
    if spec.memory is not None:
        host["Memory"] = spec.memory
    if spec.cpu is not None:
        host["NanoCpus"] = int(spec.cpu * NANO)
    if host:
        payload["HostConfig"] = host
    return payload


def render_create_body(spec: ContainerRequestSpec) -> bytes:
    return json.dumps(render_payload(spec), separators=(",", ":")).encode()
