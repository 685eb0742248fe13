"""Hypothesis strategies for create-container requests."""
from __future__ import annotations

from fractions import Fraction

from hypothesis import strategies as st

from secdocker.docker_model import NANO, ContainerRequestSpec, Mount

_word = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789_-.", min_size=1, max_size=12)
_path = st.lists(_word, min_size=1, max_size=4).map(lambda parts: "/" + "/".join(parts))
# Keys the firewall maps onto spec fields can't appear as extras.
_extra_key = st.text(alphabet="ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz", min_size=1, max_size=10).filter(
    lambda k: k not in ("Image", "User", "Env", "ExposedPorts", "HostConfig")
)
_host_extra_key = _extra_key.filter(
    lambda k: k not in ("Privileged", "Binds", "Mounts", "CapAdd", "CapDrop", "Memory", "NanoCpus", "PortBindings")
)

json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-(2**40), 2**40) | st.text(max_size=12),
    lambda inner: st.lists(inner, max_size=3) | st.dictionaries(_word, inner, max_size=3),
    max_leaves=8,
)

images = st.sampled_from(["ubuntu:18.04", "alpine", "alpine:latest", "registry.local:5000/team/app:1.2",
                          "nginx@sha256:" + "a" * 64, "busybox:1"])
users = st.none() | st.sampled_from(["root", "0", "app", "1000:1000", "nobody:nogroup", "root:root"])
env_entries = st.lists(
    st.builds(lambda k, v: f"{k}={v}" if v is not None else k,
              st.sampled_from(["PATH", "DEBUG", "FLAG", "TOKEN", "LANG"]), st.none() | _word),
    max_size=4,
).map(tuple)

# An anonymous volume ("/target") has no room for mode flags.
bind_mounts = st.builds(
    Mount,
    source=_path | _word | st.just(""),
    target=_path,
    read_only=st.booleans(),
    via=st.just("binds"),
    options=st.lists(st.sampled_from(["z", "Z", "rslave", "rprivate", "nocopy"]), max_size=2, unique=True).map(tuple),
).map(lambda m: Mount(m.source, m.target, m.read_only and bool(m.source),
                      "bind" if m.source.startswith("/") else "volume", "binds", m.options if m.source else ()))
object_mounts = st.builds(
    Mount,
    source=_path | _word | st.just(""),
    target=_path,
    read_only=st.booleans(),
    kind=st.sampled_from(["bind", "volume", "tmpfs"]),
    via=st.just("mounts"),
    extra=st.dictionaries(st.sampled_from(["Consistency", "BindOptions", "VolumeOptions"]), json_values, max_size=2),
)
mount_lists = st.tuples(st.lists(bind_mounts, max_size=3), st.lists(object_mounts, max_size=2)).map(
    lambda pair: tuple(pair[0] + pair[1])
)

port_keys = st.builds(lambda n, proto: f"{n}/{proto}", st.sampled_from([22, 80, 443, 2375, 8080, 53]),
                      st.sampled_from(["tcp", "udp"]))
port_bindings = st.dictionaries(
    port_keys,
    st.none() | st.lists(st.fixed_dictionaries({"HostIp": st.just(""), "HostPort": st.sampled_from(["", "8080", "80"])}),
                         max_size=2),
    max_size=2,
)
capabilities = st.lists(st.sampled_from(["SYS_ADMIN", "NET_ADMIN", "cap_sys_ptrace", "CAP_NET_RAW", "ALL", "CHOWN"]),
                        max_size=3).map(tuple)

specs = st.builds(
    ContainerRequestSpec,
    image=images,
    privileged=st.booleans(),
    user=users,
    env=env_entries,
    mounts=mount_lists,
    exposed_ports=st.lists(port_keys, max_size=3, unique=True).map(tuple),
    port_bindings=port_bindings,
    cap_add=capabilities,
    cap_drop=capabilities,
    memory=st.none() | st.integers(1, 2**40),
    cpu=st.none() | st.integers(1, 64 * NANO).map(lambda n: Fraction(n, NANO)),
    container_name=st.none() | _word,
    raw_extra=st.tuples(
        st.dictionaries(_extra_key, json_values, max_size=3),
        st.dictionaries(_host_extra_key, json_values, max_size=3),
    ).map(lambda pair: {**pair[0], **({"HostConfig": pair[1]} if pair[1] else {})}),
)
