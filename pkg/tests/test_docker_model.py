import json
from fractions import Fraction

import pytest
from hypothesis import given, settings

from secdocker.docker_model import (
    NANO,
    ContainerRequestSpec,
    EndpointClass,
    Mount,
    ParseError,
    classify_endpoint,
    parse_create_request,
    render_create_body,
    render_payload,
    strip_version,
)
from strategies import specs


@pytest.mark.parametrize(
    "method,path,expected",
    [
        ("POST", "/v1.41/containers/create", EndpointClass.CREATE_CONTAINER),
        ("POST", "/containers/create?name=ci-job", EndpointClass.CREATE_CONTAINER),
        ("POST", "/v1.24/containers/create/", EndpointClass.CREATE_CONTAINER),
        ("post", "/containers/create", EndpointClass.CREATE_CONTAINER),
        ("GET", "/v1.41/images/json", EndpointClass.PASSTHROUGH),
        ("GET", "/containers/create", EndpointClass.PASSTHROUGH),
        ("POST", "/containers/abc/start", EndpointClass.PASSTHROUGH),
        ("POST", "/v1.41/containers/create/extra", EndpointClass.PASSTHROUGH),
        ("POST", "/containers/createx", EndpointClass.PASSTHROUGH),
    ],
)
def test_classify_endpoint(method, path, expected):
    assert classify_endpoint(method, path) is expected


def test_strip_version():
    assert strip_version("/v1.41/containers/create?name=x") == "/containers/create"
    assert strip_version("/_ping") == "/_ping"
    # Only a leading segment counts as a version prefix.
    assert strip_version("/images/v1.2/json") == "/images/v1.2/json"


def test_parse_privileged_example():
    spec = parse_create_request(b'{"Image":"ubuntu:18.04","HostConfig":{"Privileged":true}}')
    assert spec.image == "ubuntu:18.04"
    assert spec.privileged is True
    assert spec.raw_extra == {}


def test_parse_minimal_example():
    spec = parse_create_request(b'{"Image":"alpine:latest"}')
    assert spec == ContainerRequestSpec(image="alpine:latest")
    assert spec.user is None and spec.memory is None and spec.cpu is None
    assert spec.ports == frozenset() and spec.mounts == ()


@pytest.mark.parametrize(
    "body",
    [b'{"HostConfig":{}}', b"not json", b"[1,2]", b'{"Image":""}', b'{"Image":5}', b"\xff\xfe",
     b'{"Image":"a","HostConfig":[]}', b'{"Image":"a","Env":"X=1"}', b'{"Image":"a","HostConfig":{"Memory":"1g"}}',
     b'{"Image":"a","HostConfig":{"Privileged":"yes"}}', b'{"Image":"a","HostConfig":{"Memory":true}}'],
)
def test_parse_errors(body):
    with pytest.raises(ParseError):
        parse_create_request(body)


def test_parse_full_payload():
    body = json.dumps({
        "Image": "nginx:1.25",
        "User": "1000:1000",
        "Env": ["A=1", "B"],
        "Cmd": ["nginx", "-g", "daemon off;"],
        "ExposedPorts": {"80/tcp": {}, "7000-7002/udp": {}},
        "HostConfig": {
            "Binds": ["/var/run/docker.sock:/var/run/docker.sock:ro", "data:/data", "/srv:/srv:z"],
            "Mounts": [{"Type": "tmpfs", "Target": "/tmp", "TmpfsOptions": {"SizeBytes": 1024}}],
            "PortBindings": {"443/tcp": [{"HostIp": "", "HostPort": "8443"}]},
            "CapAdd": ["NET_ADMIN"], "CapDrop": ["ALL"],
            "Memory": 536870912, "NanoCpus": 1500000000,
            "RestartPolicy": {"Name": "always"},
        },
    }).encode()
    spec = parse_create_request(body, "?name=web")
    assert spec.user == "1000:1000"
    assert spec.env == ("A=1", "B") and spec.env_keys == {"A", "B"}
    assert spec.ports == {80, 443, 7000, 7001, 7002}
    assert spec.mounts[0] == Mount("/var/run/docker.sock", "/var/run/docker.sock", True)
    assert spec.mounts[1].kind == "volume" and not spec.mounts[1].is_host_bind
    assert spec.mounts[2].options == ("z",)
    assert spec.mounts[3].kind == "tmpfs" and spec.mounts[3].extra == {"TmpfsOptions": {"SizeBytes": 1024}}
    assert spec.cap_add == ("NET_ADMIN",) and spec.cap_drop == ("ALL",)
    assert spec.memory == 512 * 1024**2
    assert spec.cpu == Fraction(3, 2)
    assert spec.container_name == "web"
    assert spec.raw_extra == {"Cmd": ["nginx", "-g", "daemon off;"], "HostConfig": {"RestartPolicy": {"Name": "always"}}}
    assert json.loads(render_create_body(spec)) == json.loads(body)


def test_defaults_treated_as_unset():
    spec = parse_create_request(
        b'{"Image":"a","User":"","Env":null,"HostConfig":{"Privileged":null,"Memory":0,"NanoCpus":0,"CapAdd":null}}'
    )
    assert spec == ContainerRequestSpec(image="a")


def test_render_memory_mutation():
    spec = parse_create_request(b'{"Image":"alpine:latest"}')
    from dataclasses import replace

    body = json.loads(render_create_body(replace(spec, memory=512 * 1024 * 1024)))
    assert body["HostConfig"]["Memory"] == 536870912


def test_render_round_trip_minimal():
    spec = parse_create_request(b'{"Image":"alpine:latest"}')
    assert render_create_body(spec) == b'{"Image":"alpine:latest"}'
    assert parse_create_request(render_create_body(spec)) == spec


def test_render_cpu_nano():
    spec = ContainerRequestSpec(image="a", cpu=Fraction(1, 4))
    assert render_payload(spec)["HostConfig"] == {"NanoCpus": NANO // 4}


def test_image_required():
    with pytest.raises(ValueError):
        ContainerRequestSpec(image="")


@settings(max_examples=300, deadline=None)
@given(specs)
def test_round_trip_property(spec):
    query = f"name={spec.container_name}" if spec.container_name is not None else ""
    assert parse_create_request(render_create_body(spec), query) == spec


@settings(max_examples=100, deadline=None)
@given(specs)
def test_classification_ignores_version_and_query(spec):
    for prefix in ("", "/v1.24", "/v1.41", "/v1.45"):
        for query in ("", "?name=x", "?platform=linux"):
            assert classify_endpoint("POST", f"{prefix}/containers/create{query}") is EndpointClass.CREATE_CONTAINER
            assert classify_endpoint("GET", f"{prefix}/containers/create{query}") is EndpointClass.PASSTHROUGH
