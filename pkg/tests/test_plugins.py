import threading
import time

import pytest

from secdocker.docker_model import ContainerRequestSpec
from secdocker.plugins import (
    PluginRegistry,
    PluginVerdict,
    StubImageScan,
    StubSignatureVerify,
    parse_fixture,
    run_pre_admission,
    stub_image_scan,
    stub_signature_verify,
)

UBUNTU = ContainerRequestSpec(image="ubuntu:18.04")
ALPINE = ContainerRequestSpec(image="alpine:latest")
DIGEST = "sha256:" + "ab" * 32


@pytest.fixture
def scan_fixture(tmp_path):
    path = tmp_path / "scan.txt"
    path.write_text("# image scan results\nubuntu:18.04 deny\nnginx:1.25 deny CVE-2023-44487\nalpine:latest pass\n")
    return path


@pytest.fixture
def trust_fixture(tmp_path):
    path = tmp_path / "trust.txt"
    path.write_text(f"alpine:latest@{DIGEST} pass\nbusybox:1 pass\nubuntu:18.04 deny revoked\n")
    return path


def test_verdict_invariants():
    assert PluginVerdict.ok("x").passed
    with pytest.raises(ValueError):
        PluginVerdict.deny("x", "")
    assert PluginVerdict.deny("x", "why").to_dict() == {"plugin": "x", "verdict": "deny", "reason": "why"}


def test_parse_fixture():
    entries = parse_fixture(f"# c\n\nimg@{DIGEST} pass\nother deny bad news  \n")
    assert [(e.image, e.digest, e.passed, e.reason) for e in entries] == [
        ("img:latest", DIGEST, True, ""), ("other:latest", None, False, "bad news"),
    ]
    with pytest.raises(ValueError):
        parse_fixture("img maybe\n")


def test_empty_registry_passes():
    assert run_pre_admission(PluginRegistry(), UBUNTU).passed


def test_image_scan_stub(scan_fixture, tmp_path):
    scan = StubImageScan(scan_fixture)
    assert scan(UBUNTU) == PluginVerdict.deny("image-scan", "policy: image flagged")
    assert scan(ContainerRequestSpec(image="nginx:1.25")).reason == "policy: CVE-2023-44487"
    assert scan(ALPINE).passed
    assert scan(ContainerRequestSpec(image="unlisted:1")).passed
    missing = stub_image_scan(UBUNTU, tmp_path / "nope.txt")
    assert not missing.passed and missing.reason == "scan unavailable"
    assert stub_image_scan(ALPINE, scan_fixture).passed


def test_signature_stub(trust_fixture, tmp_path):
    verify = StubSignatureVerify(trust_fixture)
    # Trust is keyed on (image, digest); a tag alone is not enough for a pinned entry.
    assert verify(ALPINE).reason == "untrusted image"
    assert verify(ContainerRequestSpec(image=f"alpine:latest@{DIGEST}")).passed
    assert verify(ContainerRequestSpec(image="busybox:1")).passed
    assert verify(UBUNTU).reason == "revoked"
    assert verify(ContainerRequestSpec(image="never-seen")).reason == "untrusted image"
    assert StubSignatureVerify(trust_fixture, enabled=False)(UBUNTU).passed
    assert stub_signature_verify(UBUNTU, tmp_path / "nope.txt").reason == "trust data unavailable"
    assert stub_signature_verify(UBUNTU, tmp_path / "nope.txt", enabled=False).passed


def test_second_hook_denies():
    registry = PluginRegistry()
    registry.register("first", lambda spec: PluginVerdict.ok("first"))
    registry.register("second", lambda spec: PluginVerdict.deny("second", "nope"))
    verdict = run_pre_admission(registry, ALPINE)
    assert not verdict.passed
    assert verdict.reason == "second: nope"
    assert [v.plugin_name for v in verdict.verdicts] == ["first", "second"]


def test_all_deniers_reported_first_reason_wins():
    registry = PluginRegistry()
    registry.register("a", lambda spec: PluginVerdict.deny("a", "one"))
    registry.register("b", lambda spec: PluginVerdict.deny("b", "two"))
    verdict = run_pre_admission(registry, ALPINE)
    assert verdict.reason == "a: one"
    assert [v.reason for v in verdict.verdicts] == ["one", "two"]


def test_timeout_and_crash_become_denials():
    release = threading.Event()
    registry = PluginRegistry()

    def slow(spec):
        release.wait(5)
        return PluginVerdict.ok("slow")

    def broken(spec):
        raise RuntimeError("boom")

    registry.register("slow", slow, timeout=0.1)
    registry.register("broken", broken)
    registry.register("fine", lambda spec: PluginVerdict.ok("fine"))
    started = time.monotonic()
    verdict = run_pre_admission(registry, ALPINE)
    release.set()
    assert time.monotonic() - started < 2
    by_name = {v.plugin_name: v for v in verdict.verdicts}
    assert by_name["slow"].reason == "timeout" and not by_name["slow"].passed
    assert not by_name["broken"].passed and "boom" in by_name["broken"].reason
    assert by_name["fine"].passed
    assert not verdict.passed


def test_wrong_return_type_is_a_denial():
    registry = PluginRegistry()
    registry.register("liar", lambda spec: True)
    assert not run_pre_admission(registry, ALPINE).passed


def test_registry_names_unique_and_ordered():
    registry = PluginRegistry()
    registry.register("b", lambda s: PluginVerdict.ok("b"))
    registry.register("a", lambda s: PluginVerdict.ok("a"), serialized=True)
    assert registry.names == ["b", "a"] and len(registry) == 2
    with pytest.raises(ValueError):
        registry.register("a", lambda s: PluginVerdict.ok("a"))


def test_aggregate_passes_iff_every_hook_passes(scan_fixture, trust_fixture):
    registry = PluginRegistry()
    registry.register(StubImageScan.name, StubImageScan(scan_fixture))
    registry.register(StubSignatureVerify.name, StubSignatureVerify(trust_fixture))
    for image, expected in [("busybox:1", True), ("ubuntu:18.04", False), ("alpine:latest", False),
                            (f"alpine:latest@{DIGEST}", True)]:
        assert run_pre_admission(registry, ContainerRequestSpec(image=image)).passed is expected, image
