from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import pytest

from capvc import dpop, jose
from capvc.auth_server import AuthorizationServer, access_table_document, load_access_table
from capvc.jose import KeyPair
from capvc.resource_server import (
    ResourceRequest,
    ResourceServer,
    RevocationListCache,
    load_resource_table,
)
from capvc.vc import Capability

NOW = 1617559370
RS_URL = "https://cloud.example"
ORG1_AS = "https://org1.example/as"
ORG2_AS = "https://org2.example/as"


def caps(**rights: str) -> list[Capability]:
    return [Capability.of(path, r) for path, r in rights.items()]


@dataclass
class Deployment:
    """Two tenants sharing one resource server, as in the cloud-storage
    scenario: org1 governs /home/org1, org2 governs /home/org2."""

    root: Path
    org1: AuthorizationServer
    org2: AuthorizationServer
    rs: ResourceServer
    c1: KeyPair
    c2: KeyPair
    c3: KeyPair
    now: int = NOW
    fetched: list[str] = field(default_factory=list)

    @property
    def servers(self) -> dict[str, AuthorizationServer]:
        return {self.org1.url: self.org1, self.org2.url: self.org2}

    def fetch_list(self, url: str) -> str:
        self.fetched.append(url)
        for server in self.servers.values():
            if server.revocation_list_url == url:
                return server.signed_revocation_list(self.now)
        raise ConnectionError(f"no server publishes {url}")

    def issue(self, server: AuthorizationServer, client: KeyPair) -> str:
        proof = dpop.build_proof("POST", server.token_endpoint, client, self.now)
        resp = server.handle_token_request(
            "POST", server.token_endpoint,
            {"grant_type": "client_credentials", "dpop": proof}, self.now,
        )
        assert resp.status == 200, resp.body
        return resp.body["access_token"]

    def request(self, client: KeyPair, method: str, path: str, token: str, body: bytes = b"") -> ResourceRequest:
        uri = RS_URL + path
        proof = dpop.build_proof(method, uri, client, self.now)
        return ResourceRequest(method, uri, f"DPoP {token}", proof, body)

    def call(self, client: KeyPair, method: str, path: str, token: str, body: bytes = b""):
        return self.rs.handle_resource_request(self.request(client, method, path, token, body), self.now)


def build_deployment(root: Path, now: int = NOW, token_lifetime: int = 864000) -> Deployment:
    c1, c2, c3 = (jose.generate_keypair() for _ in range(3))
    org1_key, org2_key = jose.generate_keypair(), jose.generate_keypair()
    org1_table = load_access_table(access_table_document("cloud", {
        c1.public: caps(folder1="rw", folder2="r"),
        c2.public: caps(folder3="rw", folder4="rw"),
    }))
    org2_table = load_access_table(access_table_document("cloud", {
        c3.public: caps(shared="rwd"),
    }))
    org1 = AuthorizationServer(ORG1_AS, org1_key, org1_table, token_lifetime=token_lifetime)
    org2 = AuthorizationServer(ORG2_AS, org2_key, org2_table, token_lifetime=token_lifetime)
    table = load_resource_table({
        "/home/org1": {"as_url": ORG1_AS, "as_key": org1_key.public.to_dict()},
        "/home/org2": {"as_url": ORG2_AS, "as_key": org2_key.public.to_dict()},
    })
    storage = root / "storage"
    for folder in ("org1/folder1", "org1/folder2", "org2/shared"):
        (storage / "home" / folder).mkdir(parents=True)
    (storage / "home/org1/folder2/report.txt").write_bytes(b"quarterly numbers\n")
    (storage / "home/org2/shared/plan.txt").write_bytes(b"org2 plan\n")
    dep = Deployment(root, org1, org2, None, c1, c2, c3, now)  # type: ignore[arg-type]
    dep.rs = ResourceServer(
        RS_URL, table, storage,
        revocation_cache=RevocationListCache(fetch=dep.fetch_list),
        clock=lambda: dep.now,
    )
    return dep


@pytest.fixture
def deployment(tmp_path: Path) -> Deployment:
    return build_deployment(tmp_path)
