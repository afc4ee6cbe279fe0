import json
import time
from urllib.parse import urlsplit

import httpx
import pytest
from fastapi.testclient import TestClient

from capvc import cli, jose
from capvc.auth_server import access_table_document, load_access_table
from capvc.client import Client, ClientConfig, ClientError, ConfigError, NetworkError, OAuthError
from capvc.errors import CnfMismatch
from capvc.vc import VerifiablePresentation, parse_presentation
from capvc.web import auth_server_app, resource_server_app
from conftest import ORG1_AS, ORG2_AS, RS_URL, build_deployment, caps

READ_URL = RS_URL + "/home/org1/folder2/report.txt"


class Clock:
    def __init__(self):
        self.offset = 0

    def __call__(self) -> float:
        return time.time() + self.offset


class Network:
    """Routes httpx requests by host to in-process ASGI apps and records them."""

    def __init__(self, apps):
        self.clients = {host: TestClient(app, base_url=f"https://{host}") for host, app in apps.items()}
        self.seen: list[httpx.Request] = []

    def handler(self, request: httpx.Request) -> httpx.Response:
        self.seen.append(request)
        host = urlsplit(str(request.url)).hostname
        if host not in self.clients:
            raise httpx.ConnectError("no route", request=request)
        resp = self.clients[host].request(
            request.method, str(request.url), headers=dict(request.headers), content=request.content
        )
        return httpx.Response(resp.status_code, headers=resp.headers, content=resp.content)

    def client(self) -> httpx.Client:
        return httpx.Client(transport=httpx.MockTransport(self.handler))


@pytest.fixture
def world(tmp_path):
    dep = build_deployment(tmp_path)
    clock = Clock()
    dep.org1.clock = dep.org2.clock = dep.rs.clock = clock
    net = Network({
        "org1.example": auth_server_app(dep.org1),
        "org2.example": auth_server_app(dep.org2),
        "cloud.example": resource_server_app(dep.rs),
    })
    dep.clock, dep.net = clock, net
    return dep


def write_config(world, key, name="client"):
    base = world.root / name
    base.mkdir()
    jose.save_keypair(key, base / "key.json")
    config = {
        "keypair": "key.json",
        "authorization_servers": {"org1": ORG1_AS + "/token", "org2": {"token_endpoint": ORG2_AS + "/token"}},
        "resource_server": RS_URL,
        "token_cache": "tokens",
    }
    path = base / "config.json"
    path.write_text(json.dumps(config))
    return path


def run(world, config, *argv):
    return cli.main(["--config", str(config), *argv], http=world.net.client())


class TestKeygen:
    def test_creates_key_and_prints_jwk(self, tmp_path, capsys):
        out = tmp_path / "k.json"
        assert cli.main(["keygen", "--out", str(out)]) == 0
        printed = capsys.readouterr().out.strip()
        jwk = json.loads(printed)
        assert (jwk["kty"], jwk["crv"]) == ("OKP", "Ed25519")
        assert jose.PublicKeyJwk.parse(printed).canonical() == printed
        assert jose.load_keypair(out).public.canonical() == printed
        assert out.stat().st_mode & 0o077 == 0

    def test_refuses_to_overwrite(self, tmp_path, capsys):
        out = tmp_path / "k.json"
        cli.main(["keygen", "--out", str(out)])
        before = out.read_bytes()
        assert cli.main(["keygen", "--out", str(out)]) == 2
        assert out.read_bytes() == before
        assert cli.main(["keygen", "--out", str(out), "--force"]) == 0
        assert out.read_bytes() != before

    def test_default_path_from_config(self, tmp_path, monkeypatch):
        (tmp_path / "c.json").write_text(json.dumps({"keypair": "mine.json"}))
        monkeypatch.setenv("CAPVC_CONFIG", str(tmp_path / "c.json"))
        assert cli.main(["keygen"]) == 0
        assert (tmp_path / "mine.json").exists()


class TestToken:
    def test_obtains_and_caches(self, world, capsys):
        config = write_config(world, world.c1)
        assert run(world, config, "token", "org1") == 0
        token = capsys.readouterr().out.strip()
        vc = parse_presentation(token)
        assert [c.to_wire() for c in vc.capabilities] == [{"folder1": ["r", "w"]}, {"folder2": ["r"]}]
        cached = list((config.parent / "tokens").glob("org1-*.json"))
        assert len(cached) == 1
        entry = json.loads(cached[0].read_text())
        assert entry["access_token"] == token and entry["exp"] == vc.exp
        assert set(entry) == {"as", "rs", "access_token", "exp"}
        secret = jose.b64url_encode(world.c1.secret)
        assert all(secret not in f.read_text() for f in (config.parent / "tokens").iterdir() if f.is_file())

    def test_unregistered(self, world, capsys):
        config = write_config(world, jose.generate_keypair())
        assert run(world, config, "token", "org1") == 1
        assert "invalid_client" in capsys.readouterr().err

    def test_one_signature(self, world):
        canned = world.issue(world.org1, world.c1)
        http = httpx.Client(transport=httpx.MockTransport(
            lambda r: httpx.Response(200, json={"access_token": canned, "token_type": "DPoP"})))
        client = Client(ClientConfig.load(write_config(world, world.c1)), http=http)
        client.keypair  # load outside the counted region
        with jose.count_operations() as ops:
            client.request_token("org1")
        assert (ops.signs, ops.verifies) == (1, 0)

    def test_unknown_as(self, world, capsys):
        assert run(world, write_config(world, world.c1), "token", "nope") == 2

    def test_network_failure(self, world):
        config = ClientConfig.load(write_config(world, world.c1))
        config.authorization_servers["down"] = {"token_endpoint": "https://down.example/token"}
        client = Client(config, http=world.net.client())
        with pytest.raises(NetworkError):
            client.request_token("down")

    def test_missing_config(self, monkeypatch):
        monkeypatch.delenv("CAPVC_CONFIG", raising=False)
        assert cli.main(["token", "org1"]) == 2


class TestAccess:
    def test_get(self, world, capsysbinary):
        config = write_config(world, world.c1)
        assert run(world, config, "token", "org1") == 0
        capsysbinary.readouterr()
        assert run(world, config, "get", READ_URL, "--as", "org1") == 0
        assert capsysbinary.readouterr().out == b"quarterly numbers\n"

    def test_get_to_file(self, world, tmp_path):
        config = write_config(world, world.c1)
        out = tmp_path / "copy.txt"
        assert run(world, config, "get", READ_URL, "--as", "org1", "--out", str(out)) == 0
        assert out.read_bytes() == b"quarterly numbers\n"

    def test_put(self, world, tmp_path):
        config = write_config(world, world.c1)
        data = tmp_path / "upload.bin"
        data.write_bytes(b"\x00\x01payload")
        assert run(world, config, "put", RS_URL + "/home/org1/folder1/up.bin", "--as", "org1", "--data", str(data)) == 0
        assert (world.root / "storage/home/org1/folder1/up.bin").read_bytes() == b"\x00\x01payload"

    def test_delete_denied(self, world, capsys):
        config = write_config(world, world.c1)
        assert run(world, config, "delete", READ_URL, "--as", "org1") == 1
        assert "403" in capsys.readouterr().err
        assert (world.root / "storage/home/org1/folder2/report.txt").exists()

    def test_denial_shows_reason(self, world, capsys):
        token = world.root / "stolen.jwt"
        config = write_config(world, world.c1)
        run(world, config, "token", "org1")
        token.write_text(capsys.readouterr().out)
        thief = write_config(world, world.c2, "thief")
        assert run(world, thief, "get", READ_URL, "--token", str(token)) == 1
        assert 'DPoP error="cnf_mismatch"' in capsys.readouterr().err

    def test_fresh_proof_per_request(self, world):
        config = write_config(world, world.c1)
        run(world, config, "get", READ_URL, "--as", "org1")
        run(world, config, "get", READ_URL, "--as", "org1")
        proofs = [r.headers["dpop"] for r in world.net.seen if r.url.host == "cloud.example"]
        jtis = {jose.decode_unverified(p).payload["jti"] for p in proofs}
        assert len(proofs) == 2 and len(jtis) == 2
        for request, proof in zip([r for r in world.net.seen if r.url.host == "cloud.example"], proofs):
            payload = jose.decode_unverified(proof).payload
            assert (payload["htm"], payload["htu"]) == (request.method, str(request.url))

    def test_access_signs_once(self, world):
        client = Client(ClientConfig.load(write_config(world, world.c1)), http=httpx.Client(
            transport=httpx.MockTransport(lambda r: httpx.Response(200))))
        client.keypair
        with jose.count_operations() as ops:
            client.access("GET", READ_URL, "token")
        assert (ops.signs, ops.verifies) == (1, 0)

    def test_rs_unreachable(self, world):
        config = write_config(world, world.c1)
        run(world, config, "token", "org1")
        assert run(world, config, "get", "https://gone.example/x", "--as", "org1") == 3

    def test_needs_token_source(self, world):
        assert run(world, write_config(world, world.c1), "get", READ_URL) == 2


class TestAutoRenew:
    @pytest.fixture
    def short(self, tmp_path):
        dep = build_deployment(tmp_path, token_lifetime=2)
        clock = Clock()
        dep.org1.clock = dep.rs.clock = clock
        net = Network({"org1.example": auth_server_app(dep.org1), "cloud.example": resource_server_app(dep.rs)})
        client = Client(ClientConfig.load(write_config(dep, dep.c1)), http=net.client(), clock=clock)
        return client, clock

    def test_expired_without_flag(self, short):
        client, clock = short
        first = client.cached_token("org1")
        clock.offset = 3
        with pytest.raises(ClientError):
            client.cached_token("org1")
        assert client.cache.load("org1", RS_URL)["access_token"] == first

    def test_expired_with_flag(self, short):
        client, clock = short
        first = client.cached_token("org1")
        assert client.cached_token("org1") == first
        clock.offset = 3
        renewed = client.cached_token("org1", auto_renew=True)
        assert renewed != first
        assert client.access("GET", READ_URL, renewed).status_code == 200


class TestCombine:
    def _tokens(self, world, capsys):
        world.org2.set_access_tables(load_access_table(access_table_document("cloud", {
            world.c3.public: caps(shared="rwd"),
            world.c1.public: caps(shared="r"),
        })))
        config = write_config(world, world.c1)
        files = []
        for name in ("org1", "org2"):
            assert run(world, config, "token", name) == 0
            path = world.root / f"{name}.jwt"
            path.write_text(capsys.readouterr().out)
            files.append(str(path))
        return config, files

    def test_two_issuers(self, world, capsys):
        config, files = self._tokens(world, capsys)
        out = world.root / "vp.jwt"
        assert run(world, config, "combine", *files, "--out", str(out)) == 0
        vp = capsys.readouterr().out.strip()
        assert out.read_text() == vp
        parsed = parse_presentation(vp)
        assert isinstance(parsed, VerifiablePresentation) and len(parsed.tokens) == 2
        assert run(world, config, "get", READ_URL, "--token", str(out)) == 0

    def test_single(self, world, capsys):
        config, files = self._tokens(world, capsys)
        assert run(world, config, "combine", files[0]) == 0
        assert len(parse_presentation(capsys.readouterr().out.strip()).tokens) == 1

    def test_foreign_token(self, world, capsys):
        config, files = self._tokens(world, capsys)
        other = write_config(world, world.c3, "c3")
        assert run(world, other, "combine", files[0]) == 1
        assert CnfMismatch.reason in capsys.readouterr().err


class TestConfig:
    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{")
        with pytest.raises(ConfigError):
            ClientConfig.load(tmp_path / "c.json")

    def test_missing_keypair_field(self):
        with pytest.raises(ConfigError):
            ClientConfig.from_dict({})

    def test_oauth_error_message(self):
        assert str(OAuthError("invalid_client")) == "invalid_client"
