import hashlib
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import reference_token as ref
from capvc import jose
from capvc.errors import (
    CnfMismatch,
    CredentialError,
    EmptyCapabilities,
    EmptyTokenList,
    MalformedToken,
    NestedPresentation,
)
from capvc.vc import (
    CAPABILITIES_DEFINITION,
    AccessTokenVc,
    Capability,
    CredentialDefinition,
    JtiSequence,
    RevocationStatusRef,
    VcObject,
    VerifiablePresentation,
    build_capability_vc,
    build_vp,
    encode_vc_jwt,
    holder_digest,
    parse_presentation,
    validate_credential_definition,
)

REF_CAPS = [Capability.of("folder1", "rwd"), Capability.of("folder2", "r")]
REF_STATUS = RevocationStatusRef(94567, "https://aueb.gr/rl")


@pytest.fixture(scope="module")
def as_key():
    return jose.generate_keypair()


@pytest.fixture(scope="module")
def holder():
    return jose.generate_keypair()


def reference_vc(holder):
    return build_capability_vc(
        ref.ISSUER, holder.public, REF_CAPS, 864000, REF_STATUS, ref.IAT,
        jti="https://mm.aueb.gr/credentials/1",
    )


class TestCapability:
    def test_wire_form(self):
        assert Capability.of("folder1", "wdr").to_wire() == {"folder1": ["r", "w", "d"]}

    def test_from_wire(self):
        assert Capability.from_wire({"folder2": ["r"]}) == Capability.of("folder2", "r")

    @pytest.mark.parametrize("path,rights", [
        ("folder1", ""), ("folder1", "x"), ("/folder1", "r"), ("a/../b", "r"), ("", "r"), ("a//b", "r"),
    ])
    def test_invalid(self, path, rights):
        with pytest.raises(CredentialError):
            Capability.of(path, rights)

    def test_multi_key_entry_rejected(self):
        with pytest.raises(CredentialError):
            Capability.from_wire({"a": ["r"], "b": ["r"]})


class TestBuild:
    def test_matches_reference_structure(self, holder):
        token = reference_vc(holder)
        assert token.to_claims() == ref.claims(holder.public.x)

    def test_key_order_matches_reference(self, holder):
        claims = reference_vc(holder).to_claims()
        assert list(claims) == ["jti", "iss", "iat", "exp", "cnf", "vc"]
        assert list(claims["vc"]) == ["@context", "type", "credentialStatus", "credentialSubject"]

    def test_zero_validity_rejected(self, holder):
        with pytest.raises(CredentialError) as info:
            build_capability_vc("https://as.example", holder.public, REF_CAPS, 0, None, 100)
        assert not isinstance(info.value, EmptyCapabilities)

    def test_empty_capabilities(self, holder):
        with pytest.raises(EmptyCapabilities):
            build_capability_vc("https://as.example", holder.public, [], 10, None, 100)

    def test_single_capability(self, holder):
        token = build_capability_vc("https://as.example", holder.public, [Capability.of("docs", "r")], 10, None, 100)
        assert token.to_claims()["vc"]["credentialSubject"]["capabilities"] == [{"docs": ["r"]}]

    def test_jti_sequence(self):
        seq = JtiSequence()
        assert seq.next("https://mm.aueb.gr/as") == "https://mm.aueb.gr/credentials/1"
        assert seq.next("https://mm.aueb.gr/as") == "https://mm.aueb.gr/credentials/2"
        assert seq.next("https://other.example/as") == "https://other.example/credentials/1"

    def test_default_jtis_are_unique(self, holder):
        a = build_capability_vc("https://u.example/as", holder.public, REF_CAPS, 10, None, 1)
        b = build_capability_vc("https://u.example/as", holder.public, REF_CAPS, 10, None, 1)
        assert a.jti != b.jti


class TestEncode:
    def test_round_trip(self, as_key, holder):
        token = reference_vc(holder)
        compact = encode_vc_jwt(token, as_key)
        header, payload = jose.jws_verify(compact, as_key.public)
        assert header == {"typ": "jwt", "alg": "EdDSA"}
        assert jose.compact_json(payload) == jose.compact_json(token.to_claims())
        assert AccessTokenVc.from_claims(payload) == token

    def test_serialized_size_is_fixed_by_claims(self, as_key, holder):
        # header 36 + payload 760 + signature 86 + two dots; the key bytes
        # have fixed encoded length so only the claim values move this.
        payload_len = len(jose.compact_json(reference_vc(holder).to_claims()))
        assert payload_len == 570
        expected = 36 + 1 + (4 * payload_len + 2) // 3 + 1 + 86
        assert len(encode_vc_jwt(reference_vc(holder), as_key)) == expected == 884

    def test_size_without_status_block(self, as_key, holder):
        token = build_capability_vc(
            ref.ISSUER, holder.public, REF_CAPS, 864000, None, ref.IAT,
            jti="https://mm.aueb.gr/credentials/1",
        )
        assert len(encode_vc_jwt(token, as_key)) == 707

    def test_signed_by_wrong_key_still_encodes(self, holder):
        stranger = jose.generate_keypair()
        assert encode_vc_jwt(reference_vc(holder), stranger).count(".") == 2


class TestPresentation:
    def _token(self, as_key, holder, iss="https://a.example/as"):
        return encode_vc_jwt(
            build_capability_vc(iss, holder.public, REF_CAPS, 100, None, 1000), as_key
        )

    def test_two_tokens(self, as_key, holder):
        tokens = [self._token(as_key, holder), self._token(jose.generate_keypair(), holder, "https://b.example/as")]
        vp = build_vp(tokens, holder, 1000)
        header, payload = jose.jws_verify(vp, holder.public)
        assert payload["vp"] == tokens
        assert payload["iat"] == 1000
        assert "exp" not in payload

    def test_issuer_is_sha256_of_canonical_jwk(self, as_key, holder):
        vp = build_vp([self._token(as_key, holder)], holder, 1000)
        canonical = json.dumps(
            {"crv": "Ed25519", "kty": "OKP", "x": holder.public.x}, separators=(",", ":"), sort_keys=True
        ).encode()
        assert jose.decode_unverified(vp).payload["iss"] == hashlib.sha256(canonical).hexdigest()

    def test_foreign_token(self, as_key, holder):
        foreign = self._token(as_key, jose.generate_keypair())
        with pytest.raises(CnfMismatch):
            build_vp([self._token(as_key, holder), foreign], holder, 1000)

    def test_empty(self, holder):
        with pytest.raises(EmptyTokenList):
            build_vp([], holder, 1000)

    def test_nested_presentation_rejected(self, as_key, holder):
        inner = build_vp([self._token(as_key, holder)], holder, 1000)
        with pytest.raises(NestedPresentation):
            build_vp([inner], holder, 1000)

    def test_iss_matches_member_cnf(self, as_key, holder):
        token = self._token(as_key, holder)
        vp = build_vp([token], holder, 1000)
        member_key = jose.PublicKeyJwk.from_dict(jose.decode_unverified(token).payload["cnf"]["jwk"])
        assert jose.decode_unverified(vp).payload["iss"] == holder_digest(member_key)


class TestParse:
    def test_single(self, as_key, holder):
        parsed = parse_presentation(encode_vc_jwt(reference_vc(holder), as_key))
        assert isinstance(parsed, AccessTokenVc)
        assert parsed.capabilities == tuple(REF_CAPS)

    def test_vp(self, as_key, holder):
        token = encode_vc_jwt(reference_vc(holder), as_key)
        parsed = parse_presentation(build_vp([token, token], holder, 1000))
        assert isinstance(parsed, VerifiablePresentation)
        assert len(parsed.tokens) == 2 and len(parsed.members) == 2

    def test_outer_wrapper_wins(self, as_key, holder):
        token = encode_vc_jwt(reference_vc(holder), as_key)
        hybrid = dict(reference_vc(holder).to_claims(), vp=[token])
        parsed = parse_presentation(jose.jws_sign(hybrid, "jwt", holder))
        assert isinstance(parsed, VerifiablePresentation)

    def test_garbage(self):
        with pytest.raises(MalformedToken):
            parse_presentation("x.y.z")

    def test_missing_cnf(self, as_key):
        with pytest.raises(MalformedToken):
            parse_presentation(jose.jws_sign({"iss": "a", "iat": 1, "exp": 2}, "jwt", as_key))


class TestCredentialDefinition:
    def test_reference_accepted(self, holder):
        assert validate_credential_definition(ref.claims(holder.public.x)["vc"], CAPABILITIES_DEFINITION) == []

    def test_other_type_rejected(self, holder):
        vc = ref.claims(holder.public.x)["vc"]
        vc["type"] = ["VerifiableCredential", "UserId"]
        assert validate_credential_definition(vc, CAPABILITIES_DEFINITION)

    def test_unknown_right_rejected(self, holder):
        vc = ref.claims(holder.public.x)["vc"]
        vc["credentialSubject"]["capabilities"] = [{"folder1": ["x"]}]
        assert validate_credential_definition(vc, CAPABILITIES_DEFINITION)

    def test_missing_context_rejected(self, holder):
        vc = ref.claims(holder.public.x)["vc"]
        vc["@context"] = ["https://www.w3.org/2018/credentials/v1"]
        assert validate_credential_definition(vc, CAPABILITIES_DEFINITION)

    def test_narrower_definition(self, holder):
        read_only = CredentialDefinition("capabilities", CAPABILITIES_DEFINITION.context, frozenset("r"))
        problems = validate_credential_definition(ref.claims(holder.public.x)["vc"], read_only)
        assert problems and "not allowed" in problems[0]

    def test_vc_object_round_trip(self, holder):
        vc = reference_vc(holder).vc
        assert VcObject.from_dict(vc.to_dict()) == vc

    @settings(max_examples=100, deadline=None)
    @given(
        entries=st.lists(
            st.tuples(st.text("abcdef", min_size=1, max_size=6), st.sets(st.sampled_from("rwd"), min_size=1)),
            min_size=1, max_size=5,
        )
    )
    def test_built_credentials_pass_their_definition(self, holder, entries):
        caps = [Capability.of(p, r) for p, r in entries]
        token = build_capability_vc("https://as.example", holder.public, caps, 60, None, 0)
        assert validate_credential_definition(token.vc, CAPABILITIES_DEFINITION) == []
