"""Capability-based access control with verifiable-credential access tokens.

Access tokens are JWT-encoded verifiable credentials listing capabilities
(path plus read/write/delete rights), signed by a tenant's authorization
server with Ed25519 and bound to the client's key through DPoP proofs.
"""

from .auth_server import AccessTable, AuthorizationServer, load_access_table
from .dpop import ReplayCache, build_proof, verify_proof
from .jose import KeyPair, PublicKeyJwk, generate_keypair, jws_sign, jws_verify
from .resource_server import (
    ResourceRequest,
    ResourceServer,
    ResourceTable,
    evaluate_capabilities,
    load_resource_table,
)
from .revocation import RevocationList
from .vc import (
    AccessTokenVc,
    Capability,
    CredentialDefinition,
    VerifiablePresentation,
    build_capability_vc,
    build_vp,
    encode_vc_jwt,
    parse_presentation,
)

__version__ = "0.1.0"

__all__ = [
    "AccessTable",
    "AccessTokenVc",
    "AuthorizationServer",
    "Capability",
    "CredentialDefinition",
    "KeyPair",
    "PublicKeyJwk",
    "ReplayCache",
    "ResourceRequest",
    "ResourceServer",
    "ResourceTable",
    "RevocationList",
    "VerifiablePresentation",
    "build_capability_vc",
    "build_proof",
    "build_vp",
    "encode_vc_jwt",
    "evaluate_capabilities",
    "generate_keypair",
    "jws_sign",
    "jws_verify",
    "load_access_table",
    "load_resource_table",
    "parse_presentation",
    "verify_proof",
]
