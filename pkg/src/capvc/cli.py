"""Command-line entry points.

``capvc`` is the client: keygen, token, combine, get/put/delete.
``capvc-server`` runs an authorization or resource server from a config file.

Client exit codes: 0 success, 1 authorization failure, 2 usage or config
error, 3 network error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

import httpx

from . import jose
from .client import Client, ClientConfig, ClientError, OAuthError
from .errors import CapvcError

EXIT_OK, EXIT_DENIED, EXIT_USAGE, EXIT_NETWORK = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capvc", description="Capability token client")
    parser.add_argument("--config", help="client config JSON (default: $CAPVC_CONFIG)")
    sub = parser.add_subparsers(dest="command", required=True)

    keygen = sub.add_parser("keygen", help="create a keypair and print its public JWK")
    keygen.add_argument("--out", help="keypair file (default: the config's keypair path)")
    keygen.add_argument("--force", action="store_true", help="overwrite an existing file")

    token = sub.add_parser("token", help="obtain and cache an access token")
    token.add_argument("as_name", metavar="AS")

    combine = sub.add_parser("combine", help="bundle token files into one presentation")
    combine.add_argument("files", nargs="+")
    combine.add_argument("--out", help="write the presentation here as well")

    for verb in ("get", "put", "delete"):
        access = sub.add_parser(verb, help=f"{verb.upper()} a resource")
        access.add_argument("url")
        source = access.add_mutually_exclusive_group(required=True)
        source.add_argument("--as", dest="as_name", help="use the cached token for this AS")
        source.add_argument("--token", dest="token_file", help="file holding a token or presentation")
        access.add_argument("--auto-renew", action="store_true",
                            help="request a new token if the cached one expired")
        if verb == "put":
            access.add_argument("--data", required=True, help="file to upload")
        if verb == "get":
            access.add_argument("--out", help="write the body here instead of stdout")
    return parser


def _keygen(args: argparse.Namespace) -> int:
    out = args.out
    if out is None:
        out = ClientConfig.load(args.config).keypair
    keypair = jose.generate_keypair()
    try:
        jose.save_keypair(keypair, out, force=args.force)
    except FileExistsError:
        print(f"refusing to overwrite {out} (use --force)", file=sys.stderr)
        return EXIT_USAGE
    print(keypair.public.canonical())
    return EXIT_OK


def _access(client: Client, args: argparse.Namespace) -> int:
    if args.token_file:
        token = Path(args.token_file).read_text().strip()
    else:
        token = client.cached_token(args.as_name, auto_renew=args.auto_renew)
    body = Path(args.data).read_bytes() if getattr(args, "data", None) else None
    resp = client.access(args.command, args.url, token, body)
    if resp.status_code >= 400:
        reason = resp.headers.get("www-authenticate", "")
        print(f"{resp.status_code} {resp.text.strip()} {reason}".rstrip(), file=sys.stderr)
        return EXIT_DENIED
    if args.command == "get" and args.out:
        Path(args.out).write_bytes(resp.content)
    elif args.command == "get":
        sys.stdout.buffer.write(resp.content)
        sys.stdout.flush()
    else:
        print(resp.text)
    return EXIT_OK


def main(argv: Sequence[str] | None = None, http: httpx.Client | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        if args.command == "keygen":
            return _keygen(args)
        client = Client(ClientConfig.load(args.config), http=http)
        if args.command == "token":
            print(client.request_token(args.as_name))
            return EXIT_OK
        if args.command == "combine":
            tokens = [Path(f).read_text().strip() for f in args.files]
            vp = client.combine(tokens)
            if args.out:
                Path(args.out).write_text(vp)
            print(vp)
            return EXIT_OK
        return _access(client, args)
    except OAuthError as exc:
        print(exc.error if not exc.description else f"{exc.error}: {exc.description}", file=sys.stderr)
        return EXIT_DENIED
    except ClientError as exc:
        print(str(exc), file=sys.stderr)
        return exc.exit_code
    except CapvcError as exc:
        print(f"{exc.reason}: {exc}", file=sys.stderr)
        return EXIT_DENIED
    except OSError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE


def server_main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="capvc-server")
    parser.add_argument("role", choices=["as", "rs"])
    parser.add_argument("config", help="server config JSON")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8000)
    args = parser.parse_args(argv)

    import uvicorn

    from . import auth_server, resource_server, web

    try:
        if args.role == "as":
            app = web.auth_server_app(auth_server.from_config(args.config))
        else:
            app = web.resource_server_app(resource_server.from_config(args.config))
    except (OSError, json.JSONDecodeError, CapvcError) as exc:
        print(f"bad config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
