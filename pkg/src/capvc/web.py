"""ASGI front ends for the authorization and resource servers.

The handlers in :mod:`capvc.auth_server` and :mod:`capvc.resource_server` do
all the work; these apps only translate HTTP in and out.
"""

from __future__ import annotations

from urllib.parse import parse_qsl, urlsplit

from fastapi import FastAPI, Request
from fastapi.responses import Response as HttpResponse

from .auth_server import AuthorizationServer
from .resource_server import ResourceServer
from .response import Response


def _to_http(resp: Response) -> HttpResponse:
    return HttpResponse(resp.content, resp.status, resp.headers, media_type=resp.media_type)


async def _form(request: Request) -> dict[str, str]:
    body = (await request.body()).decode("utf-8", errors="replace")
    return dict(parse_qsl(body, keep_blank_values=True))


def _route(url: str) -> str:
    return urlsplit(url).path or "/"


def auth_server_app(server: AuthorizationServer) -> FastAPI:
    app = FastAPI(title=f"Authorization server {server.url}")

    @app.post(_route(server.token_endpoint))
    async def token(request: Request) -> HttpResponse:
        fields = await _form(request)
        if "dpop" not in fields and "dpop" in request.headers:
            fields["dpop"] = request.headers["dpop"]
        return _to_http(server.handle_token_request("POST", server.token_endpoint, fields))

    @app.post(_route(server.introspection_endpoint))
    async def introspect(request: Request) -> HttpResponse:
        return _to_http(server.handle_introspection(await _form(request)))

    @app.get(_route(server.revocation_list_url))
    async def revocation_list() -> HttpResponse:
        return _to_http(server.handle_revocation_list())

    return app


def resource_server_app(server: ResourceServer) -> FastAPI:
    app = FastAPI(title="Resource server")

    @app.api_route("/{path:path}", methods=["GET", "PUT", "POST", "DELETE"])
    async def resource(request: Request) -> HttpResponse:
        raw_path = request.scope.get("raw_path") or request.url.path.encode()
        target = raw_path.decode("latin-1")
        if request.url.query:
            target += "?" + request.url.query
        body = await request.body()
        resp = server.handle(request.method, target, dict(request.headers), body)
        return _to_http(resp)

    return app
