"""HTTP client for an LLM planning endpoint.

The endpoint receives the storyline, an optional rendered prompt template,
and the response schema, and must answer with a JSON plan document.
"""

from __future__ import annotations

import os
from pathlib import Path

import httpx

URL_ENV = "ISOSTORY_LLM_URL"
TOKEN_ENV = "ISOSTORY_LLM_TOKEN"


class LLMEndpointError(RuntimeError):
    pass


class HttpPlannerClient:
    def __init__(self, url: str, token: str | None = None, template: str | None = None,
                 timeout: float = 60.0, transport: httpx.BaseTransport | None = None):
        self.url = url
        self.token = token
        self.template = template
        self.timeout = timeout
        self._transport = transport

    @classmethod
    def from_env(cls, template_path=None, **kwargs) -> "HttpPlannerClient":
        url = os.environ.get(URL_ENV)
        if not url:
            raise LLMEndpointError(f"{URL_ENV} is not set")
        template = Path(template_path).read_text() if template_path else None
        return cls(url, os.environ.get(TOKEN_ENV), template, **kwargs)

    def request(self, storyline: str, schema: dict) -> dict:
        body = {"storyline": storyline, "response_schema": schema}
        if self.template is not None:
            body["prompt"] = self.template.replace("{storyline}", storyline)
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        try:
            with httpx.Client(timeout=self.timeout, transport=self._transport) as client:
                resp = client.post(self.url, json=body, headers=headers)
                resp.raise_for_status()
                return resp.json()
        except httpx.TimeoutException as exc:
            raise LLMEndpointError(f"planner endpoint timed out: {exc}") from exc
        except httpx.HTTPStatusError as exc:
            raise LLMEndpointError(f"planner endpoint returned {exc.response.status_code}") from exc
        except httpx.HTTPError as exc:
            raise LLMEndpointError(f"planner endpoint unreachable: {exc}") from exc
        except ValueError as exc:
            raise LLMEndpointError("planner endpoint returned invalid JSON") from exc
