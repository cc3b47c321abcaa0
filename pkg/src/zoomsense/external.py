"""Client for an MLLM sensing policy behind a chat-completion HTTP endpoint.

Request body (POST ``{base_url}/chat/completions``)::

    {"model": ..., "temperature": ..., "max_tokens": ...,
     "messages": [{"role": "user", "content": "<rendered prompt>"}]}

The reply text is read from ``choices[0].message.content``. The model sees
the global view, so its boxes are read in that view's pixel frame and mapped
back to the full frame. Any transport or protocol failure yields an empty
output whose ``raw_text`` is whatever text was received (possibly empty), and
the reward code treats it as a format failure.
"""
from __future__ import annotations

import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass

from .codec import DETECTION_COUNT, SEGMENTATION_COUNT, check_response, load_template, render_prompt
from .geometry import remap_to_full
from .policy import PolicyOutput

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = ""
    model: str = "sensing-model"
    temperature: float = 0.0
    max_tokens: int = 512
    timeout_s: float = 30.0
    retries: int = 2
    auth_env: str = "ZOOMSENSE_API_KEY"
    max_in_flight: int = 4
    object_name: str = "object"


class ExternalModelPolicy:
    """Sensing policy backed by a remote model; ``log_prob`` is always 0."""

    def __init__(self, cfg: EndpointConfig, task: str = "detection"):
        if not cfg.base_url:
            raise ValueError("external policy needs an endpoint URL")
        self.cfg = cfg
        self.task = task
        self.token = os.environ.get(cfg.auth_env, "")
        self.prompt = render_prompt(load_template(task), cfg.object_name)
        self._slots = threading.BoundedSemaphore(max(1, cfg.max_in_flight))

    def _request(self, prompt: str) -> str:
        body = json.dumps(
            {
                "model": self.cfg.model,
                "temperature": self.cfg.temperature,
                "max_tokens": self.cfg.max_tokens,
                "messages": [{"role": "user", "content": prompt}],
            }
        ).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        url = self.cfg.base_url.rstrip("/") + "/chat/completions"
        req = urllib.request.Request(url, data=body, headers=headers, method="POST")
        with self._slots, urllib.request.urlopen(req, timeout=self.cfg.timeout_s) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        return payload["choices"][0]["message"]["content"]

    def complete(self, prompt: str) -> tuple[str, str | None]:
        """Reply text and an error description (``None`` on success)."""
        err = None
        for attempt in range(self.cfg.retries + 1):
            try:
                return self._request(prompt), None
            except urllib.error.HTTPError as exc:
                err = f"HTTP {exc.code}"
                if exc.code < 500:
                    break
            except (urllib.error.URLError, TimeoutError, OSError) as exc:
                err = f"transport: {exc}"
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                err = f"bad reply body: {exc!r}"
                break
            if attempt < self.cfg.retries:
                time.sleep(min(0.1 * 2**attempt, 1.0))
        log.warning("external policy request failed: %s", err)
        return "", err

    def propose(self, ctx) -> PolicyOutput:
        t = ctx.observation.transform
        frame = (t.target_w, t.target_h)
        text, err = self.complete(self.prompt)
        counts = SEGMENTATION_COUNT if self.task == "segmentation" else DETECTION_COUNT
        outcome = check_response(text, frame[0], frame[1], *counts)
        if err is not None or not outcome.ok:
            return PolicyOutput((), 0.0, raw_text=text, text_frame=frame, error=err or str(outcome.error))
        boxes = tuple(remap_to_full(t, b) for b in outcome.boxes)
        return PolicyOutput(boxes, 0.0, raw_text=text, text_frame=frame)
