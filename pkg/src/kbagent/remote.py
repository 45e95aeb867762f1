"""Network-backed decision model with recordable, replayable traffic.

The wire format is minimal: POST a JSON body {"messages": [{"role", "content"},
...]} to the configured endpoint and read {"text": ...} back. The auth token
comes from an environment variable, never from config files. Every exchange
can be recorded to a cassette; replay mode answers from the cassette alone,
so episode tests run fully offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .agent import DecisionModel, EvalVerdict, MemoryEvent, Plan, VerdictStatus
from .errors import DecisionModelError
from .microworld.engine import ActionResult
from .retrieval import Document

logger = logging.getLogger(__name__)

TOKEN_ENV_VAR = "KBAGENT_API_TOKEN"


@dataclass
class RemoteConfig:
    endpoint: str
    timeout: float = 30.0
    max_retries: int = 2
    backoff_base: float = 0.5
    cassette_path: str | None = None
    mode: str = "record"  # "record" | "replay" | "live"


def _digest(messages: list[dict]) -> str:
    canonical = json.dumps(messages, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class Cassette:
    """Request-keyed store of recorded responses, persisted as JSON."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._entries: dict[str, list[str]] = {}
        self._cursor: dict[str, int] = {}
        if self.path.exists():
            self._entries = json.loads(self.path.read_text(encoding="utf-8"))

    def record(self, messages: list[dict], response_text: str) -> None:
        self._entries.setdefault(_digest(messages), []).append(response_text)
        self.path.write_text(
            json.dumps(self._entries, indent=1, sort_keys=True, ensure_ascii=False),
            encoding="utf-8",
        )

    def replay(self, messages: list[dict]) -> str:
        key = _digest(messages)
        responses = self._entries.get(key)
        if not responses:
            raise DecisionModelError(f"cassette has no response for request {key[:12]}")
        idx = self._cursor.get(key, 0)
        self._cursor[key] = min(idx + 1, len(responses) - 1)
        return responses[min(idx, len(responses) - 1)]


class ChatClient:
    """Retrying HTTP client for the role-tagged message protocol."""

    def __init__(self, cfg: RemoteConfig, session: requests.Session | None = None):
        self.cfg = cfg
        self.session = session or requests.Session()
        self.cassette = Cassette(cfg.cassette_path) if cfg.cassette_path else None
        if cfg.mode == "replay" and self.cassette is None:
            raise ValueError("replay mode requires a cassette path")

    def complete(self, messages: list[dict]) -> str:
        if self.cfg.mode == "replay":
            return self.cassette.replay(messages)
        text = self._post(messages)
        if self.cassette is not None and self.cfg.mode == "record":
            self.cassette.record(messages, text)
        return text

    def _post(self, messages: list[dict]) -> str:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(TOKEN_ENV_VAR)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        last_error: Exception | None = None
        for attempt in range(self.cfg.max_retries + 1):
            try:
                response = self.session.post(
                    self.cfg.endpoint,
                    json={"messages": messages},
                    headers=headers,
                    timeout=self.cfg.timeout,
                )
                response.raise_for_status()
                return response.json()["text"]
            except (requests.RequestException, KeyError, ValueError) as exc:
                last_error = exc
                if attempt < self.cfg.max_retries:
                    delay = self.cfg.backoff_base * (2**attempt)
                    logger.warning("request failed (%s); retrying in %.1fs", exc, delay)
                    time.sleep(delay)
        raise DecisionModelError(f"remote endpoint failed after retries: {last_error}")


# --- response grammars ---
#
# PLAN:        one "- <step>" line per plan step
# ACTION: <a>  a single action line
# VERDICT: <on_track|step_done|deviated|task_done>
# RATIONALE: <free text>  (optional)


def parse_plan_response(raw: str) -> Plan:
    steps = [line[2:].strip() for line in raw.splitlines() if line.strip().startswith("- ")]
    if not steps:
        raise DecisionModelError(f"plan response has no steps: {raw!r}")
    return Plan(steps=steps)


def parse_action_response(raw: str) -> str:
    for line in raw.splitlines():
        line = line.strip()
        if line.upper().startswith("ACTION:"):
            action = line[len("ACTION:"):].strip()
            if action:
                return action
    raise DecisionModelError(f"no ACTION line in response: {raw!r}")


def parse_verdict_response(raw: str) -> EvalVerdict:
    status: VerdictStatus | None = None
    rationale = ""
    for line in raw.splitlines():
        line = line.strip()
        if line.upper().startswith("VERDICT:"):
            word = line[len("VERDICT:"):].strip().lower()
            try:
                status = VerdictStatus(word)
            except ValueError:
                raise DecisionModelError(f"unknown verdict {word!r}") from None
        elif line.upper().startswith("RATIONALE:"):
            rationale = line[len("RATIONALE:"):].strip()
    if status is None:
        raise DecisionModelError(f"no VERDICT line in response: {raw!r}")
    return EvalVerdict(status, rationale)


SYSTEM_PROMPT = (
    "You control an agent in a small text world. Answer in the exact line "
    "format the user asks for, with no extra prose."
)


@dataclass
class RemoteChat(DecisionModel):
    """Decision model that defers planning, acting, and evaluation to a chat
    endpoint speaking the line grammars above."""

    client: ChatClient
    history_limit: int = 20
    _task_text: str = field(default="", init=False)

    def _memory_lines(self, memory: list[MemoryEvent]) -> str:
        lines = []
        for event in memory[-self.history_limit :]:
            lines.append(f"{event.kind}: {json.dumps(event.payload, ensure_ascii=False)}")
        return "\n".join(lines) if lines else "(empty)"

    def _doc_lines(self, docs: list[Document]) -> str:
        if not docs:
            return "(none)"
        return "\n".join(f"[{d.doc_id}] {d.text}" for d in docs)

    def _chat(self, user_text: str) -> str:
        messages = [
            {"role": "system", "content": SYSTEM_PROMPT},
            {"role": "user", "content": user_text},
        ]
        return self.client.complete(messages)

    def propose_plan(self, task_text, memory, docs) -> Plan:
        self._task_text = task_text
        raw = self._chat(
            f"Task: {task_text}\nRecent events:\n{self._memory_lines(memory)}\n"
            f"Retrieved knowledge:\n{self._doc_lines(docs)}\n"
            "Write the plan as 'PLAN:' followed by one '- <step>' line per step."
        )
        return parse_plan_response(raw)

    def propose_action(self, plan_step, memory, docs) -> str:
        raw = self._chat(
            f"Task: {self._task_text}\nCurrent plan step: {plan_step}\n"
            f"Recent events:\n{self._memory_lines(memory)}\n"
            f"Retrieved knowledge:\n{self._doc_lines(docs)}\n"
            "Reply with a single line 'ACTION: <action>'."
        )
        return parse_action_response(raw)

    def evaluate(self, memory, last_result: ActionResult) -> EvalVerdict:
        raw = self._chat(
            f"Task: {self._task_text}\nLast observation: {last_result.observation}\n"
            f"Environment reports completion: {last_result.terminal}\n"
            f"Recent events:\n{self._memory_lines(memory)}\n"
            "Reply with 'VERDICT: <on_track|step_done|deviated|task_done>' and an "
            "optional 'RATIONALE: <why>' line."
        )
        verdict = parse_verdict_response(raw)
        if verdict.status is VerdictStatus.TASK_DONE and not last_result.terminal:
            # the environment is the only authority on completion
            return EvalVerdict(VerdictStatus.ON_TRACK, "completion claim rejected")
        return verdict
