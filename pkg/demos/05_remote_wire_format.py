"""
What goes over the wire
=======================

The remote backend speaks the common chat-completions protocol. Here an
in-process transport stands in for the server: it fails twice with 503 and
then answers, so the retry schedule and the exact request body can be
inspected without any network access.
"""

import json

import httpx

from psydiag.agents import SessionContext, build_prompt
from psydiag.backend import BackendConfig, ChatClient, complete
from psydiag import DisorderLabel, Role, doctor_profile, load_shipped_machines
from psydiag.knowledge import kg_from_machines
from psydiag.synth import synthetic_emr

statuses = iter([503, 503, 200])
bodies = []


def handler(request: httpx.Request) -> httpx.Response:
    bodies.append(request.content)
    status = next(statuses)
    if status != 200:
        return httpx.Response(status)
    reply = "I hear you. Could you tell me whether your sleep has changed lately? It matters a great deal."
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": reply}}]})


slept = []
cfg = BackendConfig(endpoint="http://example.invalid/v1", model="any-chat-model", backoff_initial_ms=250)
client = ChatClient(cfg, transport=httpx.MockTransport(handler), sleep=slept.append)

defs = load_shipped_machines()
kg = kg_from_machines(defs)
emr = synthetic_emr(["MDD", "AD"], seed=5, kg=kg)
ctx = SessionContext(emr=emr, kg=kg, profile=doctor_profile(4))
req = build_prompt(defs[DisorderLabel.MDD].nodes["A6"], Role.DOCTOR, ctx)

text = complete(cfg, req, client=client)
print(f"reply after {len(bodies)} attempts, backoff sleeps {slept}")
print(f"profile limit {req.max_chars} chars -> {text!r}")

payload = json.loads(bodies[-1])
print("\nrequest keys:", list(payload))
print("system prompt starts:", payload["messages"][0]["content"][:160].replace("\n", " "), "...")
print("all attempts sent identical bytes:", len(set(bodies)) == 1)
for rec in client.request_log:
    print(" ", rec)
