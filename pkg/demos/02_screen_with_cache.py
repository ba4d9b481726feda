"""Screen records with a stand-in model, record the responses, then replay them offline."""

import tempfile
from pathlib import Path

from llmscreen.engine import DecisionStore, run_screening
from llmscreen.gateway import BackendConfig, CacheMode, CompletionOutcome, ModelClient, ResponseCache, RetryPolicy, Status
from llmscreen.protocol import BiasLevel, load_prompt_file, render_prompt
from llmscreen.reference import subset_fixture, synthetic_protocols

records = subset_fixture()[:40]
protocols = synthetic_protocols(["Bellon", "Clezar"])
records = [r for r in records if r.review_id in protocols]
prompts = load_prompt_file()
spec = prompts[BiasLevel.HEAVY]

print(render_prompt(spec, protocols[records[0].review_id], records[0]))
print("-" * 60)


def fake_model(prompt):
    # refuses one prompt in seven; the engine records those as Include
    if len(prompt) % 7 == 0:
        return CompletionOutcome(Status.CONTENT_VIOLATION)
    return CompletionOutcome(Status.OK, "Include" if "study 1" in prompt else "Exclude")


cfg = BackendConfig("https://example.invalid/v1", "demo-model")
policy = RetryPolicy(jitter_fraction=0)
tmp = Path(tempfile.mkdtemp())

live = ModelClient(cfg, policy, cache=ResponseCache(tmp / "cache.jsonl"), mode=CacheMode.RECORD_REPLAY, send=fake_model)
summary = run_screening(records, protocols, spec, live, DecisionStore(tmp / "live.jsonl"))
print("live run:", summary, "network calls:", live.network_calls)

offline = ModelClient(cfg, policy, cache=ResponseCache(tmp / "cache.jsonl"), mode=CacheMode.REPLAY)
summary = run_screening(records, protocols, spec, offline, DecisionStore(tmp / "replay.jsonl"))
print("replay:  ", summary, "network calls:", offline.network_calls)
print("stores identical:", (tmp / "live.jsonl").read_bytes() == (tmp / "replay.jsonl").read_bytes())
