import threading
import time

import pytest

from llmscreen.corpus import GroundTruth
from llmscreen.engine import (
    DecisionStore,
    DuplicateDecision,
    DuplicateTrial,
    EngineError,
    ScreeningDecision,
    ScreeningSource,
    StoreError,
    import_human_decisions,
    run_repeat_trial,
    run_screening,
)
from llmscreen.evaluation import cohen_kappa
from llmscreen.gateway import (
    BackendConfig,
    CacheMiss,
    CacheMode,
    CompletionOutcome,
    ConfigError,
    ModelClient,
    ResponseCache,
    RetryPolicy,
    Status,
)
from llmscreen.protocol import BiasLevel, Verdict, load_prompt_file
from llmscreen.reference import REVIEWS, subset_fixture, synthetic_protocols

CFG = BackendConfig("https://llm.test/v1", "stub-model", credentials_env_var="TEST_LLM_KEY")
POLICY = RetryPolicy(jitter_fraction=0)
PROMPTS = load_prompt_file()
SPEC = PROMPTS[BiasLevel.HEAVY]
PROTOCOLS = synthetic_protocols(REVIEWS)


def keyword_model(prompt):
    """Includes records whose title ends in an even number; one record in
    50 gets a refusal so the fallback path is exercised."""
    title = prompt.split("Title: ")[1].split("\n")[0]
    n = int(title.rsplit(" ", 1)[1])
    if n % 50 == 7:
        return CompletionOutcome(Status.OK, "I cannot help with that")
    return CompletionOutcome(Status.OK, "Include" if n % 2 == 0 else "Exclude")


class Counting:
    def __init__(self, fn=keyword_model, fail_after=None):
        self.fn = fn
        self.calls = 0
        self.seen = set()
        self.fail_after = fail_after
        self.lock = threading.Lock()

    def __call__(self, prompt):
        with self.lock:
            self.calls += 1
            self.seen.add(prompt)
            # fail_after counts distinct records; refusals are re-asked once
            if self.fail_after is not None and len(self.seen) > self.fail_after:
                raise KeyboardInterrupt
        return self.fn(prompt)


def client(send, **kw):
    return ModelClient(CFG, POLICY, send=send, sleep=lambda s: None, **kw)


@pytest.fixture(scope="module")
def records():
    return subset_fixture()


def test_fresh_run_writes_every_record(records, tmp_path):
    store = DecisionStore(tmp_path / "store.jsonl")
    summary = run_screening(records, PROTOCOLS, SPEC, client(Counting()), store)
    assert summary.n_records == 800
    assert summary.written == 800
    assert len(store) == 800
    assert summary.include + summary.exclude == 800
    assert summary.fallback > 0
    source = store.sources()[0]
    assert source == ScreeningSource.model("stub-model", BiasLevel.HEAVY, 1)
    assert all(d.verdict is Verdict.INCLUDE for d in store if d.fallback)


def test_resume_after_interruption(records, tmp_path):
    path = tmp_path / "store.jsonl"
    with pytest.raises(KeyboardInterrupt):
        run_screening(records, PROTOCOLS, SPEC, client(Counting(fail_after=500)), DecisionStore(path))
    assert len(DecisionStore(path)) == 500
    second = Counting()
    summary = run_screening(records, PROTOCOLS, SPEC, client(second), DecisionStore(path))
    assert len(second.seen) == 300
    assert summary.written == 300
    assert len(DecisionStore(path)) == 800


def test_idempotent_rerun(records, tmp_path):
    store = DecisionStore(tmp_path / "s.jsonl")
    first = run_screening(records, PROTOCOLS, SPEC, client(Counting()), store)
    again_model = Counting()
    second = run_screening(records, PROTOCOLS, SPEC, client(again_model), store)
    assert second == first
    assert second.written == 0 and again_model.calls == 0


def test_replay_determinism(records, tmp_path):
    cache_path = tmp_path / "cache.jsonl"
    live = client(Counting(), cache=ResponseCache(cache_path), mode=CacheMode.RECORD_REPLAY)
    run_screening(records, PROTOCOLS, SPEC, live, DecisionStore(tmp_path / "recorded.jsonl"))

    outputs = []
    for i in range(2):
        replay = ModelClient(CFG, POLICY, cache=ResponseCache(cache_path), mode=CacheMode.REPLAY)
        store_path = tmp_path / f"replay{i}.jsonl"
        run_screening(records, PROTOCOLS, SPEC, replay, DecisionStore(store_path))
        assert replay.network_calls == 0
        outputs.append(store_path.read_bytes())
    assert outputs[0] == outputs[1]


def test_order_independent_of_concurrency(records, tmp_path):
    def slow(prompt):
        time.sleep(0.0005 * (hash(prompt) % 3))
        return keyword_model(prompt)

    serial = DecisionStore()
    run_screening(records, PROTOCOLS, SPEC, client(Counting(slow)), serial)
    cfg = BackendConfig("https://llm.test/v1", "stub-model", concurrency=8)
    parallel = DecisionStore()
    run_screening(records, PROTOCOLS, SPEC, ModelClient(cfg, POLICY, send=Counting(slow)), parallel)
    strip = lambda s: sorted((d.record_id, d.verdict, d.fallback) for d in s)
    assert strip(serial) == strip(parallel)


def test_config_error_aborts_before_any_decision(records, tmp_path, monkeypatch):
    monkeypatch.delenv("TEST_LLM_KEY", raising=False)
    with pytest.raises(ConfigError):
        ModelClient(CFG, POLICY)


def test_missing_protocol(records):
    with pytest.raises(EngineError, match="no protocol"):
        run_screening(records[:3], {}, SPEC, client(Counting()), DecisionStore())


# store --------------------------------------------------------------------


def test_store_reload_identical(records, tmp_path):
    path = tmp_path / "s.jsonl"
    store = DecisionStore(path)
    run_screening(records[:50], PROTOCOLS, SPEC, client(Counting()), store)
    assert list(DecisionStore(path)) == list(store)


def test_store_duplicates_forbidden(tmp_path):
    store = DecisionStore(tmp_path / "s.jsonl")
    src = ScreeningSource.human("Alpha")
    store.append(ScreeningDecision("r1", src, Verdict.INCLUDE))
    with pytest.raises(DuplicateDecision):
        store.append(ScreeningDecision("r1", src, Verdict.EXCLUDE))
    with open(tmp_path / "s.jsonl", "a") as fh:
        fh.write(open(tmp_path / "s.jsonl").read().splitlines()[1] + "\n")
    with pytest.raises(StoreError, match="duplicate"):
        DecisionStore(tmp_path / "s.jsonl")


def test_store_rejects_non_binary():
    with pytest.raises(ValueError):
        ScreeningDecision("r", ScreeningSource.human("A"), Verdict.UNINTERPRETABLE)


def test_source_keys_round_trip():
    for s in [
        ScreeningSource.human("Bravo"),
        ScreeningSource.model("gpt-4o", BiasLevel.EXTREME, 2),
        ScreeningSource.model("llama3:70b", BiasLevel.TITLE_ONLY, 1),
    ]:
        assert ScreeningSource.parse(s.key) == s
    with pytest.raises(ValueError):
        ScreeningSource.model("m", BiasLevel.NONE, 0)


# human import -------------------------------------------------------------


def test_import_800_rows(records):
    store = DecisionStore()
    rows = ["record_id,verdict"] + [
        f"{r.record_id},{'include' if r.ground_truth is GroundTruth.INCLUDED else 'exclude'}" for r in records
    ]
    rep = import_human_decisions("\n".join(rows), "Alpha", store, [r.record_id for r in records])
    assert rep.imported == 800 and rep.errors == []
    assert store.sources() == [ScreeningSource.human("Alpha")]


def test_import_row_errors():
    store = DecisionStore()
    text = "record_id,verdict\na,INCLUDE\nb,maybe\nzzz,exclude\nc, Exclude \na,exclude\n"
    rep = import_human_decisions(text, "Bravo", store, ["a", "b", "c"])
    assert rep.imported == 2
    assert [(e.row, e.error) for e in rep.errors] == [
        (3, "MalformedVerdict"),
        (4, "UnknownRecord"),
        (6, "DuplicateDecision"),
    ]
    assert store.decisions_for(ScreeningSource.human("Bravo")) == {"a": Verdict.INCLUDE, "c": Verdict.EXCLUDE}


def test_import_needs_header():
    with pytest.raises(EngineError):
        import_human_decisions("a,include\n", "X", DecisionStore(), ["a"])


# repeat trials ------------------------------------------------------------


def test_repeat_trial_shared_cache_gives_kappa_one(records, tmp_path):
    cache = ResponseCache(tmp_path / "c.jsonl")
    store = DecisionStore()
    c = client(Counting(), cache=cache, mode=CacheMode.RECORD_REPLAY)
    run_screening(records, PROTOCOLS, SPEC, c, store)
    summary = run_repeat_trial(records, PROTOCOLS, SPEC, c, store, trial_index=2)
    assert summary.written == 800
    t1 = store.decisions_for(ScreeningSource.model("stub-model", BiasLevel.HEAVY, 1))
    t2 = store.decisions_for(ScreeningSource.model("stub-model", BiasLevel.HEAVY, 2))
    assert len(t2) == 800
    assert cohen_kappa(t1, t2).kappa == 1.0


def test_duplicate_trial(records):
    store = DecisionStore()
    c = client(Counting())
    run_repeat_trial(records[:10], PROTOCOLS, SPEC, c, store, trial_index=2)
    with pytest.raises(DuplicateTrial):
        run_repeat_trial(records[:10], PROTOCOLS, SPEC, c, store, trial_index=2)
    run_repeat_trial(records[:20], PROTOCOLS, SPEC, c, store, trial_index=2, resume=True)
    assert len(store) == 20


def test_cache_miss_keeps_partial_progress(records, tmp_path):
    cache_path = tmp_path / "c.jsonl"
    live = client(Counting(), cache=ResponseCache(cache_path), mode=CacheMode.RECORD_REPLAY)
    run_screening(records[:100], PROTOCOLS, SPEC, live, DecisionStore())
    store_path = tmp_path / "s.jsonl"
    replay = ModelClient(CFG, POLICY, cache=ResponseCache(cache_path), mode=CacheMode.REPLAY)
    with pytest.raises(CacheMiss):
        run_screening(records, PROTOCOLS, SPEC, replay, DecisionStore(store_path))
    assert len(DecisionStore(store_path)) == 100
