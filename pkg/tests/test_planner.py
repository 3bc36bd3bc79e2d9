import json
import threading
from dataclasses import replace
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from conftest import FIXTURES
from helpers import context_at
from recover_kit.data import data_path
from recover_kit.orchestrator import make_config, run
from recover_kit.planner import (
    BudgetExceededError,
    EndpointConfig,
    Pricing,
    TransportError,
    UnexpandableStrategyError,
    canonical,
    count_tokens,
    external_replan,
    ground,
    ground_exhaustive,
    load_replay,
    object_registry,
    parse_steps,
    replay_replan,
    template_replan,
)
from recover_kit.worldsim import ACTIONS, FailureInjection, WorldState, default_injection, get_task, load_all_tasks, parse_step

ACTS = [a for a in ACTIONS if a != "observation"]
GROUNDING = yaml.safe_load((FIXTURES / "grounding.yaml").read_text(encoding="utf-8"))


@pytest.mark.parametrize("case", GROUNDING["cases"], ids=lambda c: c["text"])
def test_grounding_fixtures(case):
    got = ground([case["text"]], ACTS, GROUNDING["objects"])
    assert got == ground_exhaustive([case["text"]], ACTS, GROUNDING["objects"])
    if case["expect"] is None:
        assert not got.steps and got.rejected[0][1] < 0.35
    else:
        assert got.steps == (parse_step(case["expect"]),)
        assert got.scores[0] == pytest.approx(case["score"], abs=1e-12)


@pytest.mark.parametrize("task", [t.id for t in load_all_tasks()])
def test_canonical_phrases_ground_exactly(task):
    t = get_task(task)
    objects = object_registry(t.world, [t.plan])
    texts = [canonical(s) for s in t.plan]
    got = ground(texts, ACTS, objects)
    assert got.steps == t.plan
    assert set(got.scores) == {1.0}
    assert got == ground_exhaustive(texts, ACTS, objects)


WORDS = st.sampled_from(
    "pick up put on open close turn off slice pour into crack fill clean navigate to the knife "
    "fridge mug counter top 1 2 tomato sink faucet egg plate floor slice soap bottle juggle".split()
)


@given(st.lists(st.lists(WORDS, min_size=1, max_size=6).map(" ".join), min_size=1, max_size=5))
def test_grounding_equals_exhaustive_scoring(texts):
    assert ground(texts, ACTS, GROUNDING["objects"]) == ground_exhaustive(texts, ACTS, GROUNDING["objects"])


def test_replay_fixture_lines_ground_like_the_oracle():
    for name in ("plan_T6_f1.txt", "plan_T4_f6.txt"):
        fx = load_replay(data_path(f"replay/{name}"))
        task = get_task(name.split("_")[1])
        objects = object_registry(task.world, [task.plan])
        got = ground(fx.steps, ACTS, objects)
        assert got.ok
        assert got == ground_exhaustive(fx.steps, ACTS, objects)


# ---------------------------------------------------------------- template planner


@pytest.fixture(scope="module")
def t8_context():
    return context_at(get_task("T8"), FailureInjection(2, 19))


def test_t8_drop_plan(t8_context):
    plan = template_replan(t8_context)
    assert plan[:2] == ["navigate to knife-1", "pick up knife-1"]
    assert plan[2:] == [canonical(parse_step(s)) for s in t8_context.remaining]


def test_template_is_pure(t8_context):
    assert template_replan(t8_context) == template_replan(t8_context)


def test_empty_remainder_gives_strategy_steps_only(t8_context):
    assert template_replan(replace(t8_context, remaining=())) == ["navigate to knife-1", "pick up knife-1"]


def test_break_without_spare_is_unexpandable():
    task = get_task("T2")
    ctx = context_at(task, default_injection(task, 4))
    assert ctx.strategy.id == "break_replace"
    broken = ctx.finding.binding_map["held_obj1"]
    cls = ctx.world.objects[broken].cls
    world: WorldState = ctx.world.clone()
    for oid in [o.id for o in world.objects.values() if o.cls == cls and o.id != broken]:
        del world.objects[oid]
    with pytest.raises(UnexpandableStrategyError):
        template_replan(replace(ctx, world=world))


def test_context_without_world_is_unexpandable(t8_context):
    with pytest.raises(UnexpandableStrategyError):
        template_replan(replace(t8_context, world=None))


# ---------------------------------------------------------------- tokens, replay, transport


def test_token_accounting():
    assert count_tokens("") == 0
    assert count_tokens("one two three") == 4  # ceil(3 * 1.3)
    text = "navigate to knife-1\npick up knife-1\n"
    assert Pricing().tokens(text) == count_tokens(text) == count_tokens(text)
    assert Pricing().cost(1000, 1000) == pytest.approx(0.09)


def test_replay_fixture():
    path = data_path("replay/plan_T6_f1.txt")
    fx = load_replay(path)
    assert (fx.prompt_tokens, fx.completion_tokens) == (1840, 96)
    assert len(fx.steps) == 15
    steps, call = replay_replan(path)
    assert steps == list(fx.steps)
    assert call.cost == pytest.approx(1840 * 0.03 / 1000 + 96 * 0.06 / 1000)


def test_budget_exceeded():
    with pytest.raises(BudgetExceededError, match="reached limit of 5"):
        replay_replan(data_path("replay/plan_T6_f1.txt"), spent=4.99)


@pytest.mark.parametrize(
    "text, steps",
    [
        ('["open fridge-1", " pick up egg-1 "]', ["open fridge-1", "pick up egg-1"]),
        ("1. open fridge-1\n2) pick up egg-1\n\n- close fridge-1\n# note", ["open fridge-1", "pick up egg-1", "close fridge-1"]),
        ('{"plan": 1}', ['{"plan": 1}']),
    ],
)
def test_parse_steps(text, steps):
    assert parse_steps(text) == steps


def test_unreachable_endpoint():
    with pytest.raises(TransportError):
        external_replan("hi", EndpointConfig())
    with pytest.raises(TransportError):
        external_replan("hi", EndpointConfig(base_url="http://127.0.0.1:9/", timeout=2))


def test_transport_error_is_a_run_level_failure():
    rec = run(make_config("T4", 6, planner="external", endpoint=EndpointConfig(base_url="http://127.0.0.1:9/", timeout=2)))
    assert rec.outcome == "NotRecovered"
    assert rec.error.startswith("TransportError")


class _Completion(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        self.server.seen.append((body, self.headers.get("Authorization")))
        reply = {"text": "1. navigate to knife-1\n2. pick up knife-1", "usage": {"prompt_tokens": 100, "completion_tokens": 10}}
        data = json.dumps(reply).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def completion_server():
    server = HTTPServer(("127.0.0.1", 0), _Completion)
    server.seen = []
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server
    server.shutdown()


def test_external_replan_round_trip(completion_server, monkeypatch):
    monkeypatch.setenv("RECOVER_API_TOKEN", "tok")
    url = f"http://127.0.0.1:{completion_server.server_address[1]}/"
    steps, call = external_replan("the prompt", EndpointConfig(base_url=url))
    assert steps == ["navigate to knife-1", "pick up knife-1"]
    assert (call.prompt_tokens, call.completion_tokens) == (100, 10)
    body, auth = completion_server.seen[0]
    assert body["prompt"] == "the prompt" and auth == "Bearer tok"
    with pytest.raises(BudgetExceededError):
        external_replan("the prompt", EndpointConfig(base_url=url), spent=5.0)
