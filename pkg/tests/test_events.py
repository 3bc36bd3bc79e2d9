import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import replay
from recover_kit.events import (
    ActionEvent,
    AlternationError,
    EventLog,
    EventLogError,
    ObservationEvent,
    UnknownActionError,
)
from recover_kit.kb import TYPE, Literal, Var
from recover_kit.orchestrator import make_config, run
from recover_kit.worldsim import FailureInjection


@pytest.fixture
def log(fresh_kb):
    return EventLog(fresh_kb)


@pytest.fixture(scope="module")
def slice_log(slice_task):
    return replay(slice_task)[0]


def _reified(kb, obs_id):
    out = set()
    for t in kb.objects(obs_id, "hasTriple"):
        (s,) = kb.objects(t, "hasSubject")
        (p,) = kb.objects(t, "hasPredicate")
        (o,) = kb.objects(t, "hasObject")
        out.add((s, p, o))
    return out


def test_first_event_is_an_observation(log):
    eid = log.record_observation([])
    assert eid == "event_0"
    assert ("event_0", "hasAction", "observation") in log.kb
    assert log.kb.is_instance("event_0", "ObservationEvent")


def test_consecutive_observations_rejected(log):
    log.record_observation([])
    with pytest.raises(AlternationError):
        log.record_observation([])


def test_action_on_empty_log_rejected(log):
    with pytest.raises(AlternationError):
        log.record_action("pick_up", target="knife-1")


def test_unknown_action(log):
    log.record_observation([])
    with pytest.raises(UnknownActionError):
        log.record_action("juggle", target="plate-1")
    with pytest.raises(UnknownActionError):
        log.record_action("observation")


def test_step_index_must_increase(log):
    log.record_observation([])
    log.record_action("navigate_to", target="fridge-1", step_index=3)
    log.record_observation([])
    with pytest.raises(EventLogError):
        log.record_action("open", target="fridge-1", step_index=3)


def test_slice_event_2_scene(slice_log):
    triples = _reified(slice_log.kb, "event_2")
    assert len(triples) == 14
    assert {
        ("knife-1", "inside", "robot-gripper"),
        ("tomato-1", "near", "soap-bottle-1"),
        ("dish-sponge-1", "on-top-of", "counter_top-2"),
    } <= triples


def test_slice_query_gripper_contents(slice_log):
    kb = slice_log.kb
    held = set()
    for t in kb.objects("event_2", "hasTriple"):
        if ("robot-gripper" in kb.objects(t, "hasObject")
                and "inside" in kb.objects(t, "hasPredicate")):
            held |= kb.objects(t, "hasSubject")
    assert held == {"knife-1"}


def test_slice_observation_actions(slice_log):
    obs = [e.id for e in slice_log.observations()]
    assert obs == ["event_0", "event_2", "event_4"]
    for eid in obs:
        assert slice_log.kb.objects(eid, "hasAction") == {"observation"}


def test_slice_sounds(slice_log):
    kb = slice_log.kb
    assert kb.objects("event_1", "has_sound") == set()
    assert kb.objects("event_3", "has_sound") == {"sound_3"}
    assert kb.objects("sound_3", TYPE) == {"SliceVeggySound"}
    assert kb.is_instance("sound_3", "Sound")


def test_action_links(slice_log):
    kb = slice_log.kb
    assert kb.objects("event_3", "hasPreconditions") == {"event_2"}
    assert kb.objects("event_3", "hasPostconditions") == {"event_4"}
    assert kb.objects("event_3", "hasTime") == {Literal("3")}
    assert kb.objects("event_3", "hasSource") == {"knife-1"}
    assert kb.objects("event_3", "hasTarget") == {"tomato-1"}
    assert slice_log.pre("event_3") == "event_2"
    assert slice_log.post("event_3") == "event_4"
    with pytest.raises(EventLogError):
        slice_log.pre("event_2")


def test_states_are_reified(log):
    log.record_observation([("mug-1", "on-top-of", "counter_top-1")], [("mug-1", "Dirty")],
                           {"mug-1": "Mug", "counter_top-1": "CounterTop"})
    (st_,) = log.kb.objects("event_0", "hasState")
    assert log.kb.is_instance(st_, "Dirty")
    assert log.kb.objects(st_, "hasSubject") == {"mug-1"}
    assert log.kb.query((Var("x", cls="Dishware"), TYPE, "Mug")) == [{"x": "mug-1"}]


def test_audit_clean_and_broken(slice_log, fresh_kb):
    assert slice_log.audit() == []
    bad = EventLog(fresh_kb)
    bad.record_observation([])
    bad.record_action("open", target="fridge-1")
    assert bad.audit() == ["log does not end with an observation"]
    bad.events.append(ActionEvent("event_2", 2, "close", 1, None, "fridge-1", None))
    assert any("expected observation" in p for p in bad.audit())


def test_jsonl_replay_reproduces_kb(schema):
    rec = run(make_config("T10", 9))
    kb = schema.copy_schema()
    log = EventLog.from_jsonl(rec.log, kb)
    assert log.to_jsonl() == rec.log
    assert log.audit() == []
    assert kb.instances("Vegan")


def test_pre_post_are_nearest_observations(slice_task):
    log, _ = replay(slice_task, {1: FailureInjection(2, 1)})
    for ev in log.actions():
        earlier = [o for o in log.observations() if o.time < ev.time]
        later = [o for o in log.observations() if o.time > ev.time]
        assert log.pre(ev.id) == max(earlier, key=lambda o: o.time).id
        assert log.post(ev.id) == min(later, key=lambda o: o.time).id


OPS = st.lists(st.sampled_from(["obs", "act"]), max_size=30)


@settings(max_examples=100, deadline=None)
@given(OPS)
def test_alternation_holds_after_every_mutation(schema, ops):
    log = EventLog(schema.copy_schema())
    for k, op in enumerate(ops):
        try:
            if op == "obs":
                log.record_observation([(f"o{k}", "near", "robot")], [], {f"o{k}": "Apple"})
            else:
                log.record_action("navigate_to", target="counter_top-1")
        except AlternationError:
            continue
        problems = log.audit()
        if isinstance(log.last, ObservationEvent):
            assert problems == []
        else:
            assert problems == ["log does not end with an observation"]
