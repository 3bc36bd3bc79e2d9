import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import DROPPING_RULE_LISTING, bare_kb, failure_window, knife_drop_kb, random_event_log, replay
from recover_kit.orchestrator import make_config, run
from recover_kit.reasoner import BRUTEFORCE_LIMIT, KBTooLargeError, Verdict, evaluate, evaluate_bruteforce
from recover_kit.ruledsl import parse_rule
from recover_kit.worldsim import FailureInjection, feasible, load_all_tasks


@pytest.fixture(scope="module")
def listing_rule():
    return parse_rule(DROPPING_RULE_LISTING, "dropping_object", implicit_vars=True)


def test_knife_drop_kb_fires(schema, listing_rule):
    kb = knife_drop_kb(schema)
    verdict = evaluate(kb, [listing_rule], "e3")
    (finding,) = verdict.findings
    assert (finding.failure_class, finding.event) == ("DroppingObjFailure", "e3")
    assert finding.binding_map["held_obj1"] == "knife-1"
    assert evaluate_bruteforce(kb, [listing_rule], "e3") == verdict


def test_evaluation_is_scoped_to_the_event(schema, listing_rule):
    assert evaluate(knife_drop_kb(schema), [listing_rule], "e1").success


def test_holding_something_after_is_success(schema, listing_rule):
    kb = bare_kb(schema)
    kb.assert_all(t for t in knife_drop_kb(schema).triples() if t != ("t2", "hasSubject", "nothing-0"))
    kb.assert_triple("t2", "hasSubject", "knife-1")
    assert evaluate(kb, [listing_rule], "e3").success


def test_slice_nominal_trace_is_clean(slice_task, listing_rule, rules):
    log, _ = replay(slice_task)
    for ev in log.actions():
        assert evaluate(log.kb, [listing_rule], ev.id).success
        assert evaluate(log.kb, rules, ev.id).success


def test_slice_dropped_knife(slice_task, listing_rule):
    log, _ = replay(slice_task, {1: FailureInjection(2, 1)})
    verdict = evaluate(log.kb, [listing_rule], "event_3")
    assert [f.failure_class for f in verdict.findings] == ["DroppingObjFailure"]


def test_empty_inputs(schema, rules):
    assert evaluate(knife_drop_kb(schema), [], "e3") == Verdict()
    assert evaluate(bare_kb(schema), rules, "e3").success
    assert evaluate_bruteforce(bare_kb(schema), rules, "e3").success


def test_bruteforce_size_limit(schema, rules):
    kb = bare_kb(schema)
    for i in range(BRUTEFORCE_LIMIT + 1):
        kb.assert_triple(f"x{i}", "near", "y")
    with pytest.raises(KBTooLargeError):
        evaluate_bruteforce(kb, rules, "e")


def test_primary_prefers_the_deepest_class():
    # a break also satisfies the plain dropping rule; the deeper class wins
    rec = run(make_config("T6", 4))
    assert rec.findings[0].startswith("DroppingAndBreakingObjFailure")


def test_verdicts_are_deterministic(schema, rules):
    log, ev = random_event_log(11, schema)
    outs = {evaluate(log.kb, rules, ev).format() for _ in range(3)}
    assert len(outs) == 1


@settings(max_examples=150, deadline=None)
@given(st.integers(min_value=0, max_value=10**9))
def test_oracle_equivalence_random_logs(schema, rules, seed):
    log, ev = random_event_log(seed, schema)
    assert len(log.kb) <= BRUTEFORCE_LIMIT
    assert evaluate(log.kb, rules, ev) == evaluate_bruteforce(log.kb, rules, ev)


def test_oracle_equivalence_on_injected_windows(schema, rules):
    seen = set()
    for task in load_all_tasks():
        for f in (1, 2, 4, 6, 8, 9, 12):
            if not feasible(task, f):
                continue
            rec = run(make_config(task.id, f))
            event = rec.findings[0].split()[1]
            log, ev = failure_window(rec.log, event, schema)
            got = evaluate(log.kb, rules, ev)
            assert got == evaluate_bruteforce(log.kb, rules, ev)
            seen |= {x.failure_class for x in got.findings}
    assert {"DroppingObjFailure", "SafetyFailure", "DietaryConstraintsViolationFailure"} <= seen
