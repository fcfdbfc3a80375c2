from __future__ import annotations

import copy
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcac.cli import default_policy_file
from fcac.errors import PolicyError
from fcac.policy import (
    CapabilityTuple,
    ExecutionTuple,
    check_prohibitions,
    compile_tuples,
    covers,
    load_policy,
    parse_policy,
)

from .conftest import AUD
from .oracles import oracle_covers

RAW = json.loads(default_policy_file().read_text())
PROFILES = sorted(RAW["cap_profiles"])


def test_shipped_policy_loads(policy):
    assert policy.meta.policy_id == "fcac-mnist-poc"
    assert policy.caveats.audience == AUD
    assert len(policy.ops) == 7


def test_trainer_and_data_scientist_compile(policy):
    tuples = compile_tuples(policy, ["capset:trainer_A", "capset:data_scientist"])
    assert [(t.resource, t.action) for t in tuples] == [("PET-CT", "train"), ("TUMOR_MEASUREMENTS", "read")]
    assert dict(tuples[0].scope) == {"cohort": ("A",), "purpose": ("model_training",)}
    assert dict(tuples[1].scope) == {"agg": ("aggregated",), "contact": (False,), "pii": (False,)}
    assert all(t.audience == AUD for t in tuples)


def test_unknown_profile(policy):
    with pytest.raises(PolicyError) as exc:
        compile_tuples(policy, ["capset:nope"])
    assert exc.value.code == "unknown_profile"


def test_tuple_dict_round_trip(policy):
    for t in compile_tuples(policy, PROFILES):
        assert CapabilityTuple.from_dict(t.to_dict()) == t


@pytest.mark.parametrize(
    "mutate,code",
    [
        (lambda d: d.pop("policy_version"), "schema_error"),
        (lambda d: d.__setitem__("policy_version", "one"), "schema_error"),
        (lambda d: d["cap_profiles"]["capset:trainer_A"].append("ghost_op"), "dangling_ref"),
        (lambda d: d["cap_profiles_default"].__setitem__("x", ["capset:ghost"]), "dangling_ref"),
        (lambda d: d["ops"][0]["scope"].__setitem__("colour", "red"), "unknown_qualifier"),
        (lambda d: d.__setitem__("extra", 1), "schema_error"),
        (lambda d: d["ops"].append(copy.deepcopy(d["ops"][0])), "schema_error"),
    ],
)
def test_policy_rejections(mutate, code):
    raw = copy.deepcopy(RAW)
    mutate(raw)
    with pytest.raises(PolicyError) as exc:
        parse_policy(raw)
    assert exc.value.code == code


def test_floats_and_duplicate_keys_rejected():
    with pytest.raises(PolicyError):
        load_policy(b'{"policy_version": "1.1", "policy_version": "1.2"}')
    text = default_policy_file().read_text().replace('"policy_version": "1.1"', '"policy_version": 1.1', 1)
    with pytest.raises(PolicyError):
        load_policy(text)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(PROFILES), min_size=1, max_size=6))
def test_compile_is_order_and_duplicate_invariant(profiles):
    policy = load_policy(default_policy_file().read_bytes())
    a = compile_tuples(policy, profiles)
    b = compile_tuples(policy, list(reversed(profiles)) + profiles)
    assert [t.canonical_bytes() for t in a] == [t.canonical_bytes() for t in b]
    assert len({t.canonical_bytes() for t in a}) == len(a)


scalars = st.one_of(st.booleans(), st.sampled_from(["A", "B", "aggregated", "model_training", "EVEN_ONLY"]))
quals = st.dictionaries(st.sampled_from(["cohort", "purpose", "agg", "pii", "contact"]), scalars, max_size=5)


@settings(max_examples=300, deadline=None)
@given(st.sampled_from(PROFILES), quals, st.sampled_from(["PET-CT", "TUMOR_MEASUREMENTS", "MODEL_PARAMS"]),
       st.sampled_from(["train", "read", "predict", "export"]))
def test_covers_matches_oracle(profile, q, resource, action):
    policy = load_policy(default_policy_file().read_bytes())
    req = ExecutionTuple(resource, action, q, AUD)
    for t in compile_tuples(policy, [profile]):
        assert covers(t, req) == oracle_covers(t.to_dict(), req.to_dict())


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(PROFILES), quals)
def test_extra_qualifiers_never_block(profile, extra):
    policy = load_policy(default_policy_file().read_bytes())
    for t in compile_tuples(policy, [profile]):
        exact = {k: v[0] for k, v in t.scope.items()}
        req = ExecutionTuple(t.resource, t.action, {**extra, **exact}, AUD)
        assert covers(t, req)


def test_bool_and_string_never_equated(policy):
    (t,) = compile_tuples(policy, ["capset:data_scientist"])
    req = ExecutionTuple("TUMOR_MEASUREMENTS", "read", {"agg": "aggregated", "pii": "false", "contact": False}, AUD)
    assert not covers(t, req)


def test_audience_must_match(policy):
    (t,) = compile_tuples(policy, ["capset:data_scientist"])
    req = ExecutionTuple("TUMOR_MEASUREMENTS", "read", {"agg": "aggregated", "pii": False, "contact": False}, "svc:x")
    assert not covers(t, req)


def test_prohibitions_deny(policy):
    assert not check_prohibitions(policy.caveats, ExecutionTuple("PET-CT", "export", {}, AUD))
    assert not check_prohibitions(policy.caveats, ExecutionTuple("TUMOR_MEASUREMENTS", "read", {"pii": True}, AUD))
    assert check_prohibitions(policy.caveats, ExecutionTuple("TUMOR_MEASUREMENTS", "read", {"pii": False}, AUD))
