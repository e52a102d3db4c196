import json

import numpy as np
import pytest
from hypothesis import given

from cgforge.tpspec import (
    EXAMPLE_PROBLEM, InvalidProblem, check, load_problem, problem_dims, problem_from_dict, save_problem,
    split_resolved, validate,
)
from problems import problems


def codes(violations):
    return sorted(v.code for v in violations)


# -- the worked example -----------------------------------------------------------

def test_example_dims(example_problem):
    # 32*5 + 32*3 = 256; 7 + 3 = 10; 32*11 + 16*5 + 32*7 = 656
    assert problem_dims(example_problem) == (256, 10, 656, 1568)


def test_example_weights_by_instruction(example_problem):
    assert [r.w_count for r in example_problem.resolved] == [32, 512, 1024]
    assert [r.w_offset for r in example_problem.resolved] == [0, 32, 544]


def test_example_offsets(example_problem):
    r = example_problem.resolved
    assert [(q.x_offset, q.y_offset, q.z_offset) for q in r] == [(0, 0, 0), (0, 7, 352), (0, 7, 432)]
    assert [(q.l1, q.l2, q.l3) for q in r] == [(2, 3, 5), (2, 1, 2), (2, 1, 3)]


def test_scalar_problem(scalar_problem):
    assert problem_dims(scalar_problem) == (1, 1, 1, 1)


def test_empty_instruction_list():
    p = validate("1x0e", "1x0e", "1x0e", [])
    assert problem_dims(p) == (1, 1, 1, 0)
    assert p.resolved == ()


# -- validation errors ------------------------------------------------------------

def test_parity_violation_reported():
    vs = check("1x1o", "1x1o", "1x1o", [(1, 1, 1, "B")])
    assert codes(vs) == ["parity"]
    assert vs[0].instruction == 0


def test_triangle_violation_reported():
    assert codes(check("1x0e", "1x0e", "1x1e", [(1, 1, 1, "B")])) == ["triangle"]


def test_all_violations_listed():
    vs = check("2x1e + 3x1o", "1x1e", "1x1e + 2x3e",
               [(1, 1, 1, "B"), (2, 1, 1, "B"), (1, 1, 5, "C"), (1, 1, 2, "Q"), ("a", 1, 1, "B")])
    by = {v.instruction: v.code for v in vs}
    assert by[0] == "multiplicity"
    assert {v.code for v in vs if v.instruction == 1} == {"multiplicity", "parity"}
    assert by[2] == "range" and by[3] == "kind" and by[4] == "malformed"
    with pytest.raises(InvalidProblem) as exc:
        validate("2x1e + 3x1o", "1x1e", "1x1e + 2x3e", [(1, 1, 1, "B"), (2, 1, 1, "B")])
    assert len(exc.value.violations) == 3


def test_y_multiplicity_unsupported():
    assert codes(check("1x0e", "2x0e", "1x0e", [(1, 1, 1, "B")])) == ["unsupported"]


def test_parse_error_is_a_violation():
    assert codes(check("1x0q", "1x0e", "1x0e", [])) == ["parse"]


def test_schema_error():
    with pytest.raises(InvalidProblem) as exc:
        problem_from_dict({"x": "1x0e"})
    assert {v.code for v in exc.value.violations} == {"schema"}


@given(problems())
def test_valid_problems_have_no_violations(p):
    assert check(p.x_ir, p.y_ir, p.z_ir, p.instructions) == []
    assert p.total_weights == sum(r.w_count for r in p.resolved)


# -- multiplicity splitting -------------------------------------------------------

def test_split_b64_makes_two_chunks():
    p = validate("64x1o", "1x1o", "64x2e", [(1, 1, 1, "B")])
    s = split_resolved(p, 32)
    assert [(r.x_offset, r.z_offset, r.w_offset, r.z_lanes) for r in s.resolved] == [
        (0, 0, 0, 32), (96, 160, 32, 32)]


def test_split_c48_keeps_weight_layout():
    p = validate("48x1o", "1x1o", "16x1e", [(1, 1, 1, "C")])
    s = split_resolved(p, 32)
    assert [(r.x_lanes, r.z_lanes, r.w_offset, r.w_row_stride) for r in s.resolved] == [
        (32, 16, 0, 48), (16, 16, 32, 48)]
    assert sorted(s.weight_remap.tolist()) == list(range(p.total_weights))


@given(problems(max_mul=40))
def test_split_is_a_weight_permutation(p):
    s = split_resolved(p, 8)
    assert all(r.x_lanes <= 8 and r.z_lanes <= 8 for r in s.resolved)
    assert sorted(s.weight_remap.tolist()) == list(range(p.total_weights))
    # every (instruction, z lane) is covered as often as there are x chunks
    assert sum(r.z_words * r.x_lanes for r in s.resolved if r.kind == "C") == sum(
        r.z_words * r.x_lanes for r in p.resolved if r.kind == "C")


def test_split_rejects_bad_width(example_problem):
    with pytest.raises(ValueError):
        split_resolved(example_problem, 0)


# -- files ------------------------------------------------------------------------

def test_json_round_trip(tmp_path, example_problem):
    path = tmp_path / "p.json"
    save_problem(example_problem, path)
    q = load_problem(path)
    assert q.same_problem(example_problem)
    assert json.loads(path.read_text()) == EXAMPLE_PROBLEM
    assert np.array_equal(q.resolved[1].block.dense(), example_problem.resolved[1].block.dense())
