import json

import numpy as np
import pytest

from platoon_mpc.nlp import SolveOptions
from platoon_mpc.ocp import EgoContext, FollowerContext, OcpConfig, build_considerate, build_solo
from platoon_mpc.platoon import (BackwardMessage, CaccGains, ControllerKind, ControllerMemory, ForwardMessage,
                                 MessageBus, cacc_law, controller_step)
from platoon_mpc.powertrain import TruckParams, TruckState, admissible_control_set, select_gear
from platoon_mpc.road import GradeProfile, fit_preview

FLAT = GradeProfile.from_breakpoints([(-1e4, 0.0), (1e5, 0.0)])
CFG = OcpConfig()


def _fwd(sender=0, cycle=0, s0=0.0, v=25.0, n=22, u=0.0):
    S = s0 + v * CFG.dt * np.arange(n)
    return ForwardMessage(sender, cycle, cycle * CFG.dt, CFG.dt, S, np.full(n, u), 22.0)


def _bwd(sender, cycle):
    return BackwardMessage.from_truck(sender, cycle, cycle * CFG.dt, TruckState(-40.0 * sender, 25.0, 0.1, 9),
                                      TruckParams())


def _ctx(role, s=1000.0, v=25.0, a_t=0.0, p=None, **kw):
    p = p or TruckParams()
    return EgoContext(role, TruckState(s, v, a_t, select_gear(v, p)), p, fit_preview(FLAT, s, 330.0), **kw)


# -- CACC

def test_cacc_law_examples():
    g = CaccGains()
    assert cacc_law(0.72 * 20.0, 20.0, 20.0, 0.0, g) == 0.0
    assert cacc_law(0.72 * 20.0 - 5.0, 20.0, 20.0, 0.0, g) == pytest.approx(-1.0)
    assert cacc_law(30.0, 20.0, 21.0, 0.2, g) == pytest.approx(0.2 * (30 - 14.4) + 0.7 + 0.2)
    assert cacc_law(100.0, 20.0, 20.0, 0.0, g, (-2.0, 0.31)) == 0.31


def test_cacc_gains_validated():
    with pytest.raises(ValueError):
        CaccGains(k_p=-0.1)
    with pytest.raises(ValueError):
        CaccGains(headway=0.0)


def test_cacc_step_zero_error():
    ego = _ctx("last", leader_plan=np.zeros(22) + 1100.0)
    out = controller_step("cacc", ego, None, CFG, cacc=(0.72 * 25.0, 25.0, 0.0, CaccGains()))
    assert out.u == 0.0
    assert out.problem_kind == "cacc" and out.solution is None
    with pytest.raises(ValueError):
        controller_step("cacc", ego, None, CFG)


def test_cacc_saturates_on_the_climb():
    # 38 t in top gear on 4 %: demanded acceleration exceeds the admissible maximum
    p = TruckParams()
    ego = _ctx("last", v=20.0, p=p, leader_plan=np.zeros(22))
    lo, hi = admissible_control_set(20.0, 9, p)
    u = cacc_law(0.72 * 20 + 4.0, 20.0, 21.0, 0.0, CaccGains(), (lo, hi))
    assert u == hi < 0.8
    assert ego.state.gear == select_gear(20.0, p)


# -- messages

def test_forward_message_validation_and_retiming():
    with pytest.raises(ValueError):
        ForwardMessage(0, 0, 0.0, 0.5, np.array([0.0, 1.0]), np.zeros(3), 22.0)
    with pytest.raises(ValueError):
        ForwardMessage(0, 0, 0.0, 0.5, np.array([0.0, -1.0]), np.zeros(2), 22.0)
    m = _fwd(v=20.0, n=4)
    assert np.allclose(m.positions_at([0.25, 1.5, 3.0]), [5.0, 30.0, 60.0])
    assert np.allclose(m.positions_at([-0.5]), [-10.0])
    m2 = ForwardMessage(0, 0, 0.0, 0.5, np.arange(4.0), np.array([1.0, 2.0, 3.0, 4.0]), 22.0)
    assert np.array_equal(m2.controls_at([0.0, 0.49, 0.5, 9.0]), [1.0, 1.0, 2.0, 4.0])
    with pytest.raises(ValueError):
        m2.S_r[0] = 5.0


def test_backward_message_fields():
    with pytest.raises(ValueError):
        BackwardMessage(1, 0, 0.0, TruckState(0.0, 20.0, 0.0, 9), np.nan, 3e5, 2500.0, (1.0,))
    b = BackwardMessage.from_truck(1, 0, 0.0, TruckState(0.0, 20.0, 0.0, 9), TruckParams().with_mass(30000.0))
    p = b.params_like(TruckParams())
    assert p.m == 30000.0 and p.p_max == TruckParams().p_max


def test_one_cycle_delay():
    bus = MessageBus(3)
    sent = [_fwd(0, 0), _fwd(1, 0, -40.0), _bwd(1, 0), _bwd(2, 0)]
    boxes = bus.exchange(sent, 0)
    assert boxes[1].forward is sent[0] and boxes[2].forward is sent[1]
    assert boxes[0].backward is sent[2] and boxes[1].backward is sent[3]
    assert boxes[0].forward is None and boxes[2].backward is None
    assert boxes[1].forward_age == 1
    with pytest.raises(ValueError):
        bus.exchange([_fwd(0, 5)], 1)


def test_total_loss_ages_and_discards():
    bus = MessageBus(2)
    bus.exchange([_fwd(0, 0), _bwd(1, 0)], 0)
    lossy = MessageBus(2, drop_prob=1.0)
    lossy.inboxes = bus.inboxes
    ages = []
    for c in range(1, 6):
        boxes = lossy.exchange([_fwd(0, c), _bwd(1, c)], c)
        ages.append(boxes[1].forward_age)
    # ages 2 and 3 are still usable; past the limit the message is discarded
    assert ages[:2] == [2, 3]
    assert boxes[1].forward is None and boxes[0].backward is None


def test_seeded_drop_rate():
    bus = MessageBus(2, drop_prob=0.2, seed=7)
    for c in range(1000):
        bus.exchange([_fwd(0, c)], c)
    assert bus.sent == 1000
    assert abs(bus.delivered / bus.sent - 0.8) <= 0.03


def test_message_log_is_line_delimited(tmp_path):
    path = tmp_path / "msgs.jsonl"
    bus = MessageBus(2, log_path=path)
    bus.exchange([_fwd(0, 0), _bwd(1, 0)], 0)
    bus.close()
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert [(r["kind"], r["sender"], r["to"], r["delivered_cycle"]) for r in recs] == [
        ("forward", 0, 1, 1), ("backward", 1, 0, 1)]
    assert len(recs[0]["S_r"]) == 22


# -- MPC controllers

def _equilibrium(ego):
    return build_solo(ego, CFG).equilibrium_controls()[0]


def test_considerate_leader_at_equilibrium():
    def fol(a_f):
        return FollowerContext(TruckState(1000.0 - 22 - 18.0, 25.0, a_f, 9), TruckParams(),
                               fit_preview(FLAT, 960.0, 330.0))
    a, a_f = build_considerate(_ctx("leader"), fol(0.0), CFG).equilibrium_controls()
    ego = _ctx("leader", a_t=a)
    out = controller_step("considerate", ego, fol(a_f), CFG)
    assert out.problem_kind == "considerate"
    # the effort penalty on absolute u leans a few mm/s^2 below equilibrium
    assert out.u == pytest.approx(a, abs=5e-3)
    # suggestion consistency: U_r is the follower block of the joint solution
    assert np.array_equal(out.outbox.U_r, out.solution.controls[1])
    assert np.array_equal(out.outbox.S_r, out.solution.positions[0, :-1])
    # follower drafts, so it needs less than the free-air equilibrium
    assert a_f < a
    assert np.max(np.abs(out.outbox.U_r[:10] - a_f)) < 5e-3


def test_anticipative_follower_at_equilibrium():
    d = CFG.headway * 25.0
    plan = 1000.0 + 22.0 + d + 25.0 * CFG.dt * np.arange(22)
    probe = _ctx("last", leader_plan=plan, leader_length=22.0)
    a = build_solo(probe, CFG, False).equilibrium_controls()[0]
    ego = _ctx("last", a_t=a, leader_plan=plan, leader_length=22.0)
    out = controller_step("anticipative", ego, None, CFG)
    assert out.problem_kind == "anticipative"
    assert out.u == pytest.approx(a, abs=1e-3)
    assert out.outbox is None


def test_anticipative_mid_truck_broadcasts_own_plan():
    plan = 1000.0 + 40.0 + 25.0 * CFG.dt * np.arange(22)
    ego = _ctx("mid", leader_plan=plan, leader_length=22.0, suggested_controls=np.zeros(22))
    out = controller_step(ControllerKind.ANTICIPATIVE, ego, None, CFG)
    assert np.array_equal(out.outbox.U_r, out.solution.controls[0])


def test_solver_failure_fallback_then_disengage():
    mem = ControllerMemory()
    ego = _ctx("last", leader_plan=1040.0 + 25.0 * CFG.dt * np.arange(22), leader_length=22.0)
    good = controller_step("anticipative", ego, None, CFG, mem)
    assert good.solution.converged and mem.prev is not None
    ego2 = _ctx("last", v=24.0, a_t=0.5, t_now=CFG.dt, leader_plan=1052.0 + 25.0 * CFG.dt * np.arange(22),
                leader_length=22.0)
    bad = SolveOptions(max_iter=0)
    first = controller_step("anticipative", ego2, None, CFG, mem, opts=bad)
    assert "solver_failure" in first.flags and "disengage" not in first.flags
    lo, hi = admissible_control_set(24.0, ego2.state.gear, ego2.params)
    # previous plan one stage ahead of the elapsed time: index 2
    assert first.u == pytest.approx(np.clip(good.solution.controls[0, 2], lo, hi))
    assert lo <= first.u <= hi
    second = controller_step("anticipative", ego2, None, CFG, mem, opts=bad)
    assert second.u == 0.0 and "disengage" in second.flags
