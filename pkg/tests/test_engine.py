import random

import pytest

from eptmon.common import Access
from eptmon.engine import AccessEvent, Engine, Load, MachineConfig, MapIn, run_trace
from eptmon.errors import ConfigError, ProtocolViolation
from eptmon.ranges import RangeConfig
from scenes import DST_PAGE, DST_START, GPA, OTH_PAGE, SRC_PAGE, STACK, R, W, X, build, counters
from tracegen import make_scenario, access_trace, system_trace


class TestStep:
    def test_oth_fast_path(self):
        eng = build()
        eng.memory.write_phys(GPA[OTH_PAGE] + 0x20, b"\x42")
        eng.step(R(OTH_PAGE, OTH_PAGE + 0x20))
        assert counters(eng).exits == 0
        assert eng.observations[-1].data == b"\x42"

    def test_src_write_to_dst_counts(self):
        eng = build()
        eng.step(X(SRC_PAGE))
        before = counters(eng).ept_violations
        eng.step(W(SRC_PAGE + 1, DST_START, b"\x07"))
        c = counters(eng)
        assert (c.ept_violations - before, c.mtf_exits) == (1, 1)
        assert eng.memory.read_phys(GPA[DST_PAGE] + 0x100, 1) == b"\x07"

    def test_src_write_from_normal_view(self):
        # the fetch itself enters the monitor view, then the data access exits in Monitor
        eng = build()
        eng.step(W(SRC_PAGE + 1, DST_START, b"\x07"))
        c = counters(eng)
        assert (c.ept_violations, c.mtf_exits, c.to_monitor) == (2, 1, 1)
        assert len(eng.log) == 1

    def test_unmapped_access_faults_the_trace(self):
        report = build().run([R(OTH_PAGE, 0xFFFFF80000900000)])
        assert report.fault.startswith("event 0: unhandled #PF NotPresent")

    def test_mapin_outside_guest_data(self):
        eng = build()
        with pytest.raises(ConfigError):
            eng.step(MapIn(OTH_PAGE, 0x60000))

    def test_bad_cpu(self):
        with pytest.raises(ConfigError):
            build().step(R(OTH_PAGE, OTH_PAGE, cpu=3))

    def test_load_makes_code_src(self):
        eng = build()
        drv = 0xFFFFF88004A00000
        eng.step(MapIn(drv, 0x20000))
        eng.step(Load("DisPG.sys", drv, 0x1000))
        eng.step(R(drv + 4, DST_START))
        assert [r.src_rip for r in eng.log] == [drv + 4]

    def test_retry_cap(self, monkeypatch):
        eng = build()
        monkeypatch.setattr(eng.ept, "switch_view", lambda state, to: None)
        with pytest.raises(ProtocolViolation, match="retries"):
            eng.step(X(SRC_PAGE))

    def test_machine_config_validation(self):
        for bad in (dict(backend="kvm"), dict(cpus=0), dict(phys_mib=0)):
            with pytest.raises(ConfigError):
                MachineConfig(**bad)


class TestRun:
    def test_empty_trace(self):
        report = run_trace(MachineConfig(phys_mib=1), RangeConfig(), [])
        assert report.logs == [] and report.totals.exits == 0 and report.fault is None

    def test_report_text_is_key_value(self):
        report = build().run([X(SRC_PAGE), R(SRC_PAGE, DST_START)])
        for line in report.to_text().splitlines():
            assert "=" in line
        assert "cpu0.view=Monitor" in report.to_text()

    def test_three_scenario_pattern(self):
        # one read, one write and one execute of DST from SRC: exactly three triples, in order
        eng = build()
        eng.memory.write_phys(GPA[STACK] + 0xF00, (SRC_PAGE + 0x30).to_bytes(8, "little"))
        trace = [X(SRC_PAGE), R(SRC_PAGE + 0x10, DST_START, 4), W(SRC_PAGE + 0x20, DST_START + 4, b"\x01"),
                 X(SRC_PAGE + 0x2b), X(DST_START, 2)]
        report = eng.run(trace)
        assert [r.triple for r in report.logs] == [
            (SRC_PAGE + 0x10, Access.READ, DST_START),
            (SRC_PAGE + 0x20, Access.WRITE, DST_START + 4),
            (DST_START, Access.EXECUTE, DST_START),
        ]

    @pytest.mark.parametrize("backend", ["ept", "pf"])
    def test_replay_is_byte_identical(self, backend):
        for seed in range(20):
            rng = random.Random(seed)
            sc = make_scenario(rng, ("log", "readprotect", "writeprotect-deny", "execwatch"), backend=backend)
            trace = system_trace(rng, sc)
            a = Engine(sc.machine, sc.ranges()).run(trace)
            b = Engine(sc.machine, sc.ranges()).run(trace)
            assert a.to_text() == b.to_text() and a.log_text() == b.log_text()


def strip_monitoring(sc):
    return Engine(sc.machine, RangeConfig())


class TestInvariants:
    def test_end_state_equivalence_under_log(self):
        for seed in range(80):
            rng = random.Random(seed)
            sc = make_scenario(rng, ("log", "execwatch"))
            trace = system_trace(rng, sc)
            monitored = Engine(sc.machine, sc.ranges())
            monitored.run(trace)
            plain = strip_monitoring(sc)
            plain.run(trace)
            limit = sc.machine.data_limit
            assert monitored.memory.read_phys(0, limit) == plain.memory.read_phys(0, limit), seed
            assert [o.data for o in monitored.observations] == [o.data for o in plain.observations]

    def test_interleaving_isolation(self):
        cpu1_code, cpu1_data = 0xFFFFF80000400000, 0xFFFFF80000401000
        for seed in range(40):
            rng = random.Random(seed)
            sc = make_scenario(rng, cpus=1)
            sub0 = access_trace(rng, sc)[len(sc.setup):]
            sub1 = [AccessEvent.execute(1, cpu1_code + rng.randrange(64))
                    if rng.random() < 0.3 else
                    AccessEvent.write(1, cpu1_code + rng.randrange(64), cpu1_data + rng.randrange(4000), b"\x5a")
                    if rng.random() < 0.5 else
                    AccessEvent.read(1, cpu1_code + rng.randrange(64), cpu1_data + rng.randrange(4000), 1)
                    for _ in range(rng.randint(1, 20))]
            setup = sc.setup + [MapIn(cpu1_code, 0x50000), MapIn(cpu1_data, 0x51000)]
            mixed = list(setup)
            queue0, queue1 = list(sub0), list(sub1)
            while queue0 or queue1:
                q = queue0 if queue0 and (not queue1 or rng.random() < 0.5) else queue1
                mixed.append(q.pop(0))
            two = MachineConfig("ept", 2, 1)
            both = Engine(two, sc.ranges())
            both.run(mixed)
            alone0 = Engine(two, sc.ranges())
            alone0.run(setup + sub0)
            alone1 = Engine(two, sc.ranges())
            alone1.run(setup + sub1)
            assert both.counters[0] == alone0.counters[0]
            assert both.counters[1] == alone1.counters[1]
            assert both.view_of(0) == alone0.view_of(0) and both.view_of(1) == alone1.view_of(1)

    def test_conservation(self):
        for seed in range(80):
            rng = random.Random(seed)
            sc = make_scenario(rng, ("log", "readprotect", "writeprotect-deny", "execwatch"))
            eng = Engine(sc.machine, sc.ranges(), record_transitions=True)
            for ev in system_trace(rng, sc):
                mark = len(eng.transitions)
                eng.step(ev)
                new = eng.transitions[mark:]
                steps = [t for t in new if t.action == "SingleStepThenRestore"]
                mtfs = [t for t in new if t.exit == "MtfExit"]
                violations = [t for t in new if t.exit == "EptViolation"]
                denied = any(t.action == "DenyAndSkip" for t in new)
                assert len(mtfs) == (1 if steps and not denied else 0)
                assert all(not s.mtf_armed for s in eng.ept.states)
                assert sum(c.ept_violations for c in eng.counters) >= len(violations)
            assert sum(c.ept_violations for c in eng.counters) == sum(
                1 for t in eng.transitions if t.exit == "EptViolation")
            assert sum(c.mtf_exits for c in eng.counters) == sum(1 for t in eng.transitions if t.exit == "MtfExit")
