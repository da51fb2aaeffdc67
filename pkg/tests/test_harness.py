"""Simulation harness: scenario plumbing, outcome classification, one live run."""

from __future__ import annotations

import json

import pytest

from splitballot import harness
from conftest import build_spec


def _evidence(**overrides):
    base = {
        "anomalies": [],
        "failed_voter_checks": [],
        "valid_complaints": [],
        "client_alarms": [],
        "rejections": [],
        "linked_voters": 0,
        "tally_matches_intent": True,
        "attack_attempted": False,
    }
    base.update(overrides)
    return base


class TestClassifyOutcome:
    def test_clean(self):
        assert harness.classify_outcome(_evidence()) == "clean"

    @pytest.mark.parametrize(
        "overrides",
        [
            {"anomalies": ["count mismatch"]},
            {"failed_voter_checks": ["voter-001: code missing"]},
            {"valid_complaints": ["voter-002"]},
            {"tally_matches_intent": False},
        ],
    )
    def test_detected(self, overrides):
        assert harness.classify_outcome(_evidence(**overrides)) == "detected"

    @pytest.mark.parametrize(
        "overrides",
        [
            {"attack_attempted": True},
            {"rejections": ["authorization-already-used"]},
            {"client_alarms": ["key-id-mismatch"]},
        ],
    )
    def test_prevented(self, overrides):
        assert harness.classify_outcome(_evidence(**overrides)) == "prevented"

    def test_privacy_broken_beats_everything(self):
        evidence = _evidence(
            linked_voters=3,
            anomalies=["count mismatch"],
            rejections=["vote-invalid"],
            attack_attempted=True,
        )
        assert harness.classify_outcome(evidence) == "privacy-broken"

    def test_detected_beats_prevented(self):
        evidence = _evidence(attack_attempted=True, anomalies=["record is missing"])
        assert harness.classify_outcome(evidence) == "detected"


class TestScenario:
    def test_round_trip(self):
        for scenario in harness.battery():
            assert harness.Scenario.from_dict(scenario.to_dict()) == scenario

    def test_rejects_unknown_adversary(self):
        with pytest.raises(ValueError, match="unknown adversaries"):
            harness.Scenario("x", expected="clean", adversaries=("bribe-the-counters",))

    def test_rejects_unknown_expectation(self):
        with pytest.raises(ValueError, match="unknown expected outcome"):
            harness.Scenario("x", expected="mostly-fine")

    def test_cheating_parties(self):
        assert harness.scenario_by_name("collude-auth-vote-plain").cheating_parties() == {
            "auth-sysmgr",
            "vote-sysmgr",
        }
        assert harness.scenario_by_name("voter-double-cast").cheating_parties() == {"voter"}

    def test_lookup_by_name(self):
        assert harness.scenario_by_name("honest-baseline").expected == "clean"
        with pytest.raises(KeyError):
            harness.scenario_by_name("no-such-thing")


class TestBattery:
    def test_composition(self):
        scenarios = harness.battery()
        assert len(scenarios) == 12
        assert len({s.name for s in scenarios}) == 12

        by_name = {s.name: s for s in scenarios}
        assert by_name["honest-baseline"].expected == "clean"
        assert by_name["honest-baseline"].adversaries == ()
        assert by_name["honest-baseline"].probes is True

        # every adversary hook appears in at least one scenario
        exercised = {a for s in scenarios for a in s.adversaries}
        assert exercised == set(harness.ADVERSARIES)

        # privacy can only break when two operators collude
        for scenario in scenarios:
            if scenario.expected == "privacy-broken":
                assert len(scenario.cheating_parties()) >= 2, scenario.name

        # the blind twin of the auth+vote collusion must hold the line
        assert by_name["collude-auth-vote-plain"].expected == "privacy-broken"
        assert by_name["collude-auth-vote-blind"].expected == "prevented"
        assert by_name["collude-auth-vote-blind"].mode == "blind"


class TestVoteScript:
    def test_deterministic(self):
        scenario = harness.scenario_by_name("honest-baseline")
        spec = harness._ballot_spec(scenario)
        usernames = [f"voter-{i:03d}" for i in range(1, 9)]
        first = harness._vote_script(scenario, spec, usernames)
        second = harness._vote_script(scenario, spec, usernames)
        assert first == second
        for answers in first.values():
            assert [q for q, _ in answers] == ["q1", "q2"]

    def test_first_two_voters_always_differ(self):
        spec = harness._ballot_spec(harness.scenario_by_name("honest-baseline"))
        usernames = ["voter-001", "voter-002"]
        for seed in range(40):
            scenario = harness.Scenario("seeded", expected="clean", seed=seed)
            script = harness._vote_script(scenario, spec, usernames)
            assert script["voter-001"] != script["voter-002"], f"seed {seed}"

    def test_explicit_script_passthrough(self):
        scenario = harness.Scenario(
            "scripted", expected="clean",
            script={"voter-001": [["q1", 2], ["q2", 0]]},
        )
        spec = harness._ballot_spec(scenario)
        script = harness._vote_script(scenario, spec, ["voter-001"])
        assert script == {"voter-001": (("q1", 2), ("q2", 0))}


def test_live_double_cast_is_prevented(tmp_path):
    """One full in-anger run: servers up, voters drive, offline stage, classify."""
    scenario = harness.scenario_by_name("voter-double-cast")
    result, detection = harness.run_ballot(scenario, tmp_path)
    assert detection.observed == "prevented", json.dumps(detection.evidence, indent=1)
    assert result is not None and result.total_votes == scenario.voters
    assert any("authorization-already-used" in r for r in detection.evidence["rejections"])
    assert (tmp_path / "detection.json").exists()
    saved = json.loads((tmp_path / "detection.json").read_text())
    assert saved["observed"] == "prevented"


def test_cli_list(capsys):
    assert harness.main(["list"]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.strip()]
    assert len(lines) == len(harness.battery())
    assert any("honest-baseline" in l for l in lines)


def test_cli_unknown_scenario(tmp_path, capsys):
    rc = harness.main(["run", "definitely-not-a-scenario", "--workdir", str(tmp_path)])
    assert rc == 2
    assert "no scenario named" in capsys.readouterr().err
