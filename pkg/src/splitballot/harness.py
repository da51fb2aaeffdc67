"""Full-system simulation: real processes, real sockets, scripted adversaries.

Each scenario provisions a fresh ballot, launches the three services as
separate processes, drives every voter through the real client, runs the
managers' offline stage, and then plays attacker: it reads whatever a
cheating operator would have recorded and tries to reconstruct who voted
what. The observed outcome is classified purely from evidence —

  privacy-broken  the reconstruction attributes at least one vote correctly;
  detected        an after-the-fact check fired (reconciliation or count
                  anomaly, a failed voter self-check, a valid complaint, or
                  a tally that differs from what the honest voters cast);
  prevented       an attack was attempted but left no trace beyond refused
                  requests and client-side alarms with no effect;
  clean           nothing was attempted and nothing fired.

The suite fails if any scenario's observed outcome differs from its
expected one, if any single-cheater scenario breaks privacy, or if the
battery as a whole leaves a server error branch unexercised.
"""

from __future__ import annotations

import argparse
import http.client
import json
import os
import random
import shutil
import subprocess
import sys
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any, Optional

from . import anonymizer, crypto, model, tally
from .client import ClientConfig, ProtocolError, VerificationFailure, VoterClient

ADVERSARIES = frozenset(
    {
        "auth-sysmgr-double-issue",
        "auth-sysmgr-ghost-vote",
        "vote-sysmgr-fabricate",
        "vote-sysmgr-modify",
        "vote-sysmgr-code-reuse",
        "anon-sysmgr-log",
        "collude-auth-vote",
        "collude-anon-vote",
        "mitm-network",
        "voter-double-cast",
    }
)

# Which operator(s) each adversary name stands for; the no-single-cheater
# privacy property quantifies over this.
CHEATING_PARTIES = {
    "auth-sysmgr-double-issue": {"auth-sysmgr"},
    "auth-sysmgr-ghost-vote": {"auth-sysmgr"},
    "vote-sysmgr-fabricate": {"vote-sysmgr"},
    "vote-sysmgr-modify": {"vote-sysmgr"},
    "vote-sysmgr-code-reuse": {"vote-sysmgr"},
    "anon-sysmgr-log": {"anon-sysmgr"},
    "collude-auth-vote": {"auth-sysmgr", "vote-sysmgr"},
    "collude-anon-vote": {"anon-sysmgr", "vote-sysmgr"},
    "mitm-network": {"network"},
    "voter-double-cast": {"voter"},
}

# Server error branches the battery must exercise at least once.
EXPECTED_ERROR_CODES = frozenset(
    {
        "bad-credentials",
        "bad-session",
        "unknown-token",
        "token-already-used",
        "wrong-mode",
        "ballot-still-open",
        "unauthorized",
        "sealed",
        "ballot-closed",
        "authorization-invalid",
        "authorization-already-used",
        "pin-mismatch",
        "authorization-locked",
        "vote-invalid",
        "not-found",
        "upstream-unreachable",
        "connection-failed",
    }
)

LAUNCH_TIMEOUT = 20.0
MAX_HOLD_SECONDS = 0.4


@dataclass
class Scenario:
    name: str
    expected: str
    voters: int = 20
    mode: str = "plain"
    pin_required: bool = True
    anonymizer_mode: str = "mix"
    batch_size: int = 4
    adversaries: tuple[str, ...] = ()
    abstainers: int = 0
    sequential: bool = False
    spacing: float = 0.0
    probes: bool = False
    seed: int = 20061222
    script: Optional[dict[str, list[list[Any]]]] = None

    def __post_init__(self) -> None:
        unknown = set(self.adversaries) - ADVERSARIES
        if unknown:
            raise ValueError(f"unknown adversaries: {sorted(unknown)}")
        if self.expected not in ("clean", "detected", "privacy-broken", "prevented"):
            raise ValueError(f"unknown expected outcome {self.expected!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "abstainers": self.abstainers,
            "adversaries": list(self.adversaries),
            "anonymizer_mode": self.anonymizer_mode,
            "batch_size": self.batch_size,
            "expected": self.expected,
            "mode": self.mode,
            "name": self.name,
            "pin_required": self.pin_required,
            "probes": self.probes,
            "script": self.script,
            "seed": self.seed,
            "sequential": self.sequential,
            "spacing": self.spacing,
            "voters": self.voters,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Scenario":
        return cls(
            name=data["name"],
            expected=data["expected"],
            voters=data.get("voters", 20),
            mode=data.get("mode", "plain"),
            pin_required=data.get("pin_required", True),
            anonymizer_mode=data.get("anonymizer_mode", "mix"),
            batch_size=data.get("batch_size", 4),
            adversaries=tuple(data.get("adversaries", ())),
            abstainers=data.get("abstainers", 0),
            sequential=data.get("sequential", False),
            spacing=data.get("spacing", 0.0),
            probes=data.get("probes", False),
            seed=data.get("seed", 20061222),
            script=data.get("script"),
        )

    def cheating_parties(self) -> set[str]:
        parties: set[str] = set()
        for name in self.adversaries:
            parties |= CHEATING_PARTIES[name]
        return parties


@dataclass
class DetectionReport:
    scenario: str
    expected: str
    observed: str
    evidence: dict[str, Any]
    duration_seconds: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "duration_seconds": round(self.duration_seconds, 3),
            "evidence": self.evidence,
            "expected": self.expected,
            "observed": self.observed,
            "scenario": self.scenario,
        }


@dataclass
class VoterOutcome:
    username: str
    client: VoterClient
    answers: tuple[tuple[str, int], ...]
    receipt: Optional[model.VoteReceipt] = None
    alarms: list[str] = field(default_factory=list)
    rejections: list[str] = field(default_factory=list)
    probe_codes: list[str] = field(default_factory=list)


def battery() -> list[Scenario]:
    """The fixed scenario set the suite runs."""
    return [
        Scenario("honest-baseline", expected="clean", voters=20, abstainers=1, probes=True),
        Scenario("voter-double-cast", expected="prevented", voters=6, adversaries=("voter-double-cast",)),
        Scenario(
            "auth-sysmgr-double-issue", expected="detected", voters=6,
            adversaries=("auth-sysmgr-double-issue",),
        ),
        Scenario(
            "auth-sysmgr-ghost-vote", expected="detected", voters=6, abstainers=1,
            adversaries=("auth-sysmgr-ghost-vote",),
        ),
        Scenario(
            "vote-sysmgr-fabricate", expected="detected", voters=6,
            adversaries=("vote-sysmgr-fabricate",),
        ),
        Scenario("vote-sysmgr-modify", expected="detected", voters=6, adversaries=("vote-sysmgr-modify",)),
        Scenario(
            "vote-sysmgr-code-reuse", expected="prevented", voters=6, sequential=True,
            adversaries=("vote-sysmgr-code-reuse",),
        ),
        Scenario("anon-sysmgr-log", expected="prevented", voters=6, adversaries=("anon-sysmgr-log",)),
        Scenario(
            "collude-auth-vote-plain", expected="privacy-broken", voters=5,
            adversaries=("collude-auth-vote",),
        ),
        Scenario(
            "collude-auth-vote-blind", expected="prevented", voters=5, mode="blind",
            pin_required=False, adversaries=("collude-auth-vote",),
        ),
        Scenario(
            "collude-anon-vote", expected="privacy-broken", voters=5, anonymizer_mode="nat",
            sequential=True, spacing=0.25, adversaries=("collude-anon-vote",),
        ),
        Scenario("mitm-network", expected="detected", voters=6, adversaries=("mitm-network",)),
    ]


def scenario_by_name(name: str) -> Scenario:
    for scenario in battery():
        if scenario.name == name:
            return scenario
    raise KeyError(f"no scenario named {name!r}; try `ballot-sim list`")


# -- plumbing ---------------------------------------------------------------------


def _ballot_spec(scenario: Scenario) -> model.BallotSpec:
    now = datetime.now(timezone.utc)
    return model.BallotSpec(
        ballot_id=f"sim-{scenario.name}",
        questions=(
            model.Question("q1", "Adopt the proposal?", ("yes", "no", "abstain")),
            model.Question("q2", "Renew the board's mandate?", ("yes", "no")),
        ),
        open_at=model.format_timestamp(now - timedelta(hours=1)),
        close_at=model.format_timestamp(now + timedelta(hours=1)),
    )


def _vote_script(scenario: Scenario, spec: model.BallotSpec, usernames: list[str]) -> dict[str, tuple]:
    """Deterministic per-voter answers; the ground truth for every check."""
    if scenario.script is not None:
        return {u: tuple((q, int(i)) for q, i in scenario.script[u]) for u in usernames}
    rng = random.Random(scenario.seed)
    script = {
        u: tuple((q.question_id, rng.randrange(len(q.choices))) for q in spec.questions)
        for u in usernames
    }
    if len(usernames) >= 2:
        # the second voter must differ from the first so a replayed receipt
        # can never recompute over her vote
        first, second = usernames[0], usernames[1]
        if script[second] == script[first]:
            qid, idx = script[second][0]
            choices = len(spec.questions[0].choices)
            script[second] = ((qid, (idx + 1) % choices),) + script[second][1:]
    return script


def _inject_adversaries(work: Path, scenario: Scenario) -> None:
    flags = {"auth": [], "vote": [], "anon": []}
    for name in scenario.adversaries:
        if name == "auth-sysmgr-double-issue":
            flags["auth"].append("double-issue")
        elif name == "auth-sysmgr-ghost-vote":
            flags["auth"].append("ghost-vote")
        elif name == "vote-sysmgr-fabricate":
            flags["vote"].append("fabricate")
        elif name == "vote-sysmgr-modify":
            flags["vote"].append("modify")
        elif name == "vote-sysmgr-code-reuse":
            flags["vote"].append("code-reuse")
        elif name == "anon-sysmgr-log":
            flags["anon"].append("cheat-log")
        elif name == "collude-auth-vote":
            flags["auth"].append("cheat-log")
            flags["vote"].append("cheat-log")
        elif name == "collude-anon-vote":
            flags["anon"].append("cheat-log")
            flags["vote"].append("cheat-log")
        elif name == "mitm-network":
            flags["anon"].append("tamper")
    for key, state in (("auth", "authsrv"), ("vote", "votesrv"), ("anon", "anon")):
        if not flags[key]:
            continue
        config_path = work / state / "config.json"
        config = json.loads(config_path.read_text(encoding="utf-8"))
        config["adversaries"] = sorted(set(config["adversaries"]) | set(flags[key]))
        config_path.write_text(json.dumps(config, indent=1, sort_keys=True), encoding="utf-8")


def _launch(procs: list, module: str, state_dir: Path, env: dict[str, str]) -> int:
    (state_dir / "port").unlink(missing_ok=True)
    with (state_dir / "server.log").open("w", encoding="utf-8") as log:
        proc = subprocess.Popen(
            [sys.executable, "-m", module, "--state-dir", str(state_dir)],
            stdout=log,
            stderr=subprocess.STDOUT,
            env=env,
        )
    procs.append(proc)
    deadline = time.monotonic() + LAUNCH_TIMEOUT
    port_file = state_dir / "port"
    while time.monotonic() < deadline:
        if proc.poll() is not None:
            tail = (state_dir / "server.log").read_text(encoding="utf-8")[-2000:]
            raise RuntimeError(f"{module} exited at startup:\n{tail}")
        if port_file.exists():
            text = port_file.read_text(encoding="utf-8").strip()
            if text:
                return int(text)
        time.sleep(0.02)
    raise RuntimeError(f"{module} did not report a port within {LAUNCH_TIMEOUT}s")


def _shutdown(procs: list) -> None:
    for proc in procs:
        if proc.poll() is None:
            proc.terminate()
    for proc in procs:
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait(timeout=5)


def _admin(
    port: int, method: str, path: str, secret: Optional[str] = None, body: Optional[dict] = None
) -> tuple[int, Any]:
    """Manager/operator HTTP call; returns (status, parsed JSON or raw bytes)."""
    conn = http.client.HTTPConnection("127.0.0.1", port, timeout=60)
    headers = {}
    if secret is not None:
        headers["Authorization"] = f"Bearer {secret}"
    payload = None
    if body is not None:
        payload = json.dumps(body).encode("utf-8")
        headers["Content-Type"] = "application/json"
    try:
        conn.request(method, path, payload, headers)
        response = conn.getresponse()
        data = response.read()
        if "json" in (response.getheader("Content-Type") or ""):
            return response.status, json.loads(data.decode("utf-8"))
        return response.status, data
    finally:
        conn.close()


def _expect_error(status_body: tuple[int, Any], expected_code: str, seen: set[str]) -> None:
    status, body = status_body
    code = body.get("error") if isinstance(body, dict) else None
    if status < 400 or code != expected_code:
        raise RuntimeError(f"probe expected error {expected_code!r}, got {status} {body!r}")
    seen.add(code)


def _read_jsonl(path: Path) -> list[dict[str, Any]]:
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def _patch_voter_urls(work: Path, roster: list[dict], auth_port: int, anon_port: int) -> None:
    for entry in roster:
        config_path = work / "voters" / entry["username"] / "config.json"
        config = json.loads(config_path.read_text(encoding="utf-8"))
        config["auth_url"] = f"http://127.0.0.1:{auth_port}"
        config["anon_url"] = f"http://127.0.0.1:{anon_port}"
        config_path.write_text(json.dumps(config, indent=1, sort_keys=True), encoding="utf-8")


def _make_client(work: Path, username: str) -> VoterClient:
    return VoterClient(ClientConfig.load(work / "voters" / username / "config.json"))


def _wrong_pin(pin: Optional[str]) -> str:
    return "111111" if pin == "000000" else "000000"


# -- the run ----------------------------------------------------------------------


def run_ballot(scenario: Scenario, workdir: Path | str) -> tuple[Optional[tally.TallyResult], DetectionReport]:
    started = time.monotonic()
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)

    spec = _ballot_spec(scenario)
    manifest = tally.provision(
        scenario.voters,
        spec,
        work,
        mode=scenario.mode,
        pin_required=scenario.pin_required,
        anonymizer_mode=scenario.anonymizer_mode,
        batch_size=scenario.batch_size,
        max_hold_seconds=MAX_HOLD_SECONDS,
    )
    secrets = json.loads((work / "secrets.json").read_text(encoding="utf-8"))
    _inject_adversaries(work, scenario)

    env = dict(os.environ)
    env["BALLOT_HARNESS_CHEAT"] = "1" if scenario.adversaries else "0"

    participants = manifest.roster[: scenario.voters - scenario.abstainers]
    bystanders = manifest.roster[len(participants):]
    usernames = [e["username"] for e in participants]
    script = _vote_script(scenario, spec, usernames)

    error_codes: set[str] = set()
    evidence: dict[str, Any] = {
        "anomalies": [],
        "failed_voter_checks": [],
        "valid_complaints": [],
        "client_alarms": [],
        "rejections": [],
        "linked_voters": 0,
        "linkage_sample": [],
        "tally_matches_intent": True,
        "attack_attempted": bool(scenario.adversaries),
        "notes": [],
    }

    procs: list = []
    try:
        auth_port = _launch(procs, "splitballot.authserver", work / "authsrv", env)
        vote_port = _launch(procs, "splitballot.voteserver", work / "votesrv", env)
        anon_config_path = work / "anon" / "config.json"
        anon_config = json.loads(anon_config_path.read_text(encoding="utf-8"))
        anon_config["upstream"] = f"127.0.0.1:{vote_port}"
        anon_config_path.write_text(json.dumps(anon_config, indent=1, sort_keys=True), encoding="utf-8")
        anon_port = _launch(procs, "splitballot.anonymizer", work / "anon", env)
        _patch_voter_urls(work, manifest.roster, auth_port, anon_port)

        if scenario.probes:
            _probe_pre_seal(auth_port, vote_port, secrets, error_codes)
        status, _ = _admin(auth_port, "POST", "/admin/seal", secrets["auth"]["manager"])
        if status != 200:
            raise RuntimeError(f"seal failed with status {status}")
        if scenario.probes:
            _probe_while_open(work, scenario, auth_port, anon_port, secrets, error_codes)

        outcomes = _drive_voters(work, scenario, participants, script, evidence, error_codes)

        _adversary_actions(scenario, auth_port, vote_port, anon_port, secrets, bystanders, spec, evidence)

        _close_servers(auth_port, vote_port, secrets)
        if scenario.probes:
            _probe_post_close(work, participants[0]["username"], auth_port, anon_port, error_codes)

        status, _ = _admin(auth_port, "POST", "/admin/unseal", secrets["auth"]["manager"])
        if status != 200:
            raise RuntimeError(f"unseal failed with status {status}")

        exports = _download_exports(work, auth_port, vote_port, secrets)
    finally:
        _shutdown(procs)

    result = _offline_stage(scenario, work, exports, spec, evidence, outcomes, bystanders, script)
    for outcome in outcomes:
        error_codes.update(outcome.probe_codes)
        error_codes.update(outcome.rejections)
    evidence["error_codes_seen"] = sorted(error_codes)
    observed = classify_outcome(evidence)
    detection = DetectionReport(
        scenario=scenario.name,
        expected=scenario.expected,
        observed=observed,
        evidence=evidence,
        duration_seconds=time.monotonic() - started,
    )
    (work / "detection.json").write_text(
        json.dumps(detection.to_dict(), indent=1, sort_keys=True), encoding="utf-8"
    )
    return result, detection


def classify_outcome(evidence: dict[str, Any]) -> str:
    if evidence["linked_voters"] > 0:
        return "privacy-broken"
    if (
        evidence["anomalies"]
        or evidence["failed_voter_checks"]
        or evidence["valid_complaints"]
        or not evidence["tally_matches_intent"]
    ):
        return "detected"
    if evidence["attack_attempted"] or evidence["rejections"] or evidence["client_alarms"]:
        return "prevented"
    return "clean"


# -- voter driving ------------------------------------------------------------------


def _drive_voters(
    work: Path,
    scenario: Scenario,
    participants: list[dict],
    script: dict[str, tuple],
    evidence: dict[str, Any],
    error_codes: set[str],
) -> list[VoterOutcome]:
    lockout_username = participants[-1]["username"] if "vote-sysmgr-fabricate" in scenario.adversaries else None
    pin_probe_username = participants[2]["username"] if scenario.probes and len(participants) > 2 else None
    doubler_username = participants[0]["username"] if "voter-double-cast" in scenario.adversaries else None

    def run_one(entry: dict) -> VoterOutcome:
        username = entry["username"]
        client = _make_client(work, username)
        outcome = VoterOutcome(username=username, client=client, answers=script[username])
        pin = client.login_redeem(username, entry["password"], entry["token"])
        vote = model.Vote(ballot_id=client.config.ballot_id, answers=script[username])

        if username == pin_probe_username and pin is not None:
            for _ in range(2):
                try:
                    client.cast(vote, _wrong_pin(pin))
                except ProtocolError as exc:
                    outcome.probe_codes.append(exc.code)
        if username == lockout_username and pin is not None:
            for _ in range(3):
                try:
                    client.cast(vote, _wrong_pin(pin))
                except ProtocolError as exc:
                    outcome.rejections.append(exc.code)
            try:
                client.cast(vote, pin)
            except ProtocolError as exc:
                outcome.rejections.append(exc.code)  # authorization-locked
            return outcome

        try:
            outcome.receipt = client.cast(vote, pin)
        except VerificationFailure as exc:
            outcome.alarms.append(str(exc))
            if "vote-sysmgr-code-reuse" in scenario.adversaries:
                # the replayed receipt was refused; the voter casts again
                outcome.receipt = client.cast(vote, pin)
        except ProtocolError as exc:
            outcome.rejections.append(exc.code)

        if username == doubler_username and outcome.receipt is not None:
            try:
                client.cast(vote, pin)
            except ProtocolError as exc:
                outcome.rejections.append(exc.code)  # authorization-already-used
            try:
                client.login_redeem(username, entry["password"], entry["token"])
            except ProtocolError as exc:
                outcome.rejections.append(exc.code)  # token-already-used
        return outcome

    outcomes: list[VoterOutcome] = []
    if scenario.sequential:
        for entry in participants:
            outcomes.append(run_one(entry))
            if scenario.spacing:
                time.sleep(scenario.spacing)
    else:
        workers = min(8, max(scenario.batch_size, 2), len(participants))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_one, participants))

    for outcome in outcomes:
        evidence["client_alarms"].extend(f"{outcome.username}: {a}" for a in outcome.alarms)
        evidence["rejections"].extend(f"{outcome.username}: {r}" for r in outcome.rejections)
    return outcomes


# -- probes: drive every error branch on purpose -------------------------------------


def _probe_pre_seal(auth_port: int, vote_port: int, secrets: dict, seen: set[str]) -> None:
    _expect_error(
        _admin(auth_port, "GET", "/admin/export", secrets["auth"]["manager"]),
        "ballot-still-open",
        seen,
    )
    _expect_error(
        _admin(vote_port, "GET", "/admin/export-authz", secrets["vote"]["authmgr"]),
        "ballot-still-open",
        seen,
    )


def _probe_while_open(
    work: Path, scenario: Scenario, auth_port: int, anon_port: int, secrets: dict, seen: set[str]
) -> None:
    _expect_error(
        _admin(auth_port, "GET", "/admin/unused-tokens", secrets["auth"]["manager"]), "sealed", seen
    )
    _expect_error(_admin(auth_port, "GET", "/admin/export", "nope"), "unauthorized", seen)
    _expect_error(
        _admin(auth_port, "POST", "/auth/login", body={"username": "voter-001", "password": "wrong"}),
        "bad-credentials",
        seen,
    )
    _expect_error(
        _admin(
            auth_port, "POST", "/auth/redeem",
            body={"session": "f" * 32, "vote_token": model.VoteToken.fresh("x").text},
        ),
        "bad-session",
        seen,
    )
    login = _admin(
        auth_port, "POST", "/auth/login",
        body={"username": "voter-001", "password": _voter_password(work, "voter-001")},
    )
    if login[0] != 200:
        raise RuntimeError(f"probe login failed: {login}")
    session = login[1]["session"]
    _expect_error(
        _admin(
            auth_port, "POST", "/auth/redeem",
            body={"session": session, "vote_token": model.VoteToken.fresh("x").text},
        ),
        "unknown-token",
        seen,
    )
    _expect_error(
        _admin(
            auth_port, "POST", "/auth/blind-redeem",
            body={"session": session, "vote_token": model.VoteToken.fresh("x").text, "blinded_message": "1f"},
        ),
        "wrong-mode",
        seen,
    )
    _expect_error(_admin(anon_port, "GET", "/vote/nowhere"), "not-found", seen)
    _expect_error(
        _admin(anon_port, "POST", "/vote/cast", body={"vote": 5}), "vote-invalid", seen
    )
    _expect_error(
        _admin(
            anon_port, "POST", "/vote/cast",
            body={
                "vote": {"ballot_id": f"sim-{scenario.name}", "answers": [["q1", 0], ["q2", 0]]},
                "sealed_authorization": "deadbeef",
            },
        ),
        "authorization-invalid",
        seen,
    )
    _probe_unreachable_upstream(work, seen)
    _probe_connection_refused(work, seen)


def _probe_unreachable_upstream(work: Path, seen: set[str]) -> None:
    """A throwaway proxy pointed at a dead port must answer with a gateway error."""
    state = work / "probe-anon"
    state.mkdir(exist_ok=True)
    (state / "config.json").write_text(
        json.dumps(
            {
                "mode": "nat",
                "upstream": "127.0.0.1:9",  # discard port; nothing listens
                "batch_size": 4,
                "max_hold_seconds": 0.1,
                "adversaries": [],
            }
        ),
        encoding="utf-8",
    )
    server = anonymizer.serve(anonymizer.Anonymizer(state), "127.0.0.1", 0)
    try:
        _expect_error(_admin(server.port, "GET", "/vote/form"), "upstream-unreachable", seen)
    finally:
        server.shutdown()
        server.server_close()


def _probe_connection_refused(work: Path, seen: set[str]) -> None:
    """The client itself must fail loudly when nothing is listening at all."""
    base = work / "voters" / "voter-001"
    config = json.loads((base / "config.json").read_text(encoding="utf-8"))
    config["anon_url"] = "http://127.0.0.1:9"
    probe_path = base / "probe-config.json"
    probe_path.write_text(json.dumps(config), encoding="utf-8")
    client = VoterClient(ClientConfig.load(probe_path))
    try:
        client.fetch_ballot()
        raise RuntimeError("probe expected connection-failed, got a ballot")
    except ProtocolError as exc:
        if exc.code != "connection-failed":
            raise
        seen.add(exc.code)


def _probe_post_close(work: Path, username: str, auth_port: int, anon_port: int, seen: set[str]) -> None:
    _expect_error(
        _admin(auth_port, "POST", "/auth/login", body={"username": username, "password": "x"}),
        "ballot-closed",
        seen,
    )
    _expect_error(
        _admin(anon_port, "POST", "/vote/cast", body={"vote": {"ballot_id": "x", "answers": []}}),
        "ballot-closed",
        seen,
    )


def _voter_password(work: Path, username: str) -> str:
    return (work / "voters" / username / "password.txt").read_text(encoding="utf-8").strip()


# -- adversary actions ---------------------------------------------------------------


def _accomplice_cast(anon_port: int, sealed_hex: str, pin: Optional[str], vote: model.Vote) -> dict:
    body: dict[str, Any] = {"sealed_authorization": sealed_hex, "vote": vote.to_dict()}
    if pin is not None:
        body["pin"] = pin
    status, payload = _admin(anon_port, "POST", "/vote/cast", body=body)
    if status != 200:
        raise RuntimeError(f"accomplice cast refused: {status} {payload!r}")
    return payload


def _adversary_actions(
    scenario: Scenario,
    auth_port: int,
    vote_port: int,
    anon_port: int,
    secrets: dict,
    bystanders: list[dict],
    spec: model.BallotSpec,
    evidence: dict[str, Any],
) -> None:
    stuffed_vote = model.Vote(
        ballot_id=spec.ballot_id, answers=tuple((q.question_id, 0) for q in spec.questions)
    )
    if "auth-sysmgr-double-issue" in scenario.adversaries:
        status, body = _admin(
            auth_port, "POST", "/admin/cheat/issue", secrets["auth"]["sysmgr"], body={}
        )
        if status != 200:
            raise RuntimeError(f"double-issue hook refused: {status} {body!r}")
        _accomplice_cast(anon_port, body["sealed_authorization"], body.get("pin"), stuffed_vote)
        evidence["notes"].append("auth-sysmgr minted an extra authorization and an accomplice cast it")
    if "auth-sysmgr-ghost-vote" in scenario.adversaries:
        ghost = bystanders[0]
        status, body = _admin(
            auth_port, "POST", "/admin/cheat/ghost-vote", secrets["auth"]["sysmgr"],
            body={"token_digest": ghost["token_digest"], "username": ghost["username"]},
        )
        if status != 200:
            raise RuntimeError(f"ghost-vote hook refused: {status} {body!r}")
        _accomplice_cast(anon_port, body["sealed_authorization"], body.get("pin"), stuffed_vote)
        evidence["notes"].append(
            f"auth-sysmgr forged records for {ghost['username']}'s unredeemed token and cast with them"
        )
    if "vote-sysmgr-fabricate" in scenario.adversaries:
        status, body = _admin(
            vote_port, "POST", "/admin/cheat/fabricate", secrets["vote"]["sysmgr"], body={"count": 2}
        )
        if status != 200:
            raise RuntimeError(f"fabricate hook refused: {status} {body!r}")
        evidence["notes"].append(f"vote-sysmgr fabricated 2 vote files: {body['codes']}")


def _close_servers(auth_port: int, vote_port: int, secrets: dict) -> None:
    status, body = _admin(vote_port, "POST", "/admin/close", secrets["vote"]["manager"])
    if status != 200:
        raise RuntimeError(f"vote close failed: {status} {body!r}")
    status, body = _admin(auth_port, "POST", "/admin/close", secrets["auth"]["manager"])
    if status != 200:
        raise RuntimeError(f"auth close failed: {status} {body!r}")


def _download_exports(work: Path, auth_port: int, vote_port: int, secrets: dict) -> dict[str, Path]:
    exports = work / "exports"
    exports.mkdir(exist_ok=True)
    paths = {}
    for name, port, path, secret in (
        ("auth", auth_port, "/admin/export", secrets["auth"]["manager"]),
        ("authz", vote_port, "/admin/export-authz", secrets["vote"]["authmgr"]),
        ("votes", vote_port, "/admin/export-votes", secrets["vote"]["votemgr"]),
    ):
        status, data = _admin(port, "GET", path, secret)
        if status != 200 or not isinstance(data, bytes):
            raise RuntimeError(f"export {name} failed: {status} {data!r}")
        out = exports / f"{name}.tar"
        out.write_bytes(data)
        paths[name] = out
    return paths


# -- offline stage: managers, voters, attacker --------------------------------------


def _offline_stage(
    scenario: Scenario,
    work: Path,
    exports: dict[str, Path],
    spec: model.BallotSpec,
    evidence: dict[str, Any],
    outcomes: list[VoterOutcome],
    bystanders: list[dict],
    script: dict[str, tuple],
) -> tally.TallyResult:
    keys_dir = work / "keys"
    authmgr_key = crypto.KeyPair.load(keys_dir / "auth-mgr.pem", role="auth-mgr")
    votemgr_key = crypto.KeyPair.load(keys_dir / "vote-mgr.pem", role="vote-mgr")
    authsrv_pub = crypto.PublicKey.load(keys_dir / "auth-srv.pub.pem")
    votesrv_pub = crypto.PublicKey.load(keys_dir / "vote-srv.pub.pem")

    auth_archive = tally.read_archive(exports["auth"])
    used, issued, valid, audit_files = tally.split_auth_export(auth_archive)
    audit_dir = work / "exports" / "audit"
    audit_dir.mkdir(exist_ok=True)
    for name, blob in audit_files.items():
        (audit_dir / name).write_bytes(blob)

    votes_archive = tally.read_archive(exports["votes"])
    reconciliation = tally.reconcile(
        usage_records=used,
        issued_records=issued,
        used_authz_records=tally.read_archive(exports["authz"]),
        vote_count=len(votes_archive),
        authmgr_key=authmgr_key,
        authsrv_pub=authsrv_pub,
        votesrv_pub=votesrv_pub,
        mode=scenario.mode,
        audit_dir=audit_dir if audit_files else None,
    )
    (work / "reconciliation.json").write_text(
        json.dumps(reconciliation.to_dict(), indent=1, sort_keys=True), encoding="utf-8"
    )
    evidence["anomalies"].extend(f"reconcile: {a}" for a in reconciliation.anomalies)

    pub = work / "pub"
    override = None
    if not reconciliation.consistent:
        override = f"simulation scenario {scenario.name}: publishing despite inconsistency to finish the drill"
    used_tokens_path, unused_tokens_path = tally.publish_tokens(
        reconciliation, valid, pub, override=override
    )
    codes_path = tally.publish_codes(votes_archive, pub)

    # complaint window: every voter checks her code is up before the count
    voted = [o for o in outcomes if o.receipt is not None]
    for outcome in voted:
        report = outcome.client.check_publication(codes_path, None, used_tokens_path)
        if report.complaint_path:
            complaint = json.loads(Path(report.complaint_path).read_text(encoding="utf-8"))
            verdict = tally.handle_complaint(complaint, codes_path, votesrv_pub)
            if verdict["verdict"] == "valid-complaint":
                evidence["valid_complaints"].append(f"{outcome.username}: {verdict['reason']}")

    result = tally.count_votes(
        votes_archive, votemgr_key, votesrv_pub, spec, pub, complaint_window_closed=True
    )
    evidence["anomalies"].extend(f"count: {a}" for a in result.anomalies)

    # full per-voter self-checks now that the code+vote list exists
    code_votes_path = Path(result.artifacts["code_votes"])
    evidence["green_voter_checks"] = 0
    for outcome in voted:
        report = outcome.client.check_publication(codes_path, code_votes_path, used_tokens_path)
        if report.all_green:
            evidence["green_voter_checks"] += 1
        else:
            evidence["failed_voter_checks"].append(
                f"{outcome.username}: code_present={report.code_present} "
                f"vote_matches={report.vote_matches} "
                f"token_usage_time_plausible={report.token_usage_time_plausible}"
            )
    for entry in bystanders:
        store = work / "voters" / entry["username"] / "store"
        store.mkdir(exist_ok=True)
        shutil.copyfile(work / "voters" / entry["username"] / "token.txt", store / "token.txt")
        client = _make_client(work, entry["username"])
        if not client.check_token_unused(unused_tokens_path):
            evidence["failed_voter_checks"].append(
                f"{entry['username']}: never voted, but own token is not on the unused list"
            )

    # does the counted tally equal what the honest voters meant to cast?
    expected_counts = {q.question_id: [0] * len(q.choices) for q in spec.questions}
    for outcome in voted:
        for qid, idx in outcome.answers:
            expected_counts[qid][idx] += 1
    evidence["tally_matches_intent"] = (
        result.counts == expected_counts and result.total_votes == len(voted)
    )
    evidence["expected_counts"] = expected_counts
    evidence["counted"] = result.counts

    linked, sample = _reconstruct_linkage(scenario, work, outcomes, script, code_votes_path)
    evidence["linked_voters"] = linked
    evidence["linkage_sample"] = sample
    if {"anon-sysmgr-log", "collude-anon-vote"} & set(scenario.adversaries):
        evidence["notes"].append(
            f"anonymizer retention policy: {anonymizer.scrub_log_policy(work / 'anon')}"
        )
    return result


def _reconstruct_linkage(
    scenario: Scenario,
    work: Path,
    outcomes: list[VoterOutcome],
    script: dict[str, tuple],
    code_votes_path: Path,
) -> tuple[int, list[list[str]]]:
    """Play the colluding operators: join whatever they logged and score it.

    A voter counts as linked only when the attacker attributes her actual
    vote content correctly — guesses that miss the ground truth do not count.
    """
    auth_log = _read_jsonl(work / "authsrv" / "cheat" / "log.jsonl")
    vote_log = _read_jsonl(work / "votesrv" / "cheat" / "log.jsonl")
    anon_log = _read_jsonl(work / "anon" / "cheat" / "log.jsonl")

    code_to_vote: dict[str, model.Vote] = {}
    if code_votes_path.exists():
        for line in model.read_published_list(code_votes_path):
            code_hex, _, _, vote = model.parse_code_vote_line(line)
            code_to_vote[code_hex] = vote

    truth = {o.username: dict(script[o.username]) for o in outcomes}
    linked: dict[str, str] = {}

    # auth + vote collusion: authorization number bridges the two columns
    prn_to_user = {}
    for entry in auth_log:
        if "prn" in entry:
            prn_to_user[crypto.digest(bytes.fromhex(entry["prn"])).hex] = entry["username"]
    for entry in vote_log:
        username = prn_to_user.get(entry.get("prn_digest", ""))
        vote = code_to_vote.get(entry.get("code", ""))
        if username and vote and truth.get(username) == dict(vote.answers):
            linked[username] = entry["code"]

    # anon + vote collusion: nearest-in-time join of forwarding log and casts
    port_to_user = {
        o.client.cast_source_port: o.username for o in outcomes if o.client.cast_source_port
    }
    cast_forwards = [e for e in anon_log if e.get("request_line", "").startswith("POST /vote/cast")]
    if cast_forwards and vote_log:
        for entry in vote_log:
            received = entry.get("received_at")
            if received is None:
                continue
            nearest = min(cast_forwards, key=lambda e: abs(e["forwarded_at"] - received))
            username = port_to_user.get(nearest.get("client_port"))
            vote = code_to_vote.get(entry.get("code", ""))
            if username and vote and truth.get(username) == dict(vote.answers):
                linked.setdefault(username, entry["code"])

    sample = [[u, linked[u]] for u in sorted(linked)][:5]
    return len(linked), sample


# -- the suite -----------------------------------------------------------------------


def run_attack_suite(workdir: Path | str, scenarios: Optional[list[Scenario]] = None) -> tuple[list[DetectionReport], list[str]]:
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    scenarios = scenarios if scenarios is not None else battery()

    reports: list[DetectionReport] = []
    failures: list[str] = []
    codes_union: set[str] = set()
    for scenario in scenarios:
        _, detection = run_ballot(scenario, work / scenario.name)
        reports.append(detection)
        codes_union.update(detection.evidence.get("error_codes_seen", []))
        marker = "ok " if detection.observed == detection.expected else "FAIL"
        print(
            f"[{marker}] {scenario.name}: expected {scenario.expected}, "
            f"observed {detection.observed} ({detection.duration_seconds:.1f}s)"
        )
        if detection.observed != detection.expected:
            failures.append(
                f"{scenario.name}: observed {detection.observed}, expected {scenario.expected}"
            )
        if len(scenario.cheating_parties()) <= 1 and detection.observed == "privacy-broken":
            failures.append(f"{scenario.name}: a single cheater must never break privacy")

    missing = EXPECTED_ERROR_CODES - codes_union
    if missing:
        failures.append(f"error branches never exercised: {sorted(missing)}")

    with (work / "detections.jsonl").open("w", encoding="utf-8") as fh:
        for detection in reports:
            fh.write(json.dumps(detection.to_dict(), sort_keys=True) + "\n")
    with (work / "summary.tsv").open("w", encoding="utf-8") as fh:
        fh.write("scenario\texpected\tobserved\tmatch\tduration_seconds\n")
        for detection in reports:
            fh.write(
                f"{detection.scenario}\t{detection.expected}\t{detection.observed}\t"
                f"{'yes' if detection.observed == detection.expected else 'NO'}\t"
                f"{detection.duration_seconds:.2f}\n"
            )

    from .report import render_suite_figure  # matplotlib only in the reporting path

    render_suite_figure([r.to_dict() for r in reports], work / "suite.png")
    return reports, failures


# -- command line --------------------------------------------------------------------


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="ballot-sim", description="end-to-end ballot simulations")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario")
    p.add_argument("scenario", help="a battery scenario name, or a path to a scenario JSON file")
    p.add_argument("--workdir", help="directory for state and artifacts (default: a fresh temp dir)")

    p = sub.add_parser("suite", help="run the whole battery")
    p.add_argument("--workdir", help="directory for state and artifacts (default: a fresh temp dir)")

    sub.add_parser("list", help="list battery scenarios")

    args = parser.parse_args(argv)

    if args.command == "list":
        for scenario in battery():
            adversaries = ", ".join(scenario.adversaries) or "none"
            print(f"{scenario.name:28s} expected={scenario.expected:14s} adversaries: {adversaries}")
        return 0

    workdir = Path(args.workdir) if args.workdir else Path(tempfile.mkdtemp(prefix="ballot-sim-"))
    if args.command == "run":
        if Path(args.scenario).exists():
            scenario = Scenario.from_dict(
                json.loads(Path(args.scenario).read_text(encoding="utf-8"))
            )
        else:
            try:
                scenario = scenario_by_name(args.scenario)
            except KeyError as exc:
                print(exc.args[0], file=sys.stderr)
                return 2
        _, detection = run_ballot(scenario, workdir / scenario.name)
        print(json.dumps(detection.to_dict(), indent=1, sort_keys=True))
        print(f"artifacts in {workdir / scenario.name}", file=sys.stderr)
        return 0 if detection.observed == detection.expected else 1

    reports, failures = run_attack_suite(workdir)
    print(f"artifacts in {workdir}")
    if failures:
        for failure in failures:
            print(f"suite failure: {failure}", file=sys.stderr)
        return 1
    print(f"all {len(reports)} scenarios matched their expected outcomes")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
