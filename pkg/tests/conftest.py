"""Shared fixtures: the analyzed item and the authored mock-replay corpus.

The standard corpus drives a 1-output, 3-scenario, 2-guide-word run whose
cartesian product yields 6 hazardous events with severities S2, S0, S1, S2,
S0, S0 in table order.
"""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from harakit.llm import LlmClient, MockBackend
from harakit.model import ItemDefinition
from harakit.pipeline import PipelineConfig

STANDARD_SEVERITIES = ("S2", "S0", "S1", "S2", "S0", "S0")

CAEM_ITEM_DOC = {
    "id": "ITEM-CAEM",
    "function_name": "CAEM",
    "description": (
        "CAEM steers to avoid imminent frontal collision. The function monitors "
        "the area ahead of the host vehicle and, when a frontal collision can no "
        "longer be avoided by braking alone, requests an evasive lateral motion "
        "to steer around the obstacle. The maneuver is bounded to the host lane "
        "and its immediate neighborhood and ends when the obstacle is cleared."
    ),
    "function_outputs": ["lateral motion request"],
    "odd_notes": (
        "Paved public roads, host speed between 30 and 130 km/h, daylight and "
        "darkness, no off-road operation."
    ),
    "driver_interaction": (
        "The driver can override the maneuver at any time by steering or braking."
    ),
}


def structured(
    result: str,
    background: str = "Relevant context for the reviewer.",
    assumptions: str = "Stated working assumptions.",
    reasoning: str = "Step by step reasoning toward the result.",
) -> str:
    return (
        f"## background\n{background}\n\n"
        f"## assumptions\n{assumptions}\n\n"
        f"## reasoning\n{reasoning}\n\n"
        f"## result\n{result}\n"
    )


def write_fixture(directory: Path, name: str, content: str, finish_reason: str = "stop") -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{name}.json").write_text(
        json.dumps({"content": content, "finish_reason": finish_reason}),
        encoding="utf-8",
    )


SCENARIOS_RESULT = """\
1. Core: Pedestrian steps onto an urban crossing ahead of the host vehicle.
Details: The host vehicle travels at 50 km/h on a straight two-lane urban street. A pedestrian steps onto a zebra crossing 25 m ahead while an oncoming car approaches in the opposite lane at 45 km/h.
Factors: road=urban two-lane street; objects=pedestrian on crossing, oncoming car; environment=daylight, dry surface
2. Core: Highway driving with a truck occupying the adjacent lane.
Details: The host vehicle travels at 110 km/h in the middle lane of a three-lane highway. A truck drives in the right lane with its cab beside the host rear axle at 90 km/h; traffic ahead slows abruptly.
Factors: road=three-lane highway; objects=truck in adjacent lane, slowing queue ahead; environment=clear night, dry surface
3. Core: Narrow unlit rural road with a cyclist ahead and an oncoming van.
Details: The host vehicle travels at 70 km/h on a narrow unlit rural road. A cyclist with a rear light rides 40 m ahead near the right edge; an oncoming van approaches at 80 km/h in the opposite direction.
Factors: road=narrow rural road; objects=cyclist ahead, oncoming van; environment=darkness, light rain
"""

MALFUNCTION_TEXTS = {
    "MF-0001": (
        "The function does not issue the lateral motion request although an "
        "evasive maneuver is needed to avoid a frontal collision."
    ),
    "MF-0002": (
        "The function issues an unintended lateral motion request although no "
        "collision risk is present, causing unintended lateral motion of the vehicle."
    ),
}

CONSEQUENCE_TEXTS = {
    "HE-0001": (
        "The host vehicle does not evade and strikes the pedestrian on the "
        "crossing at about 50 km/h."
    ),
    "HE-0002": (
        "The host vehicle veers toward the opposite lane; the driver overrides "
        "within the lane and no contact with the pedestrian or the oncoming car occurs."
    ),
    "HE-0003": (
        "The host vehicle stays in its lane and rear-ends the slowing queue "
        "ahead at moderate remaining speed after braking."
    ),
    "HE-0004": (
        "The host vehicle moves into the right lane without need and sideswipes "
        "the truck driving beside it at 110 km/h."
    ),
    "HE-0005": (
        "The host vehicle brakes in its lane behind the cyclist and stops "
        "without contact; the oncoming van passes unaffected."
    ),
    "HE-0006": (
        "The host vehicle drifts slightly within its lane and the driver "
        "corrects immediately; no road user is endangered."
    ),
}

SEVERITY_RATIONALES = {
    "S0": "No contact occurs and no person is harmed in the traced motion.",
    "S1": (
        "The remaining closing speed at impact is low after braking, so light "
        "to moderate injuries are expected for the occupants."
    ),
    "S2": (
        "The estimated impact speed against an exposed road user leads to "
        "severe injuries with probable survival."
    ),
    "S3": (
        "The estimated impact speed makes life-threatening injuries with "
        "uncertain survival likely."
    ),
}

GOAL_TEXTS = {
    ("HE-0001", "avoid_failure_mode"): (
        "CAEM shall issue the lateral motion request when a frontal collision "
        "with a pedestrian cannot be avoided by braking alone."
    ),
    ("HE-0001", "restrict_exposure"): (
        "CAEM shall not be active on road sections where unprotected road users "
        "are permitted to cross the carriageway."
    ),
    ("HE-0001", "improve_controllability"): (
        "CAEM shall leave the driver enough time and steering margin to perform "
        "the evasive maneuver manually."
    ),
    ("HE-0001", "reduce_severity"): (
        "CAEM shall limit the host vehicle speed during the approach to a marked "
        "crossing so that a potential impact remains survivable."
    ),
    ("HE-0003", "avoid_failure_mode"): (
        "CAEM shall perform the requested evasive motion whenever the braking "
        "distance to the obstacle ahead is insufficient."
    ),
    ("HE-0003", "restrict_exposure"): (
        "CAEM operation shall exclude dense highway traffic in which every "
        "neighboring lane is occupied."
    ),
    ("HE-0003", "improve_controllability"): (
        "CAEM shall signal its intent early enough for surrounding drivers to "
        "adapt their speed and position."
    ),
    ("HE-0003", "reduce_severity"): (
        "CAEM shall decelerate to minimize impact energy when the evasive path "
        "is unavailable."
    ),
    ("HE-0004", "avoid_failure_mode"): (
        "CAEM shall not issue a lateral motion request unless a frontal "
        "collision is imminent."
    ),
    ("HE-0004", "restrict_exposure"): (
        "CAEM shall remain inactive while another vehicle occupies the "
        "evasive corridor beside the host."
    ),
    ("HE-0004", "improve_controllability"): (
        "CAEM shall keep lateral acceleration low enough for the driver to "
        "countersteer at any time."
    ),
    ("HE-0004", "reduce_severity"): (
        "CAEM shall bound the lateral displacement of an evasive maneuver so "
        "that the host stays clear of occupied neighboring lanes."
    ),
}


def build_standard_fixtures(
    directory: Path, severities: tuple[str, ...] = STANDARD_SEVERITIES
) -> Path:
    """Author the full mock corpus for the standard 6-row run."""
    write_fixture(directory, "scenarios.default", structured(SCENARIOS_RESULT))
    for mf_id, text in MALFUNCTION_TEXTS.items():
        write_fixture(directory, f"malfunction.{mf_id}", structured(text))
    for he_id, text in CONSEQUENCE_TEXTS.items():
        write_fixture(
            directory,
            f"hazardous_event.{he_id}",
            structured(
                text,
                assumptions="Agents move as described in the scenario details.",
            ),
        )
    for index, severity in enumerate(severities, start=1):
        he_id = f"HE-{index:04d}"
        write_fixture(
            directory,
            f"severity.{he_id}",
            structured(
                f"Severity: {severity}\nRationale: {SEVERITY_RATIONALES[severity]}",
                assumptions=(
                    "Closing speed estimated from the stated speeds; impact speed "
                    "taken after 1.0 s of full braking."
                ),
            ),
        )
    for (he_id, strategy), text in GOAL_TEXTS.items():
        write_fixture(directory, f"goal.{he_id}.{strategy}", structured(text))
    return directory


@pytest.fixture
def caem_item() -> ItemDefinition:
    from harakit.model import validate_item_definition

    return validate_item_definition(CAEM_ITEM_DOC)


@pytest.fixture
def fixture_dir(tmp_path: Path) -> Path:
    return build_standard_fixtures(tmp_path / "fixtures")


@pytest.fixture
def mock_client(fixture_dir: Path) -> LlmClient:
    return LlmClient(MockBackend(fixture_dir), retries=3, backoff=(0.0, 0.0))


def std_config(fixture_dir: Path, **overrides) -> PipelineConfig:
    values = {
        "backend": "mock",
        "fixtures": fixture_dir,
        "scenarios_target_count": 3,
        "diverse_selection_count": 3,
    }
    values.update(overrides)
    return PipelineConfig(**values)


@pytest.fixture
def std_cfg(fixture_dir: Path) -> PipelineConfig:
    return std_config(fixture_dir)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion after every run."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            if getattr(report, "when", "call") != "call":
                continue
            if "test_acceptance.py" not in str(getattr(report, "nodeid", "")):
                continue
            name = report.nodeid.split("::")[-1]
            lines.append((name, "PASS" if outcome == "passed" else "FAIL"))
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name, verdict in sorted(lines):
            terminalreporter.write_line(f"ACCEPTANCE {verdict}: {name}")
