from __future__ import annotations

import numpy as np
import pytest

#: Verdict lines recorded by the acceptance suite; echoed after the run so
#: they stay visible without -s.
ACCEPTANCE_LINES: list[str] = []


def pytest_sessionfinish(session, exitstatus):
    if ACCEPTANCE_LINES:
        print("\n\nacceptance criteria:")
        for line in ACCEPTANCE_LINES:
            print(f"  {line}")

from salience_lab.telemetry import (
    EnvStamp,
    GameSpec,
    LatentPlayerState,
    PlayerTrace,
    SessionRecord,
    env_stamp,
    simulate_player,
    simulate_population,
)


def make_trace(
    user_id: str,
    game_id: str,
    starts: list[int],
    session_times: list[float],
    play_times: list[float] | None = None,
    completed: bool = False,
    region: str = "eu",
) -> PlayerTrace:
    """Hand-built trace with deltas derived end-to-start from the timestamps."""
    play_times = play_times or [s * 0.8 for s in session_times]
    sessions = []
    prev_end = None
    for i, (start, st, pt) in enumerate(zip(starts, session_times, play_times)):
        delta = 0.0 if prev_end is None else float(start - prev_end)
        sessions.append(
            SessionRecord(
                user_id=user_id,
                game_id=game_id,
                start_utc=start,
                session_time=st,
                play_time=pt,
                delta_session=delta,
                activity_index=5 + i,
                activity_diversity=2,
                env=env_stamp(start, region),
            )
        )
        prev_end = start + st
    return PlayerTrace(
        user_id=user_id,
        game_id=game_id,
        sessions=sessions,
        total_play_time=sum(play_times),
        total_sessions=len(sessions),
        completed=completed,
        latent_trace=None,
    )


def random_trace(rng: np.random.Generator, user_id: str, game_id: str = "g") -> PlayerTrace:
    """Random but invariant-respecting trace for oracle sweeps."""
    n = int(rng.integers(1, 12))
    starts = []
    session_times = []
    play_times = []
    t = int(rng.integers(0, 10_000))
    for _ in range(n):
        starts.append(t)
        st = float(rng.uniform(1.0, 200.0))
        session_times.append(st)
        play_times.append(st * float(rng.uniform(0.0, 1.0)))
        t += int(np.ceil(st + rng.uniform(1.0, 5000.0)))
    return make_trace(
        user_id,
        game_id,
        starts,
        session_times,
        play_times,
        completed=bool(rng.integers(0, 2)),
    )


@pytest.fixture(scope="session")
def small_population() -> list[PlayerTrace]:
    games = [
        GameSpec("alpha", base_quality=0.85, quality_drift=-0.004, completion_sessions=30),
        GameSpec("beta", base_quality=0.55, quality_drift=-0.004, completion_sessions=35),
        GameSpec("gamma", base_quality=0.4, quality_drift=-0.003, noise_sd=0.12),
    ]
    return simulate_population(games, players_per_game=20, calendar_start=10_000,
                               horizon_days=30, seed=7)
