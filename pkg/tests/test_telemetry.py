from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from salience_lab.telemetry import (
    GameSpec,
    LatentPlayerState,
    TelemetryError,
    env_stamp,
    ingest_csv,
    read_latent_csv,
    simulate_player,
    simulate_population,
    write_csv,
    write_latent_csv,
)


def _civil_from_days(z: int) -> tuple[int, int, int]:
    # Independent proleptic-Gregorian oracle (era decomposition).
    z += 719468
    era = (z if z >= 0 else z - 146096) // 146097
    doe = z - era * 146097
    yoe = (doe - doe // 1460 + doe // 36524 - doe // 146096) // 365
    y = yoe + era * 400
    doy = doe - (365 * yoe + yoe // 4 - yoe // 100)
    mp = (5 * doy + 2) // 153
    d = doy - (153 * mp + 2) // 5 + 1
    m = mp + 3 if mp < 10 else mp - 9
    return y + (1 if m <= 2 else 0), m, d


_CUM_DAYS = [0, 31, 59, 90, 120, 151, 181, 212, 243, 273, 304, 334]


def _oracle_stamp(minute: int) -> tuple[int, int, int]:
    days, rem = divmod(minute, 1440)
    hour = rem // 60
    weekday = (days + 3) % 7  # 1970-01-01 was a Thursday
    y, m, d = _civil_from_days(days)
    leap = (y % 4 == 0 and y % 100 != 0) or y % 400 == 0
    doy = _CUM_DAYS[m - 1] + d + (1 if leap and m > 2 else 0)
    return hour, weekday, doy


def test_env_stamp_epoch_origin():
    stamp = env_stamp(0, "eu")
    assert stamp.hour_of_day == 0
    assert stamp.day_of_week == 3  # Thursday
    assert stamp.day_of_year == 1


def test_env_stamp_one_day_later():
    stamp = env_stamp(1440, "eu")
    assert stamp.day_of_year == 2
    assert stamp.hour_of_day == 0


def test_env_stamp_one_hour_later():
    stamp = env_stamp(60, "eu")
    assert stamp.hour_of_day == 1
    assert stamp.day_of_year == 1


@given(st.integers(min_value=0, max_value=10**9))
@settings(max_examples=300, deadline=None)
def test_env_stamp_matches_civil_calendar_oracle(minute):
    stamp = env_stamp(minute, "na")
    hour, weekday, doy = _oracle_stamp(minute)
    assert stamp.hour_of_day == hour
    assert stamp.day_of_week == weekday
    assert stamp.day_of_year == doy
    assert 0 <= stamp.hour_of_day <= 23
    assert 0 <= stamp.day_of_week <= 6
    assert 1 <= stamp.day_of_year <= 366


def test_env_stamp_rejects_negative():
    with pytest.raises(TelemetryError):
        env_stamp(-1, "eu")


def _spec(**kw) -> GameSpec:
    base = dict(game_id="g", base_quality=0.7, quality_drift=0.0, noise_sd=0.1)
    base.update(kw)
    return GameSpec(**base)


def _init(**kw) -> LatentPlayerState:
    base = dict(salience=0.6, learning_rate=0.3, env_susceptibility=0.4,
                churn_threshold=0.2, rng_seed=11)
    base.update(kw)
    return LatentPlayerState(**base)


def test_simulate_deterministic_for_seed():
    a = simulate_player(_spec(), _init(), 50_000, 20)
    b = simulate_player(_spec(), _init(), 50_000, 20)
    assert a == b


def test_simulate_zero_reward_at_threshold_ends_immediately():
    trace = simulate_player(
        _spec(base_quality=0.0, noise_sd=0.0),
        _init(salience=0.2, churn_threshold=0.2),
        0,
        10,
    )
    assert trace.total_sessions == 1
    assert not trace.completed


def test_simulate_invariants_and_latent_present(small_population):
    for trace in small_population:
        trace.validate()
        assert trace.latent_trace is not None
        assert len(trace.latent_trace) == trace.total_sessions
        assert trace.sessions[0].delta_session == 0.0
        for salience, reward in trace.latent_trace:
            assert salience >= 0.0
            assert 0.0 <= reward <= 1.0


def test_simulate_completion_cap():
    trace = simulate_player(_spec(completion_sessions=5, base_quality=0.95),
                            _init(salience=0.9), 0, 365)
    assert trace.total_sessions <= 5
    if trace.total_sessions == 5:
        assert trace.completed


def test_quality_drives_session_counts():
    high = [
        simulate_player(_spec(base_quality=0.9), _init(rng_seed=s), 0, 7, user_id=f"h{s}")
        for s in range(500)
    ]
    low = [
        simulate_player(_spec(base_quality=0.2), _init(rng_seed=s), 0, 7, user_id=f"l{s}")
        for s in range(500)
    ]
    assert np.mean([t.total_sessions for t in high]) > np.mean(
        [t.total_sessions for t in low]
    )


def _spearman(x, y):
    rx = np.argsort(np.argsort(x)).astype(float)
    ry = np.argsort(np.argsort(y)).astype(float)
    return float(np.corrcoef(rx, ry)[0, 1])


def test_monotone_engagement_across_quality():
    qualities = np.linspace(0.1, 0.95, 240)
    counts = []
    for i, q in enumerate(qualities):
        trace = simulate_player(
            _spec(base_quality=float(q), completion_sessions=40),
            _init(rng_seed=1000 + i),
            0,
            14,
            user_id=f"u{i}",
        )
        counts.append(trace.total_sessions)
    assert _spearman(qualities, counts) > 0.3


def test_validation_errors_name_fields():
    with pytest.raises(TelemetryError, match="base_quality"):
        simulate_player(_spec(base_quality=1.5), _init(), 0, 10)
    with pytest.raises(TelemetryError, match="learning_rate"):
        simulate_player(_spec(), _init(learning_rate=0.0), 0, 10)
    with pytest.raises(TelemetryError, match="horizon"):
        simulate_player(_spec(), _init(), 0, 0)


def test_csv_round_trip(tmp_path, small_population):
    path = tmp_path / "telemetry.csv"
    write_csv(small_population, path)
    recovered = ingest_csv(path)
    by_user = {t.user_id: t for t in recovered}
    assert len(recovered) == len(small_population)
    for original in small_population:
        assert by_user[original.user_id].sessions == original.sessions
        assert by_user[original.user_id].latent_trace is None


def test_latent_sidecar_round_trip(tmp_path, small_population):
    path = tmp_path / "telemetry.latent.csv"
    write_latent_csv(small_population, path)
    latent = read_latent_csv(path)
    sample = small_population[0]
    assert latent[sample.user_id] == sample.latent_trace


def test_ingest_gap_is_end_to_start(tmp_path):
    path = tmp_path / "two.csv"
    path.write_text(
        "user_id,game_id,start_utc,session_time,play_time,delta_session,"
        "activity_index,activity_diversity,region\n"
        "u1,g,0,30.0,20.0,0.0,3,2,eu\n"
        "u1,g,100,10.0,5.0,999.0,3,1,eu\n",
        encoding="utf-8",
    )
    (trace,) = ingest_csv(path)
    assert trace.sessions[1].delta_session == 70.0  # 100 - (0 + 30)


def test_ingest_empty_file_with_header(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text(
        "user_id,game_id,start_utc,session_time,play_time,delta_session,"
        "activity_index,activity_diversity,region\n",
        encoding="utf-8",
    )
    assert ingest_csv(path) == []


def test_ingest_rejects_play_over_session(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text(
        "user_id,game_id,start_utc,session_time,play_time,delta_session,"
        "activity_index,activity_diversity,region\n"
        "u1,g,0,10.0,20.0,0.0,3,2,eu\n",
        encoding="utf-8",
    )
    with pytest.raises(TelemetryError, match="line 2"):
        ingest_csv(path)


def test_ingest_rejects_duplicate_timestamps(tmp_path):
    path = tmp_path / "dup.csv"
    path.write_text(
        "user_id,game_id,start_utc,session_time,play_time,delta_session,"
        "activity_index,activity_diversity,region\n"
        "u1,g,50,10.0,5.0,0.0,3,2,eu\n"
        "u1,g,50,10.0,5.0,0.0,3,2,eu\n",
        encoding="utf-8",
    )
    with pytest.raises(TelemetryError, match="u1"):
        ingest_csv(path)


def test_ingest_rejects_malformed_row(tmp_path):
    path = tmp_path / "malformed.csv"
    path.write_text(
        "user_id,game_id,start_utc,session_time,play_time,delta_session,"
        "activity_index,activity_diversity,region\n"
        "u1,g,not_a_number,10.0,5.0,0.0,3,2,eu\n",
        encoding="utf-8",
    )
    with pytest.raises(TelemetryError, match="line 2"):
        ingest_csv(path)


def test_population_deterministic():
    games = [GameSpec("a", 0.8, completion_sessions=10), GameSpec("b", 0.4)]
    one = simulate_population(games, 5, 0, 10, seed=3)
    two = simulate_population(games, 5, 0, 10, seed=3)
    assert one == two
    other = simulate_population(games, 5, 0, 10, seed=4)
    assert one != other


def test_population_worker_pool_matches_sequential():
    games = [GameSpec("a", 0.7, completion_sessions=8), GameSpec("b", 0.3)]
    sequential = simulate_population(games, 6, 0, 7, seed=5, workers=1)
    pooled = simulate_population(games, 6, 0, 7, seed=5, workers=4)
    assert sequential == pooled
