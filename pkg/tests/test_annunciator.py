"""Messages, delivery policies and sinks."""
import io
import logging
import sys

import pytest

from mmfusion import annunciator as an
from mmfusion.annunciator import Announcement, Detection, FixedInterval, Once, TooClose

import streams


def _det(label="car", t=0.0, dist=None, col=1):
    return Detection(label, 0.9, (0, 0, 1, 1), (0, col), dist, timestamp=t)


# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------

def test_message_examples():
    assert an.format_message(_det("car", dist=2300, col=1)) == "car ahead at 2300 millimeters"
    assert an.format_message(_det("person", dist=None, col=0)) == "person left, distance unknown"
    assert an.format_message(_det("bus", dist=850, col=2)) == "bus right at 850 millimeters"


def test_message_rounds_and_truncates():
    assert an.format_message(_det(dist=899.6)) == "car ahead at 900 millimeters"
    long = an.format_message(_det("x" * 300, dist=1))
    assert len(long) == an.MAX_MESSAGE


def test_direction_on_wider_grid():
    assert [an.direction((0, c), 6) for c in range(6)] == ["left"] * 2 + ["ahead"] * 2 + ["right"] * 2


def test_detection_json():
    d = Detection("car", 0.98765432, (1.23456, 2, 3, 4), (1, 2), 899.6, image="a.pgm")
    assert d.to_json() == {"image": "a.pgm", "class": "car", "score": 0.987654,
                           "box": [1.235, 2, 3, 4], "grid_cell": [1, 2], "distance_mm": 900}
    assert _det().to_json()["distance_mm"] == "unknown"


def test_announcement_validation():
    with pytest.raises(ValueError):
        Announcement(0.0, "")
    with pytest.raises(ValueError):
        Announcement(0.0, "hi", "loud")


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

def test_once_example():
    out = an.schedule(Once(), [_det(t=0), _det(t=1), _det(t=2)])
    assert [a.timestamp for a in out] == [0]


def test_once_resets_after_absence():
    # gaps 4, 4 keep the car present; the 5.5 s gap ends the presence interval
    out = an.schedule(Once(5), [_det(t=0), _det(t=4), _det(t=8), _det(t=13.5), _det("sign", t=15)])
    assert [(a.timestamp, a.text.split()[0]) for a in out] == [(0, "car"), (13.5, "car"), (15, "sign")]


def test_too_close_example():
    out = an.schedule(TooClose(1000), [_det(t=0, dist=1500), _det(t=1, dist=800)])
    assert len(out) == 1
    assert out[0].timestamp == 1 and out[0].urgency == "urgent"
    assert out[0].text == "car ahead at 800 millimeters"


def test_too_close_rate_limit_per_class():
    evs = [_det(t=0, dist=500), _det(t=0.5, dist=400), _det("sign", t=0.6, dist=300), _det(t=1.0, dist=600)]
    assert [a.timestamp for a in an.schedule(TooClose(1000), evs)] == [0, 0.6, 1.0]


def test_fixed_interval_example():
    out = an.schedule(FixedInterval(5), [_det(t=t) for t in (0, 2, 4, 6)])
    assert [a.timestamp for a in out] == [0, 6]


def test_urgency_matches_threshold():
    out = an.schedule(FixedInterval(1), [_det(t=0, dist=999), _det(t=1, dist=1000), _det(t=2)],
                      too_close_mm=1000)
    assert [a.urgency for a in out] == ["urgent", "normal", "normal"]


def test_non_monotone_timestamps():
    with pytest.raises(ValueError):
        an.schedule(Once(), [_det(t=2), _det(t=1)])


@pytest.mark.parametrize("spec,expect", [("interval:5", FixedInterval(5)), ("once", Once()),
                                         ("once:3", Once(3)), ("tooclose", TooClose()),
                                         ("TooClose:500", TooClose(500))])
def test_parse_policy(spec, expect):
    assert an.parse_policy(spec) == expect


@pytest.mark.parametrize("spec", ["interval", "interval:0", "tooclose:10", "once:-1", "loud", "interval:x"])
def test_parse_policy_errors(spec):
    with pytest.raises(ValueError):
        an.parse_policy(spec)


def test_scripted_stream_shape():
    evs = streams.scripted_stream()
    assert len(evs) == 60
    ts = [d.timestamp for d in evs]
    assert ts == sorted(ts) and len(set(ts)) == 60
    assert {d.label for d in evs} == set(streams.CLASSES)
    assert any(d.distance_mm is None for d in evs)
    assert any(d.distance_mm is not None and d.distance_mm < 1000 for d in evs)


def test_policy_invariants_on_scripted_stream():
    evs = streams.scripted_stream()
    once = streams.announced_indices(evs, an.schedule(Once(10), evs))
    assert streams.check_once(evs, once, 10)
    close = streams.announced_indices(evs, an.schedule(TooClose(1000), evs))
    assert close and streams.check_too_close(evs, close, 1000)
    for period in (2, 5):
        iv = streams.announced_indices(evs, an.schedule(FixedInterval(period), evs))
        assert streams.check_interval(evs, iv, period) and streams.spaced(evs, iv, period)


def test_checkers_reject_wrong_schedules():
    # guard against vacuous checkers
    evs = streams.scripted_stream()
    assert not streams.check_once(evs, list(range(60)), 10)
    assert not streams.check_too_close(evs, [], 1000)
    assert not streams.check_interval(evs, list(range(60)), 5)


def test_schedule_deterministic():
    evs = streams.scripted_stream()
    assert an.schedule(Once(), evs) == an.schedule(Once(), evs)


# ---------------------------------------------------------------------------
# Sinks
# ---------------------------------------------------------------------------

def test_stdout_sink():
    buf = io.StringIO()
    an.StdoutSink(buf).write(Announcement(0, "car ahead at 2300 millimeters"))
    assert buf.getvalue() == "car ahead at 2300 millimeters\n"


def test_file_sink_appends(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("earlier\n")
    sink = an.FileSink(p)
    sink.write(Announcement(0, "one"))
    sink.write(Announcement(1, "two"))
    assert p.read_text() == "earlier\none\ntwo\n"


def test_command_sink_argv():
    assert an.CommandSink("say -v x").argv("hi there") == ["say", "-v", "x", "hi there"]
    assert an.CommandSink("say '{text}' now").argv("hi") == ["say", "hi", "now"]


def test_command_sink_receives_text(tmp_path):
    out = tmp_path / "o.txt"
    cmd = f"{sys.executable} -c 'import sys; open(sys.argv[1], \"w\").write(sys.argv[2])' {out}"
    assert an.emit(Announcement(0, "sign left at 40 millimeters"), [an.CommandSink(cmd)])
    assert out.read_text() == "sign left at 40 millimeters"


def test_failing_command_logs_and_continues(tmp_path, caplog):
    p = tmp_path / "a.txt"
    fail = an.CommandSink(f"{sys.executable} -c 'raise SystemExit(3)'")
    with caplog.at_level(logging.WARNING, logger="mmfusion.annunciator"):
        ok = an.emit(Announcement(0, "car"), [fail, an.FileSink(p)])
    assert ok is False
    assert p.read_text() == "car\n"
    assert any("status 3" in r.getMessage() for r in caplog.records)


def test_missing_command_is_non_fatal(caplog):
    with caplog.at_level(logging.WARNING):
        assert an.emit(Announcement(0, "car"), [an.CommandSink("/nonexistent/speak")]) is False
    assert caplog.records
