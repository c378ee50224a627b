from stfusion.core.entities import Metrics
from stfusion.utils.run_logger import RunLogger


def metrics(f1=0.5):
    return Metrics(pre=0.5, rec=0.5, f1=f1, iou=0.25, oa=0.9, kc=0.4)


def test_history_records_are_indexed(tmp_path):
    run = RunLogger(tmp_path / "run", data={"seed": 3})
    run.add({"event": "step", "loss": 1.5})
    run.add({"event": "step", "loss": 1.2})
    records = run.read()
    assert [r["index"] for r in records] == [0, 1]
    assert records[1]["seed"] == 3 and records[1]["loss"] == 1.2


def test_resume_continues_the_index(tmp_path):
    RunLogger(tmp_path).add({"event": "step"})
    resumed = RunLogger(tmp_path, resume=True)
    resumed.add({"event": "step"})
    assert [r["index"] for r in resumed.read()] == [0, 1]
    fresh = RunLogger(tmp_path)
    assert fresh.read() == []


def test_metrics_csv(tmp_path):
    run = RunLogger(tmp_path)
    run.add_metrics(200, metrics(0.5))
    run.add_metrics(400, metrics(0.75))
    lines = run.metrics_path.read_text().splitlines()
    assert lines[0] == "iteration,pre,rec,f1,iou,oa,kc"
    assert lines[2].startswith("400,50.00,50.00,75.00")
    assert run.read()[0]["event"] == "eval"
