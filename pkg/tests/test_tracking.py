import evomoe.tracking as tracking
from evomoe.tracking import Tracker


class _Logger:
    def __init__(self):
        self.scalars = []

    def report_scalar(self, title, series, value, iteration):
        self.scalars.append((title, series, value, iteration))


class _Task:
    """In-memory stand-in for clearml.Task with the calls Tracker makes."""

    running = None
    opened = []

    def __init__(self, name):
        self.id = name
        self.logger = _Logger()
        self.closed = False

    @classmethod
    def current_task(cls):
        return cls.running

    @classmethod
    def init(cls, project_name, task_name, reuse_last_task_id=False):
        task = cls(task_name)
        cls.opened.append(task)
        return task

    def connect(self, mapping, name=None):
        self.connected = mapping

    def get_logger(self):
        return self.logger

    def close(self):
        self.closed = True


def _patch(monkeypatch, running=None):
    monkeypatch.setattr(_Task, "running", running)
    monkeypatch.setattr(_Task, "opened", [])
    monkeypatch.setattr(tracking, "Task", _Task)


def test_disabled_tracker_touches_nothing(monkeypatch):
    _patch(monkeypatch)
    tracker = Tracker("off", enabled=False)
    tracker.report({"iter": 1, "phase": "dense", "task_loss": 2.0})
    tracker.report_scalar("valid ppl", "evomoe", 12.0)
    tracker.close()
    assert _Task.opened == []


def test_metric_lines_become_scalars(monkeypatch, make_config):
    _patch(monkeypatch)
    tracker = Tracker("train_evomoe_seed0", enabled=True, config=make_config())
    task = _Task.opened[0]
    assert task.connected["model"]["n_experts"] == 4
    tracker.report({"iter": 50, "phase": "dense", "task_loss": 2.5, "balance_loss": None, "temperature": 1.2})
    tracker.report_scalar("mean load CV", "alpha=0.1", 0.3, iteration=2)
    assert task.logger.scalars == [
        ("task_loss", "dense", 2.5, 50),
        ("temperature", "dense", 1.2, 50),
        ("mean load CV", "alpha=0.1", 0.3, 2),
    ]
    tracker.close()
    assert task.closed


def test_nested_tracker_reuses_the_running_task(monkeypatch):
    """Training inside an experiment driver reports into the driver's task and leaves it open."""
    experiment = _Task("Balance_Loss_Ablation")
    _patch(monkeypatch, running=experiment)
    inner = Tracker("train_evomoe_seed1", enabled=True)
    inner.report_scalar("valid ppl", "evomoe", 9.5, iteration=1)
    inner.close()
    assert _Task.opened == [], "no second task is opened"
    assert experiment.logger.scalars == [("valid ppl", "evomoe", 9.5, 1)]
    assert not experiment.closed
